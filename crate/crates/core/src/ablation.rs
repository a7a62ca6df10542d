use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};

/// Component switches for one training configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub name: String,
    pub use_local: bool,
    pub use_domain_disc: bool,
    pub use_task_disc: bool,
    pub use_disen: bool,
    pub use_buffer: bool,
    pub use_prompt_stage: bool,
    /// `false` evaluates the freshly initialized model without any training.
    pub train: bool,
}

impl Ablation {
    pub fn full() -> Self {
        Self {
            name: "a6".into(),
            use_local: true,
            use_domain_disc: true,
            use_task_disc: true,
            use_disen: true,
            use_buffer: true,
            use_prompt_stage: false,
            train: true,
        }
    }

    pub fn uses_adversary(&self) -> bool {
        self.use_domain_disc || self.use_task_disc
    }

    /// Rows of the cumulative and component ablation tables, in report order.
    pub const TABLE: [&'static str; 9] = ["a1", "a2", "a3", "a4", "a5", "a6", "b", "c1", "c2"];

    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            name: name.to_string(),
            use_local: false,
            use_domain_disc: false,
            use_task_disc: false,
            use_disen: false,
            ..Self::full()
        };
        let full = Self {
            name: name.to_string(),
            ..Self::full()
        };
        Ok(match name {
            "a1" => base,
            "a2" => Self { use_local: true, ..base },
            "a3" => Self {
                use_domain_disc: true,
                use_task_disc: true,
                ..base
            },
            "a4" => Self {
                use_local: true,
                use_domain_disc: true,
                use_task_disc: true,
                ..base
            },
            "a5" => Self {
                use_local: true,
                use_disen: true,
                ..base
            },
            "a6" | "a" | "din" => full,
            "din++" => Self {
                use_prompt_stage: true,
                ..full
            },
            "b" => Self { use_buffer: false, ..full },
            "c1" => Self {
                use_domain_disc: false,
                ..full
            },
            "c2" => Self {
                use_task_disc: false,
                ..full
            },
            "frozen" => Self {
                use_local: false,
                use_domain_disc: false,
                use_task_disc: false,
                use_disen: false,
                use_buffer: false,
                use_prompt_stage: false,
                train: false,
                name: name.to_string(),
            },
            other => return Err(DinError::Config(format!("unknown ablation preset '{other}'"))),
        })
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl FromStr for Ablation {
    type Err = DinError;
    fn from_str(s: &str) -> Result<Self> {
        Self::preset(s.trim())
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_cumulative() {
        let a1 = Ablation::preset("a1").unwrap();
        assert!(!a1.use_local && !a1.uses_adversary() && !a1.use_disen && a1.use_buffer);
        let a3 = Ablation::preset("a3").unwrap();
        assert!(!a3.use_local && a3.use_domain_disc && a3.use_task_disc);
        let a6 = Ablation::preset("a6").unwrap();
        assert!(a6.use_local && a6.uses_adversary() && a6.use_disen && a6.use_buffer);
        assert!(!Ablation::preset("b").unwrap().use_buffer);
        assert!(!Ablation::preset("c1").unwrap().use_domain_disc);
        assert!(!Ablation::preset("c2").unwrap().use_task_disc);
        assert!(!Ablation::preset("frozen").unwrap().train);
        assert!(Ablation::preset("zz").is_err());
    }
}
