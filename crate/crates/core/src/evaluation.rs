//! Scoring trained snapshots on target-domain test data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{LabeledExample, SemanticTable, TaskStream};
use crate::error::{DinError, Result};
use crate::metrics::{self, CurvePoint, ScoreTable};
use crate::model::{argmax_class, DinModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    /// Every class of the stream.
    #[serde(rename = "all")]
    All,
    /// Classes of tasks up to the later of the snapshot and the evaluated task.
    #[serde(rename = "revealed")]
    Revealed,
}

impl FromStr for PoolMode {
    type Err = DinError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(PoolMode::All),
            "revealed" => Ok(PoolMode::Revealed),
            o => Err(DinError::Config(format!("unknown eval pool '{o}'"))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::All => "all",
            PoolMode::Revealed => "revealed",
        })
    }
}

/// Local net used for tasks the snapshot has not trained on yet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnseenPath {
    #[serde(rename = "latest_local")]
    LatestLocal,
    #[serde(rename = "global_only")]
    GlobalOnly,
}

impl FromStr for UnseenPath {
    type Err = DinError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "latest_local" => Ok(UnseenPath::LatestLocal),
            "global_only" => Ok(UnseenPath::GlobalOnly),
            o => Err(DinError::Config(format!("unknown unseen path '{o}'"))),
        }
    }
}

impl fmt::Display for UnseenPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnseenPath::LatestLocal => "latest_local",
            UnseenPath::GlobalOnly => "global_only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub pool: PoolMode,
    pub unseen_path: UnseenPath,
    pub gamma_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pool: PoolMode::All,
            unseen_path: UnseenPath::LatestLocal,
            gamma_points: 201,
        }
    }
}

/// Local net index used for examples of task `k` under snapshot `t`.
pub fn local_route(model: &DinModel, t: usize, k: usize, eval: &EvalConfig) -> Option<usize> {
    let latest = model.locals.len().checked_sub(1)?;
    if k <= t && k <= latest {
        Some(k)
    } else {
        match eval.unseen_path {
            UnseenPath::LatestLocal => Some(t.min(latest)),
            UnseenPath::GlobalOnly => None,
        }
    }
}

pub fn prediction_pool(stream: &TaskStream, t: usize, k: usize, eval: &EvalConfig) -> Vec<usize> {
    match eval.pool {
        PoolMode::All => stream.all_classes(),
        PoolMode::Revealed => stream.classes_up_to(t.max(k)),
    }
}

fn features(examples: &[LabeledExample]) -> Result<Tensor> {
    Tensor::from_rows(&examples.iter().map(|e| e.x.as_slice()).collect::<Vec<_>>())
}

/// Fraction of `examples` classified correctly.
pub fn accuracy(
    model: &DinModel,
    examples: &[LabeledExample],
    local: Option<usize>,
    pool: &[usize],
    semantic: &SemanticTable,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(DinError::UndefinedMetric {
            metric: "accuracy",
            reason: "no test examples".into(),
        });
    }
    let scores = model.class_scores(&features(examples)?, local, pool, semantic)?;
    let correct = examples
        .iter()
        .enumerate()
        .filter(|(i, e)| argmax_class(scores.row(*i), pool) == e.y)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Row `t` of the accuracy matrix: target-domain accuracy on every task.
pub fn accuracy_row(
    model: &DinModel,
    stream: &TaskStream,
    semantic: &SemanticTable,
    t: usize,
    eval: &EvalConfig,
) -> Result<Vec<f64>> {
    (0..stream.num_tasks())
        .map(|k| {
            let pool = prediction_pool(stream, t, k, eval);
            accuracy(model, stream.target_test(k), local_route(model, t, k, eval), &pool, semantic)
        })
        .collect()
}

/// Scores of every target-domain test example over `pool`, with classes of
/// tasks `0..=t` marked seen.
pub fn score_table(
    model: &DinModel,
    stream: &TaskStream,
    semantic: &SemanticTable,
    t: usize,
    pool: &[usize],
    eval: &EvalConfig,
) -> Result<ScoreTable> {
    let seen_classes = stream.classes_up_to(t);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for k in 0..stream.num_tasks() {
        let examples: Vec<LabeledExample> = stream
            .target_test(k)
            .iter()
            .filter(|e| pool.contains(&e.y))
            .cloned()
            .collect();
        if examples.is_empty() {
            continue;
        }
        let s = model.class_scores(&features(&examples)?, local_route(model, t, k, eval), pool, semantic)?;
        for (i, e) in examples.iter().enumerate() {
            scores.push(s.row(i).to_vec());
            labels.push(e.y);
        }
    }
    let seen = pool.iter().map(|c| seen_classes.contains(c)).collect();
    ScoreTable::new(pool.to_vec(), seen, scores, labels)
}

/// Macro seen/unseen accuracy and calibrated-stacking area of one table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotMetrics {
    pub msa: Option<f64>,
    pub mua: Option<f64>,
    pub suauc: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

impl ZeroShotMetrics {
    pub fn from_table(table: &ScoreTable, gamma_points: usize) -> Result<Self> {
        let seen = table.seen_classes();
        let unseen = table.unseen_classes();
        let macro_of = |subset: &[usize]| -> Result<Option<f64>> {
            if subset.is_empty() {
                return Ok(None);
            }
            Ok(Some(metrics::class_macro_accuracy(table, subset, 0.0)?.value))
        };
        let (suauc, curve) = if !seen.is_empty() && !unseen.is_empty() {
            let c = metrics::suauc(table, &metrics::default_gamma_grid(table, gamma_points))?;
            (Some(c.area), c.points)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            msa: macro_of(&seen)?,
            mua: macro_of(&unseen)?,
            suauc,
            curve,
        })
    }

    pub fn mh(&self) -> Option<f64> {
        Some(metrics::harmonic(self.msa?, self.mua?))
    }

    /// Element-wise mean; curves are kept from the first entry.
    pub fn mean(items: &[ZeroShotMetrics]) -> Self {
        let avg = |f: fn(&ZeroShotMetrics) -> Option<f64>| {
            let v: Option<Vec<f64>> = items.iter().map(f).collect();
            v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            msa: avg(|m| m.msa),
            mua: avg(|m| m.mua),
            suauc: avg(|m| m.suauc),
            curve: items.first().map(|m| m.curve.clone()).unwrap_or_default(),
        }
    }
}
