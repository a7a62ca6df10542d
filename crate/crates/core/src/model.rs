//! The DIN network family.
//!
//! Parameters live in named [`ParameterGroup`]s so that the trainer can
//! freeze and step them independently:
//!
//! | group  | contents                                  |
//! |--------|-------------------------------------------|
//! | `pr`   | prompt table                              |
//! | `Text` | text encoder MLP                          |
//! | `G`    | global encoder MLP followed by fusion head |
//! | `L[t]` | local encoder of task `t`                 |
//! | `D_dm` | domain discriminator                      |
//! | `D_ta` | task discriminator                        |
//!
//! Forward passes run on a [`Forward`] context that lifts parameters onto a
//! fresh tape: groups listed as trainable become gradient-tracked leaves,
//! everything else enters as constants.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParameterGroup, Tape, Tensor, Var};
use crate::data::SemanticTable;
use crate::error::{DinError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptInit {
    /// One context shared by every class.
    #[serde(rename = "GLP")]
    Glp,
    /// Independent context per class.
    #[serde(rename = "CWP")]
    Cwp,
}

impl FromStr for PromptInit {
    type Err = DinError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GLP" => Ok(PromptInit::Glp),
            "CWP" => Ok(PromptInit::Cwp),
            o => Err(DinError::Config(format!("unknown prompt_init '{o}'"))),
        }
    }
}

impl fmt::Display for PromptInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptInit::Glp => "GLP",
            PromptInit::Cwp => "CWP",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    #[serde(rename = "end")]
    End,
    #[serde(rename = "mid")]
    Mid,
}

impl FromStr for Placement {
    type Err = DinError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "end" => Ok(Placement::End),
            "mid" => Ok(Placement::Mid),
            o => Err(DinError::Config(format!("unknown prompt_placement '{o}'"))),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::End => "end",
            Placement::Mid => "mid",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub text_hidden_dim: usize,
    pub prompt_length: usize,
    pub dim_per_token: usize,
    pub semantic_dim: usize,
    pub disc_hidden_dim: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub num_tasks: usize,
    pub leaky_slope: f64,
    pub prompt_init: PromptInit,
    pub placement: Placement,
    pub prompt_init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            embed_dim: 16,
            hidden_dim: 64,
            text_hidden_dim: 64,
            prompt_length: 4,
            dim_per_token: 16,
            semantic_dim: 16,
            disc_hidden_dim: 1024,
            num_classes: 12,
            num_domains: 4,
            num_tasks: 3,
            leaky_slope: 0.01,
            prompt_init: PromptInit::Cwp,
            placement: Placement::End,
            prompt_init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("text_hidden_dim", self.text_hidden_dim),
            ("prompt_length", self.prompt_length),
            ("dim_per_token", self.dim_per_token),
            ("semantic_dim", self.semantic_dim),
            ("disc_hidden_dim", self.disc_hidden_dim),
            ("num_classes", self.num_classes),
            ("num_domains", self.num_domains),
            ("num_tasks", self.num_tasks),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(DinError::Config(format!("{name} must be positive")));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(DinError::Config(format!("leaky_slope {} outside (0, 1)", self.leaky_slope)));
        }
        if self.placement == Placement::Mid && self.prompt_length < 2 {
            return Err(DinError::Config("mid placement needs prompt_length >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    Prompt,
    Text,
    Global,
    Local(usize),
    DomainDisc,
    TaskDisc,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Prompt => f.write_str("pr"),
            GroupId::Text => f.write_str("Text"),
            GroupId::Global => f.write_str("G"),
            GroupId::Local(t) => write!(f, "L{t}"),
            GroupId::DomainDisc => f.write_str("D_dm"),
            GroupId::TaskDisc => f.write_str("D_ta"),
        }
    }
}

impl FromStr for GroupId {
    type Err = DinError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pr" => GroupId::Prompt,
            "Text" => GroupId::Text,
            "G" => GroupId::Global,
            "D_dm" => GroupId::DomainDisc,
            "D_ta" => GroupId::TaskDisc,
            other => match other.strip_prefix('L').and_then(|t| t.parse().ok()) {
                Some(t) => GroupId::Local(t),
                None => return Err(DinError::Config(format!("unknown parameter group '{other}'"))),
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discriminator {
    Domain,
    Task,
}

/// Learnable context tokens, stored `[slices, prompt_length × dim_per_token]`.
/// GLP keeps a single slice that every class reads.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTable {
    pub init: PromptInit,
    pub placement: Placement,
    pub group: ParameterGroup,
    prompt_length: usize,
    dim_per_token: usize,
}

impl PromptTable {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let slices = match cfg.prompt_init {
            PromptInit::Glp => 1,
            PromptInit::Cwp => cfg.num_classes,
        };
        let width = cfg.prompt_length * cfg.dim_per_token;
        let normal = Normal::new(0.0, cfg.prompt_init_std).expect("finite std");
        let data = (0..slices * width).map(|_| normal.sample(rng)).collect();
        let tensor = Tensor::matrix(slices, width, data).expect("sized");
        Self {
            init: cfg.prompt_init,
            placement: cfg.placement,
            group: ParameterGroup::new("pr", vec![tensor]),
            prompt_length: cfg.prompt_length,
            dim_per_token: cfg.dim_per_token,
        }
    }

    pub fn slice_index(&self, class: usize) -> usize {
        match self.init {
            PromptInit::Glp => 0,
            PromptInit::Cwp => class,
        }
    }

    /// Context tokens for `class` as `prompt_length` rows of `dim_per_token`.
    pub fn slice(&self, class: usize) -> &[f64] {
        self.group.tensors[0].row(self.slice_index(class))
    }

    /// Number of context tokens before and after the class token.
    pub fn prefix_suffix(&self) -> (usize, usize) {
        match self.placement {
            Placement::End => (self.prompt_length, 0),
            Placement::Mid => {
                let prefix = self.prompt_length.div_ceil(2);
                (prefix, self.prompt_length - prefix)
            }
        }
    }

    /// Constant `[prompt_length·dpt, 2·dpt]` map that mean-pools the prefix
    /// tokens into the first block and the suffix tokens into the second.
    fn pooling_matrix(&self) -> Tensor {
        let (pre, suf) = self.prefix_suffix();
        let dpt = self.dim_per_token;
        let mut m = vec![0.0; self.prompt_length * dpt * 2 * dpt];
        for tok in 0..self.prompt_length {
            let (block, count) = if tok < pre { (0, pre) } else { (1, suf) };
            for j in 0..dpt {
                m[(tok * dpt + j) * 2 * dpt + block * dpt + j] = 1.0 / count as f64;
            }
        }
        Tensor::matrix(self.prompt_length * dpt, 2 * dpt, m).expect("sized")
    }

    /// Pooled token sequence for `class` with the class token spliced in:
    /// `[mean(prefix) | mean(suffix) | semantic]`.
    pub fn assemble(&self, class: usize, semantic: &SemanticTable) -> Result<Vec<f64>> {
        let pooled = {
            let pm = self.pooling_matrix();
            let s = self.slice(class);
            (0..pm.cols())
                .map(|j| s.iter().enumerate().map(|(i, v)| v * pm.data()[i * pm.cols() + j]).sum())
                .collect::<Vec<f64>>()
        };
        let mut out = pooled;
        out.extend_from_slice(semantic.row(class)?);
        Ok(out)
    }
}

fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> [Tensor; 2] {
    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite std");
    let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    [
        Tensor::matrix(fan_in, fan_out, w).expect("sized"),
        Tensor::vector(vec![0.0; fan_out]),
    ]
}

fn init_mlp(rng: &mut impl Rng, dims: &[usize]) -> Vec<Tensor> {
    dims.windows(2).flat_map(|w| init_linear(rng, w[0], w[1])).collect()
}

fn group_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Number of tensors in the global encoder before the fusion head starts.
const GLOBAL_MLP_TENSORS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DinModel {
    pub config: ModelConfig,
    pub prompt: PromptTable,
    pub text: ParameterGroup,
    pub global: ParameterGroup,
    pub locals: Vec<ParameterGroup>,
    pub domain_disc: ParameterGroup,
    pub task_disc: ParameterGroup,
}

impl DinModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let prompt = PromptTable::new(c, &mut group_rng(c.seed, 10));
        let text_in = 2 * c.dim_per_token + c.semantic_dim;
        let text = ParameterGroup::new(
            "Text",
            init_mlp(&mut group_rng(c.seed, 11), &[text_in, c.text_hidden_dim, c.embed_dim]),
        );
        let mut g_rng = group_rng(c.seed, 12);
        let mut g = init_mlp(&mut g_rng, &[c.feature_dim, c.hidden_dim, c.embed_dim]);
        g.extend(init_linear(&mut g_rng, 2 * c.embed_dim, c.embed_dim));
        let global = ParameterGroup::new("G", g);
        let disc = |stream, outputs, name| {
            let h = c.disc_hidden_dim;
            ParameterGroup::new(
                name,
                init_mlp(&mut group_rng(c.seed, stream), &[c.embed_dim, h, h, outputs]),
            )
        };
        Ok(Self {
            prompt,
            text,
            global,
            locals: Vec::new(),
            domain_disc: disc(13, c.num_domains, "D_dm"),
            task_disc: disc(14, c.num_tasks, "D_ta"),
            config,
        })
    }

    /// Instantiates the local net for `task` (tasks start in order) and
    /// freezes every earlier one.
    pub fn start_task(&mut self, task: usize) -> Result<()> {
        if task > self.locals.len() {
            return Err(DinError::Lifecycle(format!(
                "task {task} started before task {}",
                self.locals.len()
            )));
        }
        if task == self.locals.len() {
            let c = &self.config;
            let tensors = init_mlp(
                &mut group_rng(c.seed, 100 + task as u64),
                &[c.feature_dim, c.hidden_dim, c.embed_dim],
            );
            self.locals.push(ParameterGroup::new(format!("L{task}"), tensors));
        }
        for (s, l) in self.locals.iter_mut().enumerate() {
            l.frozen = s != task;
        }
        Ok(())
    }

    pub fn group(&self, id: GroupId) -> Result<&ParameterGroup> {
        Ok(match id {
            GroupId::Prompt => &self.prompt.group,
            GroupId::Text => &self.text,
            GroupId::Global => &self.global,
            GroupId::Local(t) => self
                .locals
                .get(t)
                .ok_or_else(|| DinError::Lifecycle(format!("local net {t} not instantiated")))?,
            GroupId::DomainDisc => &self.domain_disc,
            GroupId::TaskDisc => &self.task_disc,
        })
    }

    pub fn group_mut(&mut self, id: GroupId) -> Result<&mut ParameterGroup> {
        Ok(match id {
            GroupId::Prompt => &mut self.prompt.group,
            GroupId::Text => &mut self.text,
            GroupId::Global => &mut self.global,
            GroupId::Local(t) => self
                .locals
                .get_mut(t)
                .ok_or_else(|| DinError::Lifecycle(format!("local net {t} not instantiated")))?,
            GroupId::DomainDisc => &mut self.domain_disc,
            GroupId::TaskDisc => &mut self.task_disc,
        })
    }

    pub fn group_ids(&self) -> Vec<GroupId> {
        let mut ids = vec![GroupId::Prompt, GroupId::Text, GroupId::Global];
        ids.extend((0..self.locals.len()).map(GroupId::Local));
        ids.extend([GroupId::DomainDisc, GroupId::TaskDisc]);
        ids
    }

    pub fn set_frozen(&mut self, id: GroupId, frozen: bool) -> Result<()> {
        self.group_mut(id)?.frozen = frozen;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for id in self.group_ids() {
            if let Ok(g) = self.group_mut(id) {
                g.zero_grad();
            }
        }
    }

    fn mlp(&self, fwd: &mut Forward, id: GroupId, first: usize, layers: usize, x: Var, last_act: bool) -> Result<Var> {
        let mut h = x;
        for layer in 0..layers {
            let w = fwd.param(self, id, first + 2 * layer)?;
            let b = fwd.param(self, id, first + 2 * layer + 1)?;
            let z = fwd.tape.matmul(h, w)?;
            h = fwd.tape.add_row(z, b)?;
            if layer + 1 < layers || last_act {
                h = fwd.tape.leaky_relu(h, self.config.leaky_slope);
            }
        }
        Ok(h)
    }

    /// `z_G` for each row of `x`.
    pub fn encode_global(&self, fwd: &mut Forward, x: Var) -> Result<Var> {
        self.mlp(fwd, GroupId::Global, 0, 2, x, false)
    }

    /// `z_t` for each row of `x` through local net `task`.
    pub fn encode_local(&self, fwd: &mut Forward, x: Var, task: usize) -> Result<Var> {
        self.group(GroupId::Local(task))?;
        self.mlp(fwd, GroupId::Local(task), 0, 2, x, false)
    }

    /// Unit-norm text prototypes, one row per entry of `classes`.
    pub fn encode_text(&self, fwd: &mut Forward, classes: &[usize], semantic: &SemanticTable) -> Result<Var> {
        let mut sem = Vec::with_capacity(classes.len() * semantic.dim());
        for &c in classes {
            if c >= self.config.num_classes {
                return Err(DinError::Lookup {
                    what: "prompt slice",
                    class: c,
                });
            }
            sem.extend_from_slice(semantic.row(c)?);
        }
        let prompts = fwd.param(self, GroupId::Prompt, 0)?;
        let slices: Vec<usize> = classes.iter().map(|&c| self.prompt.slice_index(c)).collect();
        let selected = fwd.tape.select_rows(prompts, &slices)?;
        let pool = fwd.tape.constant(self.prompt.pooling_matrix());
        let pooled = fwd.tape.matmul(selected, pool)?;
        let sem = fwd
            .tape
            .constant(Tensor::matrix(classes.len(), semantic.dim(), sem)?);
        let input = fwd.tape.concat_cols(pooled, sem)?;
        let out = self.mlp(fwd, GroupId::Text, 0, 2, input, false)?;
        fwd.tape.normalize_rows(out)
    }

    /// Unit-norm `f(z_L, z_G)`: affine map of the concatenation.
    pub fn fuse(&self, fwd: &mut Forward, z_local: Var, z_global: Var) -> Result<Var> {
        let cat = fwd.tape.concat_cols(z_local, z_global)?;
        let w = fwd.param(self, GroupId::Global, GLOBAL_MLP_TENSORS)?;
        let b = fwd.param(self, GroupId::Global, GLOBAL_MLP_TENSORS + 1)?;
        let h = fwd.tape.matmul(cat, w)?;
        let h = fwd.tape.add_row(h, b)?;
        fwd.tape.normalize_rows(h)
    }

    /// Fusion with the local slot zeroed, used when local nets are disabled
    /// and during prompt learning.
    pub fn fuse_global_only(&self, fwd: &mut Forward, z_global: Var) -> Result<Var> {
        let rows = fwd.tape.value(z_global).rows();
        let zeros = fwd.tape.constant(Tensor::zeros(vec![rows, self.config.embed_dim]));
        self.fuse(fwd, zeros, z_global)
    }

    /// Discriminator logits with no gradient reversal.
    pub fn discriminator_logits(&self, fwd: &mut Forward, z: Var, which: Discriminator) -> Result<Var> {
        let id = match which {
            Discriminator::Domain => GroupId::DomainDisc,
            Discriminator::Task => GroupId::TaskDisc,
        };
        self.mlp(fwd, id, 0, 3, z, false)
    }

    /// Logits of `which` applied behind a gradient-reversal layer.
    pub fn discriminate(&self, fwd: &mut Forward, z_global: Var, which: Discriminator, lambda: f64) -> Result<Var> {
        let reversed = fwd.tape.grad_reverse(z_global, lambda);
        self.discriminator_logits(fwd, reversed, which)
    }

    /// Cosine compatibility `[n, |pool|]` between fused features of `xs` and
    /// the pool's text prototypes. `local = None` uses the global-only path.
    pub fn class_scores(
        &self,
        xs: &Tensor,
        local: Option<usize>,
        pool: &[usize],
        semantic: &SemanticTable,
    ) -> Result<Tensor> {
        if pool.is_empty() {
            return Err(DinError::Config("empty prediction pool".into()));
        }
        let mut fwd = Forward::inference();
        let x = fwd.tape.constant(xs.clone());
        let zg = self.encode_global(&mut fwd, x)?;
        let z = match local {
            Some(t) => {
                let zl = self.encode_local(&mut fwd, x, t)?;
                self.fuse(&mut fwd, zl, zg)?
            }
            None => self.fuse_global_only(&mut fwd, zg)?,
        };
        let protos = self.encode_text(&mut fwd, pool, semantic)?;
        let pt = fwd.tape.transpose(protos)?;
        let sims = fwd.tape.matmul(z, pt)?;
        Ok(fwd.tape.value(sims).clone())
    }

    /// Highest-scoring class of `pool` for `x`; ties go to the lowest class id.
    pub fn predict(&self, x: &[f64], local: Option<usize>, pool: &[usize], semantic: &SemanticTable) -> Result<usize> {
        let scores = self.class_scores(&Tensor::matrix(1, x.len(), x.to_vec())?, local, pool, semantic)?;
        Ok(argmax_class(scores.row(0), pool))
    }

    pub fn save_checkpoint(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "din-checkpoint v1")?;
        for id in self.group_ids() {
            for (i, t) in self.group(id)?.tensors.iter().enumerate() {
                let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                write!(w, "{id}.{i} {}", shape.join("x"))?;
                for v in t.data() {
                    write!(w, " {v:e}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Restores parameter values saved by [`save_checkpoint`]; missing local
    /// nets are instantiated first. Shapes must match this model's config.
    ///
    /// [`save_checkpoint`]: DinModel::save_checkpoint
    pub fn load_checkpoint(&mut self, r: impl BufRead) -> Result<()> {
        let err = |line: usize, msg: String| DinError::Parse {
            path: "checkpoint".into(),
            line,
            msg,
        };
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if lineno == 1 {
                if line.trim() != "din-checkpoint v1" {
                    return Err(err(1, format!("unexpected header '{line}'")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_ascii_whitespace();
            let name = parts.next().ok_or_else(|| err(lineno, "missing name".into()))?;
            let (gname, idx) = name
                .rsplit_once('.')
                .ok_or_else(|| err(lineno, format!("bad record name '{name}'")))?;
            let id: GroupId = gname.parse().map_err(|e: DinError| err(lineno, e.to_string()))?;
            let idx: usize = idx.parse().map_err(|_| err(lineno, format!("bad tensor index in '{name}'")))?;
            let shape: Vec<usize> = parts
                .next()
                .ok_or_else(|| err(lineno, "missing shape".into()))?
                .split('x')
                .map(|d| d.parse().map_err(|_| err(lineno, format!("bad dimension '{d}'"))))
                .collect::<Result<_>>()?;
            let values: Vec<f64> = parts
                .map(|v| v.parse().map_err(|_| err(lineno, format!("bad value '{v}'"))))
                .collect::<Result<_>>()?;
            if let GroupId::Local(t) = id {
                while self.locals.len() <= t {
                    let next = self.locals.len();
                    self.start_task(next)?;
                }
            }
            let group = self.group_mut(id)?;
            let tensor = group
                .tensors
                .get_mut(idx)
                .ok_or_else(|| err(lineno, format!("group {id} has no tensor {idx}")))?;
            if tensor.shape() != shape.as_slice() || values.len() != tensor.len() {
                return Err(err(
                    lineno,
                    format!("shape {shape:?} does not match model tensor {:?}", tensor.shape()),
                ));
            }
            tensor.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &DinModel) -> bool {
        let ids = self.group_ids();
        ids == other.group_ids()
            && ids.iter().all(|&id| match (self.group(id), other.group(id)) {
                (Ok(a), Ok(b)) => a.bit_eq(b),
                _ => false,
            })
    }
}

/// Index into `pool` of the best score; ties go to the lowest class id.
pub fn argmax_index(scores: &[f64], pool: &[usize]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && pool[i] < pool[best]) {
            best = i;
        }
    }
    best
}

pub fn argmax_class(scores: &[f64], pool: &[usize]) -> usize {
    pool[argmax_index(scores, pool)]
}

/// Tape plus the record of which parameters were lifted onto it.
pub struct Forward {
    pub tape: Tape,
    trainable: Vec<GroupId>,
    bound: HashMap<(GroupId, usize), Var>,
}

impl Forward {
    pub fn new(trainable: &[GroupId]) -> Self {
        Self {
            tape: Tape::new(),
            trainable: trainable.to_vec(),
            bound: HashMap::new(),
        }
    }

    pub fn inference() -> Self {
        Self::new(&[])
    }

    pub fn is_trainable(&self, id: GroupId) -> bool {
        self.trainable.contains(&id)
    }

    /// Lifts tensor `idx` of group `id` onto the tape once per pass.
    pub fn param(&mut self, model: &DinModel, id: GroupId, idx: usize) -> Result<Var> {
        if let Some(&v) = self.bound.get(&(id, idx)) {
            return Ok(v);
        }
        let group = model.group(id)?;
        let t = group.tensors.get(idx).ok_or(DinError::Index {
            op: "Forward::param",
            index: idx,
            len: group.tensors.len(),
        })?;
        let v = if self.is_trainable(id) {
            self.tape.leaf(t.clone())
        } else {
            self.tape.constant(t.clone())
        };
        self.bound.insert((id, idx), v);
        Ok(v)
    }

    pub fn bound_var(&self, id: GroupId, idx: usize) -> Option<Var> {
        self.bound.get(&(id, idx)).copied()
    }

    /// Adds this pass's gradients into the parameter tensors' accumulators.
    pub fn accumulate_into(&self, grads: &Gradients, model: &mut DinModel) -> Result<()> {
        let mut keys: Vec<_> = self.bound.iter().collect();
        keys.sort_by_key(|(k, _)| **k);
        for (&(id, idx), &var) in keys {
            if let Some(g) = grads.get(var) {
                model.group_mut(id)?.tensors[idx].accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
