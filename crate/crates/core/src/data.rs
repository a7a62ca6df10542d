//! Synthetic multi-domain corpus and the task streams built from it.
//!
//! Each class owns a latent prototype living in a low-dimensional subspace
//! of feature space; each domain applies a fixed affine map whose distance
//! from the identity is set by `domain_shift_strength`. Class semantics are
//! unit vectors correlated with the latent prototype through a shared
//! projection, so a mapping learned on seen classes can transfer to unseen
//! ones.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};

/// Domain index written for training examples whose domain label is withheld.
pub const UNKNOWN_DOMAIN: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitMode {
    #[serde(rename = "DAZSL")]
    Dazsl,
    #[serde(rename = "GDAZSL")]
    Gdazsl,
    #[serde(rename = "U_DACZSL")]
    UniformDaczsl,
    #[serde(rename = "N_DACZSL")]
    NonUniformDaczsl,
    #[serde(rename = "DAg_CZSL")]
    DomainAgnostic,
}

impl SplitMode {
    pub fn is_continual(self) -> bool {
        !matches!(self, SplitMode::Dazsl | SplitMode::Gdazsl)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Dazsl => "DAZSL",
            SplitMode::Gdazsl => "GDAZSL",
            SplitMode::UniformDaczsl => "U_DACZSL",
            SplitMode::NonUniformDaczsl => "N_DACZSL",
            SplitMode::DomainAgnostic => "DAg_CZSL",
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitMode {
    type Err = DinError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "DAZSL" => Ok(SplitMode::Dazsl),
            "GDAZSL" => Ok(SplitMode::Gdazsl),
            "U_DACZSL" => Ok(SplitMode::UniformDaczsl),
            "N_DACZSL" => Ok(SplitMode::NonUniformDaczsl),
            "DAG_CZSL" => Ok(SplitMode::DomainAgnostic),
            other => Err(DinError::Config(format!("unknown split mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SemanticKind {
    /// Unit-normalized Gaussians correlated with the latent prototypes.
    #[serde(rename = "gaussian")]
    Gaussian,
    /// One-hot rows; requires `semantic_dim >= num_classes`.
    #[serde(rename = "orthogonal")]
    Orthogonal,
}

impl FromStr for SemanticKind {
    type Err = DinError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(SemanticKind::Gaussian),
            "orthogonal" => Ok(SemanticKind::Orthogonal),
            other => Err(DinError::Config(format!("unknown semantic kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub num_domains: usize,
    pub num_classes: usize,
    pub num_tasks: usize,
    pub target_domain: usize,
    /// Defaults to `num_classes / num_tasks`; classes past `T × per_task` are dropped.
    pub classes_per_task: Option<usize>,
    pub seed: u64,
    pub feature_dim: usize,
    pub semantic_dim: usize,
    pub latent_dim: usize,
    pub domain_shift_strength: f64,
    pub class_separation: f64,
    pub noise_std: f64,
    pub examples_per_cell: usize,
    pub semantic_correlation: f64,
    pub semantic_kind: SemanticKind,
    pub dropped_domains_per_task: usize,
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::UniformDaczsl,
            num_domains: 4,
            num_classes: 12,
            num_tasks: 3,
            target_domain: 3,
            classes_per_task: None,
            seed: 0,
            feature_dim: 32,
            semantic_dim: 16,
            latent_dim: 8,
            domain_shift_strength: 0.5,
            class_separation: 3.0,
            noise_std: 1.0,
            examples_per_cell: 50,
            semantic_correlation: 0.8,
            semantic_kind: SemanticKind::Gaussian,
            dropped_domains_per_task: 1,
            train_fraction: 0.8,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DinError::Config(m));
        if self.num_domains < 2 {
            return err(format!("num_domains must be at least 2, got {}", self.num_domains));
        }
        if self.target_domain >= self.num_domains {
            return err(format!(
                "target_domain {} out of range for {} domains",
                self.target_domain, self.num_domains
            ));
        }
        if self.num_classes == 0 || self.num_tasks == 0 {
            return err("num_classes and num_tasks must be positive".into());
        }
        if self.mode.is_continual() {
            if self.num_tasks > self.num_classes {
                return err(format!(
                    "num_tasks {} exceeds num_classes {}",
                    self.num_tasks, self.num_classes
                ));
            }
            let per = self.classes_per_task();
            if per == 0 || per * self.num_tasks > self.num_classes {
                return err(format!(
                    "classes_per_task {per} × num_tasks {} does not fit in {} classes",
                    self.num_tasks, self.num_classes
                ));
            }
        } else if self.num_classes < 3 {
            return err(format!("zero-shot split needs at least 3 classes, got {}", self.num_classes));
        }
        if self.mode == SplitMode::NonUniformDaczsl
            && (self.dropped_domains_per_task == 0 || self.dropped_domains_per_task >= self.num_domains - 1)
        {
            return err(format!(
                "dropped_domains_per_task must be in 1..{} for {} source domains",
                self.num_domains - 1,
                self.num_domains - 1
            ));
        }
        if self.latent_dim == 0 || self.latent_dim > self.feature_dim {
            return err(format!(
                "latent_dim {} must be in 1..={}",
                self.latent_dim, self.feature_dim
            ));
        }
        if self.semantic_dim == 0 {
            return err("semantic_dim must be positive".into());
        }
        if self.semantic_kind == SemanticKind::Orthogonal && self.semantic_dim < self.num_classes {
            return err(format!(
                "orthogonal semantics need semantic_dim >= num_classes ({} < {})",
                self.semantic_dim, self.num_classes
            ));
        }
        if !(0.0..=1.0).contains(&self.semantic_correlation) {
            return err(format!("semantic_correlation {} outside [0, 1]", self.semantic_correlation));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return err(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if self.examples_per_cell < 2 {
            return err("examples_per_cell must be at least 2".into());
        }
        if self.domain_shift_strength < 0.0 || self.class_separation < 0.0 || self.noise_std < 0.0 {
            return err("shift, separation and noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn classes_per_task(&self) -> usize {
        self.classes_per_task
            .unwrap_or(self.num_classes / self.num_tasks.max(1))
    }

    pub fn source_domains(&self) -> Vec<usize> {
        (0..self.num_domains).filter(|&d| d != self.target_domain).collect()
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `rows × cols` matrix (row-major) with orthonormal columns.
fn orthonormal_columns(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = gaussian(rng, rows);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = crate::autodiff::l2_norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for i in 0..rows {
            out[i * cols + j] = b[i];
        }
    }
    out
}

fn matvec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Per-class unit attribute vectors, independent of domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticTable {
    rows: Vec<Vec<f64>>,
}

impl SemanticTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        for (c, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(DinError::shape("SemanticTable::new", &[dim], &[r.len()]));
            }
            let n = crate::autodiff::l2_norm(r);
            if (n - 1.0).abs() > 1e-9 {
                return Err(DinError::Config(format!("semantic row {c} has norm {n}, expected 1")));
            }
        }
        Ok(Self { rows })
    }

    pub fn row(&self, class: usize) -> Result<&[f64]> {
        self.rows
            .get(class)
            .map(Vec::as_slice)
            .ok_or(DinError::Lookup {
                what: "semantic row",
                class,
            })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Same table with rows relabeled: new class `i` gets old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            rows: perm.iter().map(|&p| self.rows[p].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainMap {
    /// `feature_dim × feature_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: SplitConfig,
    /// Class-major, then domain, then draw order.
    pub samples: Vec<Sample>,
    pub prototypes: Vec<Vec<f64>>,
    pub domain_maps: Vec<DomainMap>,
    pub semantic: SemanticTable,
}

pub fn generate_corpus(cfg: &SplitConfig) -> Result<Corpus> {
    cfg.validate()?;
    let (f, l) = (cfg.feature_dim, cfg.latent_dim);

    let mut rng = rng_for(cfg.seed, 1);
    let embed = orthonormal_columns(&mut rng, f, l);
    let latents: Vec<Vec<f64>> = (0..cfg.num_classes).map(|_| gaussian(&mut rng, l)).collect();
    let scale = cfg.class_separation / (l as f64).sqrt();
    let prototypes: Vec<Vec<f64>> = latents
        .iter()
        .map(|z| matvec(&embed, l, z).into_iter().map(|v| v * scale).collect())
        .collect();

    let mut rng = rng_for(cfg.seed, 2);
    let s = cfg.domain_shift_strength;
    let domain_maps = (0..cfg.num_domains)
        .map(|_| {
            let a = gaussian(&mut rng, f * f);
            let b = gaussian(&mut rng, f);
            if s == 0.0 {
                let mut weight = vec![0.0; f * f];
                (0..f).for_each(|i| weight[i * f + i] = 1.0);
                return DomainMap {
                    weight,
                    bias: vec![0.0; f],
                };
            }
            let root = (f as f64).sqrt();
            let mut weight: Vec<f64> = a.iter().map(|v| s * v / root).collect();
            (0..f).for_each(|i| weight[i * f + i] += 1.0);
            let bias = b.iter().map(|v| s * cfg.class_separation * v / root).collect();
            DomainMap { weight, bias }
        })
        .collect::<Vec<_>>();

    let semantic = semantic_table(cfg, &latents)?;

    let mut rng = rng_for(cfg.seed, 4);
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.num_domains * cfg.examples_per_cell);
    for (y, proto) in prototypes.iter().enumerate() {
        for (d, map) in domain_maps.iter().enumerate() {
            for _ in 0..cfg.examples_per_cell {
                let noise = gaussian(&mut rng, f);
                let clean: Vec<f64> = proto
                    .iter()
                    .zip(&noise)
                    .map(|(p, e)| p + cfg.noise_std * e)
                    .collect();
                let x = matvec(&map.weight, f, &clean)
                    .into_iter()
                    .zip(&map.bias)
                    .map(|(v, b)| v + b)
                    .collect();
                samples.push(Sample { x, y, d });
            }
        }
    }

    Ok(Corpus {
        config: cfg.clone(),
        samples,
        prototypes,
        domain_maps,
        semantic,
    })
}

fn semantic_table(cfg: &SplitConfig, latents: &[Vec<f64>]) -> Result<SemanticTable> {
    let sdim = cfg.semantic_dim;
    if cfg.semantic_kind == SemanticKind::Orthogonal {
        let rows = (0..cfg.num_classes)
            .map(|c| {
                let mut r = vec![0.0; sdim];
                r[c] = 1.0;
                r
            })
            .collect();
        return SemanticTable::new(rows);
    }
    let l = cfg.latent_dim;
    let mut rng = rng_for(cfg.seed, 3);
    let projection = if sdim >= l {
        orthonormal_columns(&mut rng, sdim, l)
    } else {
        gaussian(&mut rng, sdim * l)
            .into_iter()
            .map(|v| v / (l as f64).sqrt())
            .collect()
    };
    let rho = cfg.semantic_correlation;
    let rest = (1.0 - rho * rho).max(0.0).sqrt();
    let rows = latents
        .iter()
        .map(|z| {
            let zn = crate::autodiff::l2_norm(z).max(1e-12);
            let signal = matvec(&projection, l, z);
            let noise = gaussian(&mut rng, sdim);
            let raw: Vec<f64> = signal
                .iter()
                .zip(&noise)
                .map(|(s, n)| rho * s / zn + rest * n / (sdim as f64).sqrt())
                .collect();
            crate::autodiff::l2_normalize(&raw)
        })
        .collect::<Result<Vec<_>>>()?;
    SemanticTable::new(rows)
}

/// A feature vector with class, domain and task identity.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: usize,
    /// Domain index, or [`UNKNOWN_DOMAIN`] when withheld.
    pub d: usize,
    pub t: usize,
}

impl LabeledExample {
    pub fn domain(&self) -> Option<usize> {
        (self.d != UNKNOWN_DOMAIN).then_some(self.d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Vec<LabeledExample>,
    /// Test examples per domain, target domain included.
    pub test: BTreeMap<usize, Vec<LabeledExample>>,
    pub visible_domains: Vec<usize>,
    pub dropped_domains: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub config: SplitConfig,
    pub tasks: Vec<Task>,
    /// Classes left out because they did not fill a whole task.
    pub dropped_classes: Vec<usize>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn target_test(&self, task: usize) -> &[LabeledExample] {
        self.tasks[task]
            .test
            .get(&self.config.target_domain)
            .map_or(&[], Vec::as_slice)
    }

    /// Classes of all tasks, ascending.
    pub fn all_classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
        c.sort_unstable();
        c
    }

    /// Classes of tasks `0..=task`, ascending.
    pub fn classes_up_to(&self, task: usize) -> Vec<usize> {
        let mut c: Vec<usize> = self.tasks[..=task]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect();
        c.sort_unstable();
        c
    }

    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.classes.contains(&class))
    }
}

/// Train/validation/test partition of classes for the single-split settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition classes in the 245/55/45 proportions of 345; remainder goes to
/// training.
pub fn split_dazsl(cfg: &SplitConfig) -> Result<ClassSplit> {
    if cfg.mode.is_continual() {
        return Err(DinError::Config(format!(
            "split_dazsl needs DAZSL or GDAZSL, got {}",
            cfg.mode
        )));
    }
    let c = cfg.num_classes;
    if c < 3 {
        return Err(DinError::Config(format!("need at least 3 classes, got {c}")));
    }
    let val = ((c as f64 * 55.0 / 345.0).round() as usize).max(1);
    let test = ((c as f64 * 45.0 / 345.0).round() as usize).max(1);
    let train = c - val - test;
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng_for(cfg.seed, 5));
    let part = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(ClassSplit {
        train: part(0..train),
        val: part(train..train + val),
        test: part(train + val..c),
    })
}

/// Per (class, domain) cell: shuffled sample indices split into train/test.
fn cell_splits(corpus: &Corpus) -> BTreeMap<(usize, usize), (Vec<usize>, Vec<usize>)> {
    let cfg = &corpus.config;
    let mut rng = rng_for(cfg.seed, 6);
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        cells.entry((s.y, s.d)).or_default().push(i);
    }
    cells
        .into_iter()
        .map(|(key, mut idx)| {
            idx.shuffle(&mut rng);
            let n = idx.len();
            let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
            let test = idx.split_off(n_train);
            (key, (idx, test))
        })
        .collect()
}

pub fn build_task_stream(corpus: &Corpus, cfg: &SplitConfig) -> Result<TaskStream> {
    cfg.validate()?;
    if corpus.config != *cfg {
        return Err(DinError::Config("corpus was generated with a different config".into()));
    }
    let (blocks, dropped_classes) = if cfg.mode.is_continual() {
        let mut order: Vec<usize> = (0..cfg.num_classes).collect();
        order.shuffle(&mut rng_for(cfg.seed, 5));
        let per = cfg.classes_per_task();
        let blocks: Vec<Vec<usize>> = (0..cfg.num_tasks)
            .map(|t| {
                let mut b = order[t * per..(t + 1) * per].to_vec();
                b.sort_unstable();
                b
            })
            .collect();
        let mut dropped = order[cfg.num_tasks * per..].to_vec();
        dropped.sort_unstable();
        (blocks, dropped)
    } else {
        let split = split_dazsl(cfg)?;
        let mut seen = split.train;
        seen.extend(split.val);
        seen.sort_unstable();
        (vec![seen, split.test], Vec::new())
    };

    let sources = cfg.source_domains();
    let mut drop_rng = rng_for(cfg.seed, 7);
    let cells = cell_splits(corpus);
    let class_task: BTreeMap<usize, usize> = blocks
        .iter()
        .enumerate()
        .flat_map(|(t, b)| b.iter().map(move |&c| (c, t)))
        .collect();

    let mut tasks: Vec<Task> = blocks
        .iter()
        .enumerate()
        .map(|(t, classes)| {
            let (visible, dropped) = match cfg.mode {
                SplitMode::NonUniformDaczsl => {
                    let picks = index::sample(&mut drop_rng, sources.len(), cfg.dropped_domains_per_task);
                    let mut dropped: Vec<usize> = picks.iter().map(|i| sources[i]).collect();
                    dropped.sort_unstable();
                    let visible = sources.iter().copied().filter(|d| !dropped.contains(d)).collect();
                    (visible, dropped)
                }
                // the unseen half of a zero-shot split is never trained on
                SplitMode::Dazsl | SplitMode::Gdazsl if t == 1 => (Vec::new(), Vec::new()),
                _ => (sources.clone(), Vec::new()),
            };
            Task {
                index: t,
                classes: classes.clone(),
                train: Vec::new(),
                test: BTreeMap::new(),
                visible_domains: visible,
                dropped_domains: dropped,
            }
        })
        .collect();

    let withhold_domain = cfg.mode == SplitMode::DomainAgnostic;
    for (&(y, d), (train_idx, test_idx)) in &cells {
        let Some(&t) = class_task.get(&y) else { continue };
        let task = &mut tasks[t];
        if task.visible_domains.contains(&d) {
            task.train.extend(train_idx.iter().map(|&i| LabeledExample {
                x: corpus.samples[i].x.clone(),
                y,
                d: if withhold_domain { UNKNOWN_DOMAIN } else { d },
                t,
            }));
        }
        task.test.entry(d).or_default().extend(test_idx.iter().map(|&i| LabeledExample {
            x: corpus.samples[i].x.clone(),
            y,
            d,
            t,
        }));
    }

    Ok(TaskStream {
        config: cfg.clone(),
        tasks,
        dropped_classes,
    })
}

/// Exactly `k` examples per (class, domain) cell present in `data`, drawn
/// without replacement. Output is ordered by cell, then draw.
pub fn sample_kshot(data: &[LabeledExample], k: usize, rng: &mut impl Rng) -> Result<Vec<LabeledExample>> {
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, e) in data.iter().enumerate() {
        cells.entry((e.y, e.d)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(cells.len() * k);
    for ((class, domain), idx) in cells {
        if idx.len() < k {
            return Err(DinError::Sampling {
                class,
                domain,
                available: idx.len(),
                requested: k,
            });
        }
        let mut picks = index::sample(rng, idx.len(), k).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|p| data[idx[p]].clone()));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestTask {
    classes: Vec<usize>,
    visible_domains: Vec<usize>,
    dropped_domains: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    config: SplitConfig,
    dropped_classes: Vec<usize>,
    tasks: Vec<ManifestTask>,
    semantic: SemanticTable,
}

const MANIFEST_COLUMNS: &str = "task,class,domain,split,features";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the stream as a `#`-prefixed JSON header followed by one
/// `task,class,domain,split,f0,f1,…` line per example.
pub fn write_manifest(stream: &TaskStream, semantic: &SemanticTable, mut w: impl Write) -> Result<()> {
    let header = ManifestHeader {
        config: stream.config.clone(),
        dropped_classes: stream.dropped_classes.clone(),
        tasks: stream
            .tasks
            .iter()
            .map(|t| ManifestTask {
                classes: t.classes.clone(),
                visible_domains: t.visible_domains.clone(),
                dropped_domains: t.dropped_domains.clone(),
            })
            .collect(),
        semantic: semantic.clone(),
    };
    writeln!(w, "#{}", serde_json::to_string(&header)?)?;
    writeln!(w, "{MANIFEST_COLUMNS}")?;
    let mut line = |e: &LabeledExample, split: &str| -> Result<()> {
        let domain = e.domain().map_or_else(|| "-1".to_string(), |d| d.to_string());
        let feats: Vec<String> = e.x.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{},{},{},{},{}", e.t, e.y, domain, split, feats.join(","))?;
        Ok(())
    };
    for task in &stream.tasks {
        for e in &task.train {
            line(e, "train")?;
        }
        for examples in task.test.values() {
            for e in examples {
                line(e, "test")?;
            }
        }
    }
    Ok(())
}

pub fn read_manifest(r: impl BufRead) -> Result<(TaskStream, SemanticTable)> {
    let parse_err = |line: usize, msg: String| DinError::Parse {
        path: "manifest".into(),
        line,
        msg,
    };
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty manifest".into()))?;
    let first = first?;
    let json = first
        .strip_prefix('#')
        .ok_or_else(|| parse_err(1, "missing '#' header".into()))?;
    let header: ManifestHeader = serde_json::from_str(json).map_err(|e| parse_err(1, e.to_string()))?;
    let mut tasks: Vec<Task> = header
        .tasks
        .into_iter()
        .enumerate()
        .map(|(index, t)| Task {
            index,
            classes: t.classes,
            train: Vec::new(),
            test: BTreeMap::new(),
            visible_domains: t.visible_domains,
            dropped_domains: t.dropped_domains,
        })
        .collect();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() || line == MANIFEST_COLUMNS {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields
                .next()
                .ok_or_else(|| parse_err(lineno, format!("missing {name}")))
                .map(str::to_string)
        };
        let t: usize = next("task")?.parse().map_err(|e| parse_err(lineno, format!("task: {e}")))?;
        let y: usize = next("class")?.parse().map_err(|e| parse_err(lineno, format!("class: {e}")))?;
        let d_raw = next("domain")?;
        let d = if d_raw == "-1" {
            UNKNOWN_DOMAIN
        } else {
            d_raw.parse().map_err(|e| parse_err(lineno, format!("domain: {e}")))?
        };
        let split = next("split")?;
        let x = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(lineno, format!("feature: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let task = tasks
            .get_mut(t)
            .ok_or_else(|| parse_err(lineno, format!("task {t} not in header")))?;
        let e = LabeledExample { x, y, d, t };
        match split.as_str() {
            "train" => task.train.push(e),
            "test" => task.test.entry(d).or_default().push(e),
            other => return Err(parse_err(lineno, format!("unknown split '{other}'"))),
        }
    }
    Ok((
        TaskStream {
            config: header.config,
            tasks,
            dropped_classes: header.dropped_classes,
        },
        header.semantic,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: SplitMode) -> SplitConfig {
        SplitConfig {
            mode,
            num_domains: 4,
            num_classes: 9,
            num_tasks: 3,
            target_domain: 3,
            examples_per_cell: 10,
            ..SplitConfig::default()
        }
    }

    #[test]
    fn no_shift_means_identity_maps() {
        let c = SplitConfig {
            domain_shift_strength: 0.0,
            ..cfg(SplitMode::UniformDaczsl)
        };
        let corpus = generate_corpus(&c).unwrap();
        let f = c.feature_dim;
        for map in &corpus.domain_maps {
            for i in 0..f {
                for j in 0..f {
                    assert_eq!(map.weight[i * f + j], if i == j { 1.0 } else { 0.0 });
                }
            }
            assert!(map.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let c = SplitConfig {
            num_classes: 8,
            num_domains: 3,
            target_domain: 2,
            num_tasks: 2,
            examples_per_cell: 50,
            ..SplitConfig::default()
        };
        let a = generate_corpus(&c).unwrap();
        let b = generate_corpus(&c).unwrap();
        assert_eq!(a.samples.len(), 1200);
        assert!(a
            .samples
            .iter()
            .zip(&b.samples)
            .all(|(x, y)| x.x.iter().zip(&y.x).all(|(p, q)| p.to_bits() == q.to_bits())));
    }

    #[test]
    fn semantic_rows_unit_and_distinct() {
        let corpus = generate_corpus(&cfg(SplitMode::UniformDaczsl)).unwrap();
        let s = &corpus.semantic;
        assert_eq!(s.num_classes(), 9);
        for a in 0..9 {
            assert!((crate::autodiff::l2_norm(s.row(a).unwrap()) - 1.0).abs() < 1e-12);
            for b in 0..a {
                assert_ne!(s.row(a).unwrap(), s.row(b).unwrap());
            }
        }
        assert!(matches!(s.row(9), Err(DinError::Lookup { .. })));
    }

    #[test]
    fn task_blocks_partition_classes() {
        let c = cfg(SplitMode::UniformDaczsl);
        let corpus = generate_corpus(&c).unwrap();
        let stream = build_task_stream(&corpus, &c).unwrap();
        assert_eq!(stream.num_tasks(), 3);
        let mut all = Vec::new();
        for t in &stream.tasks {
            assert_eq!(t.classes.len(), 3);
            assert_eq!(t.visible_domains, vec![0, 1, 2]);
            all.extend(t.classes.iter().copied());
        }
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn excess_classes_dropped() {
        let c = SplitConfig {
            num_classes: 10,
            ..cfg(SplitMode::UniformDaczsl)
        };
        let stream = build_task_stream(&generate_corpus(&c).unwrap(), &c).unwrap();
        assert_eq!(stream.dropped_classes.len(), 1);
        assert_eq!(stream.all_classes().len(), 9);
    }

    #[test]
    fn too_many_tasks_is_config_error() {
        let c = SplitConfig {
            num_tasks: 10,
            ..cfg(SplitMode::UniformDaczsl)
        };
        assert!(matches!(generate_corpus(&c), Err(DinError::Config(_))));
    }

    #[test]
    fn non_uniform_drops_one_source_domain() {
        let c = cfg(SplitMode::NonUniformDaczsl);
        let stream = build_task_stream(&generate_corpus(&c).unwrap(), &c).unwrap();
        for t in &stream.tasks {
            assert_eq!(t.dropped_domains.len(), 1);
            let dropped = t.dropped_domains[0];
            assert_ne!(dropped, c.target_domain);
            assert!(t.train.iter().all(|e| e.d != dropped));
            assert!(!t.test[&dropped].is_empty());
        }
    }

    #[test]
    fn domain_agnostic_withholds_training_domains() {
        let c = cfg(SplitMode::DomainAgnostic);
        let stream = build_task_stream(&generate_corpus(&c).unwrap(), &c).unwrap();
        for t in &stream.tasks {
            assert!(t.train.iter().all(|e| e.d == UNKNOWN_DOMAIN));
            assert!(t.test.values().flatten().all(|e| e.d != UNKNOWN_DOMAIN));
        }
    }

    #[test]
    fn dazsl_split_proportions() {
        let mut c = SplitConfig {
            mode: SplitMode::Dazsl,
            num_classes: 345,
            ..SplitConfig::default()
        };
        let s = split_dazsl(&c).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (245, 55, 45));
        c.num_classes = 20;
        let s = split_dazsl(&c).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 3, 3));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        c.num_classes = 2;
        assert!(split_dazsl(&c).is_err());
    }

    #[test]
    fn gdazsl_stream_has_seen_and_unseen_blocks() {
        let c = SplitConfig {
            mode: SplitMode::Gdazsl,
            num_classes: 20,
            ..cfg(SplitMode::Gdazsl)
        };
        let stream = build_task_stream(&generate_corpus(&c).unwrap(), &c).unwrap();
        assert_eq!(stream.tasks[0].classes.len(), 17);
        assert_eq!(stream.tasks[1].classes.len(), 3);
        assert!(stream.tasks[1].train.is_empty());
        assert!(!stream.target_test(1).is_empty());
    }

    #[test]
    fn kshot_counts_and_errors() {
        let c = SplitConfig {
            num_domains: 3,
            target_domain: 2,
            ..cfg(SplitMode::UniformDaczsl)
        };
        let stream = build_task_stream(&generate_corpus(&c).unwrap(), &c).unwrap();
        let train = &stream.tasks[0].train;
        let mut rng = rng_for(1, 0);
        assert_eq!(sample_kshot(train, 1, &mut rng).unwrap().len(), 6);
        let full = sample_kshot(train, 8, &mut rng).unwrap();
        assert_eq!(full.len(), train.len());
        let a = sample_kshot(train, 3, &mut rng_for(9, 0)).unwrap();
        let b = sample_kshot(train, 3, &mut rng_for(9, 0)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_kshot(train, 9, &mut rng),
            Err(DinError::Sampling { requested: 9, .. })
        ));
    }

    #[test]
    fn manifest_round_trip_is_lossless() {
        let c = cfg(SplitMode::DomainAgnostic);
        let corpus = generate_corpus(&c).unwrap();
        let stream = build_task_stream(&corpus, &c).unwrap();
        let mut buf = Vec::new();
        write_manifest(&stream, &corpus.semantic, &mut buf).unwrap();
        let (back, sem) = read_manifest(buf.as_slice()).unwrap();
        assert_eq!(back, stream);
        assert_eq!(sem, corpus.semantic);
    }
}
