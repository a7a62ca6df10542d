//! Two-stage training across a task stream: K-shot prompt learning, then
//! the main stage with replay and the adversarial inner loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::Ablation;
use crate::autodiff::{cosine_lr, step_adamw, step_sgd, AdamWConfig, StepStatus};
use crate::data::{sample_kshot, LabeledExample, SemanticTable, TaskStream};
use crate::error::{DinError, Result};
use crate::evaluation::{self, EvalConfig, ZeroShotMetrics};
use crate::losses::{self, Batch, LossBreakdown, LossWeights};
use crate::metrics::AccuracyMatrix;
use crate::model::{DinModel, Forward, GroupId, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Examples per (class, domain) cell in each prompt-learning epoch.
    pub k_shot: usize,
    /// Buffer samples per (class, visible domain) kept from each task.
    pub buffer_per_class: usize,
    pub batch_size: usize,
    /// Fixed prompt epochs; `None` follows the K-dependent schedule.
    pub prompt_epochs: Option<usize>,
    pub prompt_epoch_scale: f64,
    pub main_epochs: usize,
    pub disc_steps: usize,
    pub lr_prompt: f64,
    pub lr_encoders: f64,
    pub lr_disc: f64,
    pub wd_prompt: f64,
    pub wd_encoders: f64,
    pub wd_disc: f64,
    pub warmup_epochs: usize,
    /// Extend the buffer after every main epoch rather than once per task.
    pub buffer_per_epoch: bool,
    pub seed: u64,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_shot: 16,
            buffer_per_class: 1,
            batch_size: 64,
            prompt_epochs: None,
            prompt_epoch_scale: 1.0,
            main_epochs: 10,
            disc_steps: 1,
            lr_prompt: 0.002,
            lr_encoders: 1e-3,
            lr_disc: 1e-3,
            wd_prompt: 0.0,
            wd_encoders: 0.02,
            wd_disc: 0.01,
            warmup_epochs: 5,
            buffer_per_epoch: false,
            seed: 0,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Values used with a pretrained backbone at full scale.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 256,
            main_epochs: 25,
            lr_encoders: 5e-7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DinError::Config(m));
        for (name, v) in [
            ("lr_prompt", self.lr_prompt),
            ("lr_encoders", self.lr_encoders),
            ("lr_disc", self.lr_disc),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("wd_prompt", self.wd_prompt),
            ("wd_encoders", self.wd_encoders),
            ("wd_disc", self.wd_disc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.k_shot == 0 {
            return err("k_shot must be positive".into());
        }
        if self.main_epochs == 0 {
            return err("main_epochs must be positive".into());
        }
        if self.warmup_epochs >= self.main_epochs {
            return err(format!(
                "warmup_epochs ({}) must be below main_epochs ({})",
                self.warmup_epochs, self.main_epochs
            ));
        }
        if !(self.prompt_epoch_scale > 0.0) {
            return err(format!("prompt_epoch_scale must be positive, got {}", self.prompt_epoch_scale));
        }
        Ok(())
    }

    /// 200 epochs for K ≥ 8, 100 for K ≥ 2, 50 for K = 1, times the scale.
    pub fn prompt_epochs_for(&self, k: usize) -> usize {
        if let Some(e) = self.prompt_epochs {
            return e;
        }
        let base = match k {
            0 | 1 => 50.0,
            2..=7 => 100.0,
            _ => 200.0,
        };
        ((base * self.prompt_epoch_scale).round() as usize).max(1)
    }
}

/// Episodic replay store filled from each finished task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBuffer {
    pub examples: Vec<LabeledExample>,
    /// Number of examples contributed by each task, in task order.
    pub contributions: Vec<usize>,
}

impl MemoryBuffer {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.examples.iter().map(|e| e.y).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Draws `m` examples per (class, visible domain) of `train`. When domain
    /// labels are withheld, `m × visible_domains` are drawn per class.
    pub fn sample(train: &[LabeledExample], m: usize, visible_domains: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledExample>> {
        if m == 0 || train.is_empty() {
            return Ok(Vec::new());
        }
        let labelled = train.iter().all(|e| e.domain().is_some());
        let per_cell = if labelled { m } else { m * visible_domains.max(1) };
        sample_kshot(train, per_cell, rng)
    }

    pub fn extend(&mut self, batch: Vec<LabeledExample>) {
        self.contributions.push(batch.len());
        self.examples.extend(batch);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Prompt,
    Main,
    Discriminator,
}

/// Groups an optimizer actually changed in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub task: usize,
    pub phase: Phase,
    pub stepped: Vec<GroupId>,
    pub rejected: Vec<GroupId>,
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub stage: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub disen: f64,
    pub adv: f64,
    pub cont: f64,
    pub total: f64,
    pub disc: f64,
}

pub const RUNLOG_HEADER: &str = "task,stage,epoch,lr,disen,adv,cont,total,disc";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let stage = match self.stage {
            Phase::Prompt => "prompt",
            Phase::Main => "main",
            Phase::Discriminator => "disc",
        };
        format!(
            "{},{stage},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.task, self.epoch, self.lr, self.disen, self.adv, self.cont, self.total, self.disc
        )
    }
}

/// Training-time bookkeeping used to audit a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Instrumentation {
    pub steps: Vec<StepRecord>,
    /// Examples of a later task visited while training an earlier one.
    pub future_leakage: usize,
    /// Target-domain examples visited during training.
    pub target_leakage: usize,
    pub buffer_sizes: Vec<usize>,
}

/// Everything a trainer needs besides the model.
pub struct Trainer<'a> {
    pub stream: &'a TaskStream,
    pub semantic: &'a SemanticTable,
    pub config: &'a TrainConfig,
    pub weights: &'a LossWeights,
    pub ablation: &'a Ablation,
    pub buffer: MemoryBuffer,
    pub log: Vec<EpochLog>,
    pub audit: Instrumentation,
    shuffle_rng: ChaCha8Rng,
    shot_rng: ChaCha8Rng,
    buffer_rng: ChaCha8Rng,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl<'a> Trainer<'a> {
    pub fn new(
        stream: &'a TaskStream,
        semantic: &'a SemanticTable,
        config: &'a TrainConfig,
        weights: &'a LossWeights,
        ablation: &'a Ablation,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        Ok(Self {
            stream,
            semantic,
            config,
            weights,
            ablation,
            buffer: MemoryBuffer::default(),
            log: Vec::new(),
            audit: Instrumentation::default(),
            shuffle_rng: seeded(config.seed, 20),
            shot_rng: seeded(config.seed, 21),
            buffer_rng: seeded(config.seed, 22),
        })
    }

    fn audit_examples(&mut self, task: usize, examples: &[&LabeledExample]) {
        let target = self.stream.config.target_domain;
        for e in examples {
            self.audit.future_leakage += usize::from(e.t > task);
            self.audit.target_leakage += usize::from(e.d == target);
        }
    }

    fn pool_for(&self, batch: &Batch) -> Vec<usize> {
        let mut pool = batch.distinct_classes();
        if self.ablation.use_buffer {
            pool.extend(self.buffer.classes());
            pool.sort_unstable();
            pool.dedup();
        }
        pool
    }

    fn set_phase(model: &mut DinModel, trainable: &[GroupId]) -> Result<()> {
        for id in model.group_ids() {
            model.set_frozen(id, !trainable.contains(&id))?;
        }
        Ok(())
    }

    fn step_groups(
        &mut self,
        model: &mut DinModel,
        task: usize,
        phase: Phase,
        groups: &[GroupId],
        mut step: impl FnMut(GroupId, &mut crate::autodiff::ParameterGroup) -> StepStatus,
    ) -> Result<()> {
        let mut record = StepRecord {
            task,
            phase,
            stepped: Vec::new(),
            rejected: Vec::new(),
        };
        for &id in groups {
            match step(id, model.group_mut(id)?) {
                StepStatus::Applied => record.stepped.push(id),
                StepStatus::SkippedFrozen => record.rejected.push(id),
            }
        }
        self.audit.steps.push(record);
        Ok(())
    }

    /// K-shot prompt learning on the global-only path. Returns the mean
    /// contrastive loss of every epoch.
    pub fn train_prompt_stage(&mut self, model: &mut DinModel, task: usize) -> Result<Vec<f64>> {
        let epochs = self.config.prompt_epochs_for(self.config.k_shot);
        Self::set_phase(model, &[GroupId::Prompt])?;
        let adam = AdamWConfig {
            weight_decay: self.config.wd_prompt,
            ..AdamWConfig::default()
        };
        let mut trajectory = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut shots = sample_kshot(&self.stream.tasks[task].train, self.config.k_shot, &mut self.shot_rng)?;
            shots.shuffle(&mut self.shuffle_rng);
            let mut losses = Vec::new();
            for chunk in shots.chunks(self.config.batch_size) {
                let refs: Vec<&LabeledExample> = chunk.iter().collect();
                self.audit_examples(task, &refs);
                let batch = Batch::from_examples(refs)?;
                let pool = self.pool_for(&batch);
                let mut fwd = Forward::new(&[GroupId::Prompt]);
                let x = fwd.tape.constant(batch.x.clone());
                let zg = model.encode_global(&mut fwd, x)?;
                let z = model.fuse_global_only(&mut fwd, zg)?;
                let protos = model.encode_text(&mut fwd, &pool, self.semantic)?;
                let loss = losses::contrastive_loss(&mut fwd.tape, z, &batch.classes, protos, &pool, self.weights.tau)?;
                losses.push(fwd.tape.scalar(loss));
                let grads = fwd.tape.backward(loss)?;
                fwd.accumulate_into(&grads, model)?;
                let lr = self.config.lr_prompt;
                self.step_groups(model, task, Phase::Prompt, &[GroupId::Prompt], |_, g| step_adamw(g, lr, &adam))?;
            }
            let m = mean(&losses);
            trajectory.push(m);
            self.log.push(EpochLog {
                task,
                stage: Phase::Prompt,
                epoch,
                lr: self.config.lr_prompt,
                disen: 0.0,
                adv: 0.0,
                cont: m,
                total: m,
                disc: 0.0,
            });
        }
        Ok(trajectory)
    }

    fn main_groups(&self, task: usize) -> Vec<GroupId> {
        let mut g = vec![GroupId::Global, GroupId::Text];
        if self.ablation.use_local {
            g.push(GroupId::Local(task));
        }
        g
    }

    fn disc_groups(&self) -> Vec<GroupId> {
        let mut g = Vec::new();
        if self.ablation.use_domain_disc {
            g.push(GroupId::DomainDisc);
        }
        if self.ablation.use_task_disc {
            g.push(GroupId::TaskDisc);
        }
        g
    }

    /// Main stage on the task's training data plus the replay buffer.
    pub fn train_main_stage(&mut self, model: &mut DinModel, task: usize) -> Result<()> {
        let main_groups = self.main_groups(task);
        let disc_groups = self.disc_groups();
        let mut phase_groups = main_groups.clone();
        phase_groups.extend(&disc_groups);
        Self::set_phase(model, &phase_groups)?;
        let adam = AdamWConfig {
            weight_decay: self.config.wd_encoders,
            ..AdamWConfig::default()
        };
        let train = &self.stream.tasks[task].train;
        for epoch in 0..self.config.main_epochs {
            let lr = cosine_lr(self.config.lr_encoders, epoch, self.config.main_epochs, self.config.warmup_epochs)?;
            let replay = if self.ablation.use_buffer {
                self.buffer.examples.clone()
            } else {
                Vec::new()
            };
            let mut order: Vec<&LabeledExample> = train.iter().chain(&replay).collect();
            order.shuffle(&mut self.shuffle_rng);
            let mut parts: Vec<LossBreakdown> = Vec::new();
            let mut disc_losses = Vec::new();
            for chunk in order.chunks(self.config.batch_size) {
                self.audit_examples(task, chunk);
                let batch = Batch::from_examples(chunk.iter().copied())?;
                let pool = self.pool_for(&batch);

                let mut fwd = Forward::new(&main_groups);
                let (loss, breakdown) = losses::total_loss(
                    &mut fwd,
                    model,
                    &batch,
                    &pool,
                    self.semantic,
                    self.weights,
                    self.ablation,
                    task,
                )?;
                parts.push(breakdown);
                let grads = fwd.tape.backward(loss)?;
                fwd.accumulate_into(&grads, model)?;
                self.step_groups(model, task, Phase::Main, &main_groups, |_, g| step_adamw(g, lr, &adam))?;

                if disc_groups.is_empty() {
                    continue;
                }
                for _ in 0..self.config.disc_steps {
                    let mut fwd = Forward::new(&disc_groups);
                    let x = fwd.tape.constant(batch.x.clone());
                    let zg = model.encode_global(&mut fwd, x)?;
                    let loss =
                        losses::adv_loss_discriminator(&mut fwd, model, zg, &batch, self.weights, self.ablation)?;
                    disc_losses.push(fwd.tape.scalar(loss));
                    let grads = fwd.tape.backward(loss)?;
                    fwd.accumulate_into(&grads, model)?;
                    let (lr_d, wd_d) = (self.config.lr_disc, self.config.wd_disc);
                    self.step_groups(model, task, Phase::Discriminator, &disc_groups, |_, g| {
                        step_sgd(g, lr_d, wd_d)
                    })?;
                }
            }
            self.log.push(EpochLog {
                task,
                stage: Phase::Main,
                epoch,
                lr,
                disen: mean(&parts.iter().map(|p| p.disen).collect::<Vec<_>>()),
                adv: mean(&parts.iter().map(|p| p.adv).collect::<Vec<_>>()),
                cont: mean(&parts.iter().map(|p| p.cont).collect::<Vec<_>>()),
                total: mean(&parts.iter().map(|p| p.total).collect::<Vec<_>>()),
                disc: mean(&disc_losses),
            });
            if self.ablation.use_buffer && self.config.buffer_per_epoch {
                self.extend_buffer(task)?;
            }
        }
        if self.ablation.use_buffer && !self.config.buffer_per_epoch {
            self.extend_buffer(task)?;
        }
        model.zero_grad();
        Ok(())
    }

    fn extend_buffer(&mut self, task: usize) -> Result<()> {
        let t = &self.stream.tasks[task];
        let picked = MemoryBuffer::sample(
            &t.train,
            self.config.buffer_per_class,
            t.visible_domains.len(),
            &mut self.buffer_rng,
        )?;
        self.buffer.extend(picked);
        Ok(())
    }

    /// Prompt stage (when enabled) followed by the main stage for `task`.
    pub fn train_task(&mut self, model: &mut DinModel, task: usize) -> Result<Option<Vec<f64>>> {
        if self.ablation.use_local {
            model.start_task(task)?;
        }
        let prompt = if self.ablation.use_prompt_stage {
            Some(self.train_prompt_stage(model, task)?)
        } else {
            None
        };
        self.train_main_stage(model, task)?;
        self.audit.buffer_sizes.push(self.buffer.len());
        Ok(prompt)
    }
}

/// Model shape matching a stream; the remaining fields come from `base`.
pub fn model_config_for(stream: &TaskStream, semantic: &SemanticTable, base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        feature_dim: stream.config.feature_dim,
        semantic_dim: semantic.dim(),
        num_classes: stream.config.num_classes,
        num_domains: stream.config.num_domains,
        num_tasks: stream.num_tasks(),
        ..base.clone()
    }
}

/// Outcome of training over a whole stream.
#[derive(Clone, Debug)]
pub struct RunResult {
    /// Square accuracy matrix for continual streams.
    pub matrix: Option<AccuracyMatrix>,
    /// Rows filled so far, kept when a task fails.
    pub partial_rows: Vec<Vec<f64>>,
    pub zero_shot: Option<ZeroShotMetrics>,
    pub snapshots: Vec<DinModel>,
    pub prompt_losses: Vec<Vec<f64>>,
    pub log: Vec<EpochLog>,
    pub audit: Instrumentation,
    pub failure: Option<String>,
}

fn continual_zero_shot(
    snapshots: &[DinModel],
    stream: &TaskStream,
    semantic: &SemanticTable,
    eval: &EvalConfig,
) -> Result<Option<ZeroShotMetrics>> {
    let pool = stream.all_classes();
    let per_snapshot = snapshots
        .iter()
        .enumerate()
        .take(stream.num_tasks().saturating_sub(1))
        .map(|(t, m)| {
            let table = evaluation::score_table(m, stream, semantic, t, &pool, eval)?;
            ZeroShotMetrics::from_table(&table, eval.gamma_points)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((!per_snapshot.is_empty()).then(|| ZeroShotMetrics::mean(&per_snapshot)))
}

fn split_zero_shot(
    model: &DinModel,
    stream: &TaskStream,
    semantic: &SemanticTable,
    eval: &EvalConfig,
) -> Result<ZeroShotMetrics> {
    let pool = match stream.config.mode {
        crate::data::SplitMode::Dazsl => stream.tasks[1].classes.clone(),
        _ => stream.all_classes(),
    };
    let table = evaluation::score_table(model, stream, semantic, 0, &pool, eval)?;
    ZeroShotMetrics::from_table(&table, eval.gamma_points)
}

/// Trains task by task, snapshotting and evaluating after each one.
/// Zero-shot split streams train only their seen block.
pub fn run_sequence(
    stream: &TaskStream,
    semantic: &SemanticTable,
    model_config: &ModelConfig,
    config: &TrainConfig,
    weights: &LossWeights,
    ablation: &Ablation,
) -> Result<RunResult> {
    let mut model = DinModel::new(model_config_for(stream, semantic, model_config))?;
    let mut trainer = Trainer::new(stream, semantic, config, weights, ablation)?;
    let continual = stream.config.mode.is_continual();
    let trained_tasks = if continual { stream.num_tasks() } else { 1 };
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    let mut prompt_losses = Vec::new();
    let mut failure = None;
    for t in 0..trained_tasks {
        let step = (|| -> Result<()> {
            if ablation.train {
                if let Some(p) = trainer.train_task(&mut model, t)? {
                    prompt_losses.push(p);
                }
            }
            if continual {
                rows.push(evaluation::accuracy_row(&model, stream, semantic, t, &config.eval)?);
            }
            Ok(())
        })();
        if let Err(e) = step {
            failure = Some(format!("task {t}: {e}"));
            break;
        }
        snapshots.push(model.clone());
    }
    let mut result = RunResult {
        matrix: None,
        partial_rows: rows.clone(),
        zero_shot: None,
        snapshots,
        prompt_losses,
        log: std::mem::take(&mut trainer.log),
        audit: std::mem::take(&mut trainer.audit),
        failure,
    };
    if result.failure.is_some() {
        return Ok(result);
    }
    if continual {
        result.matrix = Some(AccuracyMatrix::from_rows(rows)?);
        result.zero_shot = continual_zero_shot(&result.snapshots, stream, semantic, &config.eval)?;
    } else {
        result.zero_shot = Some(split_zero_shot(&model, stream, semantic, &config.eval)?);
    }
    Ok(result)
}

/// Per-class counts of a buffer, keyed by `(class, domain)`.
pub fn buffer_cells(buffer: &MemoryBuffer) -> BTreeMap<(usize, usize), usize> {
    let mut cells = BTreeMap::new();
    for e in &buffer.examples {
        *cells.entry((e.y, e.d)).or_insert(0) += 1;
    }
    cells
}
