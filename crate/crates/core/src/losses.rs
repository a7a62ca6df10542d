//! Loss terms of the training objective and their weighted total.

use serde::{Deserialize, Serialize};

use crate::ablation::Ablation;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{LabeledExample, SemanticTable};
use crate::error::{DinError, Result};
use crate::model::{DinModel, Discriminator, Forward};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_disen: f64,
    pub lambda_adv: f64,
    pub lambda_cont: f64,
    /// Weight of the task-discriminator cross-entropy.
    pub alpha: f64,
    /// Weight of the domain-discriminator cross-entropy.
    pub beta: f64,
    pub tau: f64,
    pub lambda_grl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_disen: 0.1,
            lambda_adv: 0.1,
            lambda_cont: 1.0,
            alpha: 1.0,
            beta: 1.0,
            tau: 0.07,
            lambda_grl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(DinError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        let named = [
            ("lambda_disen", self.lambda_disen),
            ("lambda_adv", self.lambda_adv),
            ("lambda_cont", self.lambda_cont),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_grl", self.lambda_grl),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DinError::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Rows of examples with their labels, ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub classes: Vec<usize>,
    /// `None` where the domain label is withheld.
    pub domains: Vec<Option<usize>>,
    pub tasks: Vec<usize>,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a LabeledExample>) -> Result<Self> {
        let mut rows = Vec::new();
        let (mut classes, mut domains, mut tasks) = (Vec::new(), Vec::new(), Vec::new());
        for e in examples {
            rows.push(e.x.as_slice());
            classes.push(e.y);
            domains.push(e.domain());
            tasks.push(e.t);
        }
        if rows.is_empty() {
            return Err(DinError::Config("empty batch".into()));
        }
        Ok(Self {
            x: Tensor::from_rows(&rows)?,
            classes,
            domains,
            tasks,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Sorted distinct classes of the batch.
    pub fn distinct_classes(&self) -> Vec<usize> {
        let mut c = self.classes.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub disen: f64,
    pub adv: f64,
    pub cont: f64,
    pub total: f64,
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Batch mean of `Σ_s ⟨z_s, z_G⟩²`.
pub fn disen_loss(tape: &mut Tape, z_locals: &[Var], z_global: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &z in z_locals {
        let d = tape.row_dot(z, z_global)?;
        let sq = tape.square(d);
        let m = tape.mean(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    Ok(acc.unwrap_or_else(|| zero(tape)))
}

/// Mean cross-entropy of `sims / tau` against pool indices.
pub fn contrastive_from_similarities(tape: &mut Tape, sims: Var, targets: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(DinError::Config(format!("tau must be positive, got {tau}")));
    }
    let logits = tape.scale(sims, 1.0 / tau);
    tape.log_softmax_nll(logits, targets)
}

/// Contrastive prototype loss. `prototypes` holds one row per class of
/// `pool`; similarities are cosines.
pub fn contrastive_loss(
    tape: &mut Tape,
    z: Var,
    targets: &[usize],
    prototypes: Var,
    pool: &[usize],
    tau: f64,
) -> Result<Var> {
    let idx = targets
        .iter()
        .map(|&c| {
            pool.iter().position(|&p| p == c).ok_or(DinError::Lookup {
                what: "text prototype",
                class: c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if tape.value(prototypes).rows() != pool.len() {
        return Err(DinError::shape(
            "contrastive_loss",
            tape.value(prototypes).shape(),
            &[pool.len()],
        ));
    }
    let zn = tape.normalize_rows(z)?;
    let tn = tape.normalize_rows(prototypes)?;
    let tt = tape.transpose(tn)?;
    let sims = tape.matmul(zn, tt)?;
    contrastive_from_similarities(tape, sims, &idx, tau)
}

fn known_domains(batch: &Batch) -> (Vec<usize>, Vec<usize>) {
    batch
        .domains
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.map(|d| (i, d)))
        .unzip()
}

fn adversarial_terms(
    fwd: &mut Forward,
    model: &DinModel,
    z_global: Var,
    batch: &Batch,
    weights: &LossWeights,
    ablation: &Ablation,
    grl: Option<f64>,
) -> Result<Var> {
    let logits = |fwd: &mut Forward, z: Var, which| match grl {
        Some(lambda) => model.discriminate(fwd, z, which, lambda),
        None => model.discriminator_logits(fwd, z, which),
    };
    let mut total = zero(&mut fwd.tape);
    if ablation.use_task_disc && weights.alpha != 0.0 {
        let l = logits(fwd, z_global, Discriminator::Task)?;
        let ce = fwd.tape.log_softmax_nll(l, &batch.tasks)?;
        let ce = fwd.tape.scale(ce, weights.alpha);
        total = fwd.tape.add(total, ce)?;
    }
    let (rows, domains) = known_domains(batch);
    if ablation.use_domain_disc && weights.beta != 0.0 && !rows.is_empty() {
        let z = if rows.len() == batch.len() {
            z_global
        } else {
            fwd.tape.select_rows(z_global, &rows)?
        };
        let l = logits(fwd, z, Discriminator::Domain)?;
        let ce = fwd.tape.log_softmax_nll(l, &domains)?;
        let ce = fwd.tape.scale(ce, weights.beta);
        total = fwd.tape.add(total, ce)?;
    }
    Ok(total)
}

/// `α·CE(task) + β·CE(domain)` with both discriminators behind the
/// gradient-reversal layer, so minimizing it pushes `G` towards features
/// the discriminators cannot separate. Rows without a domain label are
/// left out of the domain term.
pub fn adv_loss_generator(
    fwd: &mut Forward,
    model: &DinModel,
    z_global: Var,
    batch: &Batch,
    weights: &LossWeights,
    ablation: &Ablation,
) -> Result<Var> {
    adversarial_terms(fwd, model, z_global, batch, weights, ablation, Some(weights.lambda_grl))
}

/// The same cross-entropies on a detached copy of `z_G`, for stepping the
/// discriminators.
pub fn adv_loss_discriminator(
    fwd: &mut Forward,
    model: &DinModel,
    z_global: Var,
    batch: &Batch,
    weights: &LossWeights,
    ablation: &Ablation,
) -> Result<Var> {
    let z = fwd.tape.detach(z_global);
    adversarial_terms(fwd, model, z, batch, weights, ablation, None)
}

/// Embeddings produced by one forward pass over a batch.
pub struct Encoded {
    pub z_global: Var,
    pub z_locals: Vec<Var>,
    pub fused: Var,
}

/// Runs the encoders on `batch`. Each row is routed through the local net
/// of its own task; every instantiated local net up to `current_task` is
/// evaluated for the disentanglement term.
pub fn encode_batch(
    fwd: &mut Forward,
    model: &DinModel,
    batch: &Batch,
    ablation: &Ablation,
    current_task: usize,
) -> Result<Encoded> {
    let x = fwd.tape.constant(batch.x.clone());
    let z_global = model.encode_global(fwd, x)?;
    if !ablation.use_local {
        let fused = model.fuse_global_only(fwd, z_global)?;
        return Ok(Encoded {
            z_global,
            z_locals: Vec::new(),
            fused,
        });
    }
    if let Some(&t) = batch.tasks.iter().find(|&&t| t > current_task) {
        return Err(DinError::Lifecycle(format!(
            "example of task {t} in a batch for task {current_task}"
        )));
    }
    let n = batch.len();
    let z_locals = (0..=current_task)
        .map(|s| model.encode_local(fwd, x, s))
        .collect::<Result<Vec<_>>>()?;
    let z_local = if z_locals.len() == 1 {
        z_locals[0]
    } else {
        let stacked = fwd.tape.concat_rows(&z_locals)?;
        let routes: Vec<usize> = batch.tasks.iter().enumerate().map(|(i, &t)| t * n + i).collect();
        fwd.tape.select_rows(stacked, &routes)?
    };
    let fused = model.fuse(fwd, z_local, z_global)?;
    Ok(Encoded {
        z_global,
        z_locals,
        fused,
    })
}

/// `λ₁·L_disen + λ₂·L_adv + λ₃·L_cont` over `batch`, with `pool` as the
/// contrastive class pool. Components disabled by `ablation` contribute 0.
///
/// The disentanglement term is taken on unit-normalized embeddings; on raw
/// outputs it can be driven to zero by shrinking norms alone.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    fwd: &mut Forward,
    model: &DinModel,
    batch: &Batch,
    pool: &[usize],
    semantic: &SemanticTable,
    weights: &LossWeights,
    ablation: &Ablation,
    current_task: usize,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let enc = encode_batch(fwd, model, batch, ablation, current_task)?;
    let protos = model.encode_text(fwd, pool, semantic)?;
    let cont = contrastive_loss(&mut fwd.tape, enc.fused, &batch.classes, protos, pool, weights.tau)?;
    let disen = if ablation.use_disen && ablation.use_local {
        let zl = enc
            .z_locals
            .iter()
            .map(|&z| fwd.tape.normalize_rows(z))
            .collect::<Result<Vec<_>>>()?;
        let zg = fwd.tape.normalize_rows(enc.z_global)?;
        disen_loss(&mut fwd.tape, &zl, zg)?
    } else {
        zero(&mut fwd.tape)
    };
    let adv = adv_loss_generator(fwd, model, enc.z_global, batch, weights, ablation)?;
    let t = &mut fwd.tape;
    let parts = [
        t.scale(disen, weights.lambda_disen),
        t.scale(adv, weights.lambda_adv),
        t.scale(cont, weights.lambda_cont),
    ];
    let sum = t.add(parts[0], parts[1])?;
    let total = t.add(sum, parts[2])?;
    let breakdown = LossBreakdown {
        disen: t.scalar(disen),
        adv: t.scalar(adv),
        cont: t.scalar(cont),
        total: t.scalar(total),
    };
    Ok((total, breakdown))
}
