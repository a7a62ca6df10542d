#![allow(dead_code)]

use din_core::ablation::Ablation;
use din_core::autodiff::{Tape, Tensor, Var};
use din_core::data::SemanticTable;
use din_core::losses::{self, Batch, LossWeights};
use din_core::metrics::{AccuracyMatrix, ScoreTable};
use din_core::model::{Discriminator, DinModel, Forward, GroupId, ModelConfig};
use din_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Pushes entries out of `(-margin, margin)` so a kink cannot sit inside the
/// finite-difference stencil.
pub fn away_from_zero(t: &mut Tensor, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, 1e-3)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / (norm(a) + norm(b)).max(1e-3)
}

pub const FD_STEP: f64 = 1e-6;

/// Analytic vs central-difference gradient of `Σ w ⊙ f(inputs)` for a random
/// projection `w`; `factor` scales the numeric side.
pub fn check_op_scaled<F>(inputs: &[Tensor], rng: &mut ChaCha8Rng, factor: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let out_len = tape.value(out).len();
    let w: Vec<f64> = (0..out_len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let grads = tape.backward_with(out, &w).unwrap();
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        analytic.extend(grads.get_or_zeros(*v, t.len()));
    }
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let mut numeric = Vec::new();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x0;
            numeric.push(factor * (up - down) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

pub fn check_op<F>(inputs: &[Tensor], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_op_scaled(inputs, rng, 1.0, f)
}

pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        embed_dim: 4,
        hidden_dim: 8,
        text_hidden_dim: 8,
        prompt_length: 2,
        dim_per_token: 3,
        semantic_dim: 5,
        disc_hidden_dim: 8,
        num_classes: 6,
        num_domains: 3,
        num_tasks: 2,
        seed,
        ..ModelConfig::default()
    }
}

pub fn random_semantic(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> SemanticTable {
    let rows = (0..classes)
        .map(|_| {
            let r: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = norm(&r);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    SemanticTable::new(rows).unwrap()
}

/// A tiny two-task model with both local nets instantiated, a matching
/// semantic table and a random batch spanning both tasks.
pub struct ModelFixture {
    pub model: DinModel,
    pub semantic: SemanticTable,
    pub batch: Batch,
    pub pool: Vec<usize>,
}

pub fn model_fixture(seed: u64) -> ModelFixture {
    let mut r = rng(seed.wrapping_add(1000));
    let cfg = tiny_model_config(seed);
    let mut model = DinModel::new(cfg.clone()).unwrap();
    model.start_task(0).unwrap();
    model.start_task(1).unwrap();
    let semantic = random_semantic(&mut r, cfg.num_classes, cfg.semantic_dim);
    let n = 5;
    let tasks: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    let classes: Vec<usize> = tasks.iter().map(|&t| 3 * t + r.random_range(0..3)).collect();
    let domains: Vec<Option<usize>> = (0..n)
        .map(|i| if i == 0 { None } else { Some(r.random_range(0..cfg.num_domains)) })
        .collect();
    let batch = Batch {
        x: randn(&mut r, n, cfg.feature_dim),
        classes,
        domains,
        tasks,
    };
    ModelFixture {
        model,
        semantic,
        batch,
        pool: (0..cfg.num_classes).collect(),
    }
}

/// Analytic vs central-difference gradient of a scalar built from `model`,
/// over `coords` random coordinates of the groups in `ids`.
pub fn check_model_scaled<F>(
    model: &DinModel,
    ids: &[GroupId],
    coords: usize,
    rng: &mut ChaCha8Rng,
    factor: f64,
    f: F,
) -> f64
where
    F: Fn(&mut Forward, &DinModel) -> Result<Var>,
{
    let mut fwd = Forward::new(ids);
    let root = f(&mut fwd, model).unwrap();
    let grads = fwd.tape.backward(root).unwrap();
    let mut with_grads = model.clone();
    with_grads.zero_grad();
    fwd.accumulate_into(&grads, &mut with_grads).unwrap();
    let eval = |m: &DinModel| -> f64 {
        let mut fwd = Forward::new(ids);
        let root = f(&mut fwd, m).unwrap();
        fwd.tape.scalar(root)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = model.clone();
    for _ in 0..coords {
        let id = ids[rng.random_range(0..ids.len())];
        let n_tensors = model.group(id).unwrap().tensors.len();
        let ti = rng.random_range(0..n_tensors);
        let len = model.group(id).unwrap().tensors[ti].len();
        let j = rng.random_range(0..len);
        let g = with_grads.group(id).unwrap().tensors[ti].grad().map_or(0.0, |g| g[j]);
        analytic.push(g);
        let x0 = model.group(id).unwrap().tensors[ti].data()[j];
        work.group_mut(id).unwrap().tensors[ti].data_mut()[j] = x0 + FD_STEP;
        let up = eval(&work);
        work.group_mut(id).unwrap().tensors[ti].data_mut()[j] = x0 - FD_STEP;
        let down = eval(&work);
        work.group_mut(id).unwrap().tensors[ti].data_mut()[j] = x0;
        numeric.push(factor * (up - down) / (2.0 * FD_STEP));
    }
    rel_err(&analytic, &numeric)
}

pub const TRIALS: u64 = 100;

/// Worst relative error over `TRIALS` randomized trials of one check.
pub fn worst(check: impl Fn(u64) -> f64) -> f64 {
    (0..TRIALS).map(check).fold(0.0, f64::max)
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

/// Every tape operation and loss term with its worst finite-difference error.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    out.push(("matmul", worst(|s| {
        let mut r = rng(s);
        let (m, k, n) = dims(&mut r);
        let ins = [randn(&mut r, m, k), randn(&mut r, k, n)];
        check_op(&ins, &mut r, |t, v| t.matmul(v[0], v[1]))
    })));
    out.push(("transpose", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let ins = [randn(&mut r, m, n)];
        check_op(&ins, &mut r, |t, v| t.transpose(v[0]))
    })));
    out.push(("add", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let ins = [randn(&mut r, m, n), randn(&mut r, m, n)];
        check_op(&ins, &mut r, |t, v| t.add(v[0], v[1]))
    })));
    out.push(("add_row", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let ins = [randn(&mut r, m, n), randn(&mut r, 1, n)];
        check_op(&ins, &mut r, |t, v| t.add_row(v[0], v[1]))
    })));
    out.push(("scale", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let k: f64 = r.random_range(-3.0..3.0);
        let ins = [randn(&mut r, m, n)];
        check_op(&ins, &mut r, |t, v| Ok(t.scale(v[0], k)))
    })));
    out.push(("leaky_relu", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let slope: f64 = r.random_range(0.01..0.5);
        let mut x = randn(&mut r, m, n);
        away_from_zero(&mut x, 1e-3);
        check_op(&[x], &mut r, |t, v| Ok(t.leaky_relu(v[0], slope)))
    })));
    out.push(("normalize_rows", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let ins = [randn(&mut r, m, n + 1)];
        check_op(&ins, &mut r, |t, v| t.normalize_rows(v[0]))
    })));
    out.push(("grad_reverse", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let lambda: f64 = r.random_range(0.0..2.0);
        let ins = [randn(&mut r, m, n)];
        check_op_scaled(&ins, &mut r, -lambda, |t, v| Ok(t.grad_reverse(v[0], lambda)))
    })));
    out.push(("concat_cols", worst(|s| {
        let mut r = rng(s);
        let (m, a, b) = dims(&mut r);
        let ins = [randn(&mut r, m, a), randn(&mut r, m, b)];
        check_op(&ins, &mut r, |t, v| t.concat_cols(v[0], v[1]))
    })));
    out.push(("concat_rows", worst(|s| {
        let mut r = rng(s);
        let (a, b, n) = dims(&mut r);
        let ins = [randn(&mut r, a, n), randn(&mut r, b, n), randn(&mut r, 1, n)];
        check_op(&ins, &mut r, |t, v| t.concat_rows(v))
    })));
    out.push(("select_rows", worst(|s| {
        let mut r = rng(s);
        let (m, n, k) = dims(&mut r);
        let idx: Vec<usize> = (0..k + 2).map(|_| r.random_range(0..m)).collect();
        let ins = [randn(&mut r, m, n)];
        check_op(&ins, &mut r, |t, v| t.select_rows(v[0], &idx))
    })));
    out.push(("row_dot", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let ins = [randn(&mut r, m, n), randn(&mut r, m, n)];
        check_op(&ins, &mut r, |t, v| t.row_dot(v[0], v[1]))
    })));
    out.push(("square", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let ins = [randn(&mut r, m, n)];
        check_op(&ins, &mut r, |t, v| Ok(t.square(v[0])))
    })));
    out.push(("sum", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let ins = [randn(&mut r, m, n)];
        check_op(&ins, &mut r, |t, v| Ok(t.sum(v[0])))
    })));
    out.push(("mean", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let ins = [randn(&mut r, m, n)];
        check_op(&ins, &mut r, |t, v| Ok(t.mean(v[0])))
    })));
    out.push(("log_softmax_nll", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n + 1)).collect();
        let ins = [randn(&mut r, m, n + 1)];
        check_op(&ins, &mut r, |t, v| t.log_softmax_nll(v[0], &targets))
    })));
    out.push(("cosine_similarity", worst(|s| {
        let mut r = rng(s);
        let (m, k, _) = dims(&mut r);
        let ins = [randn(&mut r, m, k + 1), randn(&mut r, m, k + 1)];
        check_op(&ins, &mut r, |t, v| t.cosine_similarity(v[0], v[1]))
    })));
    out.push(("disen_loss", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let ins = [randn(&mut r, m, n), randn(&mut r, m, n), randn(&mut r, m, n)];
        check_op(&ins, &mut r, |t, v| losses::disen_loss(t, &v[..2], v[2]))
    })));
    out.push(("contrastive_from_similarities", worst(|s| {
        let mut r = rng(s);
        let (m, n, _) = dims(&mut r);
        let tau: f64 = r.random_range(0.05..1.0);
        let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n + 1)).collect();
        let ins = [randn(&mut r, m, n + 1)];
        check_op(&ins, &mut r, |t, v| losses::contrastive_from_similarities(t, v[0], &targets, tau))
    })));
    out.push(("contrastive_loss", worst(|s| {
        let mut r = rng(s);
        let (m, c, k) = dims(&mut r);
        let pool: Vec<usize> = (0..c + 1).map(|i| 10 + 3 * i).collect();
        let targets: Vec<usize> = (0..m).map(|_| pool[r.random_range(0..pool.len())]).collect();
        let tau: f64 = r.random_range(0.05..1.0);
        let ins = [randn(&mut r, m, k + 1), randn(&mut r, c + 1, k + 1)];
        check_op(&ins, &mut r, |t, v| losses::contrastive_loss(t, v[0], &targets, v[1], &pool, tau))
    })));
    let discs = [GroupId::DomainDisc, GroupId::TaskDisc];
    out.push(("adv_loss_discriminator", worst(|s| {
        let fx = model_fixture(s);
        let mut r = rng(s);
        let w = LossWeights::default();
        check_model_scaled(&fx.model, &discs, 20, &mut r, 1.0, |fwd, m| {
            let x = fwd.tape.constant(fx.batch.x.clone());
            let z = m.encode_global(fwd, x)?;
            losses::adv_loss_discriminator(fwd, m, z, &fx.batch, &w, &Ablation::full())
        })
    })));
    out.push(("adv_loss_generator (discriminators)", worst(|s| {
        let fx = model_fixture(s);
        let mut r = rng(s);
        let w = LossWeights::default();
        check_model_scaled(&fx.model, &discs, 20, &mut r, 1.0, |fwd, m| {
            let x = fwd.tape.constant(fx.batch.x.clone());
            let z = m.encode_global(fwd, x)?;
            losses::adv_loss_generator(fwd, m, z, &fx.batch, &w, &Ablation::full())
        })
    })));
    out.push(("adv_loss_generator (reversed into G)", worst(|s| {
        let fx = model_fixture(s);
        let mut r = rng(s);
        let w = LossWeights {
            lambda_grl: 0.5 + (s % 4) as f64 * 0.5,
            ..LossWeights::default()
        };
        check_model_scaled(&fx.model, &[GroupId::Global], 20, &mut r, -w.lambda_grl, |fwd, m| {
            let x = fwd.tape.constant(fx.batch.x.clone());
            let z = m.encode_global(fwd, x)?;
            losses::adv_loss_generator(fwd, m, z, &fx.batch, &w, &Ablation::full())
        })
    })));
    out.push(("total_loss (no adversary)", worst(|s| {
        let fx = model_fixture(s);
        let mut r = rng(s);
        let ids = [GroupId::Prompt, GroupId::Text, GroupId::Global, GroupId::Local(0), GroupId::Local(1)];
        let ab = Ablation::preset("a5").unwrap();
        check_model_scaled(&fx.model, &ids, 30, &mut r, 1.0, |fwd, m| {
            let w = LossWeights::default();
            Ok(losses::total_loss(fwd, m, &fx.batch, &fx.pool, &fx.semantic, &w, &ab, 1)?.0)
        })
    })));
    out.push(("total_loss (full, off the reversal path)", worst(|s| {
        let fx = model_fixture(s);
        let mut r = rng(s);
        let ids = [
            GroupId::Prompt,
            GroupId::Text,
            GroupId::Local(0),
            GroupId::Local(1),
            GroupId::DomainDisc,
            GroupId::TaskDisc,
        ];
        check_model_scaled(&fx.model, &ids, 30, &mut r, 1.0, |fwd, m| {
            let w = LossWeights::default();
            Ok(losses::total_loss(fwd, m, &fx.batch, &fx.pool, &fx.semantic, &w, &Ablation::full(), 1)?.0)
        })
    })));
    out
}

/// Generator-side gradients of `G` from the discriminator CE with and
/// without the reversal layer. Returns (reversed, plain).
pub fn grl_gradients(seed: u64, which: Discriminator, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let fx = model_fixture(seed);
    let targets: Vec<usize> = match which {
        Discriminator::Domain => fx.batch.domains.iter().map(|d| d.unwrap_or(0)).collect(),
        Discriminator::Task => fx.batch.tasks.clone(),
    };
    let run = |reverse: bool| -> Vec<f64> {
        let mut fwd = Forward::new(&[GroupId::Global]);
        let x = fwd.tape.constant(fx.batch.x.clone());
        let z = fx.model.encode_global(&mut fwd, x).unwrap();
        let logits = if reverse {
            fx.model.discriminate(&mut fwd, z, which, lambda).unwrap()
        } else {
            fx.model.discriminator_logits(&mut fwd, z, which).unwrap()
        };
        let loss = fwd.tape.log_softmax_nll(logits, &targets).unwrap();
        let grads = fwd.tape.backward(loss).unwrap();
        let mut m = fx.model.clone();
        m.zero_grad();
        fwd.accumulate_into(&grads, &mut m).unwrap();
        m.group(GroupId::Global)
            .unwrap()
            .tensors
            .iter()
            .flat_map(|t| t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    };
    (run(true), run(false))
}

// Brute-force metric oracles, written directly from the definitions.

pub fn oracle_ls(r: &[Vec<f64>]) -> f64 {
    let t = r.len();
    let mut s = 0.0;
    for k in 0..t {
        s += r[t - 1][k];
    }
    s / t as f64
}

pub fn oracle_ms(r: &[Vec<f64>], raw: bool) -> f64 {
    let t_max = r.len();
    let mut outer = 0.0;
    for t in 0..t_max {
        let mut inner = 0.0;
        let mut count = 0;
        for k in 0..=t {
            inner += r[t][k];
            count += 1;
        }
        outer += if raw { inner } else { inner / count as f64 };
    }
    outer / t_max as f64
}

pub fn oracle_mu(r: &[Vec<f64>], raw: bool) -> Option<f64> {
    let t_max = r.len();
    if t_max < 2 {
        return None;
    }
    let mut outer = 0.0;
    for t in 0..t_max - 1 {
        let mut inner = 0.0;
        let mut count = 0;
        for k in t + 1..t_max {
            inner += r[t][k];
            count += 1;
        }
        outer += if raw { inner } else { inner / count as f64 };
    }
    Some(outer / (t_max - 1) as f64)
}

pub fn oracle_mh(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn oracle_bwt(r: &[Vec<f64>], raw: bool) -> Option<f64> {
    let t_max = r.len();
    if t_max < 2 {
        return None;
    }
    let mut s = 0.0;
    for t in 0..t_max - 1 {
        s += r[t_max - 1][t] - r[t][t];
    }
    Some(if raw { s } else { s / (t_max - 1) as f64 })
}

pub fn oracle_predict(table: &ScoreTable, row: usize, gamma: f64) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for i in 0..table.pool.len() {
        let mut v = table.scores[row][i];
        if table.seen[i] {
            v -= gamma;
        }
        let c = table.pool[i];
        best = match best {
            None => Some((v, c)),
            Some((bv, bc)) if v > bv || (v == bv && c < bc) => Some((v, c)),
            keep => keep,
        };
    }
    best.unwrap().1
}

pub fn oracle_macro(table: &ScoreTable, subset: &[usize], gamma: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut classes = 0;
    for &c in subset {
        let mut total = 0;
        let mut correct = 0;
        for i in 0..table.labels.len() {
            if table.labels[i] == c {
                total += 1;
                if oracle_predict(table, i, gamma) == c {
                    correct += 1;
                }
            }
        }
        if total > 0 {
            sum += correct as f64 / total as f64;
            classes += 1;
        }
    }
    (classes > 0).then(|| sum / classes as f64)
}

/// Area under the (seen, unseen) curve over `grid`, with the two axis
/// endpoints added, by insertion sort and slab integration.
pub fn oracle_suauc(table: &ScoreTable, grid: &[f64]) -> Option<f64> {
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for (i, &c) in table.pool.iter().enumerate() {
        if table.seen[i] {
            seen.push(c);
        } else {
            unseen.push(c);
        }
    }
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for &g in grid {
        pts.push((oracle_macro(table, &seen, g)?, oracle_macro(table, &unseen, g)?));
    }
    let mut s_max: f64 = 0.0;
    let mut u_max: f64 = 0.0;
    for &(s, u) in &pts {
        s_max = s_max.max(s);
        u_max = u_max.max(u);
    }
    pts.push((0.0, u_max));
    pts.push((s_max, 0.0));
    for i in 1..pts.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (pts[j - 1], pts[j]);
            if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
                pts.swap(j - 1, j);
                j -= 1;
            } else {
                break;
            }
        }
    }
    let mut area = 0.0;
    for i in 0..pts.len() - 1 {
        let ds = pts[i + 1].0 - pts[i].0;
        area += ds * pts[i].1 + 0.5 * ds * (pts[i + 1].1 - pts[i].1);
    }
    Some(area)
}

pub fn random_matrix(rng: &mut ChaCha8Rng) -> AccuracyMatrix {
    let t = rng.random_range(1..7);
    let rows = (0..t)
        .map(|_| (0..t).map(|_| rng.random_range(0.0..=1.0)).collect())
        .collect();
    AccuracyMatrix::from_rows(rows).unwrap()
}

/// Random score table over a shuffled pool with both seen and unseen
/// classes; every other table uses coarse scores so ties occur.
pub fn random_score_table(rng: &mut ChaCha8Rng, trial: u64) -> ScoreTable {
    let c = rng.random_range(2..9);
    let mut pool: Vec<usize> = (0..c).map(|i| 2 * i + rng.random_range(0..2)).collect();
    pool.shuffle(rng);
    let mut seen: Vec<bool> = (0..c).map(|_| rng.random_bool(0.5)).collect();
    seen[0] = true;
    seen[1] = false;
    seen.shuffle(rng);
    let n = rng.random_range(1..31);
    let coarse = trial % 2 == 0;
    let scores = (0..n)
        .map(|_| {
            (0..c)
                .map(|_| {
                    if coarse {
                        rng.random_range(0..4) as f64 * 0.25
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect();
    let labels = (0..n).map(|_| pool[rng.random_range(0..c)]).collect();
    ScoreTable::new(pool, seen, scores, labels).unwrap()
}

/// Score table where the true class scores 1 and every other class 0.
pub fn oracle_scorer_table(rng: &mut ChaCha8Rng) -> ScoreTable {
    let pool: Vec<usize> = (0..6).collect();
    let seen = vec![true, true, true, false, false, false];
    let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
    let mut labels = labels;
    labels.shuffle(rng);
    let scores = labels
        .iter()
        .map(|&y| pool.iter().map(|&c| f64::from(u8::from(c == y))).collect())
        .collect();
    ScoreTable::new(pool, seen, scores, labels).unwrap()
}

fn agree(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Largest disagreement between the library and the oracles over `trials`
/// random accuracy matrices, both normalizations.
pub fn matrix_oracle_gap(trials: u64) -> f64 {
    use din_core::metrics::{self, MetricOptions};
    let mut gap: f64 = 0.0;
    for s in 0..trials {
        let mut r = rng(50_000 + s);
        let m = random_matrix(&mut r);
        let rows = m.rows();
        for raw in [false, true] {
            let opts = MetricOptions {
                raw_inner_sums: raw,
                raw_bwt: raw,
            };
            gap = gap.max(agree(metrics::last_seen(&m).ok(), Some(oracle_ls(&rows))));
            let ms = metrics::mean_seen(&m, opts).ok();
            let mu = metrics::mean_unseen(&m, opts).ok();
            gap = gap.max(agree(ms, Some(oracle_ms(&rows, raw))));
            gap = gap.max(agree(mu, oracle_mu(&rows, raw)));
            gap = gap.max(agree(metrics::backward_transfer(&m, opts).ok(), oracle_bwt(&rows, raw)));
            if let (Some(a), Some(b)) = (ms, mu) {
                gap = gap.max((metrics::harmonic(a, b) - oracle_mh(oracle_ms(&rows, raw), oracle_mu(&rows, raw).unwrap())).abs());
            }
        }
    }
    gap
}

/// Largest disagreement on mSA, mUA and SUAUC over `trials` random score
/// tables, swept over the default 201-point grid.
pub fn table_oracle_gap(trials: u64) -> f64 {
    use din_core::metrics;
    let mut gap: f64 = 0.0;
    for s in 0..trials {
        let mut r = rng(90_000 + s);
        let table = random_score_table(&mut r, s);
        let seen = table.seen_classes();
        let unseen = table.unseen_classes();
        let lib = |subset: &[usize]| metrics::class_macro_accuracy(&table, subset, 0.0).ok().map(|m| m.value);
        gap = gap.max(agree(lib(&seen), oracle_macro(&table, &seen, 0.0)));
        gap = gap.max(agree(lib(&unseen), oracle_macro(&table, &unseen, 0.0)));
        let grid = metrics::default_gamma_grid(&table, 201);
        let area = metrics::suauc(&table, &grid).ok().map(|c| c.area);
        gap = gap.max(agree(area, oracle_suauc(&table, &grid)));
    }
    gap
}

/// `total_loss` against an independent scalar recomputation of each term:
/// returns the largest gap over the breakdown and the weighted total.
pub fn compositionality_gap(seed: u64) -> f64 {
    use din_core::autodiff::{cosine_similarity, l2_normalize, log_softmax_nll};
    let fx = model_fixture(seed);
    let mut r = rng(seed + 7);
    let w = LossWeights {
        lambda_disen: r.random_range(0.0..2.0),
        lambda_adv: r.random_range(0.0..2.0),
        lambda_cont: r.random_range(0.0..2.0),
        alpha: r.random_range(0.1..2.0),
        beta: r.random_range(0.1..2.0),
        tau: r.random_range(0.05..1.0),
        lambda_grl: 1.0,
    };
    let ab = Ablation::full();
    let mut fwd = Forward::inference();
    let (total, parts) = losses::total_loss(&mut fwd, &fx.model, &fx.batch, &fx.pool, &fx.semantic, &w, &ab, 1).unwrap();
    let total = fwd.tape.scalar(total);

    let mut f2 = Forward::inference();
    let enc = losses::encode_batch(&mut f2, &fx.model, &fx.batch, &ab, 1).unwrap();
    let protos = fx.model.encode_text(&mut f2, &fx.pool, &fx.semantic).unwrap();
    let fused = f2.tape.value(enc.fused).clone();
    let protos = f2.tape.value(protos).clone();
    let zg = f2.tape.value(enc.z_global).clone();
    let zls: Vec<Tensor> = enc.z_locals.iter().map(|&z| f2.tape.value(z).clone()).collect();
    let n = fx.batch.len();

    let mut cont = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..fx.pool.len())
            .map(|c| cosine_similarity(fused.row(i), protos.row(c)).unwrap() / w.tau)
            .collect();
        let target = fx.pool.iter().position(|&c| c == fx.batch.classes[i]).unwrap();
        cont += log_softmax_nll(&logits, target).unwrap();
    }
    cont /= n as f64;

    let mut disen = 0.0;
    for i in 0..n {
        let g = l2_normalize(zg.row(i)).unwrap();
        for zl in &zls {
            let l = l2_normalize(zl.row(i)).unwrap();
            let d: f64 = l.iter().zip(&g).map(|(a, b)| a * b).sum();
            disen += d * d;
        }
    }
    disen /= n as f64;

    let disc_logits = |which| {
        let mut f3 = Forward::inference();
        let z = f3.tape.constant(zg.clone());
        let l = fx.model.discriminator_logits(&mut f3, z, which).unwrap();
        f3.tape.value(l).clone()
    };
    let task_logits = disc_logits(Discriminator::Task);
    let dom_logits = disc_logits(Discriminator::Domain);
    let task_ce = (0..n)
        .map(|i| log_softmax_nll(task_logits.row(i), fx.batch.tasks[i]).unwrap())
        .sum::<f64>()
        / n as f64;
    let known: Vec<(usize, usize)> = fx.batch.domains.iter().enumerate().filter_map(|(i, d)| d.map(|d| (i, d))).collect();
    let dom_ce = known
        .iter()
        .map(|&(i, d)| log_softmax_nll(dom_logits.row(i), d).unwrap())
        .sum::<f64>()
        / known.len() as f64;
    let adv = w.alpha * task_ce + w.beta * dom_ce;

    let expect = w.lambda_disen * disen + w.lambda_adv * adv + w.lambda_cont * cont;
    [
        (parts.disen - disen).abs(),
        (parts.adv - adv).abs(),
        (parts.cont - cont).abs(),
        (parts.total - total).abs(),
        (total - expect).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Contrastive loss with every similarity equal, through both entry points.
pub fn uniform_contrastive(n: usize) -> (f64, f64) {
    let mut tape = Tape::new();
    let sims = tape.constant(Tensor::matrix(3, n, vec![0.37; 3 * n]).unwrap());
    let a = losses::contrastive_from_similarities(&mut tape, sims, &[0, n - 1, n / 2], 0.07).unwrap();
    let z = tape.constant(Tensor::from_rows(&[[1.0, 2.0, -0.5], [0.3, 0.1, 0.9]]).unwrap());
    let protos = tape.constant(Tensor::matrix(n, 3, [0.2, -1.0, 0.4].repeat(n)).unwrap());
    let pool: Vec<usize> = (0..n).map(|i| 100 + i).collect();
    let b = losses::contrastive_loss(&mut tape, z, &[100, 99 + n], protos, &pool, 0.07).unwrap();
    (tape.scalar(a), tape.scalar(b))
}

/// Disentanglement loss of locals orthogonal to the global embedding.
pub fn orthogonal_disen(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..6);
    let dim = 6;
    let mut g = Vec::new();
    let mut l1 = Vec::new();
    let mut l2 = Vec::new();
    for _ in 0..n {
        let mut axes: Vec<usize> = (0..dim).collect();
        axes.shuffle(&mut r);
        let row = |axis: usize, r: &mut ChaCha8Rng| {
            let mut v = vec![0.0; dim];
            v[axis] = r.random_range(-3.0..3.0);
            v
        };
        g.push(row(axes[0], &mut r));
        l1.push(row(axes[1], &mut r));
        let mut v = row(axes[2], &mut r);
        v[axes[3]] = r.random_range(-3.0..3.0);
        l2.push(v);
    }
    let mut tape = Tape::new();
    let zg = tape.constant(Tensor::from_rows(&g).unwrap());
    let z1 = tape.constant(Tensor::from_rows(&l1).unwrap());
    let z2 = tape.constant(Tensor::from_rows(&l2).unwrap());
    let l = losses::disen_loss(&mut tape, &[z1, z2], zg).unwrap();
    tape.scalar(l)
}

pub fn small_experiment(mode: din_core::data::SplitMode) -> din_core::config::ExperimentConfig {
    use din_core::config::ExperimentConfig;
    let mut cfg = ExperimentConfig::default();
    cfg.split.mode = mode;
    cfg.split.examples_per_cell = 20;
    cfg.split.feature_dim = 12;
    cfg.split.semantic_dim = 8;
    cfg.model.hidden_dim = 16;
    cfg.model.text_hidden_dim = 16;
    cfg.model.embed_dim = 8;
    cfg.model.dim_per_token = 4;
    cfg.model.disc_hidden_dim = 16;
    cfg.train.main_epochs = 2;
    cfg.train.warmup_epochs = 1;
    cfg.train.batch_size = 32;
    cfg.train.k_shot = 2;
    cfg.train.prompt_epochs = Some(2);
    cfg.seeds = vec![0];
    cfg
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Split-level invariants of one seeded stream: no target-domain training
/// data, disjoint and complete class blocks, one dropped source domain per
/// task under the non-uniform split.
pub fn split_invariants(mode: din_core::data::SplitMode, seed: u64) -> std::result::Result<(), String> {
    use din_core::data::{build_task_stream, generate_corpus, SplitMode};
    use std::collections::{BTreeSet, HashMap};
    let mut cfg = small_experiment(mode).split;
    cfg.seed = seed;
    let corpus = generate_corpus(&cfg).unwrap();
    let stream = build_task_stream(&corpus, &cfg).unwrap();
    let origin: HashMap<Vec<u64>, usize> = corpus.samples.iter().map(|s| (bits(&s.x), s.d)).collect();
    let target = cfg.target_domain;
    let sources = cfg.source_domains();
    let mut seen = BTreeSet::new();
    for task in &stream.tasks {
        ensure!(task.classes.len() == cfg.classes_per_task(), "task {} has {} classes", task.index, task.classes.len());
        for &c in &task.classes {
            ensure!(seen.insert(c), "class {c} appears in two tasks");
        }
        let mut used = BTreeSet::new();
        for e in &task.train {
            let d = origin[&bits(&e.x)];
            ensure!(d != target, "target-domain example in task {} training data", task.index);
            ensure!(task.classes.contains(&e.y) && e.t == task.index, "foreign example in task {}", task.index);
            used.insert(d);
        }
        ensure!(!stream.target_test(task.index).is_empty(), "task {} has no target test data", task.index);
        if mode == SplitMode::NonUniformDaczsl {
            ensure!(task.dropped_domains.len() == 1, "task {} drops {:?}", task.index, task.dropped_domains);
            let dropped = task.dropped_domains[0];
            let expect: Vec<usize> = sources.iter().copied().filter(|&d| d != dropped).collect();
            ensure!(sources.contains(&dropped), "dropped domain {dropped} is not a source");
            ensure!(task.visible_domains == expect, "visible domains {:?}", task.visible_domains);
            ensure!(used == expect.iter().copied().collect(), "training domains {used:?}");
        }
    }
    seen.extend(stream.dropped_classes.iter().copied());
    ensure!(seen == (0..cfg.num_classes).collect(), "class blocks do not cover every class");
    Ok(())
}

/// Trains one seeded stream stage by stage and checks leakage counters,
/// the buffer size formula after every task and freeze discipline.
pub fn training_invariants(mode: din_core::data::SplitMode, m: usize, seed: u64) -> std::result::Result<(), String> {
    use din_core::data::{build_task_stream, generate_corpus};
    use din_core::trainer::{model_config_for, Trainer};
    let mut cfg = small_experiment(mode);
    cfg.train.buffer_per_class = m;
    let (split, mcfg, tcfg) = cfg.seeded(seed);
    let corpus = generate_corpus(&split).unwrap();
    let stream = build_task_stream(&corpus, &split).unwrap();
    let ablation = Ablation::preset("din++").unwrap();
    let mut model = DinModel::new(model_config_for(&stream, &corpus.semantic, &mcfg)).unwrap();
    let mut trainer = Trainer::new(&stream, &corpus.semantic, &tcfg, &cfg.loss, &ablation).unwrap();
    let same = |a: &DinModel, b: &DinModel, id: GroupId| a.group(id).unwrap().bit_eq(b.group(id).unwrap());
    let mut expected_buffer = 0;
    for t in 0..stream.num_tasks() {
        model.start_task(t).unwrap();
        let before = model.clone();
        trainer.train_prompt_stage(&mut model, t).unwrap();
        for id in model.group_ids() {
            ensure!(id == GroupId::Prompt || same(&before, &model, id), "{id} moved during prompt stage of task {t}");
        }
        ensure!(!same(&before, &model, GroupId::Prompt), "prompt did not train at task {t}");
        let before = model.clone();
        trainer.train_main_stage(&mut model, t).unwrap();
        ensure!(same(&before, &model, GroupId::Prompt), "prompt moved during main stage of task {t}");
        for k in 0..t {
            ensure!(same(&before, &model, GroupId::Local(k)), "L{k} moved during task {t}");
        }
        for id in [GroupId::Global, GroupId::Text, GroupId::Local(t)] {
            ensure!(!same(&before, &model, id), "{id} did not train at task {t}");
        }
        let task = &stream.tasks[t];
        expected_buffer += task.classes.len() * task.visible_domains.len() * m;
        ensure!(trainer.buffer.len() == expected_buffer, "buffer {} after task {t}, expected {expected_buffer}", trainer.buffer.len());
        ensure!(trainer.buffer.examples.iter().all(|e| e.t <= t), "buffer holds a future example");
    }
    ensure!(trainer.audit.target_leakage == 0, "{} target-domain examples trained on", trainer.audit.target_leakage);
    ensure!(trainer.audit.future_leakage == 0, "{} future-task examples trained on", trainer.audit.future_leakage);
    Ok(())
}
