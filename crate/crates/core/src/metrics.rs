//! Continual and zero-shot evaluation metrics.
//!
//! Continual metrics read an [`AccuracyMatrix`] whose entry `(t, k)` is the
//! target-domain accuracy on task `k` after training through task `t`
//! (both 0-based here). Zero-shot metrics read a [`ScoreTable`].

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    size: usize,
    values: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            values: vec![0.0; size * size],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        let mut m = Self::zeros(size);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != size {
                return Err(DinError::shape("AccuracyMatrix::from_rows", &[size, size], &[t, row.len()]));
            }
            for (k, v) in row.into_iter().enumerate() {
                m.set(t, k, v)?;
            }
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.size + k]
    }

    pub fn set(&mut self, t: usize, k: usize, v: f64) -> Result<()> {
        if t >= self.size || k >= self.size {
            return Err(DinError::Index {
                op: "AccuracyMatrix::set",
                index: t.max(k),
                len: self.size,
            });
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(DinError::Config(format!("accuracy {v} outside [0, 1] at ({t}, {k})")));
        }
        self.values[t * self.size + k] = v;
        Ok(())
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.size..(t + 1) * self.size]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.size).map(|t| self.row(t).to_vec()).collect()
    }

    /// One comma-separated line per row, values in shortest round-trip form.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        for t in 0..self.size {
            let line: Vec<String> = self.row(t).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| DinError::Parse {
                        path: "matrix".into(),
                        line: i + 1,
                        msg: format!("bad value '{v}'"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    fn require(&self, min: usize, metric: &'static str) -> Result<()> {
        if self.size < min {
            return Err(DinError::UndefinedMetric {
                metric,
                reason: format!("needs at least {min} tasks, matrix has {}", self.size),
            });
        }
        Ok(())
    }
}

/// Normalization switches for the literal-sum variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Sum accuracies inside each snapshot of mS/mU instead of averaging.
    pub raw_inner_sums: bool,
    /// Report the BWT sum instead of its mean over tasks.
    pub raw_bwt: bool,
}

/// Mean accuracy over all tasks under the final snapshot.
pub fn last_seen(r: &AccuracyMatrix) -> Result<f64> {
    r.require(1, "LS")?;
    let n = r.size();
    Ok(r.row(n - 1).iter().sum::<f64>() / n as f64)
}

pub fn mean_seen(r: &AccuracyMatrix, opts: MetricOptions) -> Result<f64> {
    r.require(1, "mS")?;
    let n = r.size();
    let total: f64 = (0..n)
        .map(|t| {
            let s: f64 = r.row(t)[..=t].iter().sum();
            if opts.raw_inner_sums {
                s
            } else {
                s / (t + 1) as f64
            }
        })
        .sum();
    Ok(total / n as f64)
}

pub fn mean_unseen(r: &AccuracyMatrix, opts: MetricOptions) -> Result<f64> {
    r.require(2, "mU")?;
    let n = r.size();
    let total: f64 = (0..n - 1)
        .map(|t| {
            let s: f64 = r.row(t)[t + 1..].iter().sum();
            if opts.raw_inner_sums {
                s
            } else {
                s / (n - 1 - t) as f64
            }
        })
        .sum();
    Ok(total / (n - 1) as f64)
}

pub fn harmonic(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Mean change of each earlier task's accuracy between when it was learned
/// and the final snapshot.
pub fn backward_transfer(r: &AccuracyMatrix, opts: MetricOptions) -> Result<f64> {
    r.require(2, "BWT")?;
    let n = r.size();
    let sum: f64 = (0..n - 1).map(|t| r.get(n - 1, t) - r.get(t, t)).sum();
    Ok(if opts.raw_bwt { sum } else { sum / (n - 1) as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualMetrics {
    pub ls: f64,
    pub ms: f64,
    pub mu: f64,
    pub mh: f64,
    pub bwt: f64,
}

impl ContinualMetrics {
    pub fn compute(r: &AccuracyMatrix, opts: MetricOptions) -> Result<Self> {
        let ms = mean_seen(r, opts)?;
        let mu = mean_unseen(r, opts)?;
        Ok(Self {
            ls: last_seen(r)?,
            ms,
            mu,
            mh: harmonic(ms, mu),
            bwt: backward_transfer(r, opts)?,
        })
    }
}

/// Compatibility scores of test examples against one fixed class pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub pool: Vec<usize>,
    /// Parallel to `pool`: whether the class counts as seen.
    pub seen: Vec<bool>,
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ScoreTable {
    pub fn new(pool: Vec<usize>, seen: Vec<bool>, scores: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if pool.is_empty() {
            return Err(DinError::Config("empty class pool".into()));
        }
        if seen.len() != pool.len() {
            return Err(DinError::shape("ScoreTable::new", &[pool.len()], &[seen.len()]));
        }
        if scores.len() != labels.len() {
            return Err(DinError::shape("ScoreTable::new", &[labels.len()], &[scores.len()]));
        }
        if let Some(row) = scores.iter().find(|r| r.len() != pool.len()) {
            return Err(DinError::shape("ScoreTable::new", &[pool.len()], &[row.len()]));
        }
        if let Some(&c) = labels.iter().find(|c| !pool.contains(c)) {
            return Err(DinError::Lookup {
                what: "label in score pool",
                class: c,
            });
        }
        Ok(Self {
            pool,
            seen,
            scores,
            labels,
        })
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        self.pool.iter().zip(&self.seen).filter(|(_, &s)| s).map(|(&c, _)| c).collect()
    }

    pub fn unseen_classes(&self) -> Vec<usize> {
        self.pool.iter().zip(&self.seen).filter(|(_, &s)| !s).map(|(&c, _)| c).collect()
    }

    /// Predicted class per example after subtracting `gamma` from seen-class
    /// scores; ties go to the lowest class id.
    pub fn predictions(&self, gamma: f64) -> Vec<usize> {
        let mut adjusted = vec![0.0; self.pool.len()];
        self.scores
            .iter()
            .map(|row| {
                for (i, (s, &seen)) in row.iter().zip(&self.seen).enumerate() {
                    adjusted[i] = if seen { s - gamma } else { *s };
                }
                crate::model::argmax_class(&adjusted, &self.pool)
            })
            .collect()
    }

    /// Largest score minus smallest score over the whole table.
    pub fn score_span(&self) -> f64 {
        let (lo, hi) = self
            .scores
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAccuracy {
    pub value: f64,
    pub per_class: Vec<ClassCount>,
    /// Classes of the subset with no test example; excluded from the mean.
    pub empty: Vec<usize>,
}

fn macro_from_predictions(table: &ScoreTable, preds: &[usize], subset: &[usize]) -> Result<MacroAccuracy> {
    let mut per_class = Vec::new();
    let mut empty = Vec::new();
    for &c in subset {
        let mut count = ClassCount {
            class: c,
            correct: 0,
            total: 0,
        };
        for (&y, &p) in table.labels.iter().zip(preds) {
            if y == c {
                count.total += 1;
                count.correct += usize::from(p == c);
            }
        }
        if count.total == 0 {
            empty.push(c);
        } else {
            per_class.push(count);
        }
    }
    if per_class.is_empty() {
        return Err(DinError::UndefinedMetric {
            metric: "class macro accuracy",
            reason: "no class of the subset has a test example".into(),
        });
    }
    let value = per_class.iter().map(|c| c.correct as f64 / c.total as f64).sum::<f64>() / per_class.len() as f64;
    Ok(MacroAccuracy { value, per_class, empty })
}

/// Mean per-class accuracy over `subset`, predicting over the full pool.
pub fn class_macro_accuracy(table: &ScoreTable, subset: &[usize], gamma: f64) -> Result<MacroAccuracy> {
    macro_from_predictions(table, &table.predictions(gamma), subset)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gamma: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseenCurve {
    pub area: f64,
    pub points: Vec<CurvePoint>,
}

/// `n` evenly spaced values over `±1.01 × score span` (`±1` for a flat table).
pub fn default_gamma_grid(table: &ScoreTable, n: usize) -> Vec<f64> {
    let span = table.score_span();
    let half = if span > 0.0 { 1.01 * span } else { 1.0 };
    if n < 2 {
        return vec![0.0];
    }
    (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect()
}

/// Area under the seen/unseen accuracy curve traced by sweeping the
/// seen-class penalty over `grid`.
pub fn suauc(table: &ScoreTable, grid: &[f64]) -> Result<SeenUnseenCurve> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DinError::Config("gamma grid must be non-empty and strictly increasing".into()));
    }
    let seen = table.seen_classes();
    let unseen = table.unseen_classes();
    if seen.is_empty() || unseen.is_empty() {
        return Err(DinError::UndefinedMetric {
            metric: "SUAUC",
            reason: "pool needs both seen and unseen classes".into(),
        });
    }
    let points = grid
        .iter()
        .map(|&gamma| {
            let preds = table.predictions(gamma);
            Ok(CurvePoint {
                gamma,
                seen_acc: macro_from_predictions(table, &preds, &seen)?.value,
                unseen_acc: macro_from_predictions(table, &preds, &unseen)?.value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeenUnseenCurve {
        area: curve_area(&points),
        points,
    })
}

fn curve_area(points: &[CurvePoint]) -> f64 {
    let s_max = points.iter().map(|p| p.seen_acc).fold(0.0, f64::max);
    let u_max = points.iter().map(|p| p.unseen_acc).fold(0.0, f64::max);
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
    pts.push((0.0, u_max));
    pts.push((s_max, 0.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Writes curve points as `gamma,seen_acc,unseen_acc` lines under a header.
pub fn write_curve_csv(points: &[CurvePoint], mut w: impl Write) -> Result<()> {
    writeln!(w, "gamma,seen_acc,unseen_acc")?;
    for p in points {
        writeln!(w, "{:?},{:?},{:?}", p.gamma, p.seen_acc, p.unseen_acc)?;
    }
    Ok(())
}

pub fn read_curve_csv(r: impl BufRead) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DinError::Parse {
            path: "curve".into(),
            line: i + 1,
            msg,
        };
        let vals = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad value '{v}'"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", vals.len())));
        }
        out.push(CurvePoint {
            gamma: vals[0],
            seen_acc: vals[1],
            unseen_acc: vals[2],
        });
    }
    Ok(out)
}
