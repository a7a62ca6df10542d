//! Running configured experiments and reading back what they write.
//!
//! Per seed a run writes `matrix_<seed>.csv`, `report_<seed>.json`,
//! `curve_<seed>.csv` and `runlog_<seed>.csv`; `aggregate.json` and
//! `reports.csv` summarize all seeds. Metric values are percentages.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::Ablation;
use crate::config::ExperimentConfig;
use crate::data::{build_task_stream, generate_corpus};
use crate::error::{DinError, Result};
use crate::metrics::{self, AccuracyMatrix, ContinualMetrics, MetricOptions};
use crate::model::{Placement, PromptInit};
use crate::trainer::{self, EpochLog, Phase, RunResult, RUNLOG_HEADER};

pub const DEFAULT_OUT_DIR: &str = "din_out";
pub const OUT_DIR_ENV: &str = "DIN_OUT_DIR";

/// `--out`, then the config's `run.out_dir`, then `$DIN_OUT_DIR`, then `din_out`.
pub fn resolve_out_dir(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub const METRIC_NAMES: [&str; 8] = ["LS", "mS", "mU", "mH", "BWT", "mSA", "mUA", "SUAUC"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    #[serde(rename = "LS")]
    pub ls: Option<f64>,
    #[serde(rename = "mS")]
    pub ms: Option<f64>,
    #[serde(rename = "mU")]
    pub mu: Option<f64>,
    #[serde(rename = "mH")]
    pub mh: Option<f64>,
    #[serde(rename = "BWT")]
    pub bwt: Option<f64>,
    #[serde(rename = "mSA")]
    pub msa: Option<f64>,
    #[serde(rename = "mUA")]
    pub mua: Option<f64>,
    #[serde(rename = "SUAUC")]
    pub suauc: Option<f64>,
    pub seed: u64,
    pub ablation: String,
    pub mode: String,
    pub completed: bool,
}

fn pct(v: Option<f64>) -> Option<f64> {
    v.map(|x| 100.0 * x)
}

impl SeedReport {
    pub fn values(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("LS", self.ls),
            ("mS", self.ms),
            ("mU", self.mu),
            ("mH", self.mh),
            ("BWT", self.bwt),
            ("mSA", self.msa),
            ("mUA", self.mua),
            ("SUAUC", self.suauc),
        ]
    }

    /// Continual runs take mH from mS/mU; zero-shot runs from mSA/mUA.
    pub fn from_result(result: &RunResult, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut report = Self {
            ls: None,
            ms: None,
            mu: None,
            mh: None,
            bwt: None,
            msa: None,
            mua: None,
            suauc: None,
            seed,
            ablation: cfg.ablation.name.clone(),
            mode: cfg.split.mode.to_string(),
            completed: result.failure.is_none(),
        };
        if let Some(m) = &result.matrix {
            let c = ContinualMetrics::compute(m, cfg.metrics)?;
            report.ls = Some(100.0 * c.ls);
            report.ms = Some(100.0 * c.ms);
            report.mu = Some(100.0 * c.mu);
            report.mh = Some(100.0 * c.mh);
            report.bwt = Some(100.0 * c.bwt);
        }
        if let Some(z) = &result.zero_shot {
            report.msa = pct(z.msa);
            report.mua = pct(z.mua);
            report.suauc = pct(z.suauc);
            if result.matrix.is_none() {
                report.mh = pct(z.mh());
            }
        }
        Ok(report)
    }

    pub fn csv_header() -> String {
        format!("seed,ablation,mode,completed,{}", METRIC_NAMES.join(","))
    }

    pub fn csv_line(&self) -> String {
        let vals: Vec<String> = self.values().iter().map(|(_, v)| fmt_opt(*v)).collect();
        format!("{},{},{},{},{}", self.seed, self.ablation, self.mode, self.completed, vals.join(","))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad number '{s}'"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    pub n: usize,
}

impl MetricStat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: None,
                std: None,
                n: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean: Some(mean),
            std: Some(var.sqrt()),
            n: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub ablation: String,
    pub mode: String,
    pub metrics: BTreeMap<String, MetricStat>,
    /// Harmonic mean of the seed-mean seen and unseen accuracies.
    #[serde(rename = "mH_of_means")]
    pub mh_of_means: Option<f64>,
}

impl Aggregate {
    pub fn from_reports(reports: &[SeedReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| DinError::Run("no reports to aggregate".into()))?;
        let mut stats = BTreeMap::new();
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.values()[i].1).collect();
            stats.insert(name.to_string(), MetricStat::of(&vals));
        }
        let mean = |k: &str| stats.get(k).and_then(|s: &MetricStat| s.mean);
        let mh_of_means = match (mean("mS"), mean("mU")) {
            (Some(s), Some(u)) => Some(metrics::harmonic(s, u)),
            _ => match (mean("mSA"), mean("mUA")) {
                (Some(s), Some(u)) => Some(metrics::harmonic(s, u)),
                _ => None,
            },
        };
        Ok(Self {
            seeds: reports.iter().map(|r| r.seed).collect(),
            ablation: first.ablation.clone(),
            mode: first.mode.clone(),
            metrics: stats,
            mh_of_means,
        })
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).and_then(|s| s.mean)
    }
}

/// Generates the seed's data and trains it under `cfg`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let (split, model, train) = cfg.seeded(seed);
    let corpus = generate_corpus(&split)?;
    let stream = build_task_stream(&corpus, &split)?;
    trainer::run_sequence(&stream, &corpus.semantic, &model, &train, &cfg.loss, &cfg.ablation)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_runlog(log: &[EpochLog], w: impl Write) -> Result<()> {
    let mut w = w;
    writeln!(w, "{RUNLOG_HEADER}")?;
    for e in log {
        writeln!(w, "{}", e.csv_line())?;
    }
    Ok(())
}

pub fn read_runlog(r: impl BufRead, source: &str) -> Result<Vec<EpochLog>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let err = |msg: String| DinError::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        if i == 0 {
            if line.trim() != RUNLOG_HEADER {
                return Err(err(format!("expected header '{RUNLOG_HEADER}'")));
            }
            continue;
        }
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number '{s}'")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad integer '{s}'")));
        let stage = match f[1] {
            "prompt" => Phase::Prompt,
            "main" => Phase::Main,
            "disc" => Phase::Discriminator,
            o => return Err(err(format!("unknown stage '{o}'"))),
        };
        out.push(EpochLog {
            task: int(f[0])?,
            stage,
            epoch: int(f[2])?,
            lr: num(f[3])?,
            disen: num(f[4])?,
            adv: num(f[5])?,
            cont: num(f[6])?,
            total: num(f[7])?,
            disc: num(f[8])?,
        });
    }
    Ok(out)
}

fn write_rows(rows: &[Vec<f64>], w: impl Write) -> Result<()> {
    let mut w = w;
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn matrix_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("matrix_{seed}.csv"))
}

pub fn report_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("report_{seed}.json"))
}

pub fn curve_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("curve_{seed}.csv"))
}

pub fn runlog_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("runlog_{seed}.csv"))
}

/// Writes every per-seed artifact. Failed runs keep their finished rows
/// in `matrix_<seed>.partial.csv`.
pub fn write_seed_outputs(dir: &Path, report: &SeedReport, result: &RunResult) -> Result<()> {
    let seed = report.seed;
    match &result.matrix {
        Some(m) => {
            let mut w = create(&matrix_path(dir, seed))?;
            m.write_csv(&mut w)?;
            w.flush()?;
        }
        None if !result.partial_rows.is_empty() => {
            let mut w = create(&dir.join(format!("matrix_{seed}.partial.csv")))?;
            write_rows(&result.partial_rows, &mut w)?;
            w.flush()?;
        }
        None => {}
    }
    if let Some(z) = result.zero_shot.as_ref().filter(|z| !z.curve.is_empty()) {
        let mut w = create(&curve_path(dir, seed))?;
        metrics::write_curve_csv(&z.curve, &mut w)?;
        w.flush()?;
    }
    let mut w = create(&runlog_path(dir, seed))?;
    write_runlog(&result.log, &mut w)?;
    w.flush()?;
    write_json(&report_path(dir, seed), report)
}

pub fn read_report(path: &Path) -> Result<SeedReport> {
    read_json(path)
}

pub fn read_aggregate(path: &Path) -> Result<Aggregate> {
    read_json(path)
}

pub fn read_matrix(path: &Path) -> Result<AccuracyMatrix> {
    AccuracyMatrix::read_csv(BufReader::new(File::open(path)?))
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<SeedReport>> {
    let source = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let err = |msg: String| DinError::Parse {
            path: source.clone(),
            line: i + 1,
            msg,
        };
        if i == 0 {
            if line.trim() != SeedReport::csv_header() {
                return Err(err("unexpected header".into()));
            }
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 4 + METRIC_NAMES.len() {
            return Err(err(format!("expected {} fields, found {}", 4 + METRIC_NAMES.len(), f.len())));
        }
        let v: Vec<Option<f64>> = f[4..].iter().map(|s| parse_opt(s)).collect::<std::result::Result<_, _>>().map_err(err)?;
        out.push(SeedReport {
            ls: v[0],
            ms: v[1],
            mu: v[2],
            mh: v[3],
            bwt: v[4],
            msa: v[5],
            mua: v[6],
            suauc: v[7],
            seed: f[0].parse().map_err(|_| err(format!("bad seed '{}'", f[0])))?,
            ablation: f[1].to_string(),
            mode: f[2].to_string(),
            completed: f[3] == "true",
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSummary {
    pub reports: Vec<SeedReport>,
    pub aggregate: Aggregate,
}

/// Runs every seed into `out`, then writes the aggregate. A failed seed
/// stops the experiment after its partial artifacts are written.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let result = run_seed(cfg, seed)?;
        let report = SeedReport::from_result(&result, cfg, seed)?;
        write_seed_outputs(out, &report, &result)?;
        if let Some(f) = &result.failure {
            return Err(DinError::Run(format!("seed {seed}: {f}")));
        }
        reports.push(report);
    }
    let aggregate = Aggregate::from_reports(&reports)?;
    write_json(&out.join("aggregate.json"), &aggregate)?;
    let mut w = create(&out.join("reports.csv"))?;
    writeln!(w, "{}", SeedReport::csv_header())?;
    for r in &reports {
        writeln!(w, "{}", r.csv_line())?;
    }
    w.flush()?;
    Ok(ExperimentSummary { reports, aggregate })
}

pub const PROMPT_SWEEP_HEADER: &str = "K,variant,placement,mH,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub variant: PromptInit,
    pub placement: Placement,
    pub mh: Option<f64>,
    pub seed: u64,
}

/// Configuration of one prompt-sweep cell: prompt stage on, K shots.
pub fn sweep_cell(cfg: &ExperimentConfig, k: usize, variant: PromptInit, placement: Placement) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.k_shot = k;
    c.model.prompt_init = variant;
    c.model.placement = placement;
    c.ablation.use_prompt_stage = true;
    c
}

/// Runs every (K, variant, placement, seed) cell and writes `prompt_sweep.csv`.
pub fn sweep_prompts(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &k in &cfg.sweep.k_list {
        for &variant in &cfg.sweep.variants {
            for &placement in &cfg.sweep.placements {
                let cell = sweep_cell(cfg, k, variant, placement);
                for &seed in &cell.seeds {
                    let result = run_seed(&cell, seed)?;
                    if let Some(f) = &result.failure {
                        return Err(DinError::Run(format!("K={k} {variant}/{placement} seed {seed}: {f}")));
                    }
                    let report = SeedReport::from_result(&result, &cell, seed)?;
                    rows.push(SweepRow {
                        k,
                        variant,
                        placement,
                        mh: report.mh,
                        seed,
                    });
                }
            }
        }
    }
    let mut w = create(&out.join("prompt_sweep.csv"))?;
    writeln!(w, "{PROMPT_SWEEP_HEADER}")?;
    for r in &rows {
        writeln!(w, "{},{},{},{},{}", r.k, r.variant, r.placement, fmt_opt(r.mh), r.seed)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn read_prompt_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let source = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let err = |msg: String| DinError::Parse {
            path: source.clone(),
            line: i + 1,
            msg,
        };
        if i == 0 {
            if line.trim() != PROMPT_SWEEP_HEADER {
                return Err(err(format!("expected header '{PROMPT_SWEEP_HEADER}'")));
            }
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        out.push(SweepRow {
            k: f[0].parse().map_err(|_| err(format!("bad K '{}'", f[0])))?,
            variant: f[1].parse().map_err(|e: DinError| err(e.to_string()))?,
            placement: f[2].parse().map_err(|e: DinError| err(e.to_string()))?,
            mh: parse_opt(f[3]).map_err(err)?,
            seed: f[4].parse().map_err(|_| err(format!("bad seed '{}'", f[4])))?,
        });
    }
    Ok(out)
}

/// Seed-mean LS, mH and BWT of one ablation row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub ls: Option<f64>,
    pub mh: Option<f64>,
    pub bwt: Option<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationDelta {
    pub row_a: String,
    pub row_b: String,
    pub d_ls: Option<f64>,
    pub d_mh: Option<f64>,
    pub d_bwt: Option<f64>,
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// `a - b` for every ordered pair of distinct rows.
pub fn ablation_deltas(rows: &[AblationRow]) -> Vec<AblationDelta> {
    let mut out = Vec::new();
    for a in rows {
        for b in rows {
            if a.name != b.name {
                out.push(AblationDelta {
                    row_a: a.name.clone(),
                    row_b: b.name.clone(),
                    d_ls: diff(a.ls, b.ls),
                    d_mh: diff(a.mh, b.mh),
                    d_bwt: diff(a.bwt, b.bwt),
                });
            }
        }
    }
    out
}

pub const ABLATION_HEADER: &str = "row,LS,mH,BWT,seeds";
pub const DELTA_HEADER: &str = "row_a,row_b,dLS,dmH,dBWT";

fn seeds_field(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

/// Runs each preset of `rows` over the config's seeds. Per-row artifacts go
/// to `out/ablation/<row>/`; the table and deltas to `ablation.csv` and
/// `ablation_deltas.csv`.
pub fn run_ablation(cfg: &ExperimentConfig, rows: &[&str], out: &Path) -> Result<(Vec<AblationRow>, Vec<AblationDelta>)> {
    let mut table = Vec::new();
    for &name in rows {
        let mut c = cfg.clone();
        c.ablation = Ablation::preset(name)?;
        let summary = run_experiment(&c, &out.join("ablation").join(name))?;
        table.push(AblationRow {
            name: name.to_string(),
            ls: summary.aggregate.mean("LS"),
            mh: summary.aggregate.mean("mH"),
            bwt: summary.aggregate.mean("BWT"),
            seeds: summary.aggregate.seeds.clone(),
        });
    }
    let deltas = ablation_deltas(&table);
    let mut w = create(&out.join("ablation.csv"))?;
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in &table {
        writeln!(w, "{},{},{},{},{}", r.name, fmt_opt(r.ls), fmt_opt(r.mh), fmt_opt(r.bwt), seeds_field(&r.seeds))?;
    }
    w.flush()?;
    let mut w = create(&out.join("ablation_deltas.csv"))?;
    writeln!(w, "{DELTA_HEADER}")?;
    for d in &deltas {
        writeln!(w, "{},{},{},{},{}", d.row_a, d.row_b, fmt_opt(d.d_ls), fmt_opt(d.d_mh), fmt_opt(d.d_bwt))?;
    }
    w.flush()?;
    Ok((table, deltas))
}

fn csv_records(path: &Path, header: &str, width: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let source = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let err = |msg: String| DinError::Parse {
            path: source.clone(),
            line: i + 1,
            msg,
        };
        if i == 0 {
            if line.trim() != header {
                return Err(err(format!("expected header '{header}'")));
            }
            continue;
        }
        let f: Vec<String> = line.trim_end().split(',').map(str::to_string).collect();
        if f.len() != width {
            return Err(err(format!("expected {width} fields, found {}", f.len())));
        }
        out.push((i + 1, f));
    }
    Ok(out)
}

fn located(path: &Path, line: usize) -> impl Fn(String) -> DinError + '_ {
    move |msg| DinError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    }
}

pub fn read_ablation_table(path: &Path) -> Result<Vec<AblationRow>> {
    csv_records(path, ABLATION_HEADER, 5)?
        .into_iter()
        .map(|(line, f)| {
            let err = located(path, line);
            let seeds = f[4]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| err(format!("bad seed '{s}'"))))
                .collect::<Result<_>>()?;
            Ok(AblationRow {
                name: f[0].clone(),
                ls: parse_opt(&f[1]).map_err(&err)?,
                mh: parse_opt(&f[2]).map_err(&err)?,
                bwt: parse_opt(&f[3]).map_err(&err)?,
                seeds,
            })
        })
        .collect()
}

pub fn read_ablation_deltas(path: &Path) -> Result<Vec<AblationDelta>> {
    csv_records(path, DELTA_HEADER, 5)?
        .into_iter()
        .map(|(line, f)| {
            let err = located(path, line);
            Ok(AblationDelta {
                row_a: f[0].clone(),
                row_b: f[1].clone(),
                d_ls: parse_opt(&f[2]).map_err(&err)?,
                d_mh: parse_opt(&f[3]).map_err(&err)?,
                d_bwt: parse_opt(&f[4]).map_err(&err)?,
            })
        })
        .collect()
}

/// Continual metrics of a saved matrix, as percentages.
pub fn matrix_metrics(path: &Path, opts: MetricOptions) -> Result<BTreeMap<&'static str, f64>> {
    let c = ContinualMetrics::compute(&read_matrix(path)?, opts)?;
    Ok(BTreeMap::from([
        ("LS", 100.0 * c.ls),
        ("mS", 100.0 * c.ms),
        ("mU", 100.0 * c.mu),
        ("mH", 100.0 * c.mh),
        ("BWT", 100.0 * c.bwt),
    ]))
}
