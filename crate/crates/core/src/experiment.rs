//! Sweep harness: sample, estimate at the requested levels, score against
//! the oracle, aggregate over runs.
//!
//! Levels: 4 is the SPO ATE (`ate` metric), 3 the SPO response moments plus
//! matrix pencil (`mte`), 2 the CP baseline on the joint tensor (`tv`).
//!
//! Seeds. Every run seed is `splitmix64(base ^ splitmix64(key) ^ splitmix64(run + 1))`,
//! where `key` mixes the bit patterns of the grid point `(mu_zt, mu_xy)` (zero
//! for non-grid models). Streams therefore depend on the grid value, not on
//! its position, so adding points leaves existing points untouched. The CP
//! restarts draw from `splitmix64(run_seed ^ ALS_STREAM)`; levels 3 and 4 consume
//! no randomness, so turning level 2 on or off changes nothing else.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{ate_error, cp_als, joint_tensor_coded, mte_error, tv_distance, JointTensor, ALS_RESTARTS};
use crate::domain::{Dataset, MixtureOfEffects, MomentBundle};
use crate::error::{Error, Result};
use crate::moment_problem::{matrix_pencil, PencilDiagnostics};
use crate::moments::{condition_diagnostic, estimate_bundle};
use crate::spo::{ate, response_moment_sequence};
use crate::synthetic::{appendix_model, exact_bundle, exact_ground_truth, paper_model, sample, GroundTruth, ModelSpec};

const ALS_STREAM: u64 = 0x5a17_c0de_0000_0002;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of run `run` at a grid point.
pub fn run_seed(base: u64, point: &GridPoint, run: usize) -> u64 {
    let key = match (point.mu_zt, point.mu_xy) {
        (Some(a), Some(b)) => splitmix64(a.to_bits()) ^ splitmix64(b.to_bits()).rotate_left(17),
        _ => 0,
    };
    splitmix64(base ^ splitmix64(key) ^ splitmix64(run as u64 + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    /// Two-class family on the grid `mu_zt x mu_xy` (mu_zt outer).
    Paper { mu_zt: Vec<f64>, mu_xy: Vec<f64> },
    /// Four-covariate model, ATE histogram setting.
    Appendix1,
    /// Four-covariate model, mixture recovery setting.
    Appendix2,
    /// Bootstrap resamples of a dataset, scored against the full-data estimates.
    Csv { path: PathBuf },
}

fn default_k() -> usize {
    2
}

fn default_restarts() -> usize {
    ALS_RESTARTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Samples per run; 0 selects exact population moments (for csv: resample size = data size).
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
    pub levels: Vec<u8>,
    #[serde(default = "default_k")]
    pub k: usize,
    pub output: PathBuf,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Worker threads; `None` uses one per core.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("levels must not be empty".into()));
        }
        if let Some(l) = self.levels.iter().find(|l| !(2..=4).contains(*l)) {
            return Err(Error::Config(format!("unknown level {l}; expected 2, 3 or 4")));
        }
        if let ModelConfig::Paper { mu_zt, mu_xy } = &self.model {
            if mu_zt.is_empty() || mu_xy.is_empty() {
                return Err(Error::Config("parameter grid must not be empty".into()));
            }
            if let Some(v) = mu_zt.iter().chain(mu_xy).find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Config(format!("grid value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Requested levels, deduplicated, descending (4, 3, 2).
    pub fn level_order(&self) -> Vec<u8> {
        let mut l = self.levels.clone();
        l.sort_unstable_by(|a, b| b.cmp(a));
        l.dedup();
        l
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        match &self.model {
            ModelConfig::Paper { mu_zt, mu_xy } => mu_zt
                .iter()
                .flat_map(|&a| {
                    mu_xy.iter().map(move |&b| GridPoint {
                        mu_zt: Some(a),
                        mu_xy: Some(b),
                    })
                })
                .collect(),
            _ => vec![GridPoint::default()],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mu_zt: Option<f64>,
    pub mu_xy: Option<f64>,
}

pub fn metric_name(level: u8) -> &'static str {
    match level {
        2 => "tv",
        3 => "mte",
        _ => "ate",
    }
}

/// Error value at one level, or the name of the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOutcome {
    pub level: u8,
    pub metric: String,
    pub value: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub point: GridPoint,
    pub run: usize,
    pub seed: u64,
    pub outcomes: Vec<LevelOutcome>,
    pub ate_estimate: Option<f64>,
    pub mte_estimate: Option<MixtureOfEffects>,
    /// `sigma_min` of `M[Z,X|t]`, control arm first.
    pub sigma_min: Option<[f64; 2]>,
    pub pencil: Option<PencilDiagnostics>,
    pub als_converged: Option<bool>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn value(&self, level: u8) -> Option<f64> {
        self.outcomes.iter().find(|o| o.level == level)?.value
    }
}

/// Reference values a run is scored against.
#[derive(Debug, Clone)]
enum Reference {
    Oracle(Box<GroundTruth>),
    /// Full-data estimates for a csv model; the tensor replaces the U-joint.
    Plugin {
        ate: Option<f64>,
        mte: Option<MixtureOfEffects>,
        tensor: Option<JointTensor>,
    },
}

/// Everything a run at one grid point needs, prepared once.
#[derive(Debug, Clone)]
pub struct PointSource {
    pub point: GridPoint,
    spec: Option<ModelSpec>,
    data: Option<Arc<Dataset>>,
    reference: Reference,
}

fn plugin_reference(cfg: &ExperimentConfig, d: &Dataset) -> Reference {
    let bundle = estimate_bundle(d).ok();
    let levels = cfg.level_order();
    let ate = bundle.as_ref().and_then(|b| ate(b).ok());
    let mte = if levels.contains(&3) {
        bundle.as_ref().and_then(|b| mte_from_bundle(b, cfg.k).ok()).map(|m| m.0)
    } else {
        None
    };
    let tensor = if levels.contains(&2) {
        joint_tensor_coded(d, None, None).ok()
    } else {
        None
    };
    Reference::Plugin { ate, mte, tensor }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Vec<PointSource>> {
    cfg.validate()?;
    let oracle = |spec: ModelSpec, point: GridPoint| -> Result<PointSource> {
        let truth = exact_ground_truth(&spec).map_err(|e| Error::Config(e.to_string()))?;
        Ok(PointSource {
            point,
            spec: Some(spec),
            data: None,
            reference: Reference::Oracle(Box::new(truth)),
        })
    };
    match &cfg.model {
        ModelConfig::Paper { .. } => cfg
            .grid()
            .into_iter()
            .map(|p| {
                let spec = paper_model(p.mu_zt.unwrap(), p.mu_xy.unwrap())
                    .map_err(|e| Error::Config(e.to_string()))?;
                oracle(spec, p)
            })
            .collect(),
        ModelConfig::Appendix1 | ModelConfig::Appendix2 => {
            Ok(vec![oracle(appendix_model(), GridPoint::default())?])
        }
        ModelConfig::Csv { path } => {
            let d = Dataset::read_csv_path(path)?;
            if d.n() == 0 {
                return Err(Error::Config(format!("{} has no rows", path.display())));
            }
            Ok(vec![PointSource {
                point: GridPoint::default(),
                spec: None,
                reference: plugin_reference(cfg, &d),
                data: Some(Arc::new(d)),
            }])
        }
    }
}

fn mte_from_bundle(b: &MomentBundle, k: usize) -> Result<(MixtureOfEffects, PencilDiagnostics)> {
    matrix_pencil(&response_moment_sequence(b, k)?)
}

fn bootstrap(d: &Dataset, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..d.n())).collect();
    d.select_rows(&rows)
}

fn failure(level: u8, name: &str) -> LevelOutcome {
    LevelOutcome {
        level,
        metric: metric_name(level).into(),
        value: None,
        failure: Some(name.into()),
    }
}

fn scored(level: u8, v: Result<f64>) -> LevelOutcome {
    match v {
        Ok(v) => success(level, v),
        Err(e) => failure(level, e.name()),
    }
}

fn success(level: u8, value: f64) -> LevelOutcome {
    LevelOutcome {
        level,
        metric: metric_name(level).into(),
        value: Some(value),
        failure: None,
    }
}

/// One replicate at one grid point. Estimator failures land in the record.
pub fn run_once(cfg: &ExperimentConfig, source: &PointSource, run: usize) -> RunRecord {
    let start = Instant::now();
    let seed = run_seed(cfg.seed, &source.point, run);
    let exact = cfg.n == 0 && source.spec.is_some();

    let data: Option<Dataset> = if exact {
        None
    } else if let Some(spec) = &source.spec {
        Some(sample(spec, cfg.n, seed))
    } else {
        let d = source.data.as_ref().expect("csv source holds data");
        let n = if cfg.n == 0 { d.n() } else { cfg.n };
        Some(bootstrap(d, n, seed))
    };
    let bundle: std::result::Result<MomentBundle, &'static str> = match (&data, &source.spec) {
        (Some(d), _) => estimate_bundle(d),
        (None, Some(spec)) => exact_bundle(spec),
        (None, None) => unreachable!(),
    }
    .map_err(|e| e.name());

    let mut record = RunRecord {
        point: source.point,
        run,
        seed,
        outcomes: Vec::new(),
        ate_estimate: None,
        mte_estimate: None,
        sigma_min: bundle.as_ref().ok().map(|b| {
            let c = condition_diagnostic(b);
            [c[0].sigma_min, c[1].sigma_min]
        }),
        pencil: None,
        als_converged: None,
        wall_time_s: 0.0,
    };

    for level in cfg.level_order() {
        let outcome = match level {
            4 => {
                let est = bundle.as_ref().map_err(|e| *e).and_then(|b| ate(b).map_err(|e| e.name()));
                match est {
                    Ok(a) => {
                        record.ate_estimate = Some(a);
                        let truth = match &source.reference {
                            Reference::Oracle(g) => Some(g.ate),
                            Reference::Plugin { ate, .. } => *ate,
                        };
                        match truth {
                            Some(t) => success(4, ate_error(t, a)),
                            None => failure(4, "NoReference"),
                        }
                    }
                    Err(name) => failure(4, name),
                }
            }
            3 => {
                let est = bundle.as_ref().map_err(|e| *e).and_then(|b| mte_from_bundle(b, cfg.k).map_err(|e| e.name()));
                match est {
                    Ok((m, diag)) => {
                        record.pencil = Some(diag);
                        let truth = match &source.reference {
                            Reference::Oracle(g) => Some(&g.mte),
                            Reference::Plugin { mte, .. } => mte.as_ref(),
                        };
                        let out = match truth {
                            Some(t) => scored(3, mte_error(t, &m)),
                            None => failure(3, "NoReference"),
                        };
                        record.mte_estimate = Some(m);
                        out
                    }
                    Err(name) => failure(3, name),
                }
            }
            _ => {
                let tensor = match (&data, &source.reference) {
                    (Some(d), _) => {
                        let codings = source.spec.as_ref().map(|s| (s.z_coding, s.x_coding));
                        joint_tensor_coded(d, codings.map(|c| c.0), codings.map(|c| c.1))
                    }
                    (None, Reference::Oracle(g)) => Ok(JointTensor::from_joint(&g.joint)),
                    (None, _) => unreachable!(),
                };
                let fit = tensor.and_then(|t| cp_als(&t, cfg.k, cfg.restarts, splitmix64(seed ^ ALS_STREAM)));
                match fit {
                    Ok(fit) => {
                        record.als_converged = Some(fit.converged);
                        match &source.reference {
                            Reference::Oracle(g) => scored(2, tv_distance(&g.joint, &fit.factors)),
                            Reference::Plugin { tensor: Some(t), .. } => {
                                scored(2, tensor_tv(t, &fit.factors.tensor()))
                            }
                            Reference::Plugin { tensor: None, .. } => failure(2, "NoReference"),
                        }
                    }
                    Err(e) => failure(2, e.name()),
                }
            }
        };
        record.outcomes.push(outcome);
    }
    record.wall_time_s = start.elapsed().as_secs_f64();
    record
}

fn tensor_tv(a: &JointTensor, b: &JointTensor) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch(format!("tensor dims {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(0.5 * a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Mean and standard deviation of one metric at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mu_zt: Option<f64>,
    pub mu_xy: Option<f64>,
    pub level: u8,
    pub metric: String,
    /// `None` when every run failed.
    pub mean: Option<f64>,
    /// Sample standard deviation (`n - 1`); 0 with fewer than two values.
    pub sd: Option<f64>,
    pub runs: usize,
    pub failures: usize,
}

/// Mean of the per-point means, over the whole grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandMean {
    pub level: u8,
    pub metric: String,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SummaryRow>,
    pub grand_means: Vec<GrandMean>,
    pub records: Vec<RunRecord>,
}

impl SweepTable {
    pub fn row(&self, mu_zt: Option<f64>, mu_xy: Option<f64>, level: u8) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.mu_zt == mu_zt && r.mu_xy == mu_xy && r.level == level)
    }
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(sd))
}

pub fn summarize(cfg: &ExperimentConfig, records: Vec<RunRecord>) -> SweepTable {
    let levels = cfg.level_order();
    let mut rows = Vec::new();
    for point in cfg.grid() {
        let at: Vec<&RunRecord> = records.iter().filter(|r| r.point == point).collect();
        for &level in &levels {
            let values: Vec<f64> = at.iter().filter_map(|r| r.value(level)).collect();
            let (mean, sd) = mean_sd(&values);
            rows.push(SummaryRow {
                mu_zt: point.mu_zt,
                mu_xy: point.mu_xy,
                level,
                metric: metric_name(level).into(),
                mean,
                sd,
                runs: at.len(),
                failures: at.len() - values.len(),
            });
        }
    }
    let grand_means = levels
        .iter()
        .map(|&level| {
            let means: Vec<f64> = rows
                .iter()
                .filter(|r| r.level == level)
                .filter_map(|r| r.mean)
                .collect();
            GrandMean {
                level,
                metric: metric_name(level).into(),
                mean: mean_sd(&means).0,
            }
        })
        .collect();
    SweepTable {
        rows,
        grand_means,
        records,
    }
}

/// Run every grid point `runs` times on a bounded pool; results come back in
/// grid-then-run order.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepTable> {
    let sources = prepare(cfg)?;
    let jobs: Vec<(&PointSource, usize)> = sources
        .iter()
        .flat_map(|s| (0..cfg.runs).map(move |r| (s, r)))
        .collect();
    let work = || -> Vec<RunRecord> {
        jobs.par_iter()
            .map(|(s, r)| run_once(cfg, s, *r))
            .collect()
    };
    let records = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    Ok(summarize(cfg, records))
}

/// Contents of `sweep.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub seed_scheme: String,
    pub base_seed: u64,
    #[serde(flatten)]
    pub table: SweepTable,
}

pub const CSV_HEADER: [&str; 8] = ["mu_zt", "mu_xy", "level", "metric", "mean", "sd", "runs", "failures"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<W: std::io::Write>(table: &SweepTable, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in &table.rows {
        out.write_record([
            cell(r.mu_zt),
            cell(r.mu_xy),
            r.level.to_string(),
            r.metric.clone(),
            cell(r.mean),
            cell(r.sd),
            r.runs.to_string(),
            r.failures.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Write `sweep.csv` and `sweep.json` into `cfg.output`.
pub fn emit(cfg: &ExperimentConfig, table: &SweepTable) -> Result<(PathBuf, PathBuf)> {
    if table.rows.is_empty() {
        return Err(Error::Config("nothing to emit: empty table".into()));
    }
    fs::create_dir_all(&cfg.output)?;
    let csv_path = cfg.output.join("sweep.csv");
    let json_path = cfg.output.join("sweep.json");
    write_csv(table, fs::File::create(&csv_path)?)?;
    let report = SweepReport {
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        seed_scheme: "splitmix64(base ^ splitmix64(grid key) ^ splitmix64(run + 1)); \
                      CP restarts use splitmix64(run seed ^ 0x5a17c0de00000002)"
            .into(),
        base_seed: cfg.seed,
        table: table.clone(),
    };
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    Ok((csv_path, json_path))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<SweepReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
