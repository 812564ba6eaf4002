//! JSON-configured experiments with CSV/JSON outputs.
//!
//! A run writes three files to its output directory:
//!
//! * `samples.csv` — columns `x1 … xd, weight`;
//! * `diagnostics.csv` — columns `iter, t_j, cess, ess, resampled, delta_j`
//!   (the root fusion for tree methods; header only for baselines);
//! * `summary.json` — a [`RunSummary`].
//!
//! Outputs are a deterministic function of the configuration and seed,
//! whatever the thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::estimator::EstimatorConfig;
use crate::guidance::GuidanceSettings;
use crate::hierarchy::{build_tree, dc_fusion, DcSettings, TreeKind};
use crate::linalg::{Matrix, Vector};
use crate::metrics::{consensus_merge, iad, Reference};
use crate::model::{Family, GaussianModel, RegressionData, RegressionModel, SubPosteriorModel};
use crate::rwm::RwmConfig;
use crate::smc::{fuse_models, mcf_rejection, GbfSettings, IterationRecord, MeshPolicy, Propagation, WeightedSamples};
use crate::FusionRng;

/// Covariate activation probabilities of the synthetic logistic generator.
pub const SYNTHETIC_ACTIVATION: [f64; 4] = [0.2, 0.3, 0.5, 0.01];
/// True coefficients (intercept first) of the synthetic logistic generator.
pub const SYNTHETIC_BETA: [f64; 5] = [-3.0, 1.2, -0.5, 0.8, 3.0];

// Independent random streams of one run.
const STREAM_METHOD: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_REFERENCE: u64 = 2;

/// The problem whose factors are fused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Problem {
    /// `C` Gaussian factors `N(a_c, C·I_d)` with `a_c = spread·(c − (C−1)/2)·1`;
    /// the target is `N(0, I_d)`.
    GaussianSynthetic {
        #[serde(default = "one")]
        dim: usize,
        #[serde(default)]
        spread: f64,
    },
    /// Logistic regression on simulated data (prior `N(0, 1)` per coefficient).
    LogisticSynthetic {
        #[serde(default = "default_m")]
        m: usize,
    },
    /// Logistic regression on a CSV file (column `y`, intercept added).
    LogisticCsv {
        path: PathBuf,
        #[serde(default = "one_f")]
        prior_var: f64,
    },
    /// Student-t regression on a CSV file.
    RobustCsv {
        path: PathBuf,
        nu: f64,
        sigma: f64,
        #[serde(default = "one_f")]
        prior_var: f64,
    },
    /// Negative-binomial regression on a CSV file.
    NegbinCsv {
        path: PathBuf,
        r: f64,
        #[serde(default = "one_f")]
        prior_var: f64,
    },
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_m() -> usize {
    1000
}
fn default_reference_draws() -> usize {
    20_000
}
fn default_mesh() -> MeshPolicy {
    MeshPolicy::GuidedAdaptive
}

/// Sampling method of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Method {
    /// A single fusion of all factors.
    #[default]
    Gbf,
    /// Divide-and-conquer fusion over a tree.
    Dcfusion { tree: TreeKind },
    /// Exact rejection sampler over `[0, T]` (Gaussian problems only).
    Mcf {
        #[serde(rename = "T", default = "one_f")]
        t_end: f64,
    },
    /// Consensus Monte Carlo.
    Cmc,
}

impl Method {
    /// Short label used in tables.
    pub fn label(&self) -> String {
        match self {
            Method::Gbf => "gbf".into(),
            Method::Dcfusion { tree } => match tree {
                TreeKind::ForkJoin => "dcfusion-fork-join".into(),
                TreeKind::BalancedBinary => "dcfusion-balanced-binary".into(),
                TreeKind::Progressive => "dcfusion-progressive".into(),
                TreeKind::Tempered { inv_beta } => format!("dcfusion-tempered-{inv_beta}"),
            },
            Method::Mcf { .. } => "mcf".into(),
            Method::Cmc => "cmc".into(),
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    /// Number of factors `C`.
    #[serde(rename = "C")]
    pub c: usize,
    /// Number of particles / draws `N`.
    #[serde(rename = "N")]
    pub n: usize,
    /// Mandatory master seed.
    pub seed: Option<u64>,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_mesh")]
    pub mesh: MeshPolicy,
    #[serde(default)]
    pub guidance: GuidanceSettings,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub propagation: Propagation,
    #[serde(default)]
    pub rwm: RwmConfig,
    /// Draws of the long reference chain for non-Gaussian problems.
    #[serde(default = "default_reference_draws")]
    pub reference_draws: usize,
    /// Worker threads (`None`: all cores).
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    /// Checks counts and mandatory fields.
    pub fn validate(&self) -> Result<u64> {
        let seed = self.seed.ok_or_else(|| FusionError::config("seed", "missing (a seed is mandatory)"))?;
        if self.c == 0 {
            return Err(FusionError::config("C", "must be positive"));
        }
        if self.n == 0 {
            return Err(FusionError::config("N", "must be positive"));
        }
        if self.threads == Some(0) {
            return Err(FusionError::config("threads", "must be positive"));
        }
        if let Problem::GaussianSynthetic { dim: 0, .. } = self.problem {
            return Err(FusionError::config("problem.dim", "must be positive"));
        }
        self.estimator.validate().map_err(|e| FusionError::config("estimator", e.to_string()))?;
        Ok(seed)
    }

    fn gbf_settings(&self) -> GbfSettings {
        GbfSettings {
            n_particles: self.n,
            estimator: self.estimator.clone(),
            guidance: self.guidance.clone(),
            propagation: self.propagation,
            rwm: self.rwm.clone(),
            ..GbfSettings::default()
        }
    }
}

/// Parses JSON into `T`, reporting the failing field path.
pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        FusionError::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })
}

/// Reads and parses an experiment configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_json(&fs::read_to_string(path)?)
}

/// Simulated logistic data: `m` rows, four binary covariates active with
/// probabilities [`SYNTHETIC_ACTIVATION`], response from [`SYNTHETIC_BETA`],
/// prior `N(0, 1)` on every coefficient.
pub fn synthetic_logistic(m: usize, rng: &mut FusionRng) -> Result<RegressionData> {
    let p = SYNTHETIC_BETA.len();
    let mut design = Matrix::zeros(m, p);
    let mut response = Vector::zeros(m);
    for i in 0..m {
        design[(i, 0)] = 1.0;
        for (j, &q) in SYNTHETIC_ACTIVATION.iter().enumerate() {
            design[(i, j + 1)] = f64::from(u8::from(rng.random::<f64>() < q));
        }
        let eta: f64 = (0..p).map(|j| design[(i, j)] * SYNTHETIC_BETA[j]).sum();
        response[i] = f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())));
    }
    RegressionData::new(design, response, Vector::zeros(p), Vector::from_element(p, 1.0))
}

/// Factors of a problem plus what is needed to judge the output.
#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub models: Vec<Arc<dyn SubPosteriorModel>>,
    /// Analytic target when known.
    pub exact: Option<(Vector, Matrix)>,
    /// Full-data posterior (regression problems).
    pub full: Option<Arc<dyn SubPosteriorModel>>,
}

impl Problem {
    /// Short label used in summaries.
    pub fn label(&self) -> &'static str {
        match self {
            Problem::GaussianSynthetic { .. } => "gaussian-synthetic",
            Problem::LogisticSynthetic { .. } => "logistic-synthetic",
            Problem::LogisticCsv { .. } => "logistic-csv",
            Problem::RobustCsv { .. } => "robust-csv",
            Problem::NegbinCsv { .. } => "negbin-csv",
        }
    }

    /// Builds `c` factors. Data generation uses its own stream of `seed`, so
    /// the data do not change with `c`.
    pub fn build(&self, c: usize, seed: u64) -> Result<BuiltProblem> {
        let regression = |data: RegressionData, family: Family| -> Result<BuiltProblem> {
            let shards = data.split(c)?;
            let models = shards
                .into_iter()
                .map(|s| Ok(Arc::new(RegressionModel::new(Arc::new(s), family)?) as Arc<dyn SubPosteriorModel>))
                .collect::<Result<_>>()?;
            let full: Arc<dyn SubPosteriorModel> = Arc::new(RegressionModel::new(Arc::new(data), family)?);
            Ok(BuiltProblem { models, exact: None, full: Some(full) })
        };
        match self {
            Problem::GaussianSynthetic { dim, spread } => {
                let cov = Matrix::identity(*dim, *dim) * c as f64;
                let models = (0..c)
                    .map(|k| {
                        let mean = Vector::from_element(*dim, spread * (k as f64 - (c as f64 - 1.0) / 2.0));
                        Ok(Arc::new(GaussianModel::new(mean, cov.clone())?) as Arc<dyn SubPosteriorModel>)
                    })
                    .collect::<Result<_>>()?;
                Ok(BuiltProblem {
                    models,
                    exact: Some((Vector::zeros(*dim), Matrix::identity(*dim, *dim))),
                    full: None,
                })
            }
            Problem::LogisticSynthetic { m } => {
                let mut rng = stream(seed, STREAM_DATA);
                regression(synthetic_logistic(*m, &mut rng)?, Family::Logistic)
            }
            Problem::LogisticCsv { path, prior_var } => {
                regression(RegressionData::from_csv(path, *prior_var)?, Family::Logistic)
            }
            Problem::RobustCsv { path, nu, sigma, prior_var } => {
                regression(RegressionData::from_csv(path, *prior_var)?, Family::RobustT { nu: *nu, sigma: *sigma })
            }
            Problem::NegbinCsv { path, r, prior_var } => {
                regression(RegressionData::from_csv(path, *prior_var)?, Family::NegBin { r: *r })
            }
        }
    }
}

fn stream(seed: u64, id: u64) -> FusionRng {
    let mut r = FusionRng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Reference against which IADs are computed: the analytic target, or a long
/// random-walk Metropolis run on the full-data posterior.
pub fn reference_for(built: &BuiltProblem, config: &ExperimentConfig, seed: u64) -> Result<Option<Reference>> {
    if let Some((mean, cov)) = &built.exact {
        return Ok(Some(Reference::Gaussian { mean: mean.clone(), cov: cov.clone() }));
    }
    match &built.full {
        Some(full) => {
            let mut rng = stream(seed, STREAM_REFERENCE);
            let draws = full.sample(config.reference_draws, &mut rng, &config.rwm)?;
            Ok(Some(Reference::Samples(WeightedSamples::uniform(draws))))
        }
        None => Ok(None),
    }
}

/// Result of one method on one problem.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub samples: WeightedSamples,
    pub diagnostics: Vec<IterationRecord>,
    /// Total number of mesh intervals (all fusions of a tree).
    pub n_mesh: usize,
    pub horizon: Option<f64>,
    pub acceptance_rate: Option<f64>,
}

/// Runs `method` on already-built factors.
pub fn run_method(
    method: &Method,
    models: &[Arc<dyn SubPosteriorModel>],
    config: &ExperimentConfig,
    rng: &mut FusionRng,
) -> Result<MethodOutput> {
    let settings = config.gbf_settings();
    match method {
        Method::Gbf => {
            let out = fuse_models(models, &settings, &config.mesh, rng)?;
            Ok(MethodOutput {
                n_mesh: out.mesh.n_intervals(),
                horizon: Some(out.horizon()),
                samples: out.weighted(),
                diagnostics: out.diagnostics,
                acceptance_rate: None,
            })
        }
        Method::Dcfusion { tree } => {
            let root = build_tree(*tree, models.len())?;
            let dc = DcSettings { gbf: settings, mesh: config.mesh.clone() };
            let out = dc_fusion(&root, models, &dc, rng)?;
            Ok(MethodOutput {
                n_mesh: out.total_intervals(),
                horizon: Some(out.root.horizon()),
                samples: out.root.weighted(),
                diagnostics: out.root.diagnostics,
                acceptance_rate: None,
            })
        }
        Method::Mcf { t_end } => {
            let out = mcf_rejection(models, *t_end, config.n, &config.estimator, rng)?;
            Ok(MethodOutput {
                samples: WeightedSamples::uniform(out.samples),
                diagnostics: Vec::new(),
                n_mesh: 1,
                horizon: Some(*t_end),
                acceptance_rate: Some(out.acceptance_rate),
            })
        }
        Method::Cmc => {
            let seed: u64 = rng.random();
            let subs = models
                .iter()
                .enumerate()
                .map(|(k, m)| m.sample(config.n, &mut stream(seed, k as u64), &config.rwm))
                .collect::<Result<Vec<_>>>()?;
            Ok(MethodOutput {
                samples: WeightedSamples::uniform(consensus_merge(&subs, None)?),
                diagnostics: Vec::new(),
                n_mesh: 0,
                horizon: None,
                acceptance_rate: None,
            })
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub problem: String,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    /// IAD against the reference, when one is available.
    pub iad: Option<f64>,
    /// Wall-clock seconds of the method (reference excluded).
    pub runtime_s: f64,
    pub n_mesh: usize,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub final_ess: f64,
    pub acceptance_rate: Option<f64>,
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| FusionError::config("threads", e.to_string()))?
            .install(f),
    }
}

/// Runs an experiment and writes `samples.csv`, `diagnostics.csv` and
/// `summary.json` to `out_dir`.
pub fn run_config(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<RunSummary> {
    let seed = config.validate()?;
    let out_dir = out_dir.as_ref();
    with_threads(config.threads, || {
        let built = config.problem.build(config.c, seed)?;
        let mut rng = stream(seed, STREAM_METHOD);
        let start = Instant::now();
        let out = run_method(&config.method, &built.models, config, &mut rng)?;
        let runtime_s = start.elapsed().as_secs_f64();
        let reference = reference_for(&built, config, seed)?;
        let iad_value = reference.map(|r| iad(&out.samples, &r)).transpose()?;
        let summary = RunSummary {
            method: config.method.label(),
            problem: config.problem.label().into(),
            c: config.c,
            n: config.n,
            d: out.samples.dim(),
            seed,
            iad: iad_value,
            runtime_s,
            n_mesh: out.n_mesh,
            horizon: out.horizon,
            final_ess: out.samples.ess(),
            acceptance_rate: out.acceptance_rate,
        };
        write_outputs(out_dir, &out, &summary)?;
        log::info!("{} on {}: iad={:?} in {:.2}s", summary.method, summary.problem, summary.iad, runtime_s);
        Ok(summary)
    })
}

/// Writes the three output files of a run.
pub fn write_outputs(dir: &Path, out: &MethodOutput, summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_samples_csv(dir.join("samples.csv"), &out.samples)?;
    let mut w = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
    w.write_record(["iter", "t_j", "cess", "ess", "resampled", "delta_j"])?;
    for r in &out.diagnostics {
        w.write_record([
            r.iter.to_string(),
            r.t_j.to_string(),
            r.cess.to_string(),
            r.ess.to_string(),
            r.resampled.to_string(),
            r.delta_j.to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

/// Writes weighted draws as `x1, …, xd, weight`.
pub fn write_samples_csv(path: impl AsRef<Path>, samples: &WeightedSamples) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = samples.dim();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    header.push("weight".into());
    w.write_record(&header)?;
    for (x, wt) in samples.samples.iter().zip(&samples.weights) {
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(wt.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `samples.csv` file back (weights renormalised).
pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<WeightedSamples> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().last() != Some("weight") {
        return Err(FusionError::InvalidData("last column of a samples file must be `weight`".into()));
    }
    let d = headers.len() - 1;
    let (mut samples, mut weights) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| FusionError::InvalidData(format!("bad number `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Vector::from_column_slice(&vals[..d]));
        weights.push(vals[d]);
    }
    WeightedSamples::new(samples, weights)
}

/// The swept quantity of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(rename = "C", default)]
    pub c: Option<Vec<usize>>,
    #[serde(rename = "N", default)]
    pub n: Option<Vec<usize>>,
}

/// A benchmark: a base experiment, a sweep over `C` or `N`, and the methods
/// to compare (the base method when empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub base: ExperimentConfig,
    pub sweep: Sweep,
    #[serde(default)]
    pub methods: Vec<Method>,
}

/// One row of `bench.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub iad: Option<f64>,
    pub runtime_s: f64,
    pub n_mesh: usize,
}

/// Reads and parses a benchmark configuration file.
pub fn load_bench_config(path: impl AsRef<Path>) -> Result<BenchConfig> {
    parse_json(&fs::read_to_string(path)?)
}

/// Runs every (sweep point, method) pair, writing each run's files under
/// `out_dir/runs/<method>_C<c>_N<n>/` and the table to `out_dir/bench.csv`.
pub fn bench_sweep(bench: &BenchConfig, out_dir: impl AsRef<Path>) -> Result<Vec<BenchRow>> {
    let points: Vec<(usize, usize)> = match (&bench.sweep.c, &bench.sweep.n) {
        (Some(cs), None) => cs.iter().map(|&c| (c, bench.base.n)).collect(),
        (None, Some(ns)) => ns.iter().map(|&n| (bench.base.c, n)).collect(),
        _ => return Err(FusionError::config("sweep", "give exactly one of `C` or `N`")),
    };
    if points.is_empty() {
        return Err(FusionError::config("sweep", "empty sweep"));
    }
    let methods = if bench.methods.is_empty() { vec![bench.base.method.clone()] } else { bench.methods.clone() };
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (c, n) in points {
        for method in &methods {
            let config = ExperimentConfig { c, n, method: method.clone(), ..bench.base.clone() };
            let dir = out_dir.join("runs").join(format!("{}_C{c}_N{n}", method.label()));
            let s = run_config(&config, &dir)?;
            rows.push(BenchRow { method: s.method, c, n, iad: s.iad, runtime_s: s.runtime_s, n_mesh: s.n_mesh });
        }
    }
    let mut w = csv::Writer::from_path(out_dir.join("bench.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Reference side of the `iad` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IadReference {
    /// A `samples.csv` file.
    Samples { path: PathBuf },
    /// An analytic Gaussian (`cov` as rows).
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

/// Configuration of the `iad` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IadConfig {
    /// A `samples.csv` file.
    pub approx: PathBuf,
    pub reference: IadReference,
}

/// Computes the IAD described by `config`.
pub fn iad_from_config(config: &IadConfig) -> Result<f64> {
    let approx = read_samples_csv(&config.approx)?;
    let reference = match &config.reference {
        IadReference::Samples { path } => Reference::Samples(read_samples_csv(path)?),
        IadReference::Gaussian { mean, cov } => {
            let d = mean.len();
            if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                return Err(FusionError::config("reference.cov", format!("must be {d} × {d}")));
            }
            Reference::Gaussian {
                mean: Vector::from_column_slice(mean),
                cov: Matrix::from_fn(d, d, |i, j| cov[i][j]),
            }
        }
    };
    iad(&approx, &reference)
}
