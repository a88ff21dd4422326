//! Experiment configuration, validation, orchestration over variants and
//! seeds, result persistence, and plot-data emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::engine::{self, make_variant, RunInputs, RunTrace, StepSchedule, Variant, VariantSpec};
use crate::graph::{regenerate_connected_rgg, Topology, TopologyMode, TopologySchedule, DEFAULT_ATTEMPT_CAP};
use crate::metrics::{self, AccuracyMode, MetricsRow};
use crate::mixing::{analyze, metropolis_weights};
use crate::objectives::{
    self, compute_constants, global_optimum, load_idx, make_quadratic, partition, ClassifierFamily, Dataset, Kind,
    NoiseMode, ObjectiveFamily, OptimumInfo, PartitionScheme, QuadraticSpec, TheoryConstants, DEFAULT_LAMBDA,
};
use crate::par::{self, Exec};
use crate::rng::{keyed, Domain};
use crate::sporadic::{sample_profile, DSchedule, Dist, ProfileSpec, SporadicityProfile};
use crate::theory::{self, FeasibilityReport, Regime};
use crate::{Error as CrateError, Result};

/// Root directory for relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "DSPODFL_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "results";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("bad override '{0}': expected key.path=value")]
    BadOverride(String),
    #[error("override path '{0}' does not name an object field")]
    OverridePath(String),
    #[error("unknown curve kind '{0}'")]
    UnknownCurve(String),
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub m: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Fixed seed shared by every cell; `None` derives it from the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mode: TopologyMode,
    #[serde(default = "default_cap")]
    pub attempt_cap: usize,
}

fn default_radius() -> f64 {
    0.4
}

fn default_cap() -> usize {
    DEFAULT_ATTEMPT_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub d: Dist,
    pub b: Dist,
    #[serde(default)]
    pub d_schedule: DSchedule,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub n: usize,
    #[serde(flatten)]
    pub spec: QuadraticSpecConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpecConfig {
    #[serde(default = "one")]
    pub eig_min: f64,
    #[serde(default = "four")]
    pub eig_max: f64,
    #[serde(default = "half")]
    pub heterogeneity: f64,
    #[serde(default = "one")]
    pub c_scale: f64,
}

fn one() -> f64 {
    1.0
}
fn four() -> f64 {
    4.0
}
fn half() -> f64 {
    0.5
}

impl From<&QuadraticSpecConfig> for QuadraticSpec {
    fn from(c: &QuadraticSpecConfig) -> Self {
        QuadraticSpec { eig_min: c.eig_min, eig_max: c.eig_max, heterogeneity: c.heterogeneity, c_scale: c.c_scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub family: Kind,
    #[serde(default)]
    pub quadratic: Option<QuadraticConfig>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default = "default_scheme")]
    pub partition: PartitionScheme,
    #[serde(default = "default_lpc")]
    pub labels_per_client: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub noise: NoiseMode,
    #[serde(default)]
    pub partition_seed: Option<u64>,
}

fn default_scheme() -> PartitionScheme {
    PartitionScheme::Iid
}
fn default_lpc() -> usize {
    10
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitConfig {
    #[default]
    Zero,
    Gaussian { std: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetConfig {
    Absolute { accuracy: f64 },
    /// A fraction of a reference variant's final accuracy in the same seed.
    Relative { variant: Variant, fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub variants: Vec<Variant>,
    pub topology: TopologyConfig,
    pub profile: ProfileConfig,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub schedule: StepSchedule,
    pub iterations: u64,
    #[serde(default = "default_eval")]
    pub eval_interval: u64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub theory_overlay: bool,
    #[serde(default)]
    pub theory_regime: Option<Regime>,
    #[serde(default)]
    pub accuracy_mode: AccuracyMode,
    #[serde(default)]
    pub target: Option<TargetConfig>,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub exec: Exec,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_eval() -> u64 {
    10
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value = serde_json::from_str(s)?;
        // A manifest carries its config under "config".
        if let Some(inner) = v.get("config").cloned() {
            if v.get("environments").is_some() {
                v = inner;
            }
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CrateError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text, overrides)
    }

    /// Absolute output directory, honoring the output-root variable.
    pub fn output_path(&self) -> PathBuf {
        let rel = self.output_dir.clone().unwrap_or_else(|| PathBuf::from(&self.name));
        if rel.is_absolute() {
            return rel;
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUTPUT_ROOT.into());
        root.join(rel)
    }

    fn regime(&self) -> Regime {
        self.theory_regime.unwrap_or(match self.schedule {
            StepSchedule::Diminishing { .. } => Regime::Diminishing,
            StepSchedule::Constant { .. } => Regime::Convex,
        })
    }
}

fn parse_leaf(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::BadOverride(spec.into()));
    }
    let mut cur = root;
    for key in &keys[..keys.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| ConfigError::OverridePath(path.into()))?;
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| ConfigError::OverridePath(path.into()))?;
    obj.insert(keys[keys.len() - 1].to_string(), parse_leaf(raw));
    Ok(())
}

/// Result of validation: warnings that do not block a run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Validation {
    pub warnings: Vec<String>,
    pub alpha_max: Option<f64>,
}

fn check_file(errors: &mut Vec<String>, p: &Path) {
    if !p.is_file() {
        errors.push(format!("missing dataset file: {}", p.display()));
    }
}

/// Cross-field checks. Returns all errors at once.
pub fn validate(cfg: &ExperimentConfig) -> Result<Validation> {
    let mut errors = Vec::new();
    if cfg.seeds.is_empty() {
        errors.push("seeds must be nonempty".into());
    }
    if cfg.variants.is_empty() {
        errors.push("variants must be nonempty".into());
    }
    if cfg.topology.m == 0 {
        errors.push("topology.m must be positive".into());
    }
    if !(cfg.topology.radius > 0.0) {
        errors.push("topology.radius must be positive".into());
    }
    if let Err(e) = cfg.schedule.validate() {
        errors.push(e.to_string());
    }
    let smooth = cfg.objective.family != Kind::HingeSvm;
    if cfg.theory_overlay && !smooth {
        errors.push("theory_overlay is not available for hinge-svm: the loss is not smooth".into());
    }
    match cfg.objective.family {
        Kind::Quadratic => {
            if cfg.objective.quadratic.is_none() {
                errors.push("objective.quadratic is required for the quadratic family".into());
            }
            if matches!(cfg.objective.noise, NoiseMode::Minibatch { .. }) {
                errors.push("quadratic families need exact or synthetic noise".into());
            }
        }
        _ => match &cfg.objective.dataset {
            None => errors.push("objective.dataset is required for classifier families".into()),
            Some(ds) => {
                for p in [&ds.train_images, &ds.train_labels, &ds.test_images, &ds.test_labels] {
                    check_file(&mut errors, p);
                }
            }
        },
    }
    if let NoiseMode::Minibatch { batch_size: 0 } = cfg.objective.noise {
        errors.push("batch_size must be at least 1".into());
    }
    if let Some(TargetConfig::Relative { variant, .. }) = &cfg.target {
        if !cfg.variants.contains(variant) {
            errors.push(format!("target references variant '{variant}' which is not run"));
        }
    }
    if !errors.is_empty() {
        return Err(ConfigError::Invalid(errors).into());
    }
    let mut out = Validation::default();
    if cfg.theory_overlay {
        let env = Environment::build(cfg, cfg.seeds[0])?;
        match env.theory.as_ref() {
            Some(t) => {
                out.alpha_max = Some(t.feasibility.alpha_max);
                if cfg.schedule.initial() >= t.feasibility.alpha_max {
                    out.warnings.push(format!(
                        "step {} is not below alpha_max = {:e}; bounds may not apply",
                        cfg.schedule.initial(),
                        t.feasibility.alpha_max
                    ));
                }
            }
            None => out.warnings.push("theory quantities unavailable for this configuration".into()),
        }
        if let Some(e) = &env.theory_error {
            return Err(ConfigError::Invalid(vec![e.clone()]).into());
        }
    }
    Ok(out)
}

/// Theory quantities bound to one environment.
#[derive(Debug, Clone, Serialize)]
pub struct TheorySummary {
    pub regime: Regime,
    pub constants: TheoryConstants,
    pub rho_tilde: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub feasibility: FeasibilityReport,
    pub rho_phi: Option<theory::RhoPhi>,
}

/// Sampled topology, profile, objective and theory for one environment seed.
#[derive(Debug, Clone)]
pub struct Environment {
    pub seed: u64,
    pub schedule: TopologySchedule,
    pub profile: SporadicityProfile,
    pub fam: ObjectiveFamily,
    pub test: Option<Arc<Dataset>>,
    pub optimum: Option<OptimumInfo>,
    pub theory: Option<TheorySummary>,
    pub theory_error: Option<String>,
    pub topology_attempts: usize,
}

fn load_classifier(cfg: &ExperimentConfig, m: usize, seed: u64) -> Result<(ObjectiveFamily, Arc<Dataset>)> {
    let ds = cfg.objective.dataset.as_ref().expect("validated");
    let train = load_idx(&ds.train_images, &ds.train_labels, ds.train_limit)?;
    let test = load_idx(&ds.test_images, &ds.test_labels, ds.test_limit)?;
    let classes = train.classes.max(test.classes);
    let train = train.with_classes(classes);
    let test = test.with_classes(classes);
    let part = partition(
        &train.labels,
        m,
        cfg.objective.partition,
        cfg.objective.labels_per_client,
        cfg.objective.partition_seed.unwrap_or(seed),
    )?;
    let fam = ClassifierFamily::new(cfg.objective.family, Arc::new(train), part.assignment, cfg.objective.lambda)?;
    Ok((ObjectiveFamily::Classifier(fam), Arc::new(test)))
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig, run_seed: u64) -> Result<Self> {
        let tc = &cfg.topology;
        let topo_seed = tc.seed.unwrap_or(run_seed);
        let (base, attempts) = regenerate_connected_rgg(tc.m, tc.radius, topo_seed, tc.attempt_cap)?;
        let mut schedule = TopologySchedule::new(base.clone(), tc.mode);
        schedule.attempt_cap = tc.attempt_cap;
        // Regenerated graphs may use any pair, so draw b for every pair.
        let support = match tc.mode {
            TopologyMode::Static => base.clone(),
            TopologyMode::PerIteration => Topology::complete(tc.m)?,
        };
        let spec = ProfileSpec { d: cfg.profile.d.clone(), b: cfg.profile.b.clone(), d_schedule: cfg.profile.d_schedule };
        let profile = sample_profile(&spec, &support, cfg.profile.seed.unwrap_or(run_seed))?;
        let (fam, test) = match cfg.objective.family {
            Kind::Quadratic => {
                let q = cfg.objective.quadratic.as_ref().expect("validated");
                (make_quadratic(tc.m, q.n, &(&q.spec).into(), q.seed.unwrap_or(run_seed))?, None)
            }
            _ => {
                let (f, t) = load_classifier(cfg, tc.m, run_seed)?;
                (f, Some(t))
            }
        };
        let optimum = if fam.is_smooth() { Some(global_optimum(&fam)?) } else { None };
        let mut env = Environment {
            seed: run_seed,
            schedule,
            profile,
            fam,
            test,
            optimum,
            theory: None,
            theory_error: None,
            topology_attempts: attempts,
        };
        if cfg.theory_overlay {
            match env.theory_summary(cfg) {
                Ok(t) => env.theory = Some(t),
                Err(e) => env.theory_error = Some(e.to_string()),
            }
        }
        Ok(env)
    }

    fn theory_summary(&self, cfg: &ExperimentConfig) -> Result<TheorySummary> {
        let opt = self.optimum.as_ref().ok_or(objectives::ObjectiveError::NonSmooth)?;
        let constants = compute_constants(&self.fam, Some(opt), cfg.objective.noise)?;
        let base = &self.schedule.base;
        let r = metropolis_weights(base);
        let rho_tilde = analyze(&r, &link_probs_on(base, &self.profile.b))?.rho_tilde;
        let (d_min, d_max) = (self.profile.d_min(), self.profile.d_max());
        let m = base.m;
        let regime = cfg.regime();
        let (feasibility, rho_phi) = match (regime, cfg.schedule) {
            (Regime::Convex, StepSchedule::Constant { alpha }) => {
                let f = theory::max_step_convex(&constants, d_min, d_max, rho_tilde).query(alpha);
                let r = theory::spectral_radius_convex(&constants, alpha, d_min, d_max, rho_tilde, m)?;
                (f, Some(r))
            }
            (Regime::Pl, StepSchedule::Constant { alpha }) => {
                let f = theory::max_step_pl(&constants, d_min, d_max, rho_tilde)?.query(alpha);
                let r = theory::spectral_radius_pl(&constants, alpha, d_min, d_max, rho_tilde, m)?;
                (f, Some(r))
            }
            (_, StepSchedule::Diminishing { alpha0, .. }) => {
                let gamma3 = match self.profile.d_schedule {
                    DSchedule::Diminishing { gamma3, .. } => gamma3,
                    DSchedule::Constant => 0.0,
                };
                (theory::diminishing_feasibility(&constants, rho_tilde, gamma3, alpha0)?, None)
            }
            (Regime::Diminishing, StepSchedule::Constant { .. }) => {
                return Err(ConfigError::Invalid(vec!["diminishing regime needs a diminishing schedule".into()]).into())
            }
        };
        Ok(TheorySummary { regime, constants, rho_tilde, d_min, d_max, feasibility, rho_phi })
    }

    fn theta0(&self, cfg: &ExperimentConfig) -> DVector<f64> {
        let n = self.fam.n();
        match cfg.init {
            InitConfig::Zero => DVector::zeros(n),
            InitConfig::Gaussian { std, seed } => {
                let mut rng = keyed(seed, Domain::Init, 0, 0);
                DVector::from_fn(n, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
            }
        }
    }

    /// Theory envelope at each iteration in `ks`, as `(opt_bound, cons_bound)`.
    pub fn envelope(&self, cfg: &ExperimentConfig, ks: &[u64]) -> Result<Vec<(u64, [f64; 2])>> {
        let Some(t) = &self.theory else { return Ok(Vec::new()) };
        let opt = self.optimum.as_ref().expect("theory implies optimum");
        let theta0 = self.theta0(cfg);
        let m = self.schedule.base.m;
        let c = &t.constants;
        let mut out = Vec::with_capacity(ks.len());
        match (t.regime, cfg.schedule) {
            (Regime::Convex, StepSchedule::Constant { alpha }) | (Regime::Pl, StepSchedule::Constant { alpha }) => {
                let (nu0, psi) = if t.regime == Regime::Convex {
                    let p = theory::phi_psi_convex(c, alpha, t.d_min, t.d_max, t.rho_tilde, m)?;
                    ([metrics::opt_error(&theta0, &opt.theta_star), 0.0], p.psi)
                } else {
                    let p = theory::phi_psi_pl(c, alpha, t.d_min, t.d_max, t.rho_tilde, m)?;
                    ([self.fam.global_loss(&theta0)? - opt.f_star, 0.0], p.psi)
                };
                let rho = t.rho_phi.expect("constant regime").value;
                for &k in ks {
                    let b = if k == 0 { nu0 } else { theory::geometric_envelope(nu0, rho, psi, k - 1)? };
                    out.push((k, b));
                }
            }
            (_, StepSchedule::Diminishing { alpha0, gamma }) => {
                let nu0 = [metrics::opt_error(&theta0, &opt.theta_star), 0.0];
                let inputs = theory::DiminishingInputs {
                    alpha0,
                    gamma,
                    gamma3: t.feasibility.gamma3.unwrap_or(0.0),
                    rho_tilde_sup: t.rho_tilde,
                    m,
                };
                for &k in ks {
                    if k >= 3 {
                        out.push((k, theory::sublinear_envelope(nu0, c, &inputs, k - 1)?));
                    }
                }
            }
            _ => {}
        }
        Ok(out)
    }

    pub fn run_inputs<'a>(&'a self, cfg: &ExperimentConfig, spec: &'a VariantSpec, seed: u64, exec: Exec) -> RunInputs<'a> {
        RunInputs {
            fam: &self.fam,
            topology: &self.schedule,
            variant: spec,
            delay_profile: &self.profile,
            schedule: cfg.schedule,
            noise: cfg.objective.noise,
            k_max: cfg.iterations,
            eval_interval: cfg.eval_interval,
            seed,
            theta0: self.theta0(cfg),
            optimum: self.optimum.as_ref(),
            test: self.test.as_deref(),
            accuracy: cfg.accuracy_mode,
            exec,
            record_steps: 0,
            snapshot_every: 0,
        }
    }
}

/// `b` restricted to the edges of `t`.
fn link_probs_on(t: &Topology, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(t.m, t.m);
    for &(i, j) in t.edges() {
        out[(i, j)] = b[(i, j)];
        out[(j, i)] = b[(i, j)];
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantRecord {
    pub variant: Variant,
    pub period: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnvironmentRecord {
    pub seed: u64,
    pub topology: Topology,
    pub topology_attempts: usize,
    pub d: Vec<f64>,
    /// Upper-triangle link probabilities as `[i, j, b_ij]`, 1-based.
    pub b: Vec<(usize, usize, f64)>,
    pub variants: Vec<VariantRecord>,
    pub theory: Option<TheorySummary>,
    pub theory_error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub config: ExperimentConfig,
    pub environments: Vec<EnvironmentRecord>,
    pub warnings: Vec<String>,
    pub timing_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub variant: Variant,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub final_accuracy: Option<f64>,
    pub final_opt_err: Option<f64>,
    pub final_cons_err: Option<f64>,
    pub target: Option<f64>,
    pub delay_to_target: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub cells: Vec<CellSummary>,
    /// Mean delay-to-target per variant over seeds that reached it.
    pub mean_delay_to_target: BTreeMap<String, Option<f64>>,
}

#[derive(Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub traces: BTreeMap<(Variant, u64), RunTrace>,
}

/// Smallest `tau_cum` at which accuracy reaches `target`, interpolating
/// linearly between evaluation points.
pub fn delay_to_target(rows: &[MetricsRow], target: f64) -> Option<f64> {
    let mut prev: Option<(f64, f64)> = None;
    for r in rows {
        let acc = r.test_accuracy?;
        if acc >= target {
            return Some(match prev {
                Some((pa, pt)) if acc > pa => pt + (target - pa) / (acc - pa) * (r.tau_cum - pt),
                _ => r.tau_cum,
            });
        }
        prev = Some((acc, r.tau_cum));
    }
    None
}

pub fn run_file_name(variant: Variant, seed: u64) -> String {
    format!("{variant}__seed{seed}.csv")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CrateError + '_ {
    move |source| CrateError::Io { path: path.display().to_string(), source }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Run every `(variant, seed)` cell and persist the results under `dir`.
pub fn execute_into(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let started = Instant::now();
    let validation = validate(cfg)?;
    let runs_dir = dir.join("runs");
    fs::create_dir_all(&runs_dir).map_err(io_err(&runs_dir))?;

    let envs: Vec<Result<Environment>> = par::map(cfg.exec, cfg.seeds.len(), |s| Environment::build(cfg, cfg.seeds[s]));
    let envs: Vec<Environment> = envs.into_iter().collect::<Result<_>>()?;
    let specs: Vec<Vec<VariantSpec>> =
        envs.iter().map(|e| cfg.variants.iter().map(|&v| make_variant(v, &e.profile)).collect()).collect();

    let nv = cfg.variants.len();
    let cells: Vec<(usize, usize)> = (0..cfg.seeds.len()).flat_map(|s| (0..nv).map(move |v| (s, v))).collect();
    let results: Vec<Result<RunTrace, engine::EngineError>> = par::map(cfg.exec, cells.len(), |c| {
        let (s, v) = cells[c];
        // Cells already fan out; each run stays sequential inside.
        engine::run(&envs[s].run_inputs(cfg, &specs[s][v], cfg.seeds[s], Exec::Sequential))
    });

    let mut traces = BTreeMap::new();
    let mut cell_summaries = Vec::new();
    for (&(s, v), res) in cells.iter().zip(results) {
        let (variant, seed) = (cfg.variants[v], cfg.seeds[s]);
        match res {
            Ok(tr) => {
                let path = runs_dir.join(run_file_name(variant, seed));
                let f = fs::File::create(&path).map_err(io_err(&path))?;
                metrics::write_csv(f, &tr.rows)?;
                traces.insert((variant, seed), tr);
            }
            Err(e) => {
                log::error!("cell {variant}/seed {seed} failed: {e}");
                cell_summaries.push(CellSummary {
                    variant,
                    seed,
                    ok: false,
                    error: Some(e.to_string()),
                    final_accuracy: None,
                    final_opt_err: None,
                    final_cons_err: None,
                    target: None,
                    delay_to_target: None,
                });
            }
        }
    }
    for (&(variant, seed), tr) in &traces {
        let last = tr.rows.last().expect("initial row");
        let target = match &cfg.target {
            None => None,
            Some(TargetConfig::Absolute { accuracy }) => Some(*accuracy),
            Some(TargetConfig::Relative { variant: reference, fraction }) => traces
                .get(&(*reference, seed))
                .and_then(|t| t.rows.last().and_then(|r| r.test_accuracy))
                .map(|a| a * fraction),
        };
        cell_summaries.push(CellSummary {
            variant,
            seed,
            ok: true,
            error: None,
            final_accuracy: last.test_accuracy,
            final_opt_err: last.opt_err,
            final_cons_err: Some(last.cons_err),
            target,
            delay_to_target: target.and_then(|t| delay_to_target(&tr.rows, t)),
        });
    }
    cell_summaries.sort_by_key(|c| (cfg.variants.iter().position(|&v| v == c.variant), c.seed));

    if cfg.theory_overlay {
        let theory_dir = dir.join("theory");
        fs::create_dir_all(&theory_dir).map_err(io_err(&theory_dir))?;
        let ks: Vec<u64> = (0..=cfg.iterations)
            .filter(|&k| k == 0 || k == cfg.iterations || (cfg.eval_interval > 0 && k % cfg.eval_interval == 0))
            .collect();
        for env in &envs {
            match env.envelope(cfg, &ks) {
                Ok(bounds) => {
                    let rows: Vec<EnvelopeRow> = bounds
                        .into_iter()
                        .map(|(k, b)| EnvelopeRow { iteration: k, opt_bound: b[0], cons_bound: b[1] })
                        .collect();
                    write_json(&theory_dir.join(format!("envelope__seed{}.json", env.seed)), &rows)?;
                }
                Err(e) => log::warn!("no envelope for seed {}: {e}", env.seed),
            }
        }
    }

    let mut mean_delay = BTreeMap::new();
    for &v in &cfg.variants {
        let ds: Vec<f64> = cell_summaries.iter().filter(|c| c.variant == v).filter_map(|c| c.delay_to_target).collect();
        mean_delay.insert(v.to_string(), (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64));
    }
    let summary = Summary { name: cfg.name.clone(), cells: cell_summaries, mean_delay_to_target: mean_delay };
    write_json(&dir.join("summary.json"), &summary)?;

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        environments: envs
            .iter()
            .zip(&specs)
            .map(|(e, sp)| EnvironmentRecord {
                seed: e.seed,
                topology: e.schedule.base.clone(),
                topology_attempts: e.topology_attempts,
                d: e.profile.d.clone(),
                b: upper_triangle(&e.profile.b),
                variants: sp.iter().map(|s| VariantRecord { variant: s.variant, period: s.period }).collect(),
                theory: e.theory.clone(),
                theory_error: e.theory_error.clone(),
            })
            .collect(),
        warnings: validation.warnings,
        timing_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(Outcome { dir: dir.to_path_buf(), summary, traces })
}

pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    execute_into(cfg, &cfg.output_path())
}

fn upper_triangle(b: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let m = b.nrows();
    let mut out = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if b[(i, j)] > 0.0 {
                out.push((i + 1, j + 1, b[(i, j)]));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub iteration: u64,
    pub opt_bound: f64,
    pub cons_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    AccuracyVsDelay,
    ErrorVsIteration,
    EnvelopeOverlay,
}

impl std::str::FromStr for Curve {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "accuracy-vs-delay" => Ok(Curve::AccuracyVsDelay),
            "error-vs-iteration" => Ok(Curve::ErrorVsIteration),
            "envelope-overlay" => Ok(Curve::EnvelopeOverlay),
            other => Err(ConfigError::UnknownCurve(other.into())),
        }
    }
}

impl Curve {
    pub fn name(self) -> &'static str {
        match self {
            Curve::AccuracyVsDelay => "accuracy-vs-delay",
            Curve::ErrorVsIteration => "error-vs-iteration",
            Curve::EnvelopeOverlay => "envelope-overlay",
        }
    }
}

fn parse_run_name(name: &str) -> Option<(String, u64)> {
    let stem = name.strip_suffix(".csv")?;
    let (variant, seed) = stem.split_once("__seed")?;
    Some((variant.to_string(), seed.parse().ok()?))
}

/// Long-format plot data under `dir/plots/<curve>.csv`.
pub fn emit_plot_data(dir: &Path, curve: Curve) -> Result<PathBuf> {
    let runs_dir = dir.join("runs");
    let mut runs = Vec::new();
    if runs_dir.is_dir() {
        for entry in fs::read_dir(&runs_dir).map_err(io_err(&runs_dir))? {
            let entry = entry.map_err(io_err(&runs_dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some((variant, seed)) = parse_run_name(&name) {
                runs.push((variant, seed, entry.path()));
            }
        }
    }
    runs.sort();
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(io_err(&plots))?;
    let out_path = plots.join(format!("{}.csv", curve.name()));
    let mut w = csv::Writer::from_path(&out_path)?;
    match curve {
        Curve::EnvelopeOverlay => {
            w.write_record(["variant", "seed", "iteration", "opt_err", "cons_err", "opt_bound", "cons_bound"])?
        }
        _ => w.write_record(["variant", "seed", "x", "y"])?,
    }
    for (variant, seed, path) in runs {
        let rows = metrics::read_csv(fs::File::open(&path).map_err(io_err(&path))?)?;
        match curve {
            Curve::AccuracyVsDelay => {
                for r in rows.iter().filter(|r| r.test_accuracy.is_some()) {
                    w.write_record([variant.clone(), seed.to_string(), fmt(r.tau_cum), fmt(r.test_accuracy.unwrap())])?;
                }
            }
            Curve::ErrorVsIteration => {
                for r in &rows {
                    let y = r.opt_err.unwrap_or(r.train_loss);
                    w.write_record([variant.clone(), seed.to_string(), r.iteration.to_string(), fmt(y)])?;
                }
            }
            Curve::EnvelopeOverlay => {
                let env_path = dir.join("theory").join(format!("envelope__seed{seed}.json"));
                let bounds: Vec<EnvelopeRow> = match fs::read_to_string(&env_path) {
                    Ok(text) => serde_json::from_str(&text)?,
                    Err(_) => Vec::new(),
                };
                let by_k: BTreeMap<u64, EnvelopeRow> = bounds.into_iter().map(|b| (b.iteration, b)).collect();
                for r in &rows {
                    let b = by_k.get(&r.iteration);
                    w.write_record([
                        variant.clone(),
                        seed.to_string(),
                        r.iteration.to_string(),
                        r.opt_err.map(fmt).unwrap_or_default(),
                        fmt(r.cons_err),
                        b.map(|b| fmt(b.opt_bound)).unwrap_or_default(),
                        b.map(|b| fmt(b.cons_bound)).unwrap_or_default(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(io_err(&out_path))?;
    Ok(out_path)
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn quad_config() -> ExperimentConfig {
        let text = r#"{
            "name": "t",
            "variants": ["dspodfl", "dgd"],
            "topology": {"m": 6, "radius": 0.6, "seed": 3},
            "profile": {"d": {"kind": "fixed", "values": [0.9]}, "b": {"kind": "uniform"}, "seed": 4},
            "objective": {"family": "quadratic", "quadratic": {"n": 3, "seed": 5}, "noise": {"mode": "synthetic", "sigma2": 0.01}},
            "schedule": {"mode": "constant", "alpha": 0.01},
            "iterations": 25,
            "eval_interval": 10,
            "seeds": [1, 2],
            "theory_overlay": true
        }"#;
        ExperimentConfig::from_json_str(text, &[]).unwrap()
    }

    #[test]
    fn overrides_set_leaves() {
        let mut v: Value = serde_json::json!({"a": {"b": 1}, "c": "x"});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "c=plain").unwrap();
        apply_override(&mut v, "d.e=[1,2]").unwrap();
        assert_eq!(v, serde_json::json!({"a": {"b": 2.5}, "c": "plain", "d": {"e": [1, 2]}}));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "c.x=1").is_err());
    }

    #[test]
    fn config_roundtrip_with_override() {
        let cfg = quad_config();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json_str(&text, &["iterations=7".into()]).unwrap();
        assert_eq!(back.iterations, 7);
        assert_eq!(back.variants, cfg.variants);
    }

    #[test]
    fn validation_errors_are_aggregated() {
        let mut cfg = quad_config();
        cfg.seeds.clear();
        cfg.objective.family = Kind::HingeSvm;
        cfg.objective.dataset = Some(DatasetConfig {
            train_images: "/nonexistent/a".into(),
            train_labels: "/nonexistent/b".into(),
            test_images: "/nonexistent/c".into(),
            test_labels: "/nonexistent/d".into(),
            train_limit: None,
            test_limit: None,
        });
        let err = validate(&cfg).unwrap_err().to_string();
        assert!(err.contains("seeds must be nonempty"));
        assert!(err.contains("hinge-svm"));
        assert!(err.contains("/nonexistent/a"));
    }

    #[test]
    fn large_step_warns_but_validates() {
        let mut cfg = quad_config();
        cfg.schedule = StepSchedule::Constant { alpha: 10.0 };
        let v = validate(&cfg).unwrap();
        assert_eq!(v.warnings.len(), 1);
    }

    #[test]
    fn execute_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quad_config();
        // Envelopes are only written for instances whose rate contracts.
        cfg.profile.d = Dist::fixed(0.98);
        let q = &mut cfg.objective.quadratic.as_mut().unwrap().spec;
        q.eig_max = 2.0;
        q.heterogeneity = 0.2;
        let alpha_max = validate(&cfg).unwrap().alpha_max.unwrap();
        cfg.schedule = StepSchedule::Constant { alpha: 0.5 * alpha_max };
        let out = execute_into(&cfg, dir.path()).unwrap();
        assert_eq!(out.traces.len(), 4);
        let rows = metrics::read_csv(fs::File::open(dir.path().join("runs/dgd__seed1.csv")).unwrap()).unwrap();
        assert_eq!(rows.len(), 25usize.div_ceil(10) + 1);
        assert!(dir.path().join("manifest.json").is_file());
        assert!(dir.path().join("theory/envelope__seed2.json").is_file());
        let p = emit_plot_data(dir.path(), Curve::EnvelopeOverlay).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 4);
        assert!(text.lines().skip(1).all(|l| !l.ends_with(',')));
    }

    #[test]
    fn rerun_from_manifest_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = quad_config();
        execute_into(&cfg, a.path()).unwrap();
        let manifest = fs::read_to_string(a.path().join("manifest.json")).unwrap();
        let mut again = ExperimentConfig::from_json_str(&manifest, &[]).unwrap();
        again.exec = Exec::Sequential;
        execute_into(&again, b.path()).unwrap();
        for f in ["dspodfl__seed1.csv", "dgd__seed2.csv"] {
            assert_eq!(fs::read(a.path().join("runs").join(f)).unwrap(), fs::read(b.path().join("runs").join(f)).unwrap());
        }
    }

    #[test]
    fn empty_results_give_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = emit_plot_data(dir.path(), Curve::AccuracyVsDelay).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "variant,seed,x,y\n");
        assert!("bar-chart".parse::<Curve>().is_err());
    }

    #[test]
    fn delay_to_target_interpolates() {
        let row = |k: u64, tau: f64, acc: f64| MetricsRow {
            iteration: k,
            tau_trans: 0.0,
            tau_proc: 0.0,
            tau_total: 0.0,
            tau_cum: tau,
            cons_err: 0.0,
            opt_err: None,
            pl_err: None,
            train_loss: 0.0,
            test_accuracy: Some(acc),
        };
        let rows = vec![row(0, 0.0, 0.1), row(10, 10.0, 0.3), row(20, 20.0, 0.7)];
        assert_eq!(delay_to_target(&rows, 0.5), Some(15.0));
        assert_eq!(delay_to_target(&rows, 0.05), Some(0.0));
        assert_eq!(delay_to_target(&rows, 0.9), None);
    }
}
