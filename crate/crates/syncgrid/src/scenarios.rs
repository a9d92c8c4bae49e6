//! Named experiments: config files, execution, CSV/JSON artifacts and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::circle_snapshot;
use crate::microgrid::{
    compare_schemes, max_gain_decrease, passivity_diagnostics, recovery_time, FaultKind, MicrogridConfig, MicrogridError,
};
use crate::netgraph::Matrix;
use crate::powergrid::{
    bifurcation_sweep, chimera_detect, classify_fixed_point, compass_vectors, critical_coupling_gate, default_guesses,
    equilibrium_solve, initial_state, simulate, swing_to_kuramoto, two_area_scenario, CcSystem, DetectorThresholds,
    GeneratorParams, PowerGridError, SignedCoupling, SweepParam, SweepSpec,
};
use crate::simcore::{fmt_f64, TimeSeries};
use crate::tcl::{
    fluctuation_trial, metric_rmse, simulate_averaging, simulate_load_following, simulate_phase_ensemble,
    single_unit_comparison, steady_relative_error, steady_stats, tail_start, AveragingConfig, LoadFollowConfig,
    PhaseEnsembleConfig, SingleUnitConfig, TclError,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("schema error at `{path}`: {msg}")]
    Schema { path: String, msg: String },
    #[error("unknown scenario `{0}` (see `syncgrid list`)")]
    Unknown(String),
    #[error("kind `{kind}` does not belong to model `{model}`")]
    ModelMismatch { model: String, kind: String },
    #[error("invalid override: {0}")]
    Override(String),
    #[error(transparent)]
    Microgrid(#[from] MicrogridError),
    #[error(transparent)]
    Tcl(#[from] TclError),
    #[error(transparent)]
    PowerGrid(#[from] PowerGridError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ScenarioError {
    /// Simulation time at which a run diverged, if that is what failed.
    pub fn divergence_time(&self) -> Option<f64> {
        match self {
            ScenarioError::Microgrid(MicrogridError::Divergence { t }) => Some(*t),
            ScenarioError::PowerGrid(PowerGridError::Divergence { t }) => Some(*t),
            ScenarioError::Tcl(TclError::Sim(crate::simcore::SimError::Divergence { t })) => Some(*t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Microgrid,
    Tcl,
    Powergrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    MicrogridCompare,
    TclSingleUnit,
    TclPhaseEnsemble,
    TclAveraging,
    TclFluctuation,
    TclLoadFollow,
    PowergridCase,
    PowergridSweep,
}

impl Kind {
    pub fn model(self) -> Model {
        match self {
            Kind::MicrogridCompare => Model::Microgrid,
            Kind::PowergridCase | Kind::PowergridSweep => Model::Powergrid,
            _ => Model::Tcl,
        }
    }
}

/// On-disk layout of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: Model,
    pub kind: Kind,
    pub time_unit: String,
    /// Keep every k-th trajectory row in CSV output.
    #[serde(default = "one")]
    pub output_stride: usize,
    pub config: Value,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingScenario {
    pub fleet: AveragingConfig,
    /// Trailing window used for steady statistics, in seconds.
    pub steady_window: f64,
    /// Reference level for error metrics; defaults to capacity × mean sampled duty.
    #[serde(default)]
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationScenario {
    pub fleet: AveragingConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_tail")]
    pub tail_fraction: f64,
}

fn default_tail() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadFollowScenario {
    #[serde(flatten)]
    pub follow: LoadFollowConfig,
    /// Trailing fraction of each utility segment used to measure tracking.
    #[serde(default = "half")]
    pub segment_tail: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemSpec {
    /// Built-in two-area case (1 or 2).
    Case(u32),
    Matrix { k: Vec<Vec<f64>>, omega: Vec<f64>, alpha: Vec<f64>, areas: Vec<usize> },
    /// Generator table plus admittance (real and imaginary parts), reduced to oscillators.
    Generators { generators: Vec<GeneratorParams>, y_re: Vec<Vec<f64>>, y_im: Vec<Vec<f64>>, grid_freq: f64 },
}

impl SystemSpec {
    pub fn build(&self) -> Result<CcSystem, PowerGridError> {
        match self {
            SystemSpec::Case(c) => two_area_scenario(*c),
            SystemSpec::Matrix { k, omega, alpha, areas } => {
                let n = areas.len();
                if k.len() != n || k.iter().any(|r| r.len() != n) {
                    return Err(PowerGridError::Invalid("k must be n x n".into()));
                }
                let km = Matrix::from_fn(n, n, |i, j| k[i][j]);
                CcSystem::new(omega.clone(), alpha.clone(), SignedCoupling::new(km, areas.clone())?)
            }
            SystemSpec::Generators { generators, y_re, y_im, grid_freq } => {
                let n = generators.len();
                if y_re.len() != n || y_im.len() != n {
                    return Err(PowerGridError::Invalid("admittance must be n x n".into()));
                }
                let y: Vec<Vec<num_complex::Complex64>> = (0..n)
                    .map(|i| {
                        if y_re[i].len() != n || y_im[i].len() != n {
                            return Err(PowerGridError::Invalid("admittance must be n x n".into()));
                        }
                        Ok((0..n).map(|j| num_complex::Complex64::new(y_re[i][j], y_im[i][j])).collect())
                    })
                    .collect::<Result<_, _>>()?;
                let kp = swing_to_kuramoto(generators, &y, *grid_freq)?;
                let areas = generators.iter().map(|g| g.area).collect();
                CcSystem::new(kp.omega, kp.alpha, SignedCoupling::new(kp.k, areas)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScenario {
    pub system: SystemSpec,
    pub t_end: f64,
    #[serde(default = "default_pg_dt")]
    pub dt: f64,
    #[serde(default = "default_pg_stride")]
    pub record_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub thresholds: Option<DetectorThresholds>,
}

fn default_pg_dt() -> f64 {
    0.01
}
fn default_pg_stride() -> usize {
    10
}

/// Typed experiment behind a scenario file.
#[derive(Debug, Clone, PartialEq)]
pub enum Experiment {
    MicrogridCompare(MicrogridConfig),
    TclSingleUnit(SingleUnitConfig),
    TclPhaseEnsemble(PhaseEnsembleConfig),
    TclAveraging(AveragingScenario),
    TclFluctuation(FluctuationScenario),
    TclLoadFollow(LoadFollowScenario),
    PowergridCase(CaseScenario),
    PowergridSweep(SweepSpec),
}

fn parse_value<T: for<'de> Deserialize<'de>>(v: &Value, prefix: &str) -> Result<T, ScenarioError> {
    serde_path_to_error::deserialize(v).map_err(|e| ScenarioError::Schema {
        path: format!("{prefix}{}", e.path()),
        msg: e.inner().to_string(),
    })
}

impl Experiment {
    fn parse(kind: Kind, v: &Value) -> Result<Self, ScenarioError> {
        let p = "config.";
        Ok(match kind {
            Kind::MicrogridCompare => Experiment::MicrogridCompare(parse_value(v, p)?),
            Kind::TclSingleUnit => Experiment::TclSingleUnit(parse_value(v, p)?),
            Kind::TclPhaseEnsemble => Experiment::TclPhaseEnsemble(parse_value(v, p)?),
            Kind::TclAveraging => Experiment::TclAveraging(parse_value(v, p)?),
            Kind::TclFluctuation => Experiment::TclFluctuation(parse_value(v, p)?),
            Kind::TclLoadFollow => Experiment::TclLoadFollow(parse_value(v, p)?),
            Kind::PowergridCase => Experiment::PowergridCase(parse_value(v, p)?),
            Kind::PowergridSweep => Experiment::PowergridSweep(parse_value(v, p)?),
        })
    }

    fn to_value(&self) -> Value {
        let r = match self {
            Experiment::MicrogridCompare(c) => serde_json::to_value(c),
            Experiment::TclSingleUnit(c) => serde_json::to_value(c),
            Experiment::TclPhaseEnsemble(c) => serde_json::to_value(c),
            Experiment::TclAveraging(c) => serde_json::to_value(c),
            Experiment::TclFluctuation(c) => serde_json::to_value(c),
            Experiment::TclLoadFollow(c) => serde_json::to_value(c),
            Experiment::PowergridCase(c) => serde_json::to_value(c),
            Experiment::PowergridSweep(c) => serde_json::to_value(c),
        };
        r.expect("experiment configs serialize")
    }

    pub fn seed(&self) -> u64 {
        match self {
            Experiment::MicrogridCompare(c) => c.seed,
            Experiment::TclSingleUnit(c) => c.seed,
            Experiment::TclPhaseEnsemble(c) => c.seed,
            Experiment::TclAveraging(c) => c.fleet.seed,
            Experiment::TclFluctuation(c) => c.seeds.first().copied().unwrap_or(0),
            Experiment::TclLoadFollow(c) => c.follow.fleet.seed,
            Experiment::PowergridCase(c) => c.seed,
            Experiment::PowergridSweep(c) => c.seed,
        }
    }

    /// For fluctuation trials the seed list becomes consecutive seeds starting at `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Experiment::MicrogridCompare(c) => c.seed = seed,
            Experiment::TclSingleUnit(c) => c.seed = seed,
            Experiment::TclPhaseEnsemble(c) => c.seed = seed,
            Experiment::TclAveraging(c) => c.fleet.seed = seed,
            Experiment::TclFluctuation(c) => {
                let n = c.seeds.len() as u64;
                c.seeds = (seed..seed + n).collect();
            }
            Experiment::TclLoadFollow(c) => c.follow.fleet.seed = seed,
            Experiment::PowergridCase(c) => c.seed = seed,
            Experiment::PowergridSweep(c) => c.seed = seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub kind: Kind,
    pub time_unit: String,
    pub output_stride: usize,
    pub experiment: Experiment,
}

impl Scenario {
    pub fn from_value(v: &Value) -> Result<Self, ScenarioError> {
        let f: ScenarioFile = parse_value(v, "")?;
        if f.kind.model() != f.model {
            return Err(ScenarioError::ModelMismatch {
                model: serde_json::to_string(&f.model).unwrap_or_default(),
                kind: serde_json::to_string(&f.kind).unwrap_or_default(),
            });
        }
        let experiment = Experiment::parse(f.kind, &f.config)?;
        Ok(Self {
            name: f.name,
            description: f.description,
            kind: f.kind,
            time_unit: f.time_unit,
            output_stride: f.output_stride.max(1),
            experiment,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ScenarioError::Schema {
            path: format!("line {} column {}", e.line(), e.column()),
            msg: e.to_string(),
        })?;
        Self::from_value(&v)
    }

    pub fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            name: self.name.clone(),
            description: self.description.clone(),
            model: self.kind.model(),
            kind: self.kind,
            time_unit: self.time_unit.clone(),
            output_stride: self.output_stride,
            config: self.experiment.to_value(),
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self.to_file()).expect("scenario file serializes")
    }

    pub fn seed(&self) -> u64 {
        self.experiment.seed()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.experiment.set_seed(seed);
        self
    }

    /// Re-parses after setting a config entry addressed by a JSON pointer (`/control/delta`)
    /// or a dotted path (`control.delta`).
    pub fn with_override(&self, path: &str, value: Value) -> Result<Self, ScenarioError> {
        let mut v = self.to_value();
        let pointer = if path.starts_with('/') {
            format!("/config{path}")
        } else {
            format!("/config/{}", path.replace('.', "/"))
        };
        let slot = v
            .pointer_mut(&pointer)
            .ok_or_else(|| ScenarioError::Override(format!("no config entry at `{path}`")))?;
        *slot = value;
        Self::from_value(&v)
    }

    pub fn manifest(&self) -> Value {
        json!({
            "tool": "syncgrid",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed(),
            "scenario": self.to_value(),
        })
    }

    /// Rebuilds the scenario recorded in a manifest.
    pub fn from_manifest(text: &str) -> Result<Self, ScenarioError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ScenarioError::Schema {
            path: format!("line {} column {}", e.line(), e.column()),
            msg: e.to_string(),
        })?;
        let sc = v.get("scenario").ok_or_else(|| ScenarioError::Schema {
            path: "scenario".into(),
            msg: "missing field".into(),
        })?;
        let s = Self::from_value(sc)?;
        match v.get("seed").and_then(Value::as_u64) {
            Some(seed) if seed != s.seed() => Ok(s.with_seed(seed)),
            _ => Ok(s),
        }
    }
}

// ------------------------------------------------------------------ built-ins

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../scenarios/", $name, ".json")))),*]
    };
}

const BUILTINS: &[(&str, &str)] = builtin![
    "microgrid-nominal",
    "microgrid-delay-250ms",
    "microgrid-malicious",
    "microgrid-malicious-clamp",
    "microgrid-delta-zero",
    "tcl-single-unit",
    "tcl-ensemble-n4-duty50",
    "tcl-ensemble-n100",
    "tcl-heterogeneous-phase",
    "tcl-heterogeneous-averaging",
    "tcl-averaging",
    "tcl-population-n1000",
    "tcl-population-n10000",
    "tcl-pred-n100",
    "tcl-loadfollow-100-50",
    "powergrid-case1",
    "powergrid-case2",
    "powergrid-sweep-r1",
    "powergrid-sweep-r2",
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTINS.iter().map(|b| b.0).collect()
}

pub fn builtin(name: &str) -> Result<Scenario, ScenarioError> {
    let (_, text) = BUILTINS
        .iter()
        .find(|b| b.0 == name)
        .ok_or_else(|| ScenarioError::Unknown(name.to_string()))?;
    Scenario::from_json(text)
}

/// Names and one-line descriptions of every built-in.
pub fn list_scenarios() -> Vec<(String, String)> {
    BUILTINS
        .iter()
        .map(|(n, _)| {
            let d = builtin(n).map(|s| s.description).unwrap_or_else(|e| format!("<invalid: {e}>"));
            (n.to_string(), d)
        })
        .collect()
}

/// A built-in name or a path to a scenario file.
pub fn load(name_or_path: &str) -> Result<Scenario, ScenarioError> {
    let p = Path::new(name_or_path);
    if p.is_file() {
        let text = fs::read_to_string(p).map_err(|source| ScenarioError::Io { path: p.to_path_buf(), source })?;
        return Scenario::from_json(&text);
    }
    builtin(name_or_path)
}

// ------------------------------------------------------------------ execution

#[derive(Debug, Clone)]
pub struct Artifacts {
    /// (file name, CSV text).
    pub files: Vec<(String, String)>,
    /// Model-specific results; wrapped with the schema header on write.
    pub results: Value,
}

fn csv(ts: &TimeSeries, stride: usize) -> String {
    if stride > 1 {
        ts.decimate(stride).to_csv()
    } else {
        ts.to_csv()
    }
}

pub fn run(s: &Scenario) -> Result<Artifacts, ScenarioError> {
    let stride = s.output_stride;
    match &s.experiment {
        Experiment::MicrogridCompare(cfg) => {
            let (cmp, rd, rr) = compare_schemes(cfg)?;
            let pass = passivity_diagnostics(&rr, 0.0, 1e-6);
            let recovery = match cfg.fault.kind {
                FaultKind::MaliciousData if cfg.fault.t_end.is_finite() => json!({
                    "fault_end": cfg.fault.t_end,
                    "dapi": recovery_time(&rd, cfg.fault.t_end),
                    "radapi": recovery_time(&rr, cfg.fault.t_end),
                }),
                _ => Value::Null,
            };
            let mut zt = TimeSeries::new(&["V", "W", "U", "Z", "Zdot"]);
            for k in 0..pass.t.len() {
                zt.push(pass.t[k], &[pass.v[k], pass.w[k], pass.u[k], pass.z[k], pass.zdot[k]]);
            }
            Ok(Artifacts {
                files: vec![
                    ("dapi.csv".into(), csv(&rd.series, stride)),
                    ("radapi.csv".into(), csv(&rr.series, stride)),
                    ("storage.csv".into(), csv(&zt, stride)),
                ],
                results: json!({
                    "dapi": cmp.dapi,
                    "radapi": cmp.radapi,
                    "dapi_settling_s": cmp.dapi.scenario,
                    "radapi_settling_s": cmp.radapi.scenario,
                    "net_gain_pct": cmp.net_gain,
                    "radapi_peak_gain": cmp.radapi_peak_gain,
                    "max_gain_decrease": max_gain_decrease(&rr),
                    "passivity": {
                        "nonincreasing": pass.nonincreasing,
                        "max_violation": pass.max_violation,
                        "tolerance": pass.tolerance,
                    },
                    "recovery": recovery,
                }),
            })
        }
        Experiment::TclSingleUnit(cfg) => {
            let (rep, hybrid, phase) = single_unit_comparison(cfg)?;
            Ok(Artifacts {
                files: vec![
                    ("hybrid.csv".into(), csv(&hybrid, stride)),
                    ("phase.csv".into(), csv(&phase.series, stride)),
                ],
                results: serde_json::to_value(rep).expect("report serializes"),
            })
        }
        Experiment::TclPhaseEnsemble(cfg) => {
            let r = simulate_phase_ensemble(cfg)?;
            let p = r.series.channel("P_agg").expect("P_agg channel");
            let i0 = tail_start(p.len(), cfg.steady_fraction);
            let reference = cfg.reference_power()?;
            let refp = vec![reference; p.len() - i0];
            let tail = &p[i0..];
            let circle = circle_snapshot(&r.final_phases, cfg.t_end);
            let mut ct = TimeSeries::new(&["unit", "phase", "x", "y"]);
            for c in &circle {
                ct.push(c.t, &[(c.label + 1) as f64, c.phase, c.x, c.y]);
            }
            Ok(Artifacts {
                files: vec![("trajectory.csv".into(), csv(&r.series, stride)), ("circle.csv".into(), ct.to_csv())],
                results: json!({
                    "reference_kw": reference,
                    "steady": steady_stats(tail),
                    "steady_p_agg_kw": steady_stats(tail).mean,
                    "relative_error_pct": steady_relative_error(&refp, tail, 1.0),
                    "rmse_pct": metric_rmse(&r.series.times[i0..], &refp, tail, reference),
                }),
            })
        }
        Experiment::TclAveraging(sc) => {
            let r = simulate_averaging(&sc.fleet)?;
            let ts = &r.series;
            let p = ts.channel("P_agg").expect("P_agg channel");
            let keep = ((sc.steady_window / sc.fleet.dt).round() as usize).clamp(1, p.len());
            let i0 = p.len() - keep;
            let n = r.fleet.duty.len() as f64;
            let reference = sc
                .reference
                .unwrap_or(r.fleet.capacity() * r.fleet.duty.iter().sum::<f64>() / n);
            let refp = vec![reference; keep];
            let fsum = ts.channel("f_sum").expect("f_sum channel");
            let drift = fsum.iter().map(|v| ((v - fsum[0]) / fsum[0]).abs()).fold(0.0, f64::max);
            let mean0 = fsum[0] / n;
            let spread = r.f_final.iter().map(|f| ((f - mean0) / mean0).abs()).fold(0.0, f64::max);
            Ok(Artifacts {
                files: vec![("trajectory.csv".into(), csv(ts, stride))],
                results: json!({
                    "reference_kw": reference,
                    "steady": steady_stats(&p[i0..]),
                    "steady_p_agg_kw": steady_stats(&p[i0..]).mean,
                    "relative_error_pct": steady_relative_error(&refp, &p[i0..], 1.0),
                    "rmse_pct": metric_rmse(&ts.times[i0..], &refp, &p[i0..], reference),
                    "f_sum_max_relative_drift": drift,
                    "f_final_max_relative_deviation": spread,
                }),
            })
        }
        Experiment::TclFluctuation(sc) => {
            use rayon::prelude::*;
            let trials = sc
                .seeds
                .par_iter()
                .map(|&seed| fluctuation_trial(&sc.fleet, seed, sc.tail_fraction))
                .collect::<Result<Vec<_>, _>>()?;
            let mut t = TimeSeries::new(&["seed", "random_p2p", "desync_p2p", "p_red_pct"]);
            for (k, tr) in trials.iter().enumerate() {
                t.push(k as f64, &[tr.seed as f64, tr.random.peak_to_peak, tr.desync.peak_to_peak, tr.p_red]);
            }
            let mean = trials.iter().map(|t| t.p_red).sum::<f64>() / trials.len().max(1) as f64;
            Ok(Artifacts {
                files: vec![("trials.csv".into(), t.to_csv())],
                results: json!({ "trials": trials, "mean_p_red_pct": mean }),
            })
        }
        Experiment::TclLoadFollow(sc) => {
            let cfg = &sc.follow;
            let r = simulate_load_following(cfg)?;
            let ts = &r.run.series;
            let p = ts.channel("P_agg").expect("P_agg channel");
            let cap = r.run.fleet.capacity();
            let mut bounds: Vec<f64> = cfg.utility.steps.iter().map(|s| s.0).collect();
            bounds.push(cfg.fleet.t_end + cfg.fleet.dt);
            let mut segments = Vec::new();
            for (k, w) in bounds.windows(2).enumerate() {
                let demand = cfg.utility.steps[k].1;
                let idx: Vec<usize> = (0..ts.len()).filter(|&i| ts.times[i] >= w[0] && ts.times[i] < w[1]).collect();
                if idx.is_empty() {
                    continue;
                }
                let tail = &idx[tail_start(idx.len(), sc.segment_tail)..];
                let seg: Vec<f64> = tail.iter().map(|&i| p[i]).collect();
                let stats = steady_stats(&seg);
                let lookup = demand.map(|d| r.map.lookup(d));
                let target_kw = lookup.map(|l| l.target * cap);
                segments.push(json!({
                    "t_start": w[0],
                    "demand_pct": demand,
                    "target_kw": target_kw,
                    "clamped": lookup.map(|l| l.clamped),
                    "alpha": lookup.map(|l| l.alpha),
                    "mean_kw": stats.mean,
                    "rms_kw": stats.rms,
                    // the delay-calculator map is built on rms aggregate power
                    "relative_error_pct": target_kw.map(|t| ((t - stats.rms) / t * 100.0).abs()),
                }));
            }
            let mut log = TimeSeries::new(&["demand_pct", "target_fraction", "alpha", "clamped"]);
            for &(t, d, tg, a, c) in &r.log {
                log.push(t, &[d.unwrap_or(f64::NAN), tg, a, c as u8 as f64]);
            }
            let mut map = TimeSeries::new(&["rms_fraction"]);
            for (a, f) in r.map.alphas.iter().zip(&r.map.rms_fraction) {
                map.push(*a, &[*f]);
            }
            Ok(Artifacts {
                files: vec![
                    ("trajectory.csv".into(), csv(ts, stride)),
                    ("control_log.csv".into(), log.to_csv()),
                    ("delayc_map.csv".into(), map.to_csv()),
                ],
                results: json!({
                    "segments": segments,
                    "map_monotone": r.map.monotone,
                    "map_range": [r.map.min_fraction(), r.map.max_fraction()],
                    "thermal_untouched": r.thermal_before == r.thermal_after,
                }),
            })
        }
        Experiment::PowergridCase(sc) => {
            let sys = sc.system.build()?;
            let th = sc.thresholds.unwrap_or_default();
            let x0 = initial_state(sys.len(), sc.seed);
            let ts = simulate(&sys, &x0, sc.dt, sc.t_end, sc.record_every)?;
            let (regime, steady) = chimera_detect(&ts, &sys.coupling.areas, &th)?;
            let eqs = equilibrium_solve(&sys, &default_guesses(sys.len(), sc.seed, 16))?;
            let eq_json: Vec<Value> = eqs
                .iter()
                .map(|e| {
                    let c = classify_fixed_point(&sys, e);
                    json!({ "theta": e.theta, "drift": e.drift, "stability": c.stability, "max_real": c.max_real })
                })
                .collect();
            let compass = compass_vectors(&ts, &sys.coupling.areas, th.tail_fraction);
            let mut ct = TimeSeries::new(&["generator", "area", "magnitude", "angle"]);
            for c in &compass {
                ct.push(sc.t_end, &[c.generator as f64, (c.area + 1) as f64, c.magnitude, c.angle]);
            }
            let last = ts.last_row().expect("non-empty trajectory");
            let circle = circle_snapshot(&last[..sys.len()], sc.t_end);
            let mut cc = TimeSeries::new(&["generator", "phase", "x", "y"]);
            for c in &circle {
                cc.push(c.t, &[(c.label + 1) as f64, c.phase, c.x, c.y]);
            }
            Ok(Artifacts {
                files: vec![
                    ("trajectory.csv".into(), csv(&ts, stride)),
                    ("compass.csv".into(), ct.to_csv()),
                    ("circle.csv".into(), cc.to_csv()),
                ],
                results: json!({
                    "regime": regime,
                    "interarea_gap_rad": steady.inter_gap,
                    "intraarea_gap_rad": steady.intra_gap,
                    "steady": steady,
                    "critical_coupling": critical_coupling_gate(&sys.omega, &sys.coupling.k),
                    "equilibria": eq_json,
                    "compass": compass,
                }),
            })
        }
        Experiment::PowergridSweep(spec) => {
            let recs = bifurcation_sweep(spec)?;
            let mut out = String::from("value,regime,r_global,r_area_1,r_area_2,freq_spread,equilibria,stable_equilibria\n");
            for r in &recs {
                let label = serde_json::to_value(r.regime).expect("regime serializes");
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    fmt_f64(r.value),
                    label.as_str().unwrap_or_default(),
                    fmt_f64(r.r_global),
                    fmt_f64(r.r_area.first().copied().unwrap_or(f64::NAN)),
                    fmt_f64(r.r_area.get(1).copied().unwrap_or(f64::NAN)),
                    fmt_f64(r.freq_spread),
                    r.equilibria,
                    r.stable_equilibria
                ));
            }
            Ok(Artifacts { files: vec![("sweep.csv".into(), out)], results: json!({ "records": recs }) })
        }
    }
}

pub fn summary(s: &Scenario, a: &Artifacts) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "scenario": s.name,
        "model": s.kind.model(),
        "kind": s.kind,
        "seed": s.seed(),
        "time_unit": s.time_unit,
        "results": a.results,
    })
}

fn write(path: &Path, text: &str) -> Result<(), ScenarioError> {
    fs::write(path, text).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })
}

/// Writes CSVs, `summary.json` and `manifest.json` into `dir` (created if needed).
pub fn write_artifacts(dir: &Path, s: &Scenario, a: &Artifacts) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|source| ScenarioError::Io { path: dir.to_path_buf(), source })?;
    for (name, text) in &a.files {
        write(&dir.join(name), text)?;
    }
    let pretty = |v: &Value| serde_json::to_string_pretty(v).expect("json value serializes") + "\n";
    write(&dir.join("summary.json"), &pretty(&summary(s, a)))?;
    write(&dir.join("manifest.json"), &pretty(&s.manifest()))?;
    Ok(())
}

/// `--out`, else `SYNCGRID_OUT`, else `./out`.
pub fn output_root(cli: Option<&Path>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("SYNCGRID_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// `lo:hi:step` inclusive, rounded to 1e−12 so decimal grids land on their nominal values.
pub fn parse_range(spec: &str) -> Result<Vec<f64>, ScenarioError> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| ScenarioError::Override(format!("range `{spec}`: {e}")))?;
    let [lo, hi, step] = parts[..] else {
        return Err(ScenarioError::Override(format!("range `{spec}` must be lo:hi:step")));
    };
    if !(step > 0.0) || !(hi >= lo) {
        return Err(ScenarioError::Override(format!("range `{spec}` needs step > 0 and hi >= lo")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|k| ((lo + k as f64 * step) * 1e12).round() / 1e12).collect())
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub scenario: Scenario,
}

/// Expands a sweep: `r1`/`r2` on a bifurcation scenario replace its value list (one run);
/// `seed` varies the seed; anything else is a config path override per point.
pub fn sweep_points(base: &Scenario, param: &str, values: &[f64]) -> Result<Vec<SweepPoint>, ScenarioError> {
    if let Experiment::PowergridSweep(spec) = &base.experiment {
        let p = match param {
            "r1" => Some(SweepParam::R1),
            "r2" => Some(SweepParam::R2),
            _ => None,
        };
        if let Some(p) = p {
            let mut s = base.clone();
            s.experiment = Experiment::PowergridSweep(SweepSpec { param: p, values: values.to_vec(), ..spec.clone() });
            return Ok(vec![SweepPoint { value: f64::NAN, scenario: s }]);
        }
    }
    values
        .iter()
        .map(|&v| {
            let scenario = if param == "seed" {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(ScenarioError::Override(format!("seed must be a non-negative integer, got {v}")));
                }
                base.clone().with_seed(v as u64)
            } else {
                base.with_override(param, json!(v))?
            };
            Ok(SweepPoint { value: v, scenario })
        })
        .collect()
}
