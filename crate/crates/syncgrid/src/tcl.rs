//! Thermostatically controlled load fleets: hybrid hysteresis model, Boolean
//! phase-oscillator (binary Kuramoto) model, distributed-averaging model,
//! delay calculator, load following and fleet metrics.
//!
//! Phase-model scenarios run in hours, averaging-model scenarios in seconds.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::Matrix;
use crate::simcore::{rk4_step, step_hybrid, Rk4Work, RngStream, SimError, TimeGrid, TimeSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TclError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("thermal regime admits no cycle: {0}")]
    ThermalRegime(String),
    #[error("delay calculator needs at least 2 units")]
    TooFewUnits,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Thermal parameters of one unit. Temperatures in °C, R in °C/kW, C in kWh/°C, P in kW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TclParams {
    pub t_a: f64,
    pub deadband: f64,
    pub r: f64,
    pub c: f64,
    pub p: f64,
    #[serde(default = "one")]
    pub eta: f64,
    pub t_s: f64,
}

fn one() -> f64 {
    1.0
}

impl TclParams {
    /// Reference air-conditioner: T_a = 32, δ = 0.5, R = 2, C = 10, P = 14, set point 20.
    pub fn nominal() -> Self {
        Self { t_a: 32.0, deadband: 0.5, r: 2.0, c: 10.0, p: 14.0, eta: 1.0, t_s: 20.0 }
    }

    pub fn t_min(&self) -> f64 {
        self.t_s - self.deadband / 2.0
    }

    pub fn t_max(&self) -> f64 {
        self.t_s + self.deadband / 2.0
    }

    pub fn validate(&self) -> Result<(), TclError> {
        if !(self.r > 0.0 && self.c > 0.0 && self.p > 0.0) {
            return Err(TclError::Invalid("R, C, P must be positive".into()));
        }
        if !(self.deadband >= 0.0) {
            return Err(TclError::Invalid("deadband must be nonnegative".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(TclError::Invalid("eta must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// ON and OFF segment durations of the hysteresis cycle (time unit of R·C).
    pub fn cycle_times(&self) -> Result<(f64, f64), TclError> {
        self.validate()?;
        let rc = self.r * self.c;
        let pr = self.p * self.r;
        let (lo, hi, ta) = (self.t_min(), self.t_max(), self.t_a);
        let on_num = hi - ta + pr;
        let on_den = lo - ta + pr;
        let off_num = ta - lo;
        let off_den = ta - hi;
        if !(on_num > 0.0 && on_den > 0.0 && off_num > 0.0 && off_den > 0.0) || !(hi > lo) {
            return Err(TclError::ThermalRegime(format!(
                "need T_a > T_max and T_min - T_a + PR > 0 (T_a={ta}, band=[{lo}, {hi}], PR={pr})"
            )));
        }
        Ok((rc * (on_num / on_den).ln(), rc * (off_num / off_den).ln()))
    }

    pub fn duty(&self) -> Result<f64, TclError> {
        let (on, off) = self.cycle_times()?;
        Ok(on / (on + off))
    }
}

/// ω = 2π / (t_on + t_off), in radians per time unit of R·C.
pub fn natural_frequency(params: &TclParams) -> Result<f64, TclError> {
    let (on, off) = params.cycle_times()?;
    Ok(2.0 * PI / (on + off))
}

/// dT/dt = −(T − T_a + s·P·R) / (R·C).
pub fn hybrid_tcl_rhs(temp: f64, s: u8, params: &TclParams) -> f64 {
    -(temp - params.t_a + s as f64 * params.p * params.r) / (params.r * params.c)
}

/// Thermostat: off below T_min, on above T_max, hold in between.
pub fn hybrid_switch(temp: f64, s: u8, params: &TclParams) -> u8 {
    if temp < params.t_min() {
        0
    } else if temp > params.t_max() {
        1
    } else {
        s
    }
}

/// Channels `T` and `s`.
pub fn simulate_hybrid(params: &TclParams, t0: f64, s0: u8, grid: &TimeGrid) -> Result<TimeSeries, TclError> {
    params.validate()?;
    let names = vec!["T".to_string(), "s".to_string()];
    let p = params.clone();
    let q = params.clone();
    let ts = step_hybrid(
        move |_, x, d, dx| dx[0] = hybrid_tcl_rhs(x[0], d[0], &p),
        move |x, d| d[0] = hybrid_switch(x[0], d[0], &q),
        &[t0],
        &[s0],
        grid,
        &names,
    )?;
    Ok(ts)
}

/// 1 when `v ≥ 0`.
pub fn heaviside(v: f64) -> u8 {
    (v >= 0.0) as u8
}

/// Θ[sin x].
pub fn heaviside_sin(x: f64) -> u8 {
    heaviside(x.sin())
}

/// Bias s0 with fraction(sin φ ≥ s0) = duty: s0 = sin((π − 2π·duty)/2).
pub fn duty_bias(duty: f64) -> Result<f64, TclError> {
    if !(duty > 0.0 && duty < 1.0) {
        return Err(TclError::Invalid(format!("duty must lie in (0, 1), got {duty}")));
    }
    Ok(((PI - 2.0 * PI * duty) / 2.0).sin())
}

/// Fraction of a cycle with sin φ ≥ s0.
pub fn on_fraction(s0: f64) -> f64 {
    (PI - 2.0 * s0.clamp(-1.0, 1.0).asin()) / (2.0 * PI)
}

/// Delay/advance terms of the phase model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSpec {
    /// α_ij = α_i for every j; O(N) per evaluation.
    PerUnit(Vec<f64>),
    /// Full α_ij matrix (row-major, N×N); O(N²).
    Pairwise(Vec<Vec<f64>>),
}

impl AlphaSpec {
    pub fn uniform(n: usize, a: f64) -> Self {
        AlphaSpec::PerUnit(vec![a; n])
    }

    /// α_i = (i − 1)·2π/N.
    pub fn spread(n: usize) -> Self {
        AlphaSpec::PerUnit((0..n).map(|i| i as f64 * 2.0 * PI / n as f64).collect())
    }

    pub fn len(&self) -> usize {
        match self {
            AlphaSpec::PerUnit(v) => v.len(),
            AlphaSpec::Pairwise(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseFleet {
    pub omega: Vec<f64>,
    pub k: f64,
    pub alpha: AlphaSpec,
}

impl PhaseFleet {
    pub fn validate(&self) -> Result<(), TclError> {
        let n = self.omega.len();
        if n == 0 {
            return Err(TclError::Invalid("fleet needs at least one unit".into()));
        }
        if self.alpha.len() != n {
            return Err(TclError::Invalid("alpha size does not match fleet".into()));
        }
        if let AlphaSpec::Pairwise(m) = &self.alpha {
            if m.iter().any(|r| r.len() != n) {
                return Err(TclError::Invalid("pairwise alpha must be N x N".into()));
            }
        }
        if !(self.k >= 0.0) {
            return Err(TclError::Invalid("K must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Σ_{j≠i} |Θ[sin φ_j] − Θ[sin(φ_i + α_ij)]| for every i.
pub fn interaction_counts(phis: &[f64], alpha: &AlphaSpec, out: &mut [f64]) {
    let n = phis.len();
    match alpha {
        AlphaSpec::PerUnit(a) => {
            let on: usize = phis.iter().map(|&p| heaviside_sin(p) as usize).sum();
            for i in 0..n {
                let own = heaviside_sin(phis[i]) as usize;
                let others_on = on - own;
                out[i] = if heaviside_sin(phis[i] + a[i]) == 0 {
                    others_on as f64
                } else {
                    (n - 1 - others_on) as f64
                };
            }
        }
        AlphaSpec::Pairwise(m) => {
            for i in 0..n {
                let mut c = 0u32;
                for j in 0..n {
                    if j != i {
                        c += (heaviside_sin(phis[j]) ^ heaviside_sin(phis[i] + m[i][j])) as u32;
                    }
                }
                out[i] = c as f64;
            }
        }
    }
}

/// φ̇_i = ω_i + K·Σ_{j≠i} |Θ[sin φ_j] − Θ[sin(φ_i + α_ij)]|.
pub fn phase_oscillator_rhs(phis: &[f64], fleet: &PhaseFleet, out: &mut [f64]) {
    interaction_counts(phis, &fleet.alpha, out);
    for (o, w) in out.iter_mut().zip(&fleet.omega) {
        *o = w + fleet.k * *o;
    }
}

/// ω_i = ω_FFT − K·Σ|Θ − Θ| on a phase snapshot (no correction factor).
pub fn omega_backsolve(omega_fft: f64, phis: &[f64], fleet: &PhaseFleet) -> Vec<f64> {
    let mut c = vec![0.0; phis.len()];
    interaction_counts(phis, &fleet.alpha, &mut c);
    c.iter().map(|ci| omega_fft - fleet.k * ci).collect()
}

/// Σ_j P_j·η_j·s_j.
pub fn aggregate_power(s: &[u8], p: &[f64], eta: &[f64]) -> f64 {
    s.iter().zip(p).zip(eta).map(|((&si, &pi), &ei)| si as f64 * pi * ei).sum()
}

/// W = w·(ones − I).
pub fn averaging_weight_matrix(n: usize, w: f64) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { w })
}

/// ḟ_i = w·Σ_{j≠i}(f_j − f_i), complete graph in O(N).
pub fn dist_averaging_rhs(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len() as f64;
    let s: f64 = f.iter().sum();
    for (o, fi) in out.iter_mut().zip(f) {
        *o = w * (s - n * fi);
    }
}

/// ḟ = (W − diag(W·1))·f for an arbitrary symmetric weight matrix.
pub fn dist_averaging_rhs_matrix(f: &[f64], w: &Matrix, out: &mut [f64]) {
    for i in 0..f.len() {
        let mut acc = 0.0;
        for j in 0..f.len() {
            acc += w[(i, j)] * (f[j] - f[i]);
        }
        out[i] = acc;
    }
}

/// Exact flow of the complete-graph averaging ODE over `dt`:
/// f_i ← m + (f_i − m)·exp(−w·N·dt). The mean is computed once and restored exactly.
pub fn averaging_exact_step(f: &mut [f64], w: f64, dt: f64) {
    let n = f.len() as f64;
    let m = f.iter().sum::<f64>() / n;
    let g = (-w * n * dt).exp();
    for fi in f.iter_mut() {
        *fi = m + (*fi - m) * g;
    }
}

/// How per-unit initial phase offsets are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// α_i = (i − 1)·2π/N.
    EquiSpaced,
    /// α_i = (i − 1)·2α/N (α = π gives equi-spaced, α = 0 in phase).
    Spread(f64),
    /// Uniform on [0, 2π) under the run seed.
    Random,
    Explicit(Vec<f64>),
}

impl OffsetMode {
    pub fn offsets(&self, n: usize, rng: &mut RngStream) -> Vec<f64> {
        match self {
            OffsetMode::EquiSpaced => spread_offsets(n, PI),
            OffsetMode::Spread(a) => spread_offsets(n, *a),
            OffsetMode::Random => (0..n).map(|_| rng.uniform_range(0.0, 2.0 * PI)).collect(),
            OffsetMode::Explicit(v) => v.clone(),
        }
    }
}

pub fn spread_offsets(n: usize, alpha: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 * 2.0 * alpha / n as f64).collect()
}

/// Uniform parameter range; `lo == hi` is a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    /// nominal·(1 ± rel).
    pub fn relative(nominal: f64, rel: f64) -> Self {
        Self { lo: nominal * (1.0 - rel), hi: nominal * (1.0 + rel) }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.uniform_range(self.lo, self.hi)
        }
    }
}

// ---------------------------------------------------------------- phase model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseAlpha {
    /// Same α on every unit.
    Uniform(f64),
    /// α = 2π/N on every unit.
    TwoPiOverN,
    /// α_i = (i − 1)·2π/N.
    Spread,
    Explicit(AlphaSpec),
}

impl PhaseAlpha {
    pub fn build(&self, n: usize) -> AlphaSpec {
        match self {
            PhaseAlpha::Uniform(a) => AlphaSpec::uniform(n, *a),
            PhaseAlpha::TwoPiOverN => AlphaSpec::uniform(n, 2.0 * PI / n as f64),
            PhaseAlpha::Spread => AlphaSpec::spread(n),
            PhaseAlpha::Explicit(a) => a.clone(),
        }
    }
}

/// Coupled phase / thermal ensemble (time in hours).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEnsembleConfig {
    pub n: usize,
    /// Nominal natural frequency, rad/h; `None` derives it from the thermal parameters.
    #[serde(default)]
    pub omega: Option<f64>,
    /// Relative spread on ω (uniform).
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default = "default_k")]
    pub k: f64,
    pub alpha: PhaseAlpha,
    /// Duty cycle; `None` derives it from the thermal parameters.
    #[serde(default)]
    pub duty: Option<f64>,
    pub thermal: TclParams,
    #[serde(default = "default_phase_dt")]
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_stride")]
    pub record_every: usize,
    #[serde(default = "default_trace")]
    pub trace_units: usize,
    #[serde(default = "default_tail")]
    pub steady_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> f64 {
    0.267
}
fn default_phase_dt() -> f64 {
    1e-3
}
fn default_stride() -> usize {
    10
}
fn default_trace() -> usize {
    4
}
fn default_tail() -> f64 {
    0.1
}

impl PhaseEnsembleConfig {
    pub fn resolved_duty(&self) -> Result<f64, TclError> {
        match self.duty {
            Some(d) => Ok(d),
            None => self.thermal.duty(),
        }
    }

    pub fn resolved_omega(&self) -> Result<f64, TclError> {
        match self.omega {
            Some(w) => Ok(w),
            None => natural_frequency(&self.thermal),
        }
    }

    /// N·P·η·duty: the level a de-synchronized fleet settles to.
    pub fn reference_power(&self) -> Result<f64, TclError> {
        Ok(self.n as f64 * self.thermal.p * self.thermal.eta * self.resolved_duty()?)
    }
}

#[derive(Debug, Clone)]
pub struct PhaseRun {
    pub series: TimeSeries,
    pub final_phases: Vec<f64>,
    pub omega: Vec<f64>,
    pub s0: f64,
}

/// Simulates the ensemble: phases drive s_i = Θ[sin φ_i − s0], which drives the thermal state.
/// Channels: `P_agg`, then `phi_i`, `s_i`, `T_i` for the traced units.
pub fn simulate_phase_ensemble(cfg: &PhaseEnsembleConfig) -> Result<PhaseRun, TclError> {
    cfg.thermal.validate()?;
    let n = cfg.n;
    if n == 0 || !(cfg.dt > 0.0) || !(cfg.t_end > 0.0) {
        return Err(TclError::Invalid("need n >= 1, dt > 0, t_end > 0".into()));
    }
    let duty = cfg.resolved_duty()?;
    let s0 = duty_bias(duty)?;
    let w_nom = cfg.resolved_omega()?;
    let master = RngStream::new(cfg.seed);
    let mut rng_phase = master.derive(0);
    let mut rng_het = master.derive(1);
    let omega: Vec<f64> = (0..n)
        .map(|_| Range::relative(w_nom, cfg.heterogeneity).sample(&mut rng_het))
        .collect();
    let mut phi: Vec<f64> = (0..n).map(|_| rng_phase.uniform_range(0.0, 2.0 * PI)).collect();
    let fleet = PhaseFleet { omega: omega.clone(), k: cfg.k, alpha: cfg.alpha.build(n) };
    fleet.validate()?;

    let th = &cfg.thermal;
    let mut temp = vec![th.t_s; n];
    let traced = cfg.trace_units.min(n).min(100);
    let mut names = vec!["P_agg".to_string()];
    for i in 0..traced {
        names.push(format!("phi_{}", i + 1));
        names.push(format!("s_{}", i + 1));
        names.push(format!("T_{}", i + 1));
    }
    let steps = (cfg.t_end / cfg.dt).round() as usize;
    let stride = cfg.record_every.max(1);
    let mut ts = TimeSeries::with_capacity(&names, steps / stride + 2);
    ts.meta.insert("time_unit".into(), "h".into());
    ts.meta.insert("seed".into(), cfg.seed.to_string());

    let pe = th.p * th.eta;
    let mut s = vec![0u8; n];
    let mut row = vec![0.0; names.len()];
    let mut record = |t: f64, phi: &[f64], s: &[u8], temp: &[f64], ts: &mut TimeSeries| {
        row[0] = s.iter().map(|&v| v as f64).sum::<f64>() * pe;
        for i in 0..traced {
            row[1 + 3 * i] = phi[i];
            row[2 + 3 * i] = s[i] as f64;
            row[3 + 3 * i] = temp[i];
        }
        ts.push(t, &row);
    };
    let update_s = |phi: &[f64], s: &mut [u8]| {
        for (si, p) in s.iter_mut().zip(phi) {
            *si = heaviside(p.sin() - s0);
        }
    };
    update_s(&phi, &mut s);
    record(0.0, &phi, &s, &temp, &mut ts);

    let mut work = Rk4Work::new(n);
    let rc = th.r * th.c;
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let mut f = |_t: f64, x: &[f64], dx: &mut [f64]| phase_oscillator_rhs(x, &fleet, dx);
        rk4_step(&mut f, t, &mut phi, cfg.dt, &mut work);
        // thermal state is linear with s held over the step: exact exponential update
        let g = (-cfg.dt / rc).exp();
        for i in 0..n {
            let target = th.t_a - s[i] as f64 * th.p * th.r;
            temp[i] = target + (temp[i] - target) * g;
        }
        update_s(&phi, &mut s);
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(TclError::Sim(SimError::Divergence { t: t + cfg.dt }));
        }
        if (k + 1) % stride == 0 {
            record((k + 1) as f64 * cfg.dt, &phi, &s, &temp, &mut ts);
        }
    }
    Ok(PhaseRun { series: ts, final_phases: phi, omega, s0 })
}

// ------------------------------------------------------------ averaging model

/// Distributed-averaging fleet (time in seconds, f in Hz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingConfig {
    pub n: usize,
    /// Switching-frequency range, Hz.
    pub f: Range,
    pub duty: Range,
    /// Rated power per unit, kW.
    pub p: f64,
    #[serde(default = "one")]
    pub eta: f64,
    /// Averaging weight w_ij.
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(default = "yes")]
    pub coupled: bool,
    #[serde(default = "default_offsets")]
    pub offsets: OffsetMode,
    #[serde(default = "default_avg_dt")]
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_trace")]
    pub trace_units: usize,
    /// Thermal template for traced-unit temperatures; calibrated per unit to its duty and period.
    #[serde(default)]
    pub thermal: Option<TclParams>,
    #[serde(default)]
    pub seed: u64,
}

fn default_w() -> f64 {
    0.06
}
fn yes() -> bool {
    true
}
fn default_offsets() -> OffsetMode {
    OffsetMode::EquiSpaced
}
fn default_avg_dt() -> f64 {
    1.0
}

impl AveragingConfig {
    pub fn capacity(&self) -> f64 {
        self.n as f64 * self.p * self.eta
    }
}

/// Sampled per-unit quantities for an averaging fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragingFleet {
    pub f0: Vec<f64>,
    pub s0: Vec<f64>,
    pub duty: Vec<f64>,
    pub offsets: Vec<f64>,
    pub p: Vec<f64>,
    pub eta: Vec<f64>,
}

impl AveragingFleet {
    pub fn sample(cfg: &AveragingConfig) -> Result<Self, TclError> {
        if cfg.n == 0 {
            return Err(TclError::Invalid("fleet needs at least one unit".into()));
        }
        let master = RngStream::new(cfg.seed);
        let mut rf = master.derive(0);
        let mut rd = master.derive(1);
        let mut ro = master.derive(2);
        let f0: Vec<f64> = (0..cfg.n).map(|_| cfg.f.sample(&mut rf)).collect();
        let duty: Vec<f64> = (0..cfg.n).map(|_| cfg.duty.sample(&mut rd)).collect();
        let s0 = duty.iter().map(|&d| duty_bias(d)).collect::<Result<Vec<_>, _>>()?;
        let offsets = cfg.offsets.offsets(cfg.n, &mut ro);
        if offsets.len() != cfg.n {
            return Err(TclError::Invalid("explicit offsets must have N entries".into()));
        }
        Ok(Self { f0, s0, duty, offsets, p: vec![cfg.p; cfg.n], eta: vec![cfg.eta; cfg.n] })
    }

    pub fn capacity(&self) -> f64 {
        self.p.iter().zip(&self.eta).map(|(p, e)| p * e).sum()
    }
}

/// Solves P·R from the duty cycle (bisection) and R·C from the period, keeping
/// T_a, δ, T_s and R from `template`. The period is in the template's time unit.
pub fn calibrate_thermal(template: &TclParams, duty: f64, period: f64) -> Result<TclParams, TclError> {
    if !(duty > 0.0 && duty < 1.0) || !(period > 0.0) {
        return Err(TclError::Invalid("need 0 < duty < 1 and period > 0".into()));
    }
    let (lo_t, hi_t, ta) = (template.t_min(), template.t_max(), template.t_a);
    if !(ta > hi_t) || !(hi_t > lo_t) {
        return Err(TclError::ThermalRegime("ambient must exceed T_max with a positive band".into()));
    }
    let l_off = ((ta - lo_t) / (ta - hi_t)).ln();
    let duty_of = |pr: f64| {
        let l_on = ((hi_t - ta + pr) / (lo_t - ta + pr)).ln();
        l_on / (l_on + l_off)
    };
    // duty decreases monotonically in PR on (T_a − T_min, ∞)
    let mut a = (ta - lo_t) * (1.0 + 1e-12) + 1e-12;
    let mut b = (ta - lo_t) * 2.0 + 1.0;
    while duty_of(b) > duty {
        b *= 2.0;
        if b > 1e12 {
            return Err(TclError::ThermalRegime("duty too small to calibrate".into()));
        }
    }
    if duty_of(a) < duty {
        return Err(TclError::ThermalRegime("duty too large to calibrate".into()));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if duty_of(m) > duty {
            a = m;
        } else {
            b = m;
        }
    }
    let pr = 0.5 * (a + b);
    let l_on = ((hi_t - ta + pr) / (lo_t - ta + pr)).ln();
    let rc = period / (l_on + l_off);
    let mut out = template.clone();
    out.p = pr / template.r;
    out.c = rc / template.r;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AveragingRun {
    pub series: TimeSeries,
    pub fleet: AveragingFleet,
    pub f_final: Vec<f64>,
}

/// s_i(t) = Θ[sin(2π f_i(t) t + α_i) − s0_i]. Channels: `P_agg`, `f_sum`, `f_min`,
/// `f_max`, and `f_i`, `s_i` (and `T_i` when a thermal template is given) for traced units.
pub fn simulate_averaging(cfg: &AveragingConfig) -> Result<AveragingRun, TclError> {
    let fleet = AveragingFleet::sample(cfg)?;
    simulate_averaging_fleet(cfg, fleet, |_, _| None)
}

/// Same as [`simulate_averaging`] with a per-step hook that may return new offsets.
pub fn simulate_averaging_fleet<H>(cfg: &AveragingConfig, fleet: AveragingFleet, mut hook: H) -> Result<AveragingRun, TclError>
where
    H: FnMut(f64, &TimeSeries) -> Option<Vec<f64>>,
{
    let n = cfg.n;
    if !(cfg.dt > 0.0) || !(cfg.t_end > 0.0) || !(cfg.w >= 0.0) {
        return Err(TclError::Invalid("need dt > 0, t_end > 0, w >= 0".into()));
    }
    let traced = cfg.trace_units.min(n).min(100);
    let thermal: Option<Vec<TclParams>> = match &cfg.thermal {
        Some(tpl) => Some(
            (0..traced)
                .map(|i| calibrate_thermal(tpl, fleet.duty[i], 1.0 / fleet.f0[i]))
                .collect::<Result<_, _>>()?,
        ),
        None => None,
    };
    let mut names = vec!["P_agg".to_string(), "f_sum".into(), "f_min".into(), "f_max".into()];
    for i in 0..traced {
        names.push(format!("f_{}", i + 1));
        names.push(format!("s_{}", i + 1));
        if thermal.is_some() {
            names.push(format!("T_{}", i + 1));
        }
    }
    let steps = (cfg.t_end / cfg.dt).round() as usize;
    let mut ts = TimeSeries::with_capacity(&names, steps + 1);
    ts.meta.insert("time_unit".into(), "s".into());
    ts.meta.insert("seed".into(), cfg.seed.to_string());

    let mut f = fleet.f0.clone();
    let mut offsets = fleet.offsets.clone();
    let mut temp: Vec<f64> = thermal.as_ref().map(|v| v.iter().map(|p| p.t_s).collect()).unwrap_or_default();
    let mut s = vec![0u8; n];
    let mut row = vec![0.0; names.len()];
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        if k > 0 {
            if cfg.coupled {
                averaging_exact_step(&mut f, cfg.w, cfg.dt);
            }
            if let Some(th) = &thermal {
                for i in 0..traced {
                    let p = &th[i];
                    let target = p.t_a - s[i] as f64 * p.p * p.r;
                    temp[i] = target + (temp[i] - target) * (-cfg.dt / (p.r * p.c)).exp();
                }
            }
        }
        if let Some(new) = hook(t, &ts) {
            offsets = new;
        }
        for i in 0..n {
            s[i] = heaviside((2.0 * PI * f[i] * t + offsets[i]).sin() - fleet.s0[i]);
        }
        row[0] = aggregate_power(&s, &fleet.p, &fleet.eta);
        row[1] = f.iter().sum();
        row[2] = f.iter().cloned().fold(f64::INFINITY, f64::min);
        row[3] = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut c = 4;
        for i in 0..traced {
            row[c] = f[i];
            row[c + 1] = s[i] as f64;
            c += 2;
            if thermal.is_some() {
                row[c] = temp[i];
                c += 1;
            }
        }
        ts.push(t, &row);
    }
    Ok(AveragingRun { series: ts, fleet, f_final: f })
}

// ------------------------------------------------------------------- metrics

/// (P_rms_agg − P_rms_α) / P_rms_agg × 100.
pub fn metric_p_norm(p_rms_agg: f64, p_rms_alpha: f64) -> f64 {
    (p_rms_agg - p_rms_alpha) / p_rms_agg * 100.0
}

/// (ripple_random − ripple_desync) / ripple_random × 100.
pub fn metric_p_red(random_ripple: f64, desync_ripple: f64) -> f64 {
    (random_ripple - desync_ripple) / random_ripple * 100.0
}

/// sqrt((1/T)∫(P_ref − P_agg)² dt) / P_base × 100, trapezoidal.
pub fn metric_rmse(times: &[f64], p_ref: &[f64], p_agg: &[f64], p_base: f64) -> f64 {
    let n = times.len();
    if n < 2 {
        return ((p_ref[0] - p_agg[0]).abs() / p_base) * 100.0;
    }
    let sq: Vec<f64> = p_ref.iter().zip(p_agg).map(|(r, a)| (r - a).powi(2)).collect();
    let mut integral = 0.0;
    for k in 1..n {
        integral += 0.5 * (sq[k] + sq[k - 1]) * (times[k] - times[k - 1]);
    }
    let span = times[n - 1] - times[0];
    (integral / span).sqrt() / p_base * 100.0
}

/// (P_ref − P_agg) / P_ref × 100 per sample.
pub fn metric_relative_error(p_ref: &[f64], p_agg: &[f64]) -> Vec<f64> {
    p_ref.iter().zip(p_agg).map(|(r, a)| (r - a) / r * 100.0).collect()
}

/// max |relative error| over the final `fraction` of the samples.
pub fn steady_relative_error(p_ref: &[f64], p_agg: &[f64], fraction: f64) -> f64 {
    let e = metric_relative_error(p_ref, p_agg);
    let start = tail_start(e.len(), fraction);
    e[start..].iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn tail_start(len: usize, fraction: f64) -> usize {
    let keep = ((len as f64 * fraction).ceil() as usize).clamp(1, len.max(1));
    len - keep
}

pub fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Steady-window statistics of an aggregate-power trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub peak_to_peak: f64,
    /// Standard deviation over mean, percent.
    pub ripple_pct: f64,
    /// Half peak-to-peak over mean, percent.
    pub band_pct: f64,
    pub rms: f64,
}

pub fn steady_stats(p: &[f64]) -> SteadyStats {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    SteadyStats {
        mean,
        min,
        max,
        peak_to_peak: max - min,
        ripple_pct: var.sqrt() / mean * 100.0,
        band_pct: (max - min) / 2.0 / mean * 100.0,
        rms: rms(p),
    }
}

/// Fraction of samples with s = 1.
pub fn measured_duty(s: &[f64]) -> f64 {
    s.iter().filter(|&&v| v > 0.5).count() as f64 / s.len() as f64
}

// ------------------------------------------------------- delay calculator

/// rms aggregate (as a fraction of capacity) versus α, with its inverse lookup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayCMap {
    pub alphas: Vec<f64>,
    pub rms_fraction: Vec<f64>,
    pub monotone: bool,
}

/// Result of a demand lookup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lookup {
    pub alpha: f64,
    /// Demand actually targeted (fraction of capacity) after clamping.
    pub target: f64,
    pub clamped: bool,
}

impl DelayCMap {
    pub fn min_fraction(&self) -> f64 {
        self.rms_fraction.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_fraction(&self) -> f64 {
        self.rms_fraction.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// α realizing `demand_pct` percent of capacity (rms). Out-of-range demands clamp to the
    /// sweep end where the extreme is reached; non-monotone maps return the nearest point.
    pub fn lookup(&self, demand_pct: f64) -> Lookup {
        let want = demand_pct / 100.0;
        let (lo, hi) = (self.min_fraction(), self.max_fraction());
        let target = want.clamp(lo, hi);
        let clamped = (target - want).abs() > 1e-12;
        let last = self.alphas.len() - 1;
        let decreasing = self.rms_fraction[0] >= self.rms_fraction[last];
        if clamped {
            let near = |k: &usize| (self.rms_fraction[*k] - target).abs() <= MAP_TOL;
            let k = if (target == hi) == decreasing {
                (0..=last).find(near)
            } else {
                (0..=last).rev().find(near)
            };
            let k = k.unwrap_or(0);
            return Lookup { alpha: self.alphas[k], target: self.rms_fraction[k], clamped };
        }
        if self.monotone {
            for k in 1..=last {
                let (a, b) = (self.rms_fraction[k - 1], self.rms_fraction[k]);
                if (target - a) * (target - b) <= 0.0 {
                    let u = if (b - a).abs() < 1e-15 { 0.0 } else { (target - a) / (b - a) };
                    let alpha = self.alphas[k - 1] + u * (self.alphas[k] - self.alphas[k - 1]);
                    return Lookup { alpha, target, clamped };
                }
            }
        }
        let k = self
            .rms_fraction
            .iter()
            .enumerate()
            .min_by(|x, y| (x.1 - target).abs().partial_cmp(&(y.1 - target).abs()).unwrap())
            .map(|p| p.0)
            .unwrap_or(0);
        Lookup { alpha: self.alphas[k], target: self.rms_fraction[k], clamped }
    }
}

/// Sampling noise allowed in the swept rms curve (fraction of capacity).
pub const MAP_TOL: f64 = 2e-3;

/// Sweeps α over [0, π] in `alpha_step`, offsets (i − 1)·2α/N on uncoupled units at the
/// fleet's mean frequency; rms over the final 3 cycles after 10 settling cycles.
pub fn delayc_build(fleet: &AveragingFleet, alpha_step: f64, samples_per_cycle: usize) -> Result<DelayCMap, TclError> {
    let n = fleet.f0.len();
    if n < 2 {
        return Err(TclError::TooFewUnits);
    }
    if !(alpha_step > 0.0) {
        return Err(TclError::Invalid("alpha_step must be positive".into()));
    }
    let fm = fleet.f0.iter().sum::<f64>() / n as f64;
    let cap = fleet.capacity();
    let mut alphas = Vec::new();
    let mut a = 0.0;
    while a < PI - 1e-12 {
        alphas.push(a);
        a += alpha_step;
    }
    alphas.push(PI);
    let spc = samples_per_cycle.max(8);
    let period = 1.0 / fm;
    let dt = period / spc as f64;
    let rms_fraction: Vec<f64> = alphas
        .par_iter()
        .map(|&alpha| {
            let off = spread_offsets(n, alpha);
            let mut s = vec![0u8; n];
            let mut acc = 0.0;
            let count = 3 * spc;
            for k in 0..count {
                let t = (10 * spc + k) as f64 * dt;
                for i in 0..n {
                    s[i] = heaviside((2.0 * PI * fm * t + off[i]).sin() - fleet.s0[i]);
                }
                let p = aggregate_power(&s, &fleet.p, &fleet.eta);
                acc += p * p;
            }
            (acc / count as f64).sqrt() / cap
        })
        .collect();
    let diffs: Vec<f64> = rms_fraction.windows(2).map(|w| w[1] - w[0]).collect();
    let monotone = diffs.iter().all(|d| *d <= MAP_TOL) || diffs.iter().all(|d| *d >= -MAP_TOL);
    Ok(DelayCMap { alphas, rms_fraction, monotone })
}

// ------------------------------------------------------------ load following

/// Piecewise-constant demand in percent of capacity; `None` marks loss of signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySignal {
    pub steps: Vec<(f64, Option<f64>)>,
}

impl UtilitySignal {
    pub fn new(steps: Vec<(f64, Option<f64>)>) -> Result<Self, TclError> {
        for (_, v) in &steps {
            if let Some(v) = v {
                if !(0.0..=100.0).contains(v) {
                    return Err(TclError::Invalid(format!("demand {v}% outside [0, 100]")));
                }
            }
        }
        Ok(Self { steps })
    }

    pub fn value(&self, t: f64) -> Option<f64> {
        let mut v = self.steps.first().and_then(|p| p.1);
        for &(ts, val) in &self.steps {
            if t >= ts {
                v = val;
            } else {
                break;
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadFollowConfig {
    pub fleet: AveragingConfig,
    pub utility: UtilitySignal,
    #[serde(default = "default_alpha_step")]
    pub alpha_step: f64,
    /// Control update interval, s.
    pub control_period: f64,
    #[serde(default = "default_trim_gain")]
    pub trim_gain: f64,
    #[serde(default = "default_trim_limit")]
    pub trim_limit: f64,
}

fn default_alpha_step() -> f64 {
    0.01
}
fn default_trim_gain() -> f64 {
    0.5
}
fn default_trim_limit() -> f64 {
    0.3
}

/// Controller memory between updates.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FollowState {
    pub alpha: f64,
    pub trim: f64,
    pub last_demand: Option<f64>,
    pub clamped: bool,
    pub signal_lost: bool,
}

/// One feedback update: α = lookup(reference) + bounded integral trim on the rms error.
/// Loss of signal falls back to α = π (equi-spaced, minimum loading). Thermal set points
/// are not an input and cannot be changed here.
pub fn load_following_step(
    state: &mut FollowState,
    demand_pct: Option<f64>,
    measured_rms_fraction: Option<f64>,
    map: &DelayCMap,
    gain: f64,
    limit: f64,
) -> f64 {
    match demand_pct {
        None => {
            state.signal_lost = true;
            state.trim = 0.0;
            state.alpha = PI;
        }
        Some(d) => {
            state.signal_lost = false;
            if state.last_demand != Some(d) {
                state.trim = 0.0;
            }
            let lk = map.lookup(d);
            state.clamped = lk.clamped;
            if lk.clamped {
                state.trim = 0.0;
            } else if let Some(m) = measured_rms_fraction {
                // rms falls as α grows, so a positive error asks for smaller α
                state.trim = (state.trim - gain * (lk.target - m)).clamp(-limit, limit);
            }
            state.alpha = (lk.alpha + state.trim).clamp(0.0, PI);
        }
    }
    state.last_demand = demand_pct;
    state.alpha
}

#[derive(Debug, Clone)]
pub struct LoadFollowRun {
    pub run: AveragingRun,
    pub map: DelayCMap,
    /// (t, demand %, targeted fraction, α, clamped) per control update.
    pub log: Vec<(f64, Option<f64>, f64, f64, bool)>,
    pub thermal_before: Option<TclParams>,
    pub thermal_after: Option<TclParams>,
}

pub fn simulate_load_following(cfg: &LoadFollowConfig) -> Result<LoadFollowRun, TclError> {
    let fleet = AveragingFleet::sample(&cfg.fleet)?;
    let map = delayc_build(&fleet, cfg.alpha_step, 200)?;
    let n = cfg.fleet.n;
    let cap = fleet.capacity();
    let every = ((cfg.control_period / cfg.fleet.dt).round() as usize).max(1);
    let mut st = FollowState { alpha: 0.0, ..Default::default() };
    let mut log = Vec::new();
    let thermal_before = cfg.fleet.thermal.clone();
    let mut k = 0usize;
    let run = simulate_averaging_fleet(&cfg.fleet, fleet, |t, ts| {
        let due = k % every == 0;
        k += 1;
        if !due {
            return None;
        }
        let p = ts.channel("P_agg").unwrap_or(&[]);
        let win = every.min(p.len());
        let measured = (win > 0).then(|| rms(&p[p.len() - win..]) / cap);
        let demand = cfg.utility.value(t);
        let alpha = load_following_step(&mut st, demand, measured, &map, cfg.trim_gain, cfg.trim_limit);
        let target = demand.map(|d| map.lookup(d).target).unwrap_or(f64::NAN);
        log.push((t, demand, target, alpha, st.clamped));
        Some(spread_offsets(n, alpha))
    })?;
    let thermal_after = cfg.fleet.thermal.clone();
    Ok(LoadFollowRun { run, map, log, thermal_before, thermal_after })
}

// ---------------------------------------------------------- experiment helpers

/// Hybrid thermostat versus a single free-running phase oscillator on the same thermal unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleUnitConfig {
    pub thermal: TclParams,
    /// Hours.
    pub t_end: f64,
    #[serde(default = "default_phase_dt")]
    pub dt: f64,
    /// Initial temperature; defaults to the set point.
    #[serde(default)]
    pub t0: Option<f64>,
    /// Leading fraction of each run dropped before measuring.
    #[serde(default = "default_tail")]
    pub skip_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleUnitReport {
    pub analytic_duty: f64,
    /// rad/h.
    pub analytic_omega: f64,
    pub hybrid_duty: f64,
    pub hybrid_omega: f64,
    pub phase_duty: f64,
    pub phase_omega: f64,
    /// |hybrid − phase|, percentage points.
    pub duty_gap_pp: f64,
    /// |hybrid − phase| / hybrid, percent.
    pub omega_gap_pct: f64,
    /// Amplitudes of the first five harmonics of each switching signal.
    pub hybrid_harmonics: Vec<f64>,
    pub phase_harmonics: Vec<f64>,
}

/// (duty, fundamental in rad per time unit, first five harmonic amplitudes).
fn switching_stats(s: &[f64], dt: f64, skip: f64) -> Result<(f64, f64, Vec<f64>), TclError> {
    let from = ((s.len() as f64) * skip) as usize;
    let tail = &s[from..];
    let sp = crate::analysis::fft_spectrum(tail, 1.0 / dt, None, crate::analysis::Window::Rectangular)
        .map_err(|e| TclError::Invalid(e.to_string()))?;
    let f = crate::analysis::dominant_frequency(&sp).map_err(|e| TclError::Invalid(e.to_string()))?;
    let harmonics = (1..=5).map(|k| sp.amplitude(sp.bin_of(k as f64 * f))).collect();
    Ok((measured_duty(tail), 2.0 * PI * f, harmonics))
}

pub fn single_unit_comparison(cfg: &SingleUnitConfig) -> Result<(SingleUnitReport, TimeSeries, PhaseRun), TclError> {
    let th = &cfg.thermal;
    let grid = TimeGrid::span(0.0, cfg.t_end, cfg.dt)?;
    let hybrid = simulate_hybrid(th, cfg.t0.unwrap_or(th.t_s), 0, &grid)?;
    let phase = simulate_phase_ensemble(&PhaseEnsembleConfig {
        n: 1,
        omega: None,
        heterogeneity: 0.0,
        k: 0.0,
        alpha: PhaseAlpha::Uniform(0.0),
        duty: None,
        thermal: th.clone(),
        dt: cfg.dt,
        t_end: cfg.t_end,
        record_every: 1,
        trace_units: 1,
        steady_fraction: default_tail(),
        seed: cfg.seed,
    })?;
    let (hd, hw, hh) = switching_stats(hybrid.channel("s").expect("s channel"), cfg.dt, cfg.skip_fraction)?;
    let (pd, pw, ph) = switching_stats(phase.series.channel("s_1").expect("s_1 channel"), cfg.dt, cfg.skip_fraction)?;
    let report = SingleUnitReport {
        analytic_duty: th.duty()?,
        analytic_omega: natural_frequency(th)?,
        hybrid_duty: hd,
        hybrid_omega: hw,
        phase_duty: pd,
        phase_omega: pw,
        duty_gap_pp: (hd - pd).abs() * 100.0,
        omega_gap_pct: (hw - pw).abs() / hw * 100.0,
        hybrid_harmonics: hh,
        phase_harmonics: ph,
    };
    Ok((report, hybrid, phase))
}

/// One fleet sample run uncontrolled (uncoupled, random offsets) and again coupled with
/// equi-spaced offsets; peak-to-peak over the tail.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluctuationTrial {
    pub seed: u64,
    pub random: SteadyStats,
    pub desync: SteadyStats,
    pub p_red: f64,
}

pub fn fluctuation_trial(cfg: &AveragingConfig, seed: u64, tail_fraction: f64) -> Result<FluctuationTrial, TclError> {
    let run = |offsets: OffsetMode, coupled: bool| -> Result<SteadyStats, TclError> {
        let c = AveragingConfig { seed, offsets, coupled, ..cfg.clone() };
        let r = simulate_averaging(&c)?;
        let p = r.series.channel("P_agg").expect("P_agg channel");
        Ok(steady_stats(&p[tail_start(p.len(), tail_fraction)..]))
    };
    let random = run(OffsetMode::Random, false)?;
    let desync = run(OffsetMode::EquiSpaced, true)?;
    let p_red = metric_p_red(random.peak_to_peak, desync.peak_to_peak);
    Ok(FluctuationTrial { seed, random, desync, p_red })
}
