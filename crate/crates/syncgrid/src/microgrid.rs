//! Islanded AC microgrid: droop primary control, DAPI / RADAPI secondary
//! frequency control, communication faults, settling metrics and Lure'-form
//! storage-function diagnostics.
//!
//! Angles live in a frame rotating at the nominal frequency, so dδ/dt = ω − ω0.
//! Nodes `0..n` of the line network are inverters; the remaining nodes are
//! constant-power load buses with fixed voltage whose angles are solved
//! algebraically at every right-hand-side evaluation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::Matrix;
use crate::simcore::{rk4_step, sample_gaussian, Rk4Work, RngStream, TimeSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MicrogridError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("fault delay {delay} s is shorter than the step {dt} s")]
    DelayBelowStep { delay: f64, dt: f64 },
    #[error("load-bus angle solve failed at t = {t}")]
    LoadFlow { t: f64 },
    #[error("state diverged at t = {t}")]
    Divergence { t: f64 },
    #[error("net gain undefined for a zero DAPI metric")]
    ZeroMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterParams {
    pub omega0: f64,
    #[serde(default = "one")]
    pub v0: f64,
    pub m_p: f64,
    pub m_q: f64,
    #[serde(default)]
    pub p_star: f64,
    #[serde(default)]
    pub q_star: f64,
    pub tau_p: f64,
    pub tau_q: f64,
    #[serde(default = "one")]
    pub k_i: f64,
    #[serde(default = "one")]
    pub capacity: f64,
}

fn one() -> f64 {
    1.0
}

impl InverterParams {
    pub fn validate(&self) -> Result<(), MicrogridError> {
        let pos = [
            ("m_p", self.m_p),
            ("m_q", self.m_q),
            ("tau_p", self.tau_p),
            ("tau_q", self.tau_q),
            ("k_i", self.k_i),
            ("omega0", self.omega0),
            ("v0", self.v0),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MicrogridError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Voltage magnitudes and a symmetric reactance matrix; zero or infinite entries mean no line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineNetwork {
    pub e: Vec<f64>,
    pub x: Matrix,
}

impl LineNetwork {
    pub fn new(e: Vec<f64>, x: Matrix) -> Result<Self, MicrogridError> {
        let n = e.len();
        if x.nrows() != n || x.ncols() != n {
            return Err(MicrogridError::Invalid("reactance matrix must be n x n".into()));
        }
        if e.iter().any(|v| !(*v > 0.0)) {
            return Err(MicrogridError::Invalid("voltage magnitudes must be positive".into()));
        }
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (x[(i, j)], x[(j, i)]);
                if a != b && !(a.is_infinite() && b.is_infinite()) {
                    return Err(MicrogridError::Invalid(format!("X not symmetric at ({i},{j})")));
                }
                if a < 0.0 {
                    return Err(MicrogridError::Invalid(format!("negative reactance at ({i},{j})")));
                }
            }
        }
        Ok(Self { e, x })
    }

    pub fn from_lines(e: Vec<f64>, lines: &[Line]) -> Result<Self, MicrogridError> {
        let n = e.len();
        let mut x = Matrix::zeros(n, n);
        for l in lines {
            if l.a >= n || l.b >= n || l.a == l.b {
                return Err(MicrogridError::Invalid(format!("bad line ({}, {})", l.a, l.b)));
            }
            if !(l.x > 0.0) {
                return Err(MicrogridError::Invalid("line reactance must be positive".into()));
            }
            x[(l.a, l.b)] = l.x;
            x[(l.b, l.a)] = l.x;
        }
        Self::new(e, x)
    }

    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    /// 1/X_ij for connected pairs, 0 otherwise.
    pub fn susceptance(&self, i: usize, j: usize) -> f64 {
        let x = self.x[(i, j)];
        if i == j || x == 0.0 || x.is_infinite() {
            0.0
        } else {
            1.0 / x
        }
    }

    /// X_i = 1 / sum_j 1/X_ij (infinite for an isolated node).
    pub fn x_i(&self, i: usize) -> f64 {
        let s: f64 = (0..self.len()).map(|j| self.susceptance(i, j)).sum();
        if s == 0.0 {
            f64::INFINITY
        } else {
            1.0 / s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub a: usize,
    pub b: usize,
    pub x: f64,
}

/// Active and reactive injections with the network's own voltage magnitudes.
pub fn power_flow(delta: &[f64], net: &LineNetwork) -> (Vec<f64>, Vec<f64>) {
    power_flow_with(delta, &net.e, net)
}

/// Active and reactive injections with caller-supplied magnitudes `e`.
pub fn power_flow_with(delta: &[f64], e: &[f64], net: &LineNetwork) -> (Vec<f64>, Vec<f64>) {
    let n = net.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let mut bsum = 0.0;
        for j in 0..n {
            let b = net.susceptance(i, j);
            if b == 0.0 {
                continue;
            }
            bsum += b;
            let d = delta[i] - delta[j];
            p[i] += e[i] * e[j] * b * d.sin();
            q[i] -= e[i] * e[j] * b * d.cos();
        }
        q[i] += e[i] * e[i] * bsum;
    }
    (p, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    DroopOnly,
    Dapi,
    Radapi,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::DroopOnly => "droop_only",
            Scheme::Dapi => "dapi",
            Scheme::Radapi => "radapi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub scheme: Scheme,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "one")]
    pub c_init: f64,
    #[serde(default)]
    pub min_gain_clamp: bool,
}

fn default_delta() -> f64 {
    0.0005
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self { scheme: Scheme::Radapi, gamma: 1.0, delta: default_delta(), c_init: 1.0, min_gain_clamp: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    #[default]
    None,
    TimeDelay,
    MaliciousData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(default)]
    pub kind: FaultKind,
    #[serde(default)]
    pub delay: f64,
    /// Variance of the injected Gaussian for malicious data.
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    #[serde(default)]
    pub t_start: f64,
    /// Open-ended when absent or null.
    #[serde(default = "inf", deserialize_with = "inf_if_null")]
    pub t_end: f64,
}

fn default_noise() -> f64 {
    1e-4
}

fn inf() -> f64 {
    f64::INFINITY
}

// JSON has no infinity; serde_json writes it as null.
fn inf_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl Default for FaultSpec {
    fn default() -> Self {
        Self { kind: FaultKind::None, delay: 0.0, noise_variance: default_noise(), t_start: 0.0, t_end: f64::INFINITY }
    }
}

impl FaultSpec {
    pub fn active(&self, t: f64) -> bool {
        self.kind != FaultKind::None && t >= self.t_start && t < self.t_end
    }

    pub fn window(&self) -> Option<(f64, f64)> {
        match self.kind {
            FaultKind::None => None,
            _ => Some((self.t_start, self.t_end)),
        }
    }
}

/// Applies a fault to a sampled channel. A delay holds stale samples
/// (the first sample before enough history exists); malicious data adds
/// N(0, noise_variance) inside the window.
pub fn inject_fault(
    times: &[f64],
    samples: &[f64],
    fault: &FaultSpec,
    rng: &mut RngStream,
) -> Result<Vec<f64>, MicrogridError> {
    assert_eq!(times.len(), samples.len());
    match fault.kind {
        FaultKind::None => Ok(samples.to_vec()),
        FaultKind::TimeDelay => {
            if fault.delay == 0.0 {
                return Ok(samples.to_vec());
            }
            let dt = if times.len() > 1 { times[1] - times[0] } else { f64::INFINITY };
            if fault.delay < dt - 1e-12 {
                return Err(MicrogridError::DelayBelowStep { delay: fault.delay, dt });
            }
            let lag = (fault.delay / dt).round() as usize;
            Ok((0..samples.len())
                .map(|k| if fault.active(times[k]) { samples[k.saturating_sub(lag)] } else { samples[k] })
                .collect())
        }
        FaultKind::MaliciousData => Ok(times
            .iter()
            .zip(samples)
            .map(|(&t, &v)| {
                if fault.active(t) {
                    v + sample_gaussian(rng, 0.0, fault.noise_variance, true)
                } else {
                    v
                }
            })
            .collect()),
    }
}

/// Piecewise-constant load: `(t_start, value)` pairs in increasing time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadSchedule {
    Steps(Vec<(f64, f64)>),
    Square { low: f64, high: f64, half_period: f64 },
}

impl LoadSchedule {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            LoadSchedule::Steps(s) => {
                let mut v = s.first().map(|p| p.1).unwrap_or(0.0);
                for &(ts, val) in s {
                    if t >= ts {
                        v = val;
                    } else {
                        break;
                    }
                }
                v
            }
            LoadSchedule::Square { low, high, half_period } => {
                if ((t / half_period).floor() as i64).rem_euclid(2) == 0 {
                    *low
                } else {
                    *high
                }
            }
        }
    }

    /// Switching instants in `(t0, t_end)`.
    pub fn switch_times(&self, t0: f64, t_end: f64) -> Vec<f64> {
        match self {
            LoadSchedule::Steps(s) => s.iter().map(|p| p.0).filter(|&t| t > t0 && t < t_end).collect(),
            LoadSchedule::Square { half_period, .. } => {
                let mut v = Vec::new();
                let mut k = (t0 / half_period).floor() + 1.0;
                while k * half_period < t_end {
                    v.push(k * half_period);
                    k += 1.0;
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadBus {
    pub node: usize,
    pub schedule: LoadSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default = "default_noise")]
    pub sigma: f64,
    #[serde(default = "yes")]
    pub is_variance: bool,
    /// One draw shared by every inverter per step.
    #[serde(default = "yes")]
    pub common: bool,
}

fn yes() -> bool {
    true
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: default_noise(), is_variance: true, common: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBands {
    /// Frequency band as a fraction of omega0.
    #[serde(default = "default_freq_band")]
    pub freq_rel: f64,
    /// Secondary-input agreement band relative to the mean |Omega|.
    #[serde(default = "default_rel_band")]
    pub secondary_rel: f64,
    /// Power-sharing band relative to the mean |m_p (P - P*)|.
    #[serde(default = "default_rel_band")]
    pub sharing_rel: f64,
}

fn default_freq_band() -> f64 {
    1e-3
}

fn default_rel_band() -> f64 {
    0.01
}

impl Default for MetricBands {
    fn default() -> Self {
        Self { freq_rel: default_freq_band(), secondary_rel: default_rel_band(), sharing_rel: default_rel_band() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrogridConfig {
    pub inverters: Vec<InverterParams>,
    /// Voltage magnitude per network node (inverters first).
    pub e: Vec<f64>,
    pub lines: Vec<Line>,
    pub loads: Vec<LoadBus>,
    /// Communication edges between inverters.
    pub comm: Vec<(usize, usize)>,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub fault: FaultSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Use the unreduced form with first-order power-measurement filters.
    #[serde(default)]
    pub filtered: bool,
    #[serde(default)]
    pub bands: MetricBands,
    /// Post-step window excluded from the storage-function check.
    #[serde(default = "default_transient")]
    pub transient_window: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub t_end: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_transient() -> f64 {
    10.0
}

fn default_dt() -> f64 {
    0.01
}

impl MicrogridConfig {
    pub fn n_inv(&self) -> usize {
        self.inverters.len()
    }

    pub fn network(&self) -> Result<LineNetwork, MicrogridError> {
        LineNetwork::from_lines(self.e.clone(), &self.lines)
    }

    pub fn validate(&self) -> Result<(), MicrogridError> {
        let n = self.n_inv();
        if n == 0 {
            return Err(MicrogridError::Invalid("at least one inverter required".into()));
        }
        for inv in &self.inverters {
            inv.validate()?;
        }
        let net = self.network()?;
        if net.len() < n {
            return Err(MicrogridError::Invalid("network smaller than inverter count".into()));
        }
        for l in &self.loads {
            if l.node < n || l.node >= net.len() {
                return Err(MicrogridError::Invalid(format!("load node {} is not a load bus", l.node)));
            }
        }
        for &(a, b) in &self.comm {
            if a >= n || b >= n || a == b {
                return Err(MicrogridError::Invalid(format!("bad comm edge ({a}, {b})")));
            }
        }
        let c = &self.control;
        if !(c.gamma > 0.0) || !(c.delta >= 0.0) || !(c.c_init >= 0.0) {
            return Err(MicrogridError::Invalid("need gamma > 0, delta >= 0, c_init >= 0".into()));
        }
        if !(self.dt > 0.0) || !(self.t_end > self.dt) {
            return Err(MicrogridError::Invalid("bad time grid".into()));
        }
        if self.fault.kind == FaultKind::TimeDelay && self.fault.delay != 0.0 && self.fault.delay < self.dt - 1e-12 {
            return Err(MicrogridError::DelayBelowStep { delay: self.fault.delay, dt: self.dt });
        }
        Ok(())
    }

    /// Load switching instants inside the run.
    pub fn step_times(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.loads.iter().flat_map(|l| l.schedule.switch_times(0.0, self.t_end)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        v
    }

    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        let mut c = self.clone();
        c.control.scheme = scheme;
        c
    }
}

/// Index helpers for the flat state vector: `[delta, a, b, Omega]` per inverter
/// (a, b = omega, V or the filtered P_m, Q_m), then one gain per comm edge.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub n: usize,
    pub edges: usize,
}

impl Layout {
    pub fn delta(&self, i: usize) -> usize {
        4 * i
    }
    pub fn a(&self, i: usize) -> usize {
        4 * i + 1
    }
    pub fn b(&self, i: usize) -> usize {
        4 * i + 2
    }
    pub fn omega_sec(&self, i: usize) -> usize {
        4 * i + 3
    }
    pub fn c(&self, e: usize) -> usize {
        4 * self.n + e
    }
    pub fn len(&self) -> usize {
        4 * self.n + self.edges
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Algebraic quantities recovered from a state.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub omega: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub theta_load: Vec<f64>,
}

/// Microgrid with its network, precomputed adjacency and load-bus solver state.
#[derive(Debug, Clone)]
pub struct MicrogridSystem {
    pub cfg: MicrogridConfig,
    pub net: LineNetwork,
    pub layout: Layout,
    load_nodes: Vec<usize>,
    nbrs: Vec<Vec<(usize, usize)>>,
    theta_guess: Vec<f64>,
}

impl MicrogridSystem {
    pub fn new(cfg: MicrogridConfig) -> Result<Self, MicrogridError> {
        cfg.validate()?;
        let net = cfg.network()?;
        let n = cfg.n_inv();
        let load_nodes: Vec<usize> = (n..net.len()).collect();
        let mut nbrs = vec![Vec::new(); n];
        for (e, &(a, b)) in cfg.comm.iter().enumerate() {
            nbrs[a].push((b, e));
            nbrs[b].push((a, e));
        }
        let layout = Layout { n, edges: cfg.comm.len() };
        let theta_guess = vec![0.0; load_nodes.len()];
        Ok(Self { cfg, net, layout, load_nodes, nbrs, theta_guess })
    }

    /// Flat start: zero angles, nominal frequency and voltage, zero secondary input.
    pub fn initial_state(&self) -> Vec<f64> {
        let l = self.layout;
        let mut x = vec![0.0; l.len()];
        for (i, inv) in self.cfg.inverters.iter().enumerate() {
            if self.cfg.filtered {
                x[l.a(i)] = inv.p_star;
                x[l.b(i)] = inv.q_star;
            } else {
                x[l.a(i)] = inv.omega0;
                x[l.b(i)] = inv.v0;
            }
        }
        for e in 0..l.edges {
            x[l.c(e)] = self.cfg.control.c_init;
        }
        x
    }

    fn load_demand(&self, t: f64) -> Vec<f64> {
        self.load_nodes
            .iter()
            .map(|&node| self.cfg.loads.iter().filter(|l| l.node == node).map(|l| l.schedule.value(t)).sum())
            .collect()
    }

    /// Total scheduled load at time `t`.
    pub fn total_load(&self, t: f64) -> f64 {
        self.load_demand(t).iter().sum()
    }

    /// Inverter voltages as implied by the state and the disturbance `d`.
    fn voltages_and_freqs(&self, x: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let l = self.layout;
        let mut v = Vec::with_capacity(l.n);
        let mut w = Vec::with_capacity(l.n);
        for (i, inv) in self.cfg.inverters.iter().enumerate() {
            if self.cfg.filtered {
                w.push(inv.omega0 - inv.m_p * (x[l.a(i)] - inv.p_star) + x[l.omega_sec(i)] + d[i]);
                v.push(inv.v0 - inv.m_q * (x[l.b(i)] - inv.q_star));
            } else {
                w.push(x[l.a(i)]);
                v.push(x[l.b(i)]);
            }
        }
        (v, w)
    }

    /// Newton solve of the load-bus balance sum_j E_l E_j B_lj sin(θ_l − θ_j) = −P_L.
    fn solve_load_angles(&self, delta_inv: &[f64], e_all: &[f64], demand: &[f64], guess: &[f64]) -> Option<Vec<f64>> {
        let m = self.load_nodes.len();
        if m == 0 {
            return Some(Vec::new());
        }
        let n = self.layout.n;
        let mut th = guess.to_vec();
        let mut ang = vec![0.0; self.net.len()];
        ang[..n].copy_from_slice(delta_inv);
        for _ in 0..50 {
            ang[n..].copy_from_slice(&th);
            let mut f = DVector::zeros(m);
            let mut jac = DMatrix::zeros(m, m);
            for (r, &li) in self.load_nodes.iter().enumerate() {
                f[r] = demand[r];
                for j in 0..self.net.len() {
                    let b = self.net.susceptance(li, j);
                    if b == 0.0 {
                        continue;
                    }
                    let k = e_all[li] * e_all[j] * b;
                    let dlt = ang[li] - ang[j];
                    f[r] += k * dlt.sin();
                    jac[(r, r)] += k * dlt.cos();
                    if j >= n {
                        jac[(r, j - n)] -= k * dlt.cos();
                    }
                }
            }
            let step = jac.lu().solve(&f)?;
            let mut big = 0.0f64;
            for r in 0..m {
                th[r] -= step[r];
                big = big.max(step[r].abs());
            }
            if big < 1e-13 {
                return Some(th);
            }
        }
        let ok = th.iter().all(|v| v.is_finite());
        ok.then_some(th)
    }

    /// Full network angles, magnitudes and the inverter outputs for a state.
    pub fn outputs(&self, x: &[f64], d: &[f64], t: f64, guess: &[f64]) -> Result<Outputs, MicrogridError> {
        let l = self.layout;
        let (v, w) = self.voltages_and_freqs(x, d);
        let mut e_all = self.net.e.clone();
        e_all[..l.n].copy_from_slice(&v);
        let delta_inv: Vec<f64> = (0..l.n).map(|i| x[l.delta(i)]).collect();
        let demand = self.load_demand(t);
        let th = self
            .solve_load_angles(&delta_inv, &e_all, &demand, guess)
            .ok_or(MicrogridError::LoadFlow { t })?;
        let mut ang = delta_inv;
        ang.extend_from_slice(&th);
        let (p, q) = power_flow_with(&ang, &e_all, &self.net);
        Ok(Outputs { omega: w, v, p: p[..l.n].to_vec(), q: q[..l.n].to_vec(), theta_load: th })
    }

    /// State derivative given the disturbance and the secondary inputs neighbours see.
    /// `comm` is `None` for ideal links (live values).
    pub fn rhs(
        &self,
        t: f64,
        x: &[f64],
        d: &[f64],
        comm: Option<&[f64]>,
        guess: &[f64],
        dx: &mut [f64],
    ) -> Result<Vec<f64>, MicrogridError> {
        let l = self.layout;
        let out = self.outputs(x, d, t, guess)?;
        let ctl = &self.cfg.control;
        for (i, inv) in self.cfg.inverters.iter().enumerate() {
            let w = out.omega[i];
            dx[l.delta(i)] = w - inv.omega0;
            if self.cfg.filtered {
                dx[l.a(i)] = (out.p[i] - x[l.a(i)]) / inv.tau_p;
                dx[l.b(i)] = (out.q[i] - x[l.b(i)]) / inv.tau_q;
            } else {
                dx[l.a(i)] = (inv.omega0 + x[l.omega_sec(i)] + d[i] - w - inv.m_p * (out.p[i] - inv.p_star)) / inv.tau_p;
                dx[l.b(i)] = (inv.v0 - out.v[i] - inv.m_q * (out.q[i] - inv.q_star)) / inv.tau_q;
            }
            dx[l.omega_sec(i)] = match ctl.scheme {
                Scheme::DroopOnly => 0.0,
                Scheme::Dapi | Scheme::Radapi => {
                    let om_i = x[l.omega_sec(i)];
                    let mut coupling = 0.0;
                    for &(j, e) in &self.nbrs[i] {
                        let om_j = comm.map_or(x[l.omega_sec(j)], |c| c[j]);
                        coupling += x[l.c(e)] * (om_i - om_j);
                    }
                    (-(w - inv.omega0) - coupling) / inv.k_i
                }
            };
        }
        for (e, &(a, b)) in self.cfg.comm.iter().enumerate() {
            dx[l.c(e)] = match ctl.scheme {
                Scheme::Radapi => {
                    let (oa, ob) = (x[l.omega_sec(a)], x[l.omega_sec(b)]);
                    let drive = match comm {
                        None => (oa - ob).powi(2),
                        Some(c) => 0.5 * ((oa - c[b]).powi(2) + (c[a] - ob).powi(2)),
                    };
                    -ctl.delta * x[l.c(e)] + ctl.gamma * drive
                }
                _ => 0.0,
            };
        }
        Ok(out.theta_load)
    }

    pub fn channel_names(&self) -> Vec<String> {
        let n = self.layout.n;
        let mut names = Vec::new();
        for pre in ["delta", "omega", "V", "P", "Q", "Omega"] {
            for i in 0..n {
                names.push(format!("{pre}_{}", i + 1));
            }
        }
        for &(a, b) in &self.cfg.comm {
            names.push(format!("c_{}_{}", a + 1, b + 1));
        }
        names.push("P_load".into());
        names.push("d".into());
        names
    }

    /// Runs the configured scenario to `t_end`.
    pub fn simulate(&mut self) -> Result<MicrogridRun, MicrogridError> {
        let cfg = self.cfg.clone();
        let l = self.layout;
        let steps = (cfg.t_end / cfg.dt).round() as usize;
        let master = RngStream::new(cfg.seed);
        let mut noise_rng = master.derive(0);
        let mut fault_rng = master.derive(1);
        let lag = if cfg.fault.kind == FaultKind::TimeDelay { (cfg.fault.delay / cfg.dt).round() as usize } else { 0 };
        let mut history: Vec<Vec<f64>> = Vec::new();

        let mut x = self.initial_state();
        let mut d = vec![0.0; l.n];
        let mut work = Rk4Work::new(x.len());
        let mut ts = TimeSeries::with_capacity(&self.channel_names(), steps + 1);
        ts.meta.insert("scheme".into(), cfg.control.scheme.name().into());
        ts.meta.insert("seed".into(), cfg.seed.to_string());
        ts.meta.insert("time_unit".into(), "s".into());

        let record = |ts: &mut TimeSeries, sys: &MicrogridSystem, t: f64, x: &[f64], d: &[f64], guess: &[f64]| -> Result<Vec<f64>, MicrogridError> {
            let out = sys.outputs(x, d, t, guess)?;
            let mut row = Vec::with_capacity(ts.names.len());
            row.extend((0..l.n).map(|i| x[l.delta(i)]));
            row.extend_from_slice(&out.omega);
            row.extend_from_slice(&out.v);
            row.extend_from_slice(&out.p);
            row.extend_from_slice(&out.q);
            row.extend((0..l.n).map(|i| x[l.omega_sec(i)]));
            row.extend((0..l.edges).map(|e| x[l.c(e)]));
            row.push(sys.total_load(t));
            row.push(d[0]);
            ts.push(t, &row);
            Ok(out.theta_load)
        };

        let guess0 = self.theta_guess.clone();
        self.theta_guess = record(&mut ts, self, 0.0, &x, &d, &guess0)?;

        for k in 0..steps {
            let t = k as f64 * cfg.dt;
            if cfg.noise.sigma > 0.0 {
                if cfg.noise.common {
                    let v = sample_gaussian(&mut noise_rng, 0.0, cfg.noise.sigma, cfg.noise.is_variance);
                    d.iter_mut().for_each(|di| *di = v);
                } else {
                    for di in d.iter_mut() {
                        *di = sample_gaussian(&mut noise_rng, 0.0, cfg.noise.sigma, cfg.noise.is_variance);
                    }
                }
            }
            let live: Vec<f64> = (0..l.n).map(|i| x[l.omega_sec(i)]).collect();
            history.push(live.clone());
            let comm: Option<Vec<f64>> = if cfg.fault.active(t) {
                match cfg.fault.kind {
                    FaultKind::TimeDelay if lag > 0 => Some(history[history.len() - 1 - lag.min(history.len() - 1)].clone()),
                    FaultKind::MaliciousData => Some(
                        live.iter()
                            .map(|v| v + sample_gaussian(&mut fault_rng, 0.0, cfg.fault.noise_variance, true))
                            .collect(),
                    ),
                    _ => None,
                }
            } else {
                None
            };
            if lag > 0 && history.len() > lag + 1 {
                history.remove(0);
            }

            let guess = self.theta_guess.clone();
            let mut err = None;
            {
                let sys = &*self;
                let dref = &d;
                let cref = comm.as_deref();
                let mut f = |tt: f64, xx: &[f64], dxx: &mut [f64]| {
                    if err.is_some() {
                        dxx.iter_mut().for_each(|v| *v = 0.0);
                        return;
                    }
                    if let Err(e) = sys.rhs(tt, xx, dref, cref, &guess, dxx) {
                        err = Some(e);
                        dxx.iter_mut().for_each(|v| *v = 0.0);
                    }
                };
                rk4_step(&mut f, t, &mut x, cfg.dt, &mut work);
            }
            if let Some(e) = err {
                return Err(e);
            }
            if cfg.control.scheme == Scheme::Radapi && cfg.control.min_gain_clamp {
                for e in 0..l.edges {
                    x[l.c(e)] = x[l.c(e)].max(1.0);
                }
            }
            let t1 = (k + 1) as f64 * cfg.dt;
            if x.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
                ts.diverged_at = Some(t1);
                return Err(MicrogridError::Divergence { t: t1 });
            }
            let g = self.theta_guess.clone();
            self.theta_guess = record(&mut ts, self, t1, &x, &d, &g)?;
        }
        Ok(MicrogridRun { series: ts, step_times: cfg.step_times(), cfg })
    }
}

#[derive(Debug, Clone)]
pub struct MicrogridRun {
    pub series: TimeSeries,
    pub step_times: Vec<f64>,
    pub cfg: MicrogridConfig,
}

/// Per-metric settling times (seconds after each load step, worst over segments).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettlingReport {
    pub frequency: Option<f64>,
    pub secondary: Option<f64>,
    pub sharing: Option<f64>,
    /// Largest of the three: the scenario-level figure.
    pub scenario: Option<f64>,
    pub per_segment: Vec<SegmentSettling>,
    /// Sharing error at the end of each segment (relative).
    pub final_sharing_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSettling {
    pub t_start: f64,
    pub t_end: f64,
    pub frequency: Option<f64>,
    pub secondary: Option<f64>,
    pub sharing: Option<f64>,
}

fn col<'a>(ts: &'a TimeSeries, name: &str) -> &'a [f64] {
    ts.channel(name).unwrap_or_else(|| panic!("missing channel {name}"))
}

/// Error series for the three settling metrics.
pub fn metric_errors(run: &MicrogridRun) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ts = &run.series;
    let n = run.cfg.n_inv();
    let omega: Vec<&[f64]> = (1..=n).map(|i| col(ts, &format!("omega_{i}"))).collect();
    let sec: Vec<&[f64]> = (1..=n).map(|i| col(ts, &format!("Omega_{i}"))).collect();
    let p: Vec<&[f64]> = (1..=n).map(|i| col(ts, &format!("P_{i}"))).collect();
    let len = ts.len();
    let mut e1 = vec![0.0; len];
    let mut e2 = vec![0.0; len];
    let mut e3 = vec![0.0; len];
    for k in 0..len {
        let mut share = Vec::with_capacity(n);
        let mut sv = Vec::with_capacity(n);
        for (i, inv) in run.cfg.inverters.iter().enumerate() {
            e1[k] = f64::max(e1[k], (omega[i][k] - inv.omega0).abs());
            share.push(inv.m_p * (p[i][k] - inv.p_star));
            sv.push(sec[i][k]);
        }
        e2[k] = rel_spread(&sv);
        e3[k] = rel_spread(&share);
    }
    (e1, e2, e3)
}

/// max_ij |v_i − v_j| / mean |v|.
fn rel_spread(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
    (mx - mn) / mean.max(1e-12)
}

/// Settling of each metric after each load step, within that step's segment.
pub fn settling_report(run: &MicrogridRun) -> SettlingReport {
    let ts = &run.series;
    let (e1, e2, e3) = metric_errors(run);
    let w0 = run.cfg.inverters[0].omega0;
    let b = &run.cfg.bands;
    let mut bounds = vec![0.0];
    bounds.extend(run.step_times.iter().copied());
    bounds.push(run.cfg.t_end);
    let mut per = Vec::new();
    let mut finals = Vec::new();
    for win in bounds.windows(2) {
        let (a, z) = (win[0], win[1]);
        let idx: Vec<usize> = (0..ts.len()).filter(|&k| ts.times[k] > a + 1e-9 && ts.times[k] < z - 1e-9).collect();
        if idx.is_empty() {
            continue;
        }
        let (lo, hi) = (idx[0], idx[idx.len() - 1] + 1);
        let t = &ts.times[lo..hi];
        let s = |e: &[f64], band: f64| crate::simcore::settling_time(t, &e[lo..hi], 0.0, band).map(|v| v - a);
        per.push(SegmentSettling {
            t_start: a,
            t_end: z.min(run.cfg.t_end),
            frequency: s(&e1, b.freq_rel * w0),
            secondary: s(&e2, b.secondary_rel),
            sharing: s(&e3, b.sharing_rel),
        });
        finals.push(e3[hi - 1]);
    }
    let worst = |f: fn(&SegmentSettling) -> Option<f64>| -> Option<f64> {
        per.iter().map(f).try_fold(0.0f64, |acc, v| v.map(|x| acc.max(x)))
    };
    let frequency = worst(|s| s.frequency);
    let secondary = worst(|s| s.secondary);
    let sharing = worst(|s| s.sharing);
    let scenario = match (frequency, secondary, sharing) {
        (Some(a), Some(b), Some(c)) => Some(a.max(b).max(c)),
        _ => None,
    };
    SettlingReport { frequency, secondary, sharing, scenario, per_segment: per, final_sharing_error: finals }
}

/// (dapi − radapi) / dapi × 100.
pub fn net_gain(dapi_metric: f64, radapi_metric: f64) -> Result<f64, MicrogridError> {
    if dapi_metric == 0.0 {
        return Err(MicrogridError::ZeroMetric);
    }
    Ok((dapi_metric - radapi_metric) / dapi_metric * 100.0)
}

/// Linear block of the frequency-synchronization Lure' form.
#[derive(Debug, Clone, PartialEq)]
pub struct LureForm {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

/// A = [[0, I], [0, −I]], B = [0; I], C = [0, I] for `n` inverters (state: angles, frequencies).
pub fn lure_decompose(n: usize) -> LureForm {
    let mut a = Matrix::zeros(2 * n, 2 * n);
    let mut b = Matrix::zeros(2 * n, n);
    let mut c = Matrix::zeros(n, 2 * n);
    for i in 0..n {
        a[(i, n + i)] = 1.0;
        a[(n + i, n + i)] = -1.0;
        b[(n + i, i)] = 1.0;
        c[(i, n + i)] = 1.0;
    }
    LureForm { a, b, c }
}

/// Sector nonlinearity φ_i = m_p (P_i − P*_i).
pub fn lure_nonlinearity(inverters: &[InverterParams], p: &[f64]) -> Vec<f64> {
    inverters.iter().zip(p).map(|(inv, pi)| inv.m_p * (pi - inv.p_star)).collect()
}

pub fn eigenvalues(m: &Matrix) -> Vec<Complex64> {
    m.complex_eigenvalues().iter().map(|z| Complex64::new(z.re, z.im)).collect()
}

/// Rank of [B, AB, ..., A^(n−1) B].
pub fn controllability_rank(a: &Matrix, b: &Matrix) -> usize {
    let n = a.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut cur = b.clone();
    for _ in 0..n {
        blocks.push(cur.clone());
        cur = a * &cur;
    }
    let mut ctrb = Matrix::zeros(n, n * b.ncols());
    for (k, blk) in blocks.iter().enumerate() {
        ctrb.view_mut((0, k * b.ncols()), (n, b.ncols())).copy_from(blk);
    }
    ctrb.rank(1e-9)
}

/// Empirical sector (min, max) of the difference quotient over all sample pairs.
pub fn sector_bound_check(ys: &[f64], phis: &[f64]) -> Option<(f64, f64)> {
    assert_eq!(ys.len(), phis.len());
    let mut q = f64::INFINITY;
    let mut r = f64::NEG_INFINITY;
    for i in 0..ys.len() {
        for j in i + 1..ys.len() {
            let dy = ys[j] - ys[i];
            if dy.abs() < 1e-12 {
                continue;
            }
            let s = (phis[j] - phis[i]) / dy;
            q = q.min(s);
            r = r.max(s);
        }
    }
    q.is_finite().then_some((q, r))
}

/// Smallest (y_j − y_i)(φ_j − φ_i) over all sample pairs.
pub fn incremental_passivity_min(ys: &[f64], phis: &[f64]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..ys.len() {
        for j in i + 1..ys.len() {
            m = m.min((ys[j] - ys[i]) * (phis[j] - phis[i]));
        }
    }
    m
}

/// Per-line samples (Δ_ij, m_p,i E_i E_j / X_ij sin Δ_ij) along a run, for sector checks.
pub fn line_nonlinearity_samples(run: &MicrogridRun, i: usize, j: usize, stride: usize) -> (Vec<f64>, Vec<f64>) {
    let ts = &run.series;
    let net = run.cfg.network().expect("validated");
    let di = col(ts, &format!("delta_{}", i + 1));
    let dj = col(ts, &format!("delta_{}", j + 1));
    let vi = col(ts, &format!("V_{}", i + 1));
    let vj = col(ts, &format!("V_{}", j + 1));
    let b = net.susceptance(i, j);
    let m = run.cfg.inverters[i].m_p;
    let mut ys = Vec::new();
    let mut ph = Vec::new();
    for k in (0..ts.len()).step_by(stride.max(1)) {
        let dl = di[k] - dj[k];
        ys.push(dl);
        ph.push(m * vi[k] * vj[k] * b * dl.sin());
    }
    (ys, ph)
}

/// Storage functions along a run: V = ¼ ξᵀξ, W = ¼ ΣΣ (c − c*)²/Γ, U = ¼ δũᵀδũ.
#[derive(Debug, Clone, Serialize)]
pub struct PassivityReport {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub zdot: Vec<f64>,
    pub max_violation: f64,
    pub nonincreasing: bool,
    pub tolerance: f64,
}

/// Deviations are taken against the synchronized state each load segment settles to
/// (its last sample). Samples inside `[step − dt, step + transient_window]` and the
/// fault window are excluded from the monotonicity verdict.
pub fn passivity_diagnostics(run: &MicrogridRun, c_star: f64, tol: f64) -> PassivityReport {
    let ts = &run.series;
    let cfg = &run.cfg;
    let n = cfg.n_inv();
    let len = ts.len();
    let delta: Vec<&[f64]> = (1..=n).map(|i| col(ts, &format!("delta_{i}"))).collect();
    let omega: Vec<&[f64]> = (1..=n).map(|i| col(ts, &format!("omega_{i}"))).collect();
    let sec: Vec<&[f64]> = (1..=n).map(|i| col(ts, &format!("Omega_{i}"))).collect();
    let gains: Vec<&[f64]> = cfg.comm.iter().map(|&(a, b)| col(ts, &format!("c_{}_{}", a + 1, b + 1))).collect();

    let mut bounds = vec![0.0];
    bounds.extend(run.step_times.iter().copied());
    bounds.push(f64::INFINITY);
    let seg_of = |t: f64| bounds.windows(2).position(|w| t >= w[0] - 1e-9 && t < w[1] - 1e-9).unwrap_or(0);
    let mut seg_ref = vec![0usize; bounds.len() - 1];
    for k in 0..len {
        seg_ref[seg_of(ts.times[k])] = k;
    }

    let mut v = vec![0.0; len];
    let mut w = vec![0.0; len];
    let mut u = vec![0.0; len];
    let mut z = vec![0.0; len];
    for k in 0..len {
        let r = seg_ref[seg_of(ts.times[k])];
        let xt: Vec<[f64; 2]> = (0..n)
            .map(|i| [delta[i][k] - delta[i][r], omega[i][k] - omega[i][r]])
            .collect();
        let mut vv = 0.0;
        let mut uu = 0.0;
        for i in 0..n {
            let mut xi = [0.0; 2];
            let mut du = 0.0;
            for j in 0..n {
                xi[0] += xt[i][0] - xt[j][0];
                xi[1] += xt[i][1] - xt[j][1];
                du += sec[i][k] - sec[j][k];
            }
            vv += xi[0] * xi[0] + xi[1] * xi[1];
            uu += du * du;
        }
        // each undirected gain appears as c_ij and c_ji in the double sum
        let ww: f64 = gains.iter().map(|g| 2.0 * (g[k] - c_star).powi(2)).sum::<f64>() / cfg.control.gamma;
        v[k] = 0.25 * vv;
        w[k] = 0.25 * ww;
        u[k] = 0.25 * uu;
        z[k] = v[k] + w[k] + u[k];
    }
    let zdot = central_difference(&ts.times, &z);

    let fault = cfg.fault.window();
    let excluded = |t: f64| {
        let near_step = run
            .step_times
            .iter()
            .any(|&s| t >= s - cfg.dt - 1e-9 && t <= s + cfg.transient_window);
        let startup = t <= cfg.transient_window;
        let in_fault = fault.is_some_and(|(a, b)| t >= a && t <= b + cfg.transient_window);
        near_step || startup || in_fault
    };
    let mut max_violation = f64::NEG_INFINITY;
    for k in 1..len.saturating_sub(1) {
        if !excluded(ts.times[k]) {
            max_violation = max_violation.max(zdot[k]);
        }
    }
    PassivityReport {
        t: ts.times.clone(),
        v,
        w,
        u,
        z,
        zdot,
        max_violation,
        nonincreasing: max_violation <= tol,
        tolerance: tol,
    }
}

/// Seconds after `t_from` until frequency and secondary errors both stay inside their
/// bands for the rest of that load segment; `None` if they never do.
pub fn recovery_time(run: &MicrogridRun, t_from: f64) -> Option<f64> {
    let ts = &run.series;
    let (e1, e2, _) = metric_errors(run);
    let b = &run.cfg.bands;
    let f_band = b.freq_rel * run.cfg.inverters[0].omega0;
    let t_stop = run
        .step_times
        .iter()
        .copied()
        .find(|&s| s > t_from + 1e-9)
        .unwrap_or(run.cfg.t_end);
    let idx: Vec<usize> = (0..ts.len()).filter(|&k| ts.times[k] >= t_from - 1e-9 && ts.times[k] < t_stop - 1e-9).collect();
    if idx.is_empty() {
        return None;
    }
    let t: Vec<f64> = idx.iter().map(|&k| ts.times[k]).collect();
    let e: Vec<f64> = idx.iter().map(|&k| (e1[k] / f_band).max(e2[k] / b.secondary_rel)).collect();
    crate::simcore::settling_time(&t, &e, 0.0, 1.0).map(|v| v - t_from)
}

/// Largest single-step decrease over all gain channels (0 when every c_ij is non-decreasing).
pub fn max_gain_decrease(run: &MicrogridRun) -> f64 {
    run.cfg
        .comm
        .iter()
        .filter_map(|&(a, b)| run.series.channel(&format!("c_{}_{}", a + 1, b + 1)))
        .flat_map(|c| c.windows(2).map(|w| w[0] - w[1]).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// Central differences inside, one-sided at the ends.
pub fn central_difference(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut d = vec![0.0; n];
    if n < 2 {
        return d;
    }
    d[0] = (y[1] - y[0]) / (t[1] - t[0]);
    d[n - 1] = (y[n - 1] - y[n - 2]) / (t[n - 1] - t[n - 2]);
    for k in 1..n - 1 {
        d[k] = (y[k + 1] - y[k - 1]) / (t[k + 1] - t[k - 1]);
    }
    d
}

/// DAPI vs RADAPI on the same config and seed.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub dapi: SettlingReport,
    pub radapi: SettlingReport,
    pub net_gain: Option<f64>,
    pub radapi_peak_gain: f64,
}

pub fn compare_schemes(cfg: &MicrogridConfig) -> Result<(Comparison, MicrogridRun, MicrogridRun), MicrogridError> {
    let mut sd = MicrogridSystem::new(cfg.with_scheme(Scheme::Dapi))?;
    let mut sr = MicrogridSystem::new(cfg.with_scheme(Scheme::Radapi))?;
    let (rd, rr) = rayon::join(|| sd.simulate(), || sr.simulate());
    let (rd, rr) = (rd?, rr?);
    let dapi = settling_report(&rd);
    let radapi = settling_report(&rr);
    let net_gain = match (dapi.scenario, radapi.scenario) {
        (Some(a), Some(b)) => net_gain(a, b).ok(),
        _ => None,
    };
    let peak = cfg
        .comm
        .iter()
        .map(|&(a, b)| {
            rr.series
                .channel(&format!("c_{}_{}", a + 1, b + 1))
                .map(|c| c.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .unwrap_or(f64::NAN)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((Comparison { dapi, radapi, net_gain, radapi_peak_gain: peak }, rd, rr))
}
