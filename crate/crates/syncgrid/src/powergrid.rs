//! Swing-equation generators as second-order Kuramoto oscillators with
//! conformist (same-area) and contrarian (cross-area) coupling.
//!
//! State layout for every simulation: `[δ_1..δ_n, δ̇_1..δ̇_n]`.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::wrap_angle;
use crate::netgraph::Matrix;
use crate::simcore::{rk4_step, Rk4Work, RngStream, TimeSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerGridError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("area {0} has no generators")]
    EmptyArea(usize),
    #[error("unknown two-area case {0}")]
    UnknownCase(u32),
    #[error("state diverged at t = {t}")]
    Divergence { t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Inertia, kg·m².
    pub j: f64,
    /// Dissipation, W·s²/rad².
    pub k_d: f64,
    /// Mechanical power input.
    pub p_m: f64,
    /// Internal voltage.
    pub e: f64,
    #[serde(default)]
    pub area: usize,
}

/// Reduced oscillator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KuramotoParams {
    pub omega: Vec<f64>,
    pub alpha: Vec<f64>,
    pub k: Matrix,
}

/// α = 2K_D/J, k_ij = E_iE_j|Y_ij|/(JΩ), ω_i = (P_m,i − E_i²·Re Y_ii)/(JΩ).
pub fn swing_to_kuramoto(
    gens: &[GeneratorParams],
    y: &[Vec<Complex64>],
    grid_freq: f64,
) -> Result<KuramotoParams, PowerGridError> {
    let n = gens.len();
    if y.len() != n || y.iter().any(|r| r.len() != n) {
        return Err(PowerGridError::Invalid("admittance must be n x n".into()));
    }
    if !(grid_freq > 0.0) {
        return Err(PowerGridError::Invalid("grid frequency must be positive".into()));
    }
    if let Some(g) = gens.iter().find(|g| !(g.j > 0.0)) {
        return Err(PowerGridError::Invalid(format!("inertia must be positive, got {}", g.j)));
    }
    let alpha = gens.iter().map(|g| 2.0 * g.k_d / g.j).collect();
    let omega = gens
        .iter()
        .enumerate()
        .map(|(i, g)| (g.p_m - g.e * g.e * y[i][i].re) / (g.j * grid_freq))
        .collect();
    let k = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            gens[i].e * gens[j].e * y[i][j].norm() / (gens[i].j * grid_freq)
        }
    });
    Ok(KuramotoParams { omega, alpha, k })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalGate {
    pub threshold: f64,
    pub min_coupling: f64,
    pub passes: bool,
}

/// Compares the weakest nonzero coupling with (ω_max − ω_min)·n / (2(n − 1)).
pub fn critical_coupling_gate(omega: &[f64], k: &Matrix) -> CriticalGate {
    let n = omega.len();
    let wmax = omega.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let wmin = omega.iter().cloned().fold(f64::INFINITY, f64::min);
    let threshold = if n > 1 { (wmax - wmin) * n as f64 / (2.0 * (n - 1) as f64) } else { 0.0 };
    let mut min_coupling = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j && k[(i, j)] > 0.0 {
                min_coupling = min_coupling.min(k[(i, j)]);
            }
        }
    }
    CriticalGate { threshold, min_coupling, passes: min_coupling >= threshold }
}

/// Magnitudes with an area partition; same-area pairs attract, cross-area pairs repel.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedCoupling {
    pub k: Matrix,
    pub areas: Vec<usize>,
}

impl SignedCoupling {
    pub fn new(k: Matrix, areas: Vec<usize>) -> Result<Self, PowerGridError> {
        let n = areas.len();
        if k.nrows() != n || k.ncols() != n {
            return Err(PowerGridError::Invalid("coupling matrix must match area labels".into()));
        }
        for i in 0..n {
            if k[(i, i)] != 0.0 {
                return Err(PowerGridError::Invalid("coupling diagonal must be zero".into()));
            }
            for j in 0..n {
                if (k[(i, j)] - k[(j, i)]).abs() > 1e-12 {
                    return Err(PowerGridError::Invalid("coupling must be symmetric".into()));
                }
            }
        }
        Ok(Self { k, areas })
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn sign(&self, i: usize, j: usize) -> f64 {
        if self.areas[i] == self.areas[j] {
            1.0
        } else {
            -1.0
        }
    }

    /// s_ij·k_ij.
    pub fn signed(&self) -> Matrix {
        Matrix::from_fn(self.len(), self.len(), |i, j| self.sign(i, j) * self.k[(i, j)])
    }

    pub fn area_count(&self) -> usize {
        self.areas.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcSystem {
    pub omega: Vec<f64>,
    pub alpha: Vec<f64>,
    pub coupling: SignedCoupling,
    signed: Matrix,
}

impl CcSystem {
    pub fn new(omega: Vec<f64>, alpha: Vec<f64>, coupling: SignedCoupling) -> Result<Self, PowerGridError> {
        if omega.len() != coupling.len() || alpha.len() != coupling.len() {
            return Err(PowerGridError::Invalid("omega/alpha length mismatch".into()));
        }
        if alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(PowerGridError::Invalid("damping must be nonnegative".into()));
        }
        let signed = coupling.signed();
        Ok(Self { omega, alpha, coupling, signed })
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn signed(&self) -> &Matrix {
        &self.signed
    }

    /// Σ_j s_ij k_ij sin(δ_j − δ_i).
    pub fn coupling_term(&self, delta: &[f64], i: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.len() {
            let k = self.signed[(i, j)];
            if k != 0.0 {
                acc += k * (delta[j] - delta[i]).sin();
            }
        }
        acc
    }
}

/// δ̈_i = ω_i − α_i δ̇_i + Σ_j s_ij k_ij sin(δ_j − δ_i).
pub fn cc_kuramoto_rhs(sys: &CcSystem, x: &[f64], dx: &mut [f64]) {
    let n = sys.len();
    let (delta, vel) = x.split_at(n);
    for i in 0..n {
        dx[i] = vel[i];
        dx[n + i] = sys.omega[i] - sys.alpha[i] * vel[i] + sys.coupling_term(delta, i);
    }
}

/// Analytic Jacobian of the first-order system at `x`.
pub fn jacobian(sys: &CcSystem, x: &[f64]) -> Matrix {
    let n = sys.len();
    let delta = &x[..n];
    let mut jm = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        jm[(i, n + i)] = 1.0;
        jm[(n + i, n + i)] = -sys.alpha[i];
        let mut diag = 0.0;
        for m in 0..n {
            if m == i {
                continue;
            }
            let c = sys.signed[(i, m)] * (delta[m] - delta[i]).cos();
            jm[(n + i, m)] = c;
            diag -= c;
        }
        jm[(n + i, i)] = diag;
    }
    jm
}

/// Central-difference Jacobian.
pub fn jacobian_fd(sys: &CcSystem, x: &[f64], h: f64) -> Matrix {
    let m = x.len();
    let mut jm = Matrix::zeros(m, m);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; m];
    let mut fm = vec![0.0; m];
    for c in 0..m {
        xp[c] = x[c] + h;
        cc_kuramoto_rhs(sys, &xp, &mut fp);
        xp[c] = x[c] - h;
        cc_kuramoto_rhs(sys, &xp, &mut fm);
        xp[c] = x[c];
        for r in 0..m {
            jm[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    jm
}

/// Two-area test system: J = 0.4, α = 0.125, Ω = 1 Hz, areas {1,2} | {3,4}.
pub fn two_area_scenario(case: u32) -> Result<CcSystem, PowerGridError> {
    let (k, omega): ([[f64; 4]; 4], [f64; 4]) = match case {
        1 => (
            [
                [0.0, 1.9689, 0.1766, 0.1782],
                [1.9689, 0.0, 0.1782, 0.1801],
                [0.1766, 0.1782, 0.0, 1.9363],
                [0.1782, 0.1801, 1.9363, 0.0],
            ],
            [17.5290, 17.7923, 17.5640, 17.8285],
        ),
        2 => (
            [
                [0.0, 2.5960, 0.2130, 0.2151],
                [2.5960, 0.0, 0.2151, 0.2171],
                [0.2130, 0.2151, 0.0, 1.7214],
                [0.2151, 0.2171, 1.7214, 0.0],
            ],
            [16.8882, 17.1532, 17.7931, 18.0629],
        ),
        c => return Err(PowerGridError::UnknownCase(c)),
    };
    let km = Matrix::from_fn(4, 4, |i, j| k[i][j]);
    CcSystem::new(omega.to_vec(), vec![0.125; 4], SignedCoupling::new(km, vec![0, 0, 1, 1])?)
}

/// Inertia, damping and grid frequency shared by the two-area cases.
pub const TWO_AREA_J: f64 = 0.4;
pub const TWO_AREA_ALPHA: f64 = 0.125;
pub const TWO_AREA_GRID_HZ: f64 = 1.0;

/// (1/N) Σ e^{iδ_j}.
pub fn order_parameter(deltas: &[f64]) -> Complex64 {
    let n = deltas.len() as f64;
    deltas.iter().map(|&d| Complex64::from_polar(1.0, d)).sum::<Complex64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupOrder {
    pub per_area: Vec<Complex64>,
    /// wrap(arg R_area2 − arg R_area1).
    pub gap: f64,
}

pub fn group_order_parameters(deltas: &[f64], areas: &[usize]) -> Result<GroupOrder, PowerGridError> {
    let count = areas.iter().max().map_or(0, |m| m + 1);
    let mut per_area = Vec::with_capacity(count);
    for a in 0..count {
        let members: Vec<f64> = deltas.iter().zip(areas).filter(|p| *p.1 == a).map(|p| *p.0).collect();
        if members.is_empty() {
            return Err(PowerGridError::EmptyArea(a));
        }
        per_area.push(order_parameter(&members));
    }
    let gap = if count >= 2 { wrap_angle(per_area[1].arg() - per_area[0].arg()) } else { 0.0 };
    Ok(GroupOrder { per_area, gap })
}

/// δ uniform in ±0.1 rad around 0 under `seed`, δ̇ = 0.
pub fn initial_state(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed);
    let mut x = vec![0.0; 2 * n];
    for v in x.iter_mut().take(n) {
        *v = rng.uniform_range(-0.1, 0.1);
    }
    x
}

/// Channels `delta_i`, `ddelta_i`, `R`, `R_area_k` (magnitudes).
pub fn simulate(sys: &CcSystem, x0: &[f64], dt: f64, t_end: f64, record_every: usize) -> Result<TimeSeries, PowerGridError> {
    let n = sys.len();
    let areas = sys.coupling.area_count();
    let mut names: Vec<String> = (1..=n).map(|i| format!("delta_{i}")).collect();
    names.extend((1..=n).map(|i| format!("ddelta_{i}")));
    names.push("R".into());
    names.extend((1..=areas).map(|a| format!("R_area_{a}")));
    let steps = (t_end / dt).round() as usize;
    let stride = record_every.max(1);
    let mut ts = TimeSeries::with_capacity(&names, steps / stride + 2);
    ts.meta.insert("time_unit".into(), "s".into());
    let mut x = x0.to_vec();
    let mut w = Rk4Work::new(x.len());
    let mut row = vec![0.0; names.len()];
    let mut push = |t: f64, x: &[f64], ts: &mut TimeSeries| -> Result<(), PowerGridError> {
        row[..2 * n].copy_from_slice(x);
        row[2 * n] = order_parameter(&x[..n]).norm();
        let g = group_order_parameters(&x[..n], &sys.coupling.areas)?;
        for (a, r) in g.per_area.iter().enumerate() {
            row[2 * n + 1 + a] = r.norm();
        }
        ts.push(t, &row);
        Ok(())
    };
    push(0.0, &x, &mut ts)?;
    let mut f = |_t: f64, s: &[f64], d: &mut [f64]| cc_kuramoto_rhs(sys, s, d);
    for k in 0..steps {
        rk4_step(&mut f, k as f64 * dt, &mut x, dt, &mut w);
        if x.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            ts.diverged_at = Some((k + 1) as f64 * dt);
            return Err(PowerGridError::Divergence { t: (k + 1) as f64 * dt });
        }
        if (k + 1) % stride == 0 {
            push((k + 1) as f64 * dt, &x, &mut ts)?;
        }
    }
    Ok(ts)
}

fn deltas_at(ts: &TimeSeries, n: usize, k: usize) -> Vec<f64> {
    (1..=n).map(|i| ts.channel(&format!("delta_{i}")).expect("delta channel")[k]).collect()
}

/// Steady-window summary: circular means of gaps, time-averaged order parameters,
/// and the spread of mean frequencies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyPhases {
    /// Circular mean of wrap(arg R_area2 − arg R_area1).
    pub inter_gap: f64,
    /// Circular mean of wrap(δ_last − δ_first) within each area.
    pub intra_gap: Vec<f64>,
    pub r_global: f64,
    pub r_area: Vec<f64>,
    pub mean_freq: Vec<f64>,
    pub freq_spread: f64,
}

pub fn steady_phases(ts: &TimeSeries, areas: &[usize], tail_fraction: f64) -> Result<SteadyPhases, PowerGridError> {
    let n = areas.len();
    let len = ts.len();
    let start = len - ((len as f64 * tail_fraction).ceil() as usize).clamp(2, len);
    let count = areas.iter().max().map_or(0, |m| m + 1);
    let mut inter = Complex64::new(0.0, 0.0);
    let mut intra = vec![Complex64::new(0.0, 0.0); count];
    let mut r_global = 0.0;
    let mut r_area = vec![0.0; count];
    for k in start..len {
        let d = deltas_at(ts, n, k);
        let g = group_order_parameters(&d, areas)?;
        inter += Complex64::from_polar(1.0, g.gap);
        r_global += order_parameter(&d).norm();
        for a in 0..count {
            r_area[a] += g.per_area[a].norm();
            let idx: Vec<usize> = (0..n).filter(|&i| areas[i] == a).collect();
            let gap = d[*idx.last().unwrap()] - d[idx[0]];
            intra[a] += Complex64::from_polar(1.0, gap);
        }
    }
    let m = (len - start) as f64;
    let d0 = deltas_at(ts, n, start);
    let d1 = deltas_at(ts, n, len - 1);
    let span = ts.times[len - 1] - ts.times[start];
    let mean_freq: Vec<f64> = d0.iter().zip(&d1).map(|(a, b)| (b - a) / span).collect();
    let fmax = mean_freq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let fmin = mean_freq.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(SteadyPhases {
        inter_gap: inter.arg(),
        intra_gap: intra.iter().map(|z| z.arg()).collect(),
        r_global: r_global / m,
        r_area: r_area.iter().map(|r| r / m).collect(),
        mean_freq,
        freq_spread: fmax - fmin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    PhaseLocked,
    Chimera,
    Incoherent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorThresholds {
    pub freq_tol: f64,
    pub locked_r: f64,
    pub coherent_r: f64,
    pub incoherent_r: f64,
    pub tail_fraction: f64,
}

impl Default for DetectorThresholds {
    fn default() -> Self {
        Self { freq_tol: 1e-2, locked_r: 0.95, coherent_r: 0.9, incoherent_r: 0.5, tail_fraction: 0.2 }
    }
}

/// Phase-locked: mean-frequency spread below tolerance and every area coherent
/// (so an anti-phase π-state between coherent areas counts as locked).
/// Chimera: exactly one area above `coherent_r` and another below `incoherent_r`.
pub fn classify_regime(s: &SteadyPhases, th: &DetectorThresholds) -> Regime {
    if s.freq_spread < th.freq_tol && s.r_area.iter().all(|r| *r > th.locked_r) {
        return Regime::PhaseLocked;
    }
    let hi = s.r_area.iter().filter(|r| **r > th.coherent_r).count();
    let lo = s.r_area.iter().filter(|r| **r < th.incoherent_r).count();
    if hi == 1 && lo >= 1 {
        Regime::Chimera
    } else {
        Regime::Incoherent
    }
}

pub fn chimera_detect(ts: &TimeSeries, areas: &[usize], th: &DetectorThresholds) -> Result<(Regime, SteadyPhases), PowerGridError> {
    let s = steady_phases(ts, areas, th.tail_fraction)?;
    Ok((classify_regime(&s, th), s))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equilibrium {
    /// Angles with δ_1 = 0.
    pub theta: Vec<f64>,
    /// Common drift y = Σω / Σα of the co-rotating frame.
    pub drift: f64,
    pub residual: f64,
}

/// ω_i − α_i·y + Σ_j s_ij k_ij sin(θ_j − θ_i) for a common drift y.
pub fn equilibrium_residual(sys: &CcSystem, theta: &[f64], drift: f64) -> Vec<f64> {
    (0..sys.len())
        .map(|i| sys.omega[i] - sys.alpha[i] * drift + sys.coupling_term(theta, i))
        .collect()
}

/// Common drift of the co-rotating frame; equals 0 when Σω = 0.
pub fn common_drift(sys: &CcSystem) -> Result<f64, PowerGridError> {
    let sa: f64 = sys.alpha.iter().sum();
    if !(sa > 0.0) {
        return Err(PowerGridError::Invalid("equilibria need positive damping".into()));
    }
    Ok(sys.omega.iter().sum::<f64>() / sa)
}

/// Newton on the n − 1 free angles (θ_1 = 0) from each guess; converged roots
/// (residual < 1e−10) deduplicated modulo 2π.
///
/// Summing the balance equations cancels the symmetric coupling, so roots with drift
/// y = 0 exist only when Σω = 0, where they coincide with the common-drift family.
pub fn equilibrium_solve(sys: &CcSystem, guesses: &[Vec<f64>]) -> Result<Vec<Equilibrium>, PowerGridError> {
    let n = sys.len();
    let y = common_drift(sys)?;
    let mut out: Vec<Equilibrium> = Vec::new();
    for g in guesses {
        if g.len() != n {
            return Err(PowerGridError::Invalid("guess length mismatch".into()));
        }
        let mut th: Vec<f64> = g.iter().map(|v| v - g[0]).collect();
        let mut ok = false;
        for _ in 0..100 {
            let f = equilibrium_residual(sys, &th, y);
            let res = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if res < 1e-12 {
                ok = true;
                break;
            }
            let jm = jacobian(sys, &[th.clone(), vec![0.0; n]].concat());
            let sub = Matrix::from_fn(n - 1, n - 1, |r, c| jm[(n + 1 + r, 1 + c)]);
            let rhs = DVector::from_iterator(n - 1, f[1..].iter().copied());
            let Some(step) = sub.lu().solve(&rhs) else { break };
            for r in 0..n - 1 {
                th[1 + r] -= step[r];
            }
        }
        let res = equilibrium_residual(sys, &th, y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(ok || res < 1e-10) {
            continue;
        }
        let th: Vec<f64> = th.iter().map(|v| wrap_angle(*v)).collect();
        let dup = out.iter().any(|e| e.theta.iter().zip(&th).all(|(a, b)| wrap_angle(a - b).abs() < 1e-6));
        if !dup {
            out.push(Equilibrium { theta: th, drift: y, residual: res });
        }
    }
    Ok(out)
}

/// Guesses on a coarse grid of relative angles (in-phase / anti-phase combinations plus seeded random).
pub fn default_guesses(n: usize, seed: u64, random: usize) -> Vec<Vec<f64>> {
    let mut g = Vec::new();
    for mask in 0..(1usize << (n - 1)) {
        let mut v = vec![0.0; n];
        for i in 1..n {
            if mask & (1 << (i - 1)) != 0 {
                v[i] = PI;
            }
        }
        g.push(v);
    }
    let mut rng = RngStream::new(seed);
    for _ in 0..random {
        g.push((0..n).map(|_| rng.uniform_range(-PI, PI)).collect());
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub stability: Stability,
    pub max_real: f64,
    #[serde(skip)]
    pub eigenvalues: Vec<Complex64>,
}

pub fn eigenvalues(m: &Matrix) -> Vec<Complex64> {
    m.complex_eigenvalues().iter().map(|z| Complex64::new(z.re, z.im)).collect()
}

/// Sign of the leading real part (threshold ±1e−6) after dropping the single
/// eigenvalue nearest zero that comes from global rotation.
pub fn classify_eigenvalues(ev: &[Complex64]) -> Classification {
    let mut ev = ev.to_vec();
    if let Some(k) = ev
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
        .map(|p| p.0)
    {
        ev.remove(k);
    }
    let max_real = ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let stability = if max_real > 1e-6 {
        Stability::Unstable
    } else if max_real < -1e-6 {
        Stability::Stable
    } else {
        Stability::Marginal
    };
    Classification { stability, max_real, eigenvalues: ev }
}

pub fn classify_fixed_point(sys: &CcSystem, eq: &Equilibrium) -> Classification {
    let n = sys.len();
    let mut x = eq.theta.clone();
    x.extend(std::iter::repeat(eq.drift).take(n));
    classify_eigenvalues(&eigenvalues(&jacobian(sys, &x)))
}

/// Eigenvalues of [[0, 1], [−2·s·k·cos Φ, −α]] for the phase difference of two oscillators.
pub fn two_oscillator_eigs(sign: f64, k: f64, alpha: f64, phi: f64) -> [Complex64; 2] {
    let b = -2.0 * sign * k * phi.cos();
    // λ² + αλ − b = 0
    let disc = Complex64::new(alpha * alpha + 4.0 * b, 0.0).sqrt();
    [(-alpha + disc) / 2.0, (-alpha - disc) / 2.0]
}

/// δ̈ drive per generator: ω_i − α_i δ̇_i + Σ_j s_ij k_ij sin(δ_j − δ_i).
pub fn accel_power(sys: &CcSystem, delta: &[f64], ddelta: &[f64]) -> Vec<f64> {
    (0..sys.len())
        .map(|i| sys.omega[i] - sys.alpha[i] * ddelta[i] + sys.coupling_term(delta, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriveRoot {
    pub delta: f64,
    /// Sink when the drive falls through zero (stable), source when it rises.
    pub sink: bool,
}

/// Roots of a scalar power-angle drive on [lo, hi] by scan + bisection.
pub fn drive_roots<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, samples: usize) -> Vec<DriveRoot> {
    let mut out = Vec::new();
    let h = (hi - lo) / samples as f64;
    for k in 0..samples {
        let (mut a, mut b) = (lo + k as f64 * h, lo + (k + 1) as f64 * h);
        let (fa, fb) = (f(a), f(b));
        if fa == 0.0 {
            out.push(DriveRoot { delta: a, sink: f(a + 1e-9) < f(a - 1e-9) });
            continue;
        }
        if fa * fb >= 0.0 {
            continue;
        }
        let falling = fa > fb;
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if (f(m) > 0.0) == (fa > 0.0) {
                a = m;
            } else {
                b = m;
            }
        }
        out.push(DriveRoot { delta: 0.5 * (a + b), sink: falling });
    }
    out
}

/// Single machine against an infinite bus: drive P_m − P_max·sin δ on [0, π].
pub fn smib_roots(p_m: f64, p_max: f64) -> Vec<DriveRoot> {
    drive_roots(|d| p_m - p_max * d.sin(), 0.0, PI, 2000)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompassVector {
    pub generator: usize,
    pub area: usize,
    /// rms over the window of the pairwise differences δ_j − δ_i.
    pub magnitude: f64,
    /// Circular mean of δ_i − δ_1.
    pub angle: f64,
}

pub fn compass_vectors(ts: &TimeSeries, areas: &[usize], tail_fraction: f64) -> Vec<CompassVector> {
    let n = areas.len();
    let len = ts.len();
    let start = len - ((len as f64 * tail_fraction).ceil() as usize).clamp(1, len);
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    let mut sq = vec![0.0; n];
    for k in start..len {
        let d = deltas_at(ts, n, k);
        for i in 0..n {
            acc[i] += Complex64::from_polar(1.0, d[i] - d[0]);
            let mut s = 0.0;
            for j in 0..n {
                if j != i {
                    s += wrap_angle(d[j] - d[i]).powi(2);
                }
            }
            sq[i] += s / (n.max(2) - 1) as f64;
        }
    }
    let m = (len - start) as f64;
    (0..n)
        .map(|i| CompassVector {
            generator: i + 1,
            area: areas[i],
            magnitude: (sq[i] / m).sqrt(),
            angle: if acc[i].norm() < 1e-12 { 0.0 } else { acc[i].arg() },
        })
        .collect()
}

// ------------------------------------------------------------- full swing model

/// Pre-approximation swing model in the stationary frame, state `[θ, θ̇]`:
/// J θ̈ θ̇ + K_D θ̇² = P_source − P_transmitted, with P_transmitted = −Σ_j P_max,ij sin(θ_j − θ_i).
pub fn swing_full_rhs(gens: &[GeneratorParams], p_max: &Matrix, p_source: &[f64], x: &[f64], dx: &mut [f64]) {
    let n = gens.len();
    let (th, w) = x.split_at(n);
    for i in 0..n {
        let trans = -(0..n).filter(|&j| j != i).map(|j| p_max[(i, j)] * (th[j] - th[i]).sin()).sum::<f64>();
        dx[i] = w[i];
        dx[n + i] = (p_source[i] - trans - gens[i].k_d * w[i] * w[i]) / (gens[i].j * w[i]);
    }
}

/// Power-balance residual P_acc + P_diss − (P_source − P_trans) along a sampled trajectory,
/// with P_acc = ½ J d(θ̇²)/dt by central differences.
pub fn power_balance_residual(
    gens: &[GeneratorParams],
    p_max: &Matrix,
    p_source: &[f64],
    times: &[f64],
    states: &[Vec<f64>],
) -> f64 {
    let n = gens.len();
    let mut worst = 0.0f64;
    for k in 1..states.len().saturating_sub(1) {
        let (th, w) = states[k].split_at(n);
        for i in 0..n {
            let wp = states[k + 1][n + i];
            let wm = states[k - 1][n + i];
            let acc = 0.5 * gens[i].j * (wp * wp - wm * wm) / (times[k + 1] - times[k - 1]);
            let diss = gens[i].k_d * w[i] * w[i];
            let trans = -(0..n).filter(|&j| j != i).map(|j| p_max[(i, j)] * (th[j] - th[i]).sin()).sum::<f64>();
            worst = worst.max((acc + diss - (p_source[i] - trans)).abs());
        }
    }
    worst
}

// ----------------------------------------------------------------- sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Cross-area coupling magnitude (contrarian sign still applied).
    R1,
    /// Natural frequency of the last generator, rad/s.
    R2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    #[serde(default = "default_sweep_t")]
    pub t_end: f64,
    #[serde(default = "default_sweep_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub thresholds: Option<DetectorThresholds>,
}

fn default_sweep_t() -> f64 {
    300.0
}
fn default_sweep_dt() -> f64 {
    0.01
}

impl SweepSpec {
    pub fn range(param: SweepParam, lo: f64, hi: f64, step: f64) -> Self {
        let count = ((hi - lo) / step).round() as usize;
        let values = (0..=count).map(|k| lo + k as f64 * step).collect();
        Self { param, values, t_end: default_sweep_t(), dt: default_sweep_dt(), seed: 0, thresholds: None }
    }
}

/// Template system for a sweep value. r1: Case 1 couplings with every cross-area
/// magnitude replaced by r1 and all ω = 7 rad/s. r2: Case 1 couplings with ω = [7, 7, 7, r2].
pub fn sweep_system(param: SweepParam, value: f64) -> Result<CcSystem, PowerGridError> {
    let base = two_area_scenario(1)?;
    let mut k = base.coupling.k.clone();
    let areas = base.coupling.areas.clone();
    let omega = match param {
        SweepParam::R1 => {
            for i in 0..4 {
                for j in 0..4 {
                    if areas[i] != areas[j] {
                        k[(i, j)] = value;
                    }
                }
            }
            vec![7.0; 4]
        }
        SweepParam::R2 => vec![7.0, 7.0, 7.0, value],
    };
    // signed couplings may be negative in magnitude here; bypass the symmetric check only on sign
    let coupling = SignedCoupling { k, areas };
    CcSystem::new(omega, base.alpha.clone(), coupling)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub value: f64,
    pub regime: Regime,
    pub r_global: f64,
    pub r_area: Vec<f64>,
    pub freq_spread: f64,
    pub equilibria: usize,
    pub stable_equilibria: usize,
}

pub fn bifurcation_sweep(spec: &SweepSpec) -> Result<Vec<SweepRecord>, PowerGridError> {
    let th = spec.thresholds.unwrap_or_default();
    let master = RngStream::new(spec.seed);
    spec.values
        .par_iter()
        .enumerate()
        .map(|(idx, &v)| {
            let sys = sweep_system(spec.param, v)?;
            let seed = master.child_seed(idx as u64);
            let x0 = initial_state(sys.len(), seed);
            let ts = simulate(&sys, &x0, spec.dt, spec.t_end, 10)?;
            let (regime, s) = chimera_detect(&ts, &sys.coupling.areas, &th)?;
            let eqs = equilibrium_solve(&sys, &default_guesses(sys.len(), seed, 8))?;
            let stable = eqs
                .iter()
                .filter(|e| classify_fixed_point(&sys, e).stability == Stability::Stable)
                .count();
            Ok(SweepRecord {
                value: v,
                regime,
                r_global: s.r_global,
                r_area: s.r_area,
                freq_spread: s.freq_spread,
                equilibria: eqs.len(),
                stable_equilibria: stable,
            })
        })
        .collect()
}
