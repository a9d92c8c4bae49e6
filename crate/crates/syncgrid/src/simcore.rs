//! Fixed-step integration, seeded noise and trajectory capture.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// States with any component above this magnitude count as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// A discrete variable flipping on more consecutive steps than this is chattering.
pub const CHATTER_LIMIT: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("state diverged at t = {t}")]
    Divergence { t: f64 },
    #[error("discrete variable {index} chattering at t = {t} (dt too large or zero dead band)")]
    Chattering { t: f64, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, steps: usize) -> Result<Self, SimError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SimError::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if steps < 1 {
            return Err(SimError::InvalidGrid("steps must be at least 1".into()));
        }
        Ok(Self { t0, dt, steps })
    }

    /// Grid covering `[t0, t_end]` with the step count rounded to the nearest integer.
    pub fn span(t0: f64, t_end: f64, dt: f64) -> Result<Self, SimError> {
        let steps = ((t_end - t0) / dt).round();
        if !(steps >= 1.0) {
            return Err(SimError::InvalidGrid(format!("empty span [{t0}, {t_end}]")));
        }
        Self::new(t0, dt, steps as usize)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.steps)
    }
}

/// Uniformly sampled named channels sharing one time axis.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub names: Vec<String>,
    pub data: Vec<Vec<f64>>,
    pub meta: BTreeMap<String, String>,
    pub diverged_at: Option<f64>,
}

impl TimeSeries {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Self {
        Self {
            times: Vec::new(),
            names: names.iter().map(|s| s.as_ref().to_string()).collect(),
            data: vec![Vec::new(); names.len()],
            meta: BTreeMap::new(),
            diverged_at: None,
        }
    }

    pub fn with_capacity<S: AsRef<str>>(names: &[S], cap: usize) -> Self {
        let mut ts = Self::new(names);
        ts.times.reserve(cap);
        for c in &mut ts.data {
            c.reserve(cap);
        }
        ts
    }

    pub fn push(&mut self, t: f64, values: &[f64]) {
        assert_eq!(values.len(), self.names.len(), "sample width mismatch");
        self.times.push(t);
        for (c, v) in self.data.iter_mut().zip(values) {
            c.push(*v);
        }
    }

    /// Appends a derived channel; must match the current length.
    pub fn add_channel(&mut self, name: &str, values: Vec<f64>) {
        assert_eq!(values.len(), self.times.len(), "channel length mismatch");
        self.names.push(name.to_string());
        self.data.push(values);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.data[i].as_slice())
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.data.iter().map(|c| c[k]).collect()
    }

    pub fn last_row(&self) -> Option<Vec<f64>> {
        if self.is_empty() {
            None
        } else {
            Some(self.row(self.len() - 1))
        }
    }

    /// Keeps every `stride`-th sample (and always the last one).
    pub fn decimate(&self, stride: usize) -> TimeSeries {
        let stride = stride.max(1);
        let n = self.len();
        let keep: Vec<usize> = (0..n)
            .filter(|k| k % stride == 0 || *k + 1 == n)
            .collect();
        TimeSeries {
            times: keep.iter().map(|&k| self.times[k]).collect(),
            names: self.names.clone(),
            data: self
                .data
                .iter()
                .map(|c| keep.iter().map(|&k| c[k]).collect())
                .collect(),
            meta: self.meta.clone(),
            diverged_at: self.diverged_at,
        }
    }

    /// CSV with a `time,<channel>,...` header and 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * (self.names.len() + 1) * 24);
        out.push_str("time");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for k in 0..self.len() {
            out.push_str(&fmt_f64(self.times[k]));
            for c in &self.data {
                out.push(',');
                out.push_str(&fmt_f64(c[k]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    /// Parses the output of [`TimeSeries::to_csv`].
    pub fn from_csv(text: &str) -> Result<TimeSeries, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty csv")?;
        let mut cols = header.split(',');
        if cols.next() != Some("time") {
            return Err("first column must be time".into());
        }
        let names: Vec<&str> = cols.collect();
        let mut ts = TimeSeries::new(&names);
        for (ln, line) in lines.enumerate() {
            let vals: Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| format!("line {}: {e}", ln + 2))?;
            if vals.len() != names.len() + 1 {
                return Err(format!("line {}: wrong column count", ln + 2));
            }
            ts.push(vals[0], &vals[1..]);
        }
        Ok(ts)
    }
}

pub fn fmt_f64(v: f64) -> String {
    let mut s = String::new();
    if v.is_finite() {
        write!(s, "{v:.16e}").unwrap();
    } else {
        write!(s, "{v}").unwrap();
    }
    s
}

/// Seeded normal/uniform source. ChaCha8 keeps draws identical across platforms;
/// normals come from Box-Muller pairs.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream derived from this seed and a label index.
    pub fn derive(&self, stream: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            counter: 0,
            rng: r,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seed for an independent child run (sweep point, trial).
    pub fn child_seed(&self, stream: u64) -> u64 {
        self.derive(stream).rng.next_u64()
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * th.sin());
        r * th.cos()
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.standard_normal()
    }
}

/// Draw from N(mean, sigma). By default `sigma` is read as a variance, which is how
/// the microgrid disturbance N(0, 1e-4) is written; pass `false` for a standard deviation.
pub fn sample_gaussian(rng: &mut RngStream, mean: f64, sigma: f64, sigma_is_variance: bool) -> f64 {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    if sigma == 0.0 {
        return mean;
    }
    let sd = if sigma_is_variance { sigma.sqrt() } else { sigma };
    rng.normal(mean, sd)
}

/// Scratch buffers for [`rk4_step`], reused across steps.
#[derive(Debug, Clone)]
pub struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// One classical RK4 step in place. `f(t, x, dx)` writes the derivative.
pub fn rk4_step<F>(f: &mut F, t: f64, x: &mut [f64], dt: f64, w: &mut Rk4Work)
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = x.len();
    f(t, x, &mut w.k1);
    for i in 0..n {
        w.tmp[i] = x[i] + 0.5 * dt * w.k1[i];
    }
    f(t + 0.5 * dt, &w.tmp, &mut w.k2);
    for i in 0..n {
        w.tmp[i] = x[i] + 0.5 * dt * w.k2[i];
    }
    f(t + 0.5 * dt, &w.tmp, &mut w.k3);
    for i in 0..n {
        w.tmp[i] = x[i] + dt * w.k3[i];
    }
    f(t + dt, &w.tmp, &mut w.k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
    }
}

fn diverged(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

/// Integrates `rhs` over `grid`, recording the state at every grid point.
/// Divergence stops the run and sets `diverged_at`.
pub fn integrate_rk4<F, S>(mut rhs: F, state0: &[f64], grid: &TimeGrid, names: &[S]) -> TimeSeries
where
    F: FnMut(f64, &[f64], &mut [f64]),
    S: AsRef<str>,
{
    assert_eq!(names.len(), state0.len(), "one channel name per state component");
    let mut ts = TimeSeries::with_capacity(names, grid.steps + 1);
    let mut x = state0.to_vec();
    let mut w = Rk4Work::new(x.len());
    ts.push(grid.t0, &x);
    for k in 0..grid.steps {
        let t = grid.time(k);
        rk4_step(&mut rhs, t, &mut x, grid.dt, &mut w);
        if diverged(&x) {
            ts.diverged_at = Some(grid.time(k + 1));
            break;
        }
        ts.push(grid.time(k + 1), &x);
    }
    ts
}

/// Tracks consecutive-step flips of each discrete variable.
#[derive(Debug, Clone)]
pub struct ChatterGuard {
    runs: Vec<usize>,
}

impl ChatterGuard {
    pub fn new(n: usize) -> Self {
        Self { runs: vec![0; n] }
    }

    /// Records whether variable `i` flipped on this step; errors past the limit.
    pub fn record(&mut self, i: usize, flipped: bool, t: f64) -> Result<(), SimError> {
        if flipped {
            self.runs[i] += 1;
            if self.runs[i] > CHATTER_LIMIT {
                return Err(SimError::Chattering { t, index: i });
            }
        } else {
            self.runs[i] = 0;
        }
        Ok(())
    }
}

/// RK4 on the continuous part with discrete variables frozen inside each step,
/// then `update(x, d)` applied to the post-step state. Channels are the continuous
/// states followed by the discrete ones.
pub fn step_hybrid<F, U>(
    mut rhs: F,
    mut update: U,
    x0: &[f64],
    d0: &[u8],
    grid: &TimeGrid,
    names: &[String],
) -> Result<TimeSeries, SimError>
where
    F: FnMut(f64, &[f64], &[u8], &mut [f64]),
    U: FnMut(&[f64], &mut [u8]),
{
    assert_eq!(names.len(), x0.len() + d0.len());
    let mut ts = TimeSeries::with_capacity(names, grid.steps + 1);
    let mut x = x0.to_vec();
    let mut d = d0.to_vec();
    let mut w = Rk4Work::new(x.len());
    let mut guard = ChatterGuard::new(d.len());
    let mut row = vec![0.0; names.len()];
    let fill = |row: &mut Vec<f64>, x: &[f64], d: &[u8]| {
        row[..x.len()].copy_from_slice(x);
        for (r, v) in row[x.len()..].iter_mut().zip(d) {
            *r = *v as f64;
        }
    };
    fill(&mut row, &x, &d);
    ts.push(grid.t0, &row);
    for k in 0..grid.steps {
        let t = grid.time(k);
        {
            let dd = d.clone();
            let mut f = |t: f64, x: &[f64], dx: &mut [f64]| rhs(t, x, &dd, dx);
            rk4_step(&mut f, t, &mut x, grid.dt, &mut w);
        }
        let t1 = grid.time(k + 1);
        if diverged(&x) {
            ts.diverged_at = Some(t1);
            return Err(SimError::Divergence { t: t1 });
        }
        let before = d.clone();
        update(&x, &mut d);
        for i in 0..d.len() {
            guard.record(i, before[i] != d[i], t1)?;
        }
        fill(&mut row, &x, &d);
        ts.push(t1, &row);
    }
    Ok(ts)
}

/// Time after which `values` stay within `band` of `target` through the last sample.
/// `None` when the final sample is outside the band.
pub fn settling_time(times: &[f64], values: &[f64], target: f64, band: f64) -> Option<f64> {
    assert!(band > 0.0, "band must be positive");
    assert_eq!(times.len(), values.len());
    let n = values.len();
    if n == 0 {
        return None;
    }
    let outside = |v: f64| !((v - target).abs() <= band);
    match (0..n).rev().find(|&k| outside(values[k])) {
        None => Some(times[0]),
        Some(k) if k + 1 == n => None,
        Some(k) => Some(times[k + 1]),
    }
}

/// Settling on a named channel of a series.
pub fn settling_time_channel(ts: &TimeSeries, channel: &str, target: f64, band: f64) -> Option<f64> {
    let v = ts.channel(channel)?;
    settling_time(&ts.times, v, target, band)
}
