//! Paths on a uniform time grid, stopped paths, the pseudometric on `[0,T] x C([0,T];R^d)`,
//! Brownian extensions and an Euler driver for continuous semimartingales.
//!
//! Paths are piecewise linear between grid nodes, so sup-norms are maxima over nodes.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Domain("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    /// Index of the grid node nearest to `t`.
    pub fn snap(&self, t: f64) -> Result<usize> {
        let tol = 1e-12 * self.horizon;
        if !t.is_finite() || t < -tol || t > self.horizon + tol {
            return Err(Error::Domain(format!("time {t} outside [0, {}]", self.horizon)));
        }
        let k = (t / self.dt()).round() as i64;
        Ok(k.clamp(0, self.steps as i64) as usize)
    }

    /// Index of the node equal to `t` (within `1e-9·T`); off-grid times are a domain error.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = self.snap(t)?;
        if (self.node(k) - t).abs() > 1e-9 * self.horizon {
            return Err(Error::Domain(format!("time {t} is not a grid node")));
        }
        Ok(k)
    }

    /// Cell containing `t` (clamped to `[0,T]`) and the position inside it in `[0,1]`.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let t = t.clamp(0.0, self.horizon);
        let u = t / self.dt();
        let k = (u.floor() as usize).min(self.steps - 1);
        (k, (u - k as f64).clamp(0.0, 1.0))
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && (self.horizon - other.horizon).abs() <= 1e-12 * self.horizon
    }
}

/// Path sampled at the `M+1` nodes of a grid, values stored node-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl GridPath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("dimension must be positive".into()));
        }
        if values.len() != (grid.steps() + 1) * dim {
            return Err(Error::Domain(format!(
                "expected {} values, got {}",
                (grid.steps() + 1) * dim,
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let mut values = Vec::with_capacity((grid.steps() + 1) * dim);
        for k in 0..=grid.steps() {
            let v = f(grid.node(k));
            assert_eq!(v.len(), dim, "closure returned wrong dimension");
            values.extend_from_slice(&v);
        }
        Self { grid, dim, values }
    }

    pub fn from_fn_1d(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..=grid.steps()).map(|k| f(grid.node(k))).collect();
        Self { grid, dim: 1, values }
    }

    pub fn constant(grid: TimeGrid, c: &[f64]) -> Self {
        let mut values = Vec::with_capacity((grid.steps() + 1) * c.len());
        for _ in 0..=grid.steps() {
            values.extend_from_slice(c);
        }
        Self { grid, dim: c.len(), values }
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self { grid, dim, values: vec![0.0; (grid.steps() + 1) * dim] }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.grid.steps())
    }

    /// Scalar series of coordinate `i`.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.values.iter().skip(i).step_by(self.dim).copied().collect()
    }

    /// Linear interpolation at an arbitrary time (clamped to `[0,T]`).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        if let Ok(k) = self.grid.index_of(t) {
            out[..self.dim].copy_from_slice(self.at(k));
            return;
        }
        let (k, w) = self.grid.locate(t);
        let a = self.at(k);
        let b = self.at(k + 1);
        for i in 0..self.dim {
            out[i] = a[i] + w * (b[i] - a[i]);
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    /// `x(t ∧ s)` with the stopping time given as a real number.
    pub fn eval_stopped(&self, t_stop: f64, s: f64) -> Vec<f64> {
        self.eval(s.min(t_stop))
    }

    pub fn sup_norm(&self) -> f64 {
        (0..=self.grid.steps()).map(|k| norm(self.at(k))).fold(0.0, f64::max)
    }

    pub fn sub(&self, other: &GridPath) -> Result<GridPath> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(GridPath { grid: self.grid, dim: self.dim, values })
    }

    pub fn check_compatible(&self, other: &GridPath) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::Domain(format!("dimension mismatch {} vs {}", self.dim, other.dim)));
        }
        if !self.grid.same_as(&other.grid) {
            return Err(Error::Domain("paths live on different grids".into()));
        }
        Ok(())
    }

    /// Path frozen after node `k`.
    pub fn stopped_at_node(&self, k: usize) -> GridPath {
        let mut out = self.clone();
        let frozen = self.at(k).to_vec();
        for j in k + 1..=self.grid.steps() {
            out.at_mut(j).copy_from_slice(&frozen);
        }
        out
    }

    /// Write as CSV with header `t,x1,...,xd`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        wr.write_record(&header).map_err(io_err)?;
        for k in 0..=self.grid.steps() {
            let mut row = vec![format!("{:.16e}", self.grid.node(k))];
            row.extend(self.at(k).iter().map(|v| format!("{v:.16e}")));
            wr.write_record(&row).map_err(io_err)?;
        }
        wr.flush().map_err(|e| Error::Input(e.to_string()))?;
        Ok(())
    }

    /// Read the CSV written by [`GridPath::write_csv`]; the time column must be a uniform grid from 0.
    pub fn read_csv<R: Read>(r: R) -> Result<GridPath> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(io_err)?.clone();
        if header.len() < 2 || &header[0] != "t" {
            return Err(Error::Input("path CSV header must be t,x1,...,xd".into()));
        }
        let dim = header.len() - 1;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(io_err)?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::Input(format!("bad number {s:?}: {e}")))
            };
            times.push(parse(&rec[0])?);
            for i in 1..=dim {
                values.push(parse(&rec[i])?);
            }
        }
        if times.len() < 2 {
            return Err(Error::Input("path CSV needs at least two rows".into()));
        }
        let steps = times.len() - 1;
        let grid = TimeGrid::new(times[steps], steps)?;
        for (k, t) in times.iter().enumerate() {
            if (t - grid.node(k)).abs() > 1e-9 * grid.horizon().max(1.0) {
                return Err(Error::Input(format!("row {k}: time {t} is not on a uniform grid")));
            }
        }
        GridPath::new(grid, dim, values)
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::Input(e.to_string())
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `x(·∧t)` with `t` snapped to the nearest node.
pub fn stop_path(x: &GridPath, t: f64) -> Result<GridPath> {
    let k = x.grid().snap(t)?;
    Ok(x.stopped_at_node(k))
}

/// Element `(t, x)` of the path space with `t` on the grid.
///
/// The path is shared so that search spaces and anchor lists stay cheap to clone.
#[derive(Clone, Debug)]
pub struct PathPoint {
    k: usize,
    path: Arc<GridPath>,
}

impl PathPoint {
    pub fn new(t: f64, path: GridPath) -> Result<Self> {
        let k = path.grid().snap(t)?;
        Ok(Self { k, path: Arc::new(path) })
    }

    pub fn at_node(k: usize, path: Arc<GridPath>) -> Result<Self> {
        if k > path.grid().steps() {
            return Err(Error::Domain(format!("node {k} beyond grid")));
        }
        Ok(Self { k, path })
    }

    pub fn node(&self) -> usize {
        self.k
    }

    pub fn t(&self) -> f64 {
        self.path.grid().node(self.k)
    }

    pub fn path(&self) -> &GridPath {
        &self.path
    }

    pub fn shared_path(&self) -> Arc<GridPath> {
        self.path.clone()
    }

    pub fn present(&self) -> &[f64] {
        self.path.at(self.k)
    }

    /// Same point with the representative replaced by its stopped version.
    pub fn stopped(&self) -> PathPoint {
        PathPoint { k: self.k, path: Arc::new(self.path.stopped_at_node(self.k)) }
    }
}

/// `sup_s |x(s∧t) − x'(s∧t')|` for node times `kx`, `ky`.
pub fn stopped_sup_distance(x: &GridPath, kx: usize, y: &GridPath, ky: usize) -> f64 {
    let mut best = 0.0f64;
    let mut diff = vec![0.0; x.dim()];
    for j in 0..=x.grid().steps() {
        let a = x.at(j.min(kx));
        let b = y.at(j.min(ky));
        for i in 0..x.dim() {
            diff[i] = a[i] - b[i];
        }
        best = best.max(norm(&diff));
    }
    best
}

/// `|t − t'| + ‖x(·∧t) − x'(·∧t')‖∞`.
pub fn d_infty(p: &PathPoint, q: &PathPoint) -> Result<f64> {
    p.path().check_compatible(q.path())?;
    Ok((p.t() - q.t()).abs() + stopped_sup_distance(p.path(), p.k, q.path(), q.k))
}

/// Standard Brownian increments on every cell of a grid; the noise that drives extensions.
#[derive(Clone, Debug)]
pub struct BrownianDriver {
    dim: usize,
    increments: Vec<f64>,
}

impl BrownianDriver {
    pub fn sample<R: Rng>(grid: &TimeGrid, dim: usize, rng: &mut R) -> Self {
        let sd = grid.dt().sqrt();
        let increments = (0..grid.steps() * dim)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { dim, increments }
    }

    pub fn increment(&self, cell: usize) -> &[f64] {
        &self.increments[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn negated(&self) -> Self {
        Self { dim: self.dim, increments: self.increments.iter().map(|v| -v).collect() }
    }

    /// `x(·∧t) + W_{·∨t} − W_t` for `t` at node `k`.
    pub fn extend(&self, k: usize, x: &GridPath) -> GridPath {
        assert_eq!(self.dim, x.dim(), "driver dimension mismatch");
        let mut out = x.clone();
        for j in k..x.grid().steps() {
            let inc = self.increment(j);
            for i in 0..self.dim {
                let v = out.at(j)[i] + inc[i];
                out.at_mut(j + 1)[i] = v;
            }
        }
        out
    }
}

/// Fill `out` (a copy of `x`) with one draw of the Brownian extension after node `k`.
pub fn extend_in_place<R: Rng>(k: usize, out: &mut GridPath, rng: &mut R, sign: f64) {
    let sd = out.grid().dt().sqrt();
    let d = out.dim();
    for j in k..out.grid().steps() {
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            out.values[(j + 1) * d + i] = out.values[j * d + i] + sign * sd * z;
        }
    }
}

/// One sample of `W^{t,x}` using the given generator.
pub fn brownian_extension_rng<R: Rng>(t: f64, x: &GridPath, rng: &mut R) -> Result<GridPath> {
    let k = x.grid().snap(t)?;
    let mut out = x.stopped_at_node(k);
    extend_in_place(k, &mut out, rng, 1.0);
    Ok(out)
}

/// One sample of `W^{t,x}` from stream 0 of `seed`.
pub fn brownian_extension(t: f64, x: &GridPath, seed: u64) -> Result<GridPath> {
    brownian_extension_rng(t, x, &mut stream_rng(seed, 0))
}

pub type DriftFn = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;
/// Row-major `d x d` volatility matrix.
pub type VolFn = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;

/// `dX = b(t,X)dt + σ(t,X)dW`, `X_0 = x0`.
#[derive(Clone)]
pub struct SemimartingaleSpec {
    pub drift: Arc<DriftFn>,
    pub volatility: Arc<VolFn>,
    pub initial: Vec<f64>,
}

impl std::fmt::Debug for SemimartingaleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemimartingaleSpec").field("initial", &self.initial).finish()
    }
}

impl SemimartingaleSpec {
    pub fn new(
        drift: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
        volatility: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
        initial: Vec<f64>,
    ) -> Self {
        Self { drift: Arc::new(drift), volatility: Arc::new(volatility), initial }
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    /// Standard Brownian motion started at `x0`.
    pub fn brownian(x0: Vec<f64>) -> Self {
        let d = x0.len();
        Self::new(move |_, _| vec![0.0; d], move |_, _| identity(d, 1.0), x0)
    }

    /// Constant drift `mu` and constant scalar volatility `s`.
    pub fn drifted(mu: Vec<f64>, s: f64, x0: Vec<f64>) -> Self {
        let d = x0.len();
        Self::new(move |_, _| mu.clone(), move |_, _| identity(d, s), x0)
    }

    /// Mean-reverting `dX = -θ X dt + s (1 + 0.5 sin X) dW` per coordinate.
    pub fn state_dependent(theta: f64, s: f64, x0: Vec<f64>) -> Self {
        let d = x0.len();
        Self::new(
            move |_, x| x.iter().map(|v| -theta * v).collect(),
            move |_, x| {
                let mut m = vec![0.0; d * d];
                for i in 0..d {
                    m[i * d + i] = s * (1.0 + 0.5 * x[i].sin());
                }
                m
            },
            x0,
        )
    }
}

fn identity(d: usize, s: f64) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = s;
    }
    m
}

/// Euler–Maruyama sample driven by `rng`.
pub fn simulate_semimartingale_rng<R: Rng>(
    spec: &SemimartingaleSpec,
    grid: TimeGrid,
    rng: &mut R,
) -> Result<GridPath> {
    let d = spec.dim();
    if d == 0 {
        return Err(Error::Domain("empty initial state".into()));
    }
    let dt = grid.dt();
    let sd = dt.sqrt();
    let mut values = Vec::with_capacity((grid.steps() + 1) * d);
    values.extend_from_slice(&spec.initial);
    let mut dw = vec![0.0; d];
    for k in 0..grid.steps() {
        let t = grid.node(k);
        let x = values[k * d..(k + 1) * d].to_vec();
        let b = (spec.drift)(t, &x);
        let s = (spec.volatility)(t, &x);
        if b.len() != d || s.len() != d * d {
            return Err(Error::Contract("drift/volatility returned wrong shape".into()));
        }
        if b.iter().chain(&s).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite coefficient at step {k}")));
        }
        for w in dw.iter_mut() {
            *w = sd * rng.sample::<f64, _>(StandardNormal);
        }
        for i in 0..d {
            let mut v = x[i] + b[i] * dt;
            for j in 0..d {
                v += s[i * d + j] * dw[j];
            }
            values.push(v);
        }
    }
    GridPath::new(grid, d, values)
}

pub fn simulate_semimartingale(spec: &SemimartingaleSpec, grid: TimeGrid, seed: u64) -> Result<GridPath> {
    simulate_semimartingale_rng(spec, grid, &mut stream_rng(seed, 0))
}

/// Paired path sampler used by `stream`-indexed ensembles.
pub fn simulate_stream(spec: &SemimartingaleSpec, grid: TimeGrid, master: u64, index: u64) -> Result<GridPath> {
    let mut rng: StreamRng = stream_rng(master, index);
    simulate_semimartingale_rng(spec, grid, &mut rng)
}
