//! Smooth perturbed maximization on a finite subset of the path space.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauge::{phi_h_bound, phi_hat, rho_infty, GaugeQuad, PhiLift, PhiValue, PHI_V1_BOUND, PHI_V2_BOUND};
use crate::path::{d_infty, PathPoint, TimeGrid};

/// Hard cap on perturbation rounds.
pub const MAX_ITERATIONS: usize = 1000;

/// Finite set of path points on one grid, with `d∞`-duplicates removed (first occurrence kept).
#[derive(Clone, Debug)]
pub struct SearchSpace {
    points: Vec<PathPoint>,
}

impl SearchSpace {
    pub fn new(points: Vec<PathPoint>) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::Input("search space is empty".into()))?;
        let grid = *first.path().grid();
        let dim = first.path().dim();
        let mut kept: Vec<PathPoint> = Vec::with_capacity(points.len());
        for p in points {
            if !p.path().grid().same_as(&grid) || p.path().dim() != dim {
                return Err(Error::Input("search space points must share grid and dimension".into()));
            }
            let mut dup = false;
            for q in &kept {
                if d_infty(&p, q)? == 0.0 {
                    dup = true;
                    break;
                }
            }
            if !dup {
                kept.push(p);
            }
        }
        Ok(Self { points: kept })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[PathPoint] {
        &self.points
    }

    pub fn get(&self, i: usize) -> &PathPoint {
        &self.points[i]
    }

    pub fn grid(&self) -> &TimeGrid {
        self.points[0].path().grid()
    }

    pub fn dim(&self) -> usize {
        self.points[0].path().dim()
    }

    /// Index of a point at `d∞`-distance zero from `p`.
    pub fn find(&self, p: &PathPoint) -> Option<usize> {
        self.points.iter().position(|q| d_infty(p, q).map(|d| d == 0.0).unwrap_or(false))
    }

    /// `ρ∞(p, anchor)` for every `p` in the space, in index order.
    pub fn rho_to(&self, anchor: &PathPoint, quad: &GaugeQuad) -> Result<Vec<f64>> {
        self.points.par_iter().map(|p| rho_infty(p, anchor, quad).map(|g| g.value)).collect()
    }
}

/// Item i) for one anchor, in both argument orders of `ρ∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemI {
    pub n: usize,
    pub bound: f64,
    /// `ρ∞(p̄, p_n)`: limit point against anchor `p_n`.
    pub forward: f64,
    /// `ρ∞(p_n, p̄)`.
    pub reverse: f64,
}

impl ItemI {
    pub fn forward_holds(&self) -> bool {
        self.forward <= self.bound
    }
    pub fn reverse_holds(&self) -> bool {
        self.reverse <= self.bound
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemII {
    pub g_start: f64,
    /// `G(p̄) − δφ_ε(p̄)`.
    pub perturbed_limit: f64,
}

impl ItemII {
    pub fn holds(&self) -> bool {
        self.g_start <= self.perturbed_limit
    }
}

/// Item iii): `min_{p≠p̄} [(G − δφ)(p̄) − (G − δφ)(p)]` over the space.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemIII {
    pub margin: f64,
    pub runner_up: Option<usize>,
}

impl ItemIII {
    pub fn holds(&self) -> bool {
        self.margin > 0.0
    }
}

#[derive(Clone, Debug)]
pub struct VPResult {
    pub eps: f64,
    pub delta: f64,
    /// `p_0, …, p_K`; `p_n = p_K` for every `n ≥ K`.
    pub anchors: Vec<PathPoint>,
    /// Space index of each anchor (`None` only for a start point outside the space).
    pub anchor_indices: Vec<Option<usize>>,
    pub limit_index: usize,
    pub iterations: usize,
    /// `max_p G_k(p)` for each round `k`; nonincreasing.
    pub envelope: Vec<f64>,
    pub item_i: Vec<ItemI>,
    pub item_ii: ItemII,
    pub item_iii: ItemIII,
    /// `φ_ε` at the limit with derivatives.
    pub phi_at_limit: PhiValue,
}

impl VPResult {
    pub fn limit(&self) -> &PathPoint {
        self.anchors.last().unwrap()
    }

    /// Exact `φ_ε`: the repeated tail of the anchor sequence is summed in closed form.
    pub fn phi(&self, p: &PathPoint, quad: &GaugeQuad) -> Result<PhiValue> {
        phi_hat(&self.anchors, p.t(), p.path(), p.present(), quad, true)
    }

    pub fn phi_lift(&self, quad: Arc<GaugeQuad>) -> PhiLift {
        PhiLift { anchors: self.anchors.clone(), quad, repeat_last: true }
    }

    pub fn item_i_holds(&self) -> bool {
        self.item_i.iter().all(ItemI::forward_holds)
    }

    /// `φ_ε` derivative bounds at the limit point, with additive tolerance `tol`.
    pub fn phi_bounds_hold(&self, tol: f64) -> bool {
        let d = &self.phi_at_limit.derivs;
        let horizon = self.limit().path().grid().horizon();
        let slack = tol + self.phi_at_limit.error;
        d.horizontal.abs() <= phi_h_bound(horizon) + slack
            && d.vertical.iter().all(|v| v.abs() <= PHI_V1_BOUND + slack)
            && d.vertical2.iter().all(|v| v.abs() <= PHI_V2_BOUND + slack)
    }

    pub fn all_hold(&self) -> bool {
        self.item_i_holds() && self.item_ii.holds() && self.item_iii.holds()
    }
}

/// Perturbed maximization `G_k = G − δ Σ_{n≤k} 2^{−n} ρ∞(·, p_n)` with exact argmax on the space
/// (ties to the lowest index), stopped when the maximizer repeats.
pub fn smooth_vp(
    g: &(dyn Fn(&PathPoint) -> f64 + Sync),
    eps: f64,
    delta: f64,
    p0: &PathPoint,
    space: &SearchSpace,
    quad: &GaugeQuad,
) -> Result<VPResult> {
    if !(eps > 0.0 && delta > 0.0) {
        return Err(Error::Input(format!("ε and δ must be positive, got {eps}, {delta}")));
    }
    let values: Vec<f64> = space.points().par_iter().map(|p| g(p)).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("G is not finite at space point {i}")));
    }
    let g0 = g(p0);
    let sup = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if g0 < sup - eps {
        return Err(Error::Input(format!("start value {g0} below sup {sup} − ε")));
    }
    let mut anchors = vec![p0.clone()];
    let mut indices = vec![space.find(p0)];
    let mut perturbed = values.clone();
    let mut envelope = Vec::new();
    let mut k = 0usize;
    let limit_index = loop {
        let rho = space.rho_to(&anchors[k], quad)?;
        let w = delta * 0.5f64.powi(k as i32);
        for (v, r) in perturbed.iter_mut().zip(&rho) {
            *v -= w * r;
        }
        let mut best = 0;
        for i in 1..perturbed.len() {
            if perturbed[i] > perturbed[best] {
                best = i;
            }
        }
        envelope.push(perturbed[best]);
        if indices[k] == Some(best) {
            break best;
        }
        if k + 1 >= MAX_ITERATIONS {
            return Err(Error::Convergence(format!("no fixed point after {MAX_ITERATIONS} rounds")));
        }
        anchors.push(space.get(best).clone());
        indices.push(Some(best));
        k += 1;
    };
    let limit = space.get(limit_index).clone();
    let item_i = anchors
        .iter()
        .enumerate()
        .map(|(n, a)| {
            Ok(ItemI {
                n,
                bound: eps / (2f64.powi(n as i32) * delta),
                forward: rho_infty(&limit, a, quad)?.value,
                reverse: rho_infty(a, &limit, quad)?.value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let phis: Vec<f64> = space
        .points()
        .par_iter()
        .map(|p| phi_hat(&anchors, p.t(), p.path(), p.present(), quad, true).map(|v| v.value))
        .collect::<Result<_>>()?;
    let target = values[limit_index] - delta * phis[limit_index];
    let mut item_iii = ItemIII { margin: f64::INFINITY, runner_up: None };
    for (i, (v, f)) in values.iter().zip(&phis).enumerate() {
        if i == limit_index {
            continue;
        }
        let m = target - (v - delta * f);
        if m < item_iii.margin {
            item_iii = ItemIII { margin: m, runner_up: Some(i) };
        }
    }
    let phi_at_limit = phi_hat(&anchors, limit.t(), limit.path(), limit.present(), quad, true)?;
    Ok(VPResult {
        eps,
        delta,
        iterations: anchors.len() - 1,
        anchors,
        anchor_indices: indices,
        limit_index,
        envelope,
        item_i,
        item_ii: ItemII { g_start: g0, perturbed_limit: target },
        item_iii,
        phi_at_limit,
    })
}

/// One row of the gauge-axiom table.
#[derive(Clone, Debug, PartialEq)]
pub struct AxiomRow {
    pub eps: f64,
    /// `inf{ρ∞(p,q) : d∞(p,q) ≥ ε}`; any smaller positive η works. `+∞` when no pair is that far apart.
    pub eta: f64,
    pub far_pairs: usize,
}

impl AxiomRow {
    pub fn holds(&self) -> bool {
        self.eta > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AxiomReport {
    pub rows: Vec<AxiomRow>,
    /// Largest `|ρ∞(p,p)|` over the space.
    pub diagonal_max: f64,
}

impl AxiomReport {
    pub fn holds(&self, diagonal_tol: f64) -> bool {
        self.diagonal_max <= diagonal_tol && self.rows.iter().all(AxiomRow::holds)
    }
}

/// Exhaustive ordered-pair scan: for each `ε`, the threshold `η` below which `ρ∞` forces `d∞ < ε`.
pub fn verify_gauge_axioms(space: &SearchSpace, quad: &GaugeQuad, eps_grid: &[f64]) -> Result<AxiomReport> {
    let n = space.len();
    let pairs: Vec<(f64, f64, bool)> = (0..n * n)
        .into_par_iter()
        .map(|ij| {
            let (p, q) = (space.get(ij / n), space.get(ij % n));
            Ok((rho_infty(p, q, quad)?.value, d_infty(p, q)?, ij / n == ij % n))
        })
        .collect::<Result<_>>()?;
    let diagonal_max = pairs.iter().filter(|x| x.2).map(|x| x.0.abs()).fold(0.0, f64::max);
    let rows = eps_grid
        .iter()
        .map(|&eps| {
            let far: Vec<f64> = pairs.iter().filter(|x| x.1 >= eps).map(|x| x.0).collect();
            AxiomRow { eps, eta: far.iter().cloned().fold(f64::INFINITY, f64::min), far_pairs: far.len() }
        })
        .collect();
    Ok(AxiomReport { rows, diagonal_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauge::QuadratureConfig;
    use crate::path::{brownian_extension, GridPath};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn quad() -> GaugeQuad {
        GaugeQuad::new(1, QuadratureConfig::default()).unwrap()
    }

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 20).unwrap()
    }

    fn brownian_space(count: usize, seed: u64) -> SearchSpace {
        let mut rng = stream_rng(seed, 0);
        let pts = (0..count)
            .map(|i| {
                let x = brownian_extension(0.0, &GridPath::zeros(grid(), 1), seed * 1000 + i as u64).unwrap();
                PathPoint::at_node(rng.random_range(0..=20), Arc::new(x)).unwrap()
            })
            .collect();
        SearchSpace::new(pts).unwrap()
    }

    #[test]
    fn dedupes_equal_stopped_paths() {
        let a = Arc::new(GridPath::from_fn_1d(grid(), |t| t));
        let b = Arc::new(GridPath::from_fn_1d(grid(), |t| t.min(0.5)));
        let s = SearchSpace::new(vec![
            PathPoint::at_node(10, a.clone()).unwrap(),
            PathPoint::at_node(10, b).unwrap(),
            PathPoint::at_node(11, a).unwrap(),
        ])
        .unwrap();
        assert_eq!(s.len(), 2);
        assert!(SearchSpace::new(vec![]).is_err());
    }

    #[test]
    fn constant_objective_stops_at_start() {
        let q = quad();
        let s = brownian_space(12, 1);
        let r = smooth_vp(&|_| 1.0, 0.1, 0.5, s.get(3), &s, &q).unwrap();
        assert_eq!(r.limit_index, 3);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.phi_at_limit.value, 0.0);
        assert!(r.all_hold());
    }

    #[test]
    fn start_below_sup_is_rejected() {
        let q = quad();
        let s = brownian_space(5, 2);
        let g = |p: &PathPoint| p.t();
        let low = s.points().iter().position(|p| p.t() < 0.5).unwrap();
        assert!(matches!(smooth_vp(&g, 1e-3, 0.1, s.get(low), &s, &q), Err(Error::Input(_))));
    }

    #[test]
    fn perturbation_dominates_small_gain() {
        let q = quad();
        let p0 = PathPoint::at_node(10, Arc::new(GridPath::zeros(grid(), 1))).unwrap();
        let p1 = PathPoint::at_node(10, Arc::new(GridPath::from_fn_1d(grid(), |t| t))).unwrap();
        let s = SearchSpace::new(vec![p0.clone(), p1.clone()]).unwrap();
        let delta = 0.5;
        let r01 = rho_infty(&p1, &p0, &q).unwrap().value;
        let gain = 0.5 * delta * r01;
        let g = move |p: &PathPoint| if p.present()[0] > 0.0 { gain } else { 0.0 };
        let r = smooth_vp(&g, 1.0, delta, &p0, &s, &q).unwrap();
        assert_eq!(r.limit_index, 0);
        assert!(r.all_hold());
    }

    #[test]
    fn unique_maximizer_items_hold() {
        let q = quad();
        let s = brownian_space(40, 3);
        let g = |p: &PathPoint| -(p.present()[0] - 0.3).powi(2) - 0.1 * (p.t() - 0.6).powi(2);
        let vals: Vec<f64> = s.points().iter().map(g).collect();
        let sup = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let eps = 0.05;
        let start = vals.iter().position(|v| *v >= sup - eps).unwrap();
        let r = smooth_vp(&g, eps, 0.05, s.get(start), &s, &q).unwrap();
        assert!(r.all_hold(), "{r:?}");
        assert!(r.item_i[0].forward <= eps / 0.05);
        assert!(r.envelope.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.phi_bounds_hold(1e-6));
        let phi = r.phi(r.limit(), &q).unwrap();
        assert_eq!(phi.value, r.phi_at_limit.value);
    }

    #[test]
    fn lattice_of_constants_has_positive_thresholds() {
        let q = quad();
        let pts = (-4..=4)
            .map(|c| PathPoint::at_node(20, Arc::new(GridPath::constant(grid(), &[0.25 * c as f64]))).unwrap())
            .collect();
        let s = SearchSpace::new(pts).unwrap();
        let rep = verify_gauge_axioms(&s, &q, &[0.5, 0.2, 0.1]).unwrap();
        assert!(rep.holds(1e-14), "{rep:?}");
    }

    #[test]
    fn time_pairs_threshold_is_quadratic() {
        let q = quad();
        let x = Arc::new(GridPath::constant(grid(), &[0.7]));
        let pts = (0..=20).map(|k| PathPoint::at_node(k, x.clone()).unwrap()).collect();
        let s = SearchSpace::new(pts).unwrap();
        for row in verify_gauge_axioms(&s, &q, &[0.5, 0.2, 0.1]).unwrap().rows {
            assert!(row.eta >= row.eps * row.eps / 4.0, "{row:?}");
        }
    }
}
