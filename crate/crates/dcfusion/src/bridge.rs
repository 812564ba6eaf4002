//! Brownian bridges simulated jointly with almost-sure bounding layers.
//!
//! Work happens in whitened coordinates, where the bridge has independent
//! unit-variance coordinates, so each coordinate gets its own univariate
//! layer and the multivariate layer is the product box.
//!
//! For a coordinate running from `x` to `y` over a duration `τ`, let
//! `m = min(x, y)`, `M = max(x, y)` and `a_i = i·κ·√τ` (`κ` is the layer
//! increment). The layer level `I` is the smallest `i` such that the path
//! stays inside `[m − a_i, M + a_i]`. Its law is sampled by inversion, with
//! the staying probabilities bracketed by their alternating image series.
//! Interior points given `I = i` are drawn exactly by rejection. At level
//! one the proposal is the unconditioned bridge, accepted with the
//! probability that every sub-bridge between consecutive points stays in the
//! box. At higher levels the path must cross an edge of the level-`(i−1)`
//! box. The proposal picks an edge in proportion to its crossing probability
//! and draws a skeleton conditioned on crossing it, via the reflection
//! principle with an explicit first-crossing interval. Acceptance then
//! corrects for paths that cross both edges and for paths leaving the outer
//! box. Every Bernoulli decision is resolved by refining series brackets
//! until the uniform variate falls outside them.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{check_dim, FusionError, Result};
use crate::linalg::{Matrix, Vector};

/// Iteration cap for every alternating-series decision.
pub const SERIES_ITERATION_CAP: usize = 10_000;
/// Brackets narrower than this are treated as converged.
pub const SERIES_TOL: f64 = 1e-15;
/// Cap on rejected proposals when sampling interior points.
pub const PROPOSAL_CAP: usize = 100_000;
/// Default layer increment, in units of `√τ`.
pub const DEFAULT_LAYER_INCREMENT: f64 = 0.5;

/// Bracketing sequence for the probability that a unit Brownian bridge from
/// `x` to `y` over duration `tau` stays inside `(l, u)`.
#[derive(Debug, Clone)]
pub struct StaySeries {
    x: f64,
    y: f64,
    l: f64,
    u: f64,
    tau: f64,
    width: f64,
    j: usize,
    first_valid: usize,
    partial_even: f64,
    lo: f64,
    hi: f64,
}

impl StaySeries {
    pub fn new(x: f64, y: f64, l: f64, u: f64, tau: f64) -> Self {
        let width = u - l;
        let inside = l < x && x < u && l < y && y < u;
        let (lo, hi) = if inside { (0.0, 1.0) } else { (0.0, 0.0) };
        // The series terms decrease monotonically once j exceeds this index.
        let first_valid = if inside { ((tau + width * width).sqrt() / (2.0 * width)).ceil() as usize + 1 } else { 0 };
        Self { x, y, l, u, tau, width, j: 0, first_valid, partial_even: 1.0, lo, hi }
    }

    fn sigma_term(&self, j: f64) -> f64 {
        let dj = self.width * j;
        let a = (-2.0 / self.tau * (dj + self.l - self.x) * (dj + self.l - self.y)).exp();
        let b = (-2.0 / self.tau * (dj - self.u + self.x) * (dj - self.u + self.y)).exp();
        a + b
    }

    fn tau_term(&self, j: f64) -> f64 {
        let w = self.width;
        let a = (-2.0 * j / self.tau * (w * w * j + w * (self.x - self.y))).exp();
        let b = (-2.0 * j / self.tau * (w * w * j - w * (self.x - self.y))).exp();
        a + b
    }

    /// Current bracket `[lo, hi]` containing the probability.
    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Whether the bracket has converged.
    pub fn converged(&self) -> bool {
        self.hi - self.lo < SERIES_TOL
    }

    /// Adds one more pair of series terms, tightening the bracket once the
    /// terms are in their monotone regime.
    pub fn refine(&mut self) {
        if self.converged() {
            return;
        }
        self.j += 1;
        let j = self.j as f64;
        let s = self.sigma_term(j);
        let t = self.tau_term(j);
        let odd = self.partial_even - s;
        let even = odd + t;
        self.partial_even = even;
        let monotone = s >= t && t >= self.sigma_term(j + 1.0);
        if self.j >= self.first_valid && monotone {
            self.lo = self.lo.max(odd).clamp(0.0, 1.0);
            self.hi = self.hi.min(even).clamp(0.0, 1.0);
            if self.lo > self.hi {
                let mid = 0.5 * (self.lo + self.hi);
                self.lo = mid;
                self.hi = mid;
            }
        }
        if s + t < SERIES_TOL && self.j >= self.first_valid {
            let v = even.clamp(self.lo, self.hi);
            self.lo = v;
            self.hi = v;
        }
    }

    /// Refines until converged and returns the value (used by tests and
    /// diagnostics; sampling code only ever needs brackets).
    pub fn value(mut self) -> Result<f64> {
        for _ in 0..SERIES_ITERATION_CAP {
            if self.converged() {
                return Ok(0.5 * (self.lo + self.hi));
            }
            self.refine();
        }
        Err(FusionError::SeriesNonConvergence(SERIES_ITERATION_CAP))
    }
}

/// Probability that a unit Brownian bridge from `x` to `y` over `tau` stays
/// within `(l, u)`.
pub fn stay_probability(x: f64, y: f64, l: f64, u: f64, tau: f64) -> Result<f64> {
    StaySeries::new(x, y, l, u, tau).value()
}

/// Almost-sure bounding layer of a whitened Brownian bridge over one interval.
#[derive(Debug, Clone)]
pub struct LayerInfo {
    /// Per-coordinate lower edge of the whitened box.
    pub lo: Vec<f64>,
    /// Per-coordinate upper edge of the whitened box.
    pub hi: Vec<f64>,
    /// Per-coordinate layer level (≥ 1).
    pub level: Vec<usize>,
    /// Per-coordinate layer increment `κ√τ`.
    pub increment: Vec<f64>,
    pub z_start: Vector,
    pub z_end: Vector,
    pub t_start: f64,
    pub t_end: f64,
    /// `Λ^{1/2}` mapping whitened to original coordinates.
    pub lambda_sqrt: Arc<Matrix>,
    /// Axis-aligned bounding box of `Λ^{1/2}·[lo, hi]`.
    pub original_lo: Vec<f64>,
    pub original_hi: Vec<f64>,
}

impl LayerInfo {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Inner box of coordinate `k` (the level below the sampled one).
    fn inner(&self, k: usize) -> Option<(f64, f64)> {
        let lvl = self.level[k];
        if lvl <= 1 {
            return None;
        }
        let a = (lvl - 1) as f64 * self.increment[k];
        let m = self.z_start[k].min(self.z_end[k]);
        let mm = self.z_start[k].max(self.z_end[k]);
        Some((m - a, mm + a))
    }

    /// Whether a whitened point lies inside the box.
    pub fn contains_whitened(&self, z: &Vector) -> bool {
        z.iter().enumerate().all(|(k, v)| self.lo[k] <= *v && *v <= self.hi[k])
    }

    /// Whether an original-coordinate point lies inside the bounding box
    /// (with a relative round-off allowance).
    pub fn contains_original(&self, x: &Vector) -> bool {
        x.iter().enumerate().all(|(k, v)| {
            let slack = 1e-12 * (1.0 + self.original_lo[k].abs().max(self.original_hi[k].abs()));
            self.original_lo[k] - slack <= *v && *v <= self.original_hi[k] + slack
        })
    }
}

/// Bounding box of the image of `[lo, hi]` under the linear map `s`.
fn image_box(s: &Matrix, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = lo.len();
    let mut out_lo = vec![0.0; d];
    let mut out_hi = vec![0.0; d];
    for r in 0..s.nrows() {
        for k in 0..d {
            let a = s[(r, k)];
            if a >= 0.0 {
                out_lo[r] += a * lo[k];
                out_hi[r] += a * hi[k];
            } else {
                out_lo[r] += a * hi[k];
                out_hi[r] += a * lo[k];
            }
        }
    }
    (out_lo, out_hi)
}

/// Samples the layer level of one coordinate by inverting its distribution
/// function `i ↦ P(path within [m − a_i, M + a_i])`.
fn sample_level(x: f64, y: f64, tau: f64, inc: f64, rng: &mut dyn RngCore) -> Result<usize> {
    let u: f64 = rng.random();
    let (m, mm) = (x.min(y), x.max(y));
    let mut budget = SERIES_ITERATION_CAP;
    for level in 1.. {
        let a = level as f64 * inc;
        let mut series = StaySeries::new(x, y, m - a, mm + a, tau);
        loop {
            let (lo, hi) = series.bounds();
            if u < lo {
                return Ok(level);
            }
            if u > hi {
                break;
            }
            if series.converged() {
                if u <= 0.5 * (lo + hi) {
                    return Ok(level);
                }
                break;
            }
            if budget == 0 {
                return Err(FusionError::SeriesNonConvergence(SERIES_ITERATION_CAP));
            }
            budget -= 1;
            series.refine();
        }
    }
    unreachable!("levels are unbounded")
}

/// Simulates a layer for the whitened bridge from `z_start` at `t_start` to
/// `z_end` at `t_end`.
pub fn simulate_layer(
    z_start: &Vector,
    z_end: &Vector,
    t_start: f64,
    t_end: f64,
    lambda_sqrt: Arc<Matrix>,
    increment: f64,
    rng: &mut dyn RngCore,
) -> Result<LayerInfo> {
    let d = z_start.len();
    check_dim(d, z_end.len())?;
    check_dim(d, lambda_sqrt.nrows())?;
    let tau = t_end - t_start;
    if !(tau > 0.0) {
        return Err(FusionError::InvalidData(format!("bridge interval [{t_start}, {t_end}] is empty")));
    }
    let inc = increment * tau.sqrt();
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    let mut level = Vec::with_capacity(d);
    for k in 0..d {
        let (x, y) = (z_start[k], z_end[k]);
        let lvl = sample_level(x, y, tau, inc, rng)?;
        let a = lvl as f64 * inc;
        lo.push(x.min(y) - a);
        hi.push(x.max(y) + a);
        level.push(lvl);
    }
    let (original_lo, original_hi) = image_box(&lambda_sqrt, &lo, &hi);
    Ok(LayerInfo {
        lo,
        hi,
        level,
        increment: vec![inc; d],
        z_start: z_start.clone(),
        z_end: z_end.clone(),
        t_start,
        t_end,
        lambda_sqrt,
        original_lo,
        original_hi,
    })
}

/// One refinable factor `scale · (plus − minus)` of an acceptance
/// probability, bracketed through its staying-probability series.
#[derive(Debug, Clone)]
struct Factor {
    plus: StaySeries,
    minus: Option<StaySeries>,
    scale: f64,
}

impl Factor {
    fn plain(s: StaySeries) -> Self {
        Self { plus: s, minus: None, scale: 1.0 }
    }

    fn bounds(&self) -> (f64, f64) {
        let (a, b) = self.plus.bounds();
        let (c, d) = self.minus.as_ref().map_or((0.0, 0.0), StaySeries::bounds);
        (((a - d) * self.scale).max(0.0), ((b - c) * self.scale).max(0.0))
    }

    fn converged(&self) -> bool {
        self.plus.converged() && self.minus.as_ref().is_none_or(StaySeries::converged)
    }

    fn refine(&mut self) {
        self.plus.refine();
        if let Some(m) = &mut self.minus {
            m.refine();
        }
    }
}

fn product_bounds(f: &[Factor]) -> (f64, f64) {
    f.iter().fold((1.0, 1.0), |(lo, hi), x| {
        let (a, b) = x.bounds();
        (lo * a, hi * b)
    })
}

/// Decides a Bernoulli whose success probability is `Σ_k w_k ∏ groups[k]`,
/// every factor known only through a refinable bracket.
fn bracket_bernoulli(groups: &mut [(f64, Vec<Factor>)], v: f64) -> Result<bool> {
    for _ in 0..SERIES_ITERATION_CAP {
        let (mut p_lo, mut p_hi) = (0.0, 0.0);
        for (w, g) in groups.iter() {
            let (a, b) = product_bounds(g);
            p_lo += w * a;
            p_hi += w * b;
        }
        if v < p_lo {
            return Ok(true);
        }
        if v > p_hi {
            return Ok(false);
        }
        if groups.iter().all(|(_, g)| g.iter().all(Factor::converged)) {
            return Ok(v <= 0.5 * (p_lo + p_hi));
        }
        groups.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(Factor::refine);
    }
    Err(FusionError::SeriesNonConvergence(SERIES_ITERATION_CAP))
}

/// Probability that a Brownian bridge from `a` to `b` over `dt` reaches `h`.
fn crossing_probability(a: f64, b: f64, h: f64, dt: f64) -> f64 {
    if a >= h || b >= h {
        1.0
    } else {
        (-2.0 * (h - a) * (h - b) / dt).exp()
    }
}

/// Unconditioned bridge skeleton from `(t0, x)` to `(t1, y)` at `times`.
fn bridge_skeleton(x: f64, y: f64, t0: f64, t1: f64, times: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
    let (mut t_prev, mut w_prev) = (t0, x);
    times
        .iter()
        .map(|&t| {
            let span = t1 - t_prev;
            let mean = w_prev + (t - t_prev) / span * (y - w_prev);
            let var = (t - t_prev) * (t1 - t) / span;
            w_prev = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            t_prev = t;
            w_prev
        })
        .collect()
}

/// Level-one coordinate: the unconditioned skeleton, accepted with the
/// probability that every sub-bridge stays in the box.
fn level_one_attempt(
    x: f64,
    y: f64,
    (t0, t1): (f64, f64),
    (lo, hi): (f64, f64),
    times: &[f64],
    rng: &mut dyn RngCore,
) -> Result<Option<Vec<f64>>> {
    let path = bridge_skeleton(x, y, t0, t1, times, rng);
    let v: f64 = rng.random();
    if path.iter().any(|w| *w <= lo || *w >= hi) {
        return Ok(None);
    }
    let knots = knots(x, y, t0, t1, times, &path);
    let outer = knots.windows(2).map(|w| Factor::plain(StaySeries::new(w[0].1, w[1].1, lo, hi, w[1].0 - w[0].0)));
    let mut groups = [(1.0, outer.collect())];
    Ok(bracket_bernoulli(&mut groups, v)?.then_some(path))
}

fn knots(x: f64, y: f64, t0: f64, t1: f64, times: &[f64], path: &[f64]) -> Vec<(f64, f64)> {
    let mut k = Vec::with_capacity(path.len() + 2);
    k.push((t0, x));
    k.extend(times.iter().copied().zip(path.iter().copied()));
    k.push((t1, y));
    k
}

/// Higher-level coordinate, in a frame where the inner upper edge `h` was
/// crossed. The skeleton comes from the bridge to the reflection `2h − y`,
/// reflected after its first crossing interval; it is accepted with
/// probability `E[1{path in outer box} / N]`, where `N ∈ {1, 2}` counts the
/// inner edges crossed, which equals
/// `½ P(stay in (lo, hi)) + ½ P(stay in (lo_in, hi))` given the skeleton and
/// the crossing interval.
fn crossing_attempt(
    x: f64,
    y: f64,
    (t0, t1): (f64, f64),
    (lo, lo_in, h, hi): (f64, f64, f64, f64),
    times: &[f64],
    rng: &mut dyn RngCore,
) -> Result<Option<Vec<f64>>> {
    let mut path = bridge_skeleton(x, 2.0 * h - y, t0, t1, times, rng);
    let mut ends = knots(x, 2.0 * h - y, t0, t1, times, &path);
    let mut first = ends.len() - 2;
    for j in 0..ends.len() - 1 {
        let (a, b) = (ends[j].1, ends[j + 1].1);
        let p = crossing_probability(a, b, h, ends[j + 1].0 - ends[j].0);
        if p >= 1.0 || rng.random::<f64>() < p {
            first = j;
            break;
        }
    }
    for e in ends.iter_mut().skip(first + 1) {
        e.1 = 2.0 * h - e.1;
    }
    for (i, w) in path.iter_mut().enumerate() {
        *w = ends[i + 1].1;
    }
    let v: f64 = rng.random();
    if path.iter().any(|w| *w <= lo || *w >= hi) {
        return Ok(None);
    }
    let group = |c: f64| -> Vec<Factor> {
        ends.windows(2)
            .enumerate()
            .map(|(j, w)| {
                let ((ta, a), (tb, b)) = (w[0], w[1]);
                let dt = tb - ta;
                if j < first {
                    let no_cross = 1.0 - crossing_probability(a, b, h, dt);
                    Factor { plus: StaySeries::new(a, b, c, h, dt), minus: None, scale: 1.0 / no_cross }
                } else if j == first {
                    Factor {
                        plus: StaySeries::new(a, b, c, hi, dt),
                        minus: Some(StaySeries::new(a, b, c, h, dt)),
                        scale: 1.0 / crossing_probability(a, b, h, dt),
                    }
                } else {
                    Factor::plain(StaySeries::new(a, b, c, hi, dt))
                }
            })
            .collect()
    };
    let mut groups = [(0.5, group(lo)), (0.5, group(lo_in))];
    Ok(bracket_bernoulli(&mut groups, v)?.then_some(path))
}

/// Samples one whitened coordinate at `times`, conditionally on its layer.
fn sample_coordinate(layer: &LayerInfo, k: usize, times: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let (x, y) = (layer.z_start[k], layer.z_end[k]);
    let span = (layer.t_start, layer.t_end);
    let tau = layer.t_end - layer.t_start;
    let (lo, hi) = (layer.lo[k], layer.hi[k]);
    for _ in 0..PROPOSAL_CAP {
        let attempt = match layer.inner(k) {
            None => level_one_attempt(x, y, span, (lo, hi), times, rng)?,
            Some((lo_in, hi_in)) => {
                let p_up = crossing_probability(x, y, hi_in, tau);
                let p_down = crossing_probability(-x, -y, -lo_in, tau);
                if rng.random::<f64>() * (p_up + p_down) < p_up {
                    crossing_attempt(x, y, span, (lo, lo_in, hi_in, hi), times, rng)?
                } else {
                    crossing_attempt(-x, -y, span, (-hi, -hi_in, -lo_in, -lo), times, rng)?
                        .map(|p| p.into_iter().map(|w| -w).collect())
                }
            }
        };
        if let Some(path) = attempt {
            return Ok(path);
        }
    }
    Err(FusionError::SeriesNonConvergence(PROPOSAL_CAP))
}

/// Samples the whitened bridge at sorted `times` strictly inside the layer's
/// interval, conditionally on the simulated layer.
pub fn sample_bridge_points(layer: &LayerInfo, times: &[f64], rng: &mut dyn RngCore) -> Result<Vec<Vector>> {
    if times.is_empty() {
        return Ok(Vec::new());
    }
    if times.windows(2).any(|w| w[0] > w[1]) || times[0] <= layer.t_start || times[times.len() - 1] >= layer.t_end {
        return Err(FusionError::InvalidData("bridge times must be sorted and strictly interior".into()));
    }
    let d = layer.dim();
    let mut out = vec![Vector::zeros(d); times.len()];
    for k in 0..d {
        let path = sample_coordinate(layer, k, times, rng)?;
        for (o, w) in out.iter_mut().zip(path) {
            o[k] = w;
        }
    }
    Ok(out)
}

/// Maps a whitened point back to original coordinates, `x = Λ^{1/2} z`.
pub fn unwhiten(layer: &LayerInfo, z: &Vector) -> Result<Vector> {
    check_dim(layer.dim(), z.len())?;
    Ok(&*layer.lambda_sqrt * z)
}
