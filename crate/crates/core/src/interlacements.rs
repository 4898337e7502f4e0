//! Random interlacements seen through a finite window `K ⊂ Z^d`.
//!
//! Locally, `I^u ∩ K` is the union of the ranges, inside `K`, of a
//! Poisson(`u cap(K)`) number of independent walks started from the
//! normalized equilibrium measure `ē_K`. Arrivals are realized as a Poisson
//! process of rate `cap(K)` in the level variable, so one sample serves
//! every `u` up to its `u_max` and the sets `I^u` are nested by construction.
//!
//! Walks are infinite; each is run until it leaves a concentric cube of side
//! `κ (diam K + 1)`. At that point the return probability `h(z) =
//! P_z(H_K < ∞)` is evaluated from the Green function. If `h(z)` is below the
//! tolerance the walk is dropped (its mass is accumulated in
//! [`InterlacementSample::dropped_mass`]). Otherwise a return is drawn with
//! probability `h(z)`, and on return the walk restarts from its entrance
//! point, drawn from the harmonic measure seen from `z` ([`Reentry::Exact`])
//! or from `ē_K` ([`Reentry::Equilibrium`]).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use rand_distr::Exp;

use crate::error::{Error, Result};
use crate::potential::{equilibrium_and_capacity, sample_cumulative, CapacityResult, CapacitySupport, GreenTable};
use crate::torus::{direction_axis, direction_is_negative, LatticeCube, LatticePoint, MAX_DIM};
use crate::walk::DirectionSource;

/// Entrance law used when a truncated walk returns to `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reentry {
    /// Harmonic measure from the exit point, `G_S^{-1} g(z - S)` on the
    /// support `S` of `e_K`.
    Exact,
    /// `ē_K`, the harmonic measure from infinity.
    Equilibrium,
    /// `Exact` when the support has at most [`EXACT_REENTRY_LIMIT`] points.
    Auto,
}

/// Largest support for which [`Reentry::Auto`] picks the exact law.
pub const EXACT_REENTRY_LIMIT: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub kappa: f64,
    /// Walks whose return probability is at most this are dropped.
    pub tolerance: f64,
    pub reentry: Reentry,
    /// Step budget per trajectory, restarts included.
    pub max_steps: u64,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation { kappa: 8.0, tolerance: 1e-4, reentry: Reentry::Auto, max_steps: 10_000_000 }
    }
}

/// A finite window with its equilibrium data and exit cube.
#[derive(Clone, Debug)]
pub struct Window {
    d: usize,
    points: Vec<LatticePoint>,
    lo: [i64; MAX_DIM],
    dims: [i64; MAX_DIM],
    /// Dense index over the bounding box; -1 off `K`.
    slot: Vec<i32>,
    cap: CapacityResult,
    support: Vec<usize>,
    start_cum: Vec<f64>,
    center2: [i64; MAX_DIM],
    /// Side of the exit cube, in the doubled coordinates `2x - center2`.
    exit_side: i64,
    exact: Option<DMatrix<f64>>,
    truncation: Truncation,
}

impl Window {
    pub fn new(points: &[LatticePoint], green: &GreenTable, truncation: Truncation) -> Result<Window> {
        if !(truncation.kappa >= 1.0) || !(truncation.tolerance >= 0.0) {
            return Err(Error::Parameter(format!("bad truncation {truncation:?}")));
        }
        let cap = equilibrium_and_capacity(points, green, CapacitySupport::InternalBoundary)?;
        let d = green.d;
        let pts = cap.set.clone();
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for i in 0..d {
            lo[i] = pts.iter().map(|p| p.get(i)).min().unwrap();
            hi[i] = pts.iter().map(|p| p.get(i)).max().unwrap();
        }
        let mut dims = [1i64; MAX_DIM];
        for i in 0..d {
            dims[i] = hi[i] - lo[i] + 1;
        }
        let boxed: i64 = dims[..d].iter().product();
        let mut slot = vec![-1i32; boxed as usize];
        for (k, p) in pts.iter().enumerate() {
            let mut idx = 0i64;
            for i in 0..d {
                idx = idx * dims[i] + p.get(i) - lo[i];
            }
            slot[idx as usize] = k as i32;
        }
        let diam = (0..d).map(|i| dims[i] - 1).max().unwrap();
        let mut center2 = [0i64; MAX_DIM];
        for i in 0..d {
            center2[i] = lo[i] + hi[i];
        }
        let exit_side = (truncation.kappa * (diam + 1) as f64).ceil() as i64;
        let support = cap.support();
        let mut acc = 0.0;
        let start_cum = support
            .iter()
            .map(|&i| {
                acc += cap.equilibrium[i];
                acc
            })
            .collect();
        let use_exact = match truncation.reentry {
            Reentry::Exact => true,
            Reentry::Equilibrium => false,
            Reentry::Auto => support.len() <= EXACT_REENTRY_LIMIT,
        };
        let exact = if use_exact {
            let m = support.len();
            let g = DMatrix::from_fn(m, m, |a, b| green.value(&pts[support[a]].sub(&pts[support[b]])));
            let chol = g.cholesky().ok_or(Error::Singular { condition: f64::INFINITY })?;
            Some(chol.inverse())
        } else {
            None
        };
        Ok(Window { d, points: pts, lo, dims, slot, cap, support, start_cum, center2, exit_side, exact, truncation })
    }

    /// The cube `Q(0, side)`.
    pub fn cube(d: usize, side: u64, green: &GreenTable, truncation: Truncation) -> Result<Window> {
        let pts = LatticeCube::new(LatticePoint::zero(d), side)?.points();
        Window::new(&pts, green, truncation)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Points of `K`, sorted; trace indices refer to this order.
    pub fn points(&self) -> &[LatticePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn capacity(&self) -> f64 {
        self.cap.capacity
    }

    pub fn equilibrium(&self) -> &CapacityResult {
        &self.cap
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn exact_reentry(&self) -> bool {
        self.exact.is_some()
    }

    pub fn index_of(&self, p: &LatticePoint) -> Option<usize> {
        self.slot_of(p.coords())
    }

    #[inline]
    fn slot_of(&self, x: &[i64]) -> Option<usize> {
        let mut idx = 0i64;
        for i in 0..self.d {
            let o = x[i] - self.lo[i];
            if o < 0 || o >= self.dims[i] {
                return None;
            }
            idx = idx * self.dims[i] + o;
        }
        let s = self.slot[idx as usize];
        (s >= 0).then_some(s as usize)
    }

    #[inline]
    fn outside_exit_cube(&self, x: &[i64]) -> bool {
        (0..self.d).any(|i| (2 * x[i] - self.center2[i]).abs() > self.exit_side)
    }

    /// Entrance distribution seen from `z`, over `support`, as cumulative
    /// weights; the last entry is `P_z(H_K < ∞)`.
    fn entrance_from(&self, z: &LatticePoint, green: &GreenTable) -> Vec<f64> {
        match &self.exact {
            Some(inv) => {
                let b = DVector::from_iterator(
                    self.support.len(),
                    self.support.iter().map(|&s| green.value(&z.sub(&self.points[s]))),
                );
                let h = inv * b;
                let mut acc = 0.0;
                h.iter()
                    .map(|&v| {
                        acc += v.max(0.0);
                        acc
                    })
                    .collect()
            }
            None => {
                let total = self.cap.hitting_probability(green, z);
                let scale = total / self.capacity();
                self.start_cum.iter().map(|c| c * scale).collect()
            }
        }
    }
}

/// Per-trajectory bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub steps: u64,
    pub restarts: u32,
    /// Return probability at the final exit, when the walk was dropped
    /// without a draw.
    pub dropped: f64,
    pub over_budget: bool,
}

/// Runs one trajectory from `ē_K`, calling `visit` with the index of every
/// point of `K` it steps on (with repetitions).
pub fn run_trajectory<R: RngCore + DirectionSource>(
    w: &Window,
    green: &GreenTable,
    rng: &mut R,
    mut visit: impl FnMut(usize),
) -> TrajectoryStats {
    let d = w.d;
    let deg = 2 * d;
    let mut st = TrajectoryStats::default();
    let mut start = w.support[sample_cumulative(&w.start_cum, rng)];
    loop {
        let mut x = [0i64; MAX_DIM];
        x[..d].copy_from_slice(w.points[start].coords());
        visit(start);
        loop {
            let dir = rng.next_direction(deg).unwrap();
            let a = direction_axis(dir);
            x[a] += if direction_is_negative(dir) { -1 } else { 1 };
            st.steps += 1;
            if let Some(k) = w.slot_of(&x[..d]) {
                visit(k);
            } else if w.outside_exit_cube(&x[..d]) {
                break;
            }
            if st.steps >= w.truncation.max_steps {
                st.over_budget = true;
                return st;
            }
        }
        let z = LatticePoint::new(&x[..d]);
        let cum = w.entrance_from(&z, green);
        let h = *cum.last().unwrap();
        if h <= w.truncation.tolerance {
            st.dropped = h;
            return st;
        }
        let u: f64 = rng.gen();
        if u >= h.min(1.0) {
            return st;
        }
        st.restarts += 1;
        start = w.support[sample_cumulative(&cum, rng)];
    }
}

/// One trajectory of the cloud: its arrival level and the points of `K` it
/// visits, sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub level: f64,
    pub trace: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterlacementSample {
    pub d: usize,
    pub window_size: usize,
    pub capacity: f64,
    pub u_max: f64,
    pub truncation: Truncation,
    pub arrivals: Vec<Arrival>,
    /// Trajectories that hit the step budget.
    pub over_budget: u32,
    pub restarts: u64,
    /// Sum of the return probabilities of dropped walks.
    pub dropped_mass: f64,
}

fn exp_gap<R: RngCore>(rate: f64, rng: &mut R) -> f64 {
    rng.sample(Exp::new(rate).expect("positive capacity"))
}

/// Samples all arrivals with level at most `u_max`.
pub fn sample_cloud<R: RngCore + DirectionSource>(
    w: &Window,
    u_max: f64,
    green: &GreenTable,
    rng: &mut R,
) -> Result<InterlacementSample> {
    if !(u_max > 0.0) {
        return Err(Error::Parameter(format!("u_max = {u_max} must be positive")));
    }
    let mut s = InterlacementSample {
        d: w.d,
        window_size: w.len(),
        capacity: w.capacity(),
        u_max,
        truncation: w.truncation,
        arrivals: Vec::new(),
        over_budget: 0,
        restarts: 0,
        dropped_mass: 0.0,
    };
    let mut level = exp_gap(w.capacity(), rng);
    let mut seen = vec![false; w.len()];
    while level <= u_max {
        let mut trace = Vec::new();
        let st = run_trajectory(w, green, rng, |k| {
            if !seen[k] {
                seen[k] = true;
                trace.push(k as u32);
            }
        });
        for &k in &trace {
            seen[k as usize] = false;
        }
        trace.sort_unstable();
        s.over_budget += st.over_budget as u32;
        s.restarts += st.restarts as u64;
        s.dropped_mass += st.dropped;
        s.arrivals.push(Arrival { level, trace });
        level += exp_gap(w.capacity(), rng);
    }
    Ok(s)
}

impl InterlacementSample {
    /// Membership mask of `I^u ∩ K`.
    pub fn occupied(&self, u: f64) -> Vec<bool> {
        let mut m = vec![false; self.window_size];
        for a in self.arrivals.iter().take_while(|a| a.level <= u) {
            for &k in &a.trace {
                m[k as usize] = true;
            }
        }
        m
    }

    /// Whether every listed point is vacant at level `u`.
    pub fn all_vacant(&self, idx: &[usize], u: f64) -> bool {
        self.arrivals.iter().take_while(|a| a.level <= u).all(|a| idx.iter().all(|&k| a.trace.binary_search(&(k as u32)).is_err()))
    }

    /// Level at which the listed points become covered, if within `u_max`.
    pub fn cover_level_of(&self, idx: &[usize]) -> Option<f64> {
        let mut need: Vec<bool> = vec![false; self.window_size];
        let mut left = 0;
        for &k in idx {
            if !need[k] {
                need[k] = true;
                left += 1;
            }
        }
        if left == 0 {
            return Some(0.0);
        }
        for a in &self.arrivals {
            for &k in &a.trace {
                if need[k as usize] {
                    need[k as usize] = false;
                    left -= 1;
                }
            }
            if left == 0 {
                return Some(a.level);
            }
        }
        None
    }

    pub fn is_flagged(&self) -> bool {
        self.over_budget > 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverLevel {
    pub level: f64,
    pub trajectories: u64,
    pub over_budget: u32,
    pub dropped_mass: f64,
}

/// Smallest level `u` with `K ⊂ I^u`, generating arrivals one at a time.
pub fn cover_level<R: RngCore + DirectionSource>(w: &Window, green: &GreenTable, rng: &mut R) -> Result<CoverLevel> {
    let mut covered = vec![false; w.len()];
    let mut left = w.len();
    let mut out = CoverLevel { level: 0.0, trajectories: 0, over_budget: 0, dropped_mass: 0.0 };
    while left > 0 {
        out.level += exp_gap(w.capacity(), rng);
        out.trajectories += 1;
        let st = run_trajectory(w, green, rng, |k| {
            if !covered[k] {
                covered[k] = true;
                left -= 1;
            }
        });
        out.over_budget += st.over_budget as u32;
        out.dropped_mass += st.dropped;
        if out.trajectories > 100_000_000 {
            return Err(Error::StepBudget { requested: out.trajectories, budget: 100_000_000 });
        }
    }
    Ok(out)
}

/// Empirical proportion with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub hits: u64,
    pub trials: u64,
}

impl Proportion {
    pub fn p(&self) -> f64 {
        self.hits as f64 / self.trials as f64
    }

    /// `sqrt(p (1 - p) / n)`, floored at the value for one success so that
    /// degenerate counts still carry an error bar.
    pub fn std_error(&self) -> f64 {
        let n = self.trials as f64;
        let p = self.p().clamp(1.0 / n, 1.0 - 1.0 / n);
        (p * (1.0 - p) / n).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FkgReport {
    pub empirical: Proportion,
    /// `(1 - exp(-u / g(0)))^{|F|}`.
    pub floor: f64,
    /// `P̂ ≥ floor - 2σ`.
    pub holds: bool,
}

/// Checks `P(F ⊂ I^u) ≥ (1 - e^{-u/g(0)})^{|F|}` on the given samples, which
/// must have been drawn with `u_max ≥ u`.
pub fn fkg_check(samples: &[InterlacementSample], f: &[usize], u: f64, g0: f64) -> Result<FkgReport> {
    if samples.iter().any(|s| s.u_max < u) {
        return Err(Error::Parameter(format!("samples drawn below u = {u}")));
    }
    let hits = samples.iter().filter(|s| s.cover_level_of(f).is_some_and(|l| l <= u)).count() as u64;
    let empirical = Proportion { hits, trials: samples.len() as u64 };
    let floor = (1.0 - (-u / g0).exp()).powi(f.len() as i32);
    Ok(FkgReport { empirical, floor, holds: empirical.p() >= floor - 2.0 * empirical.std_error() })
}

/// `P̂(K' ⊂ V^u)` for a subset `K'` of the window.
pub fn vacant_probability(samples: &[InterlacementSample], idx: &[usize], u: f64) -> Proportion {
    let hits = samples.iter().filter(|s| s.all_vacant(idx, u)).count() as u64;
    Proportion { hits, trials: samples.len() as u64 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPointReport {
    pub u: f64,
    /// `Σ_{v ∈ F} P̂(0, v ∈ V^{g(0) u})`.
    pub sum: f64,
    pub std_error: f64,
    pub f_size: usize,
    /// `exp(-2u)(|F| + C u N^2) + C exp(-c_1 u)` for the configured constants.
    pub envelope: f64,
    /// `C` solving `sum = exp(-2u)(|F| + C u N^2)`.
    pub fitted_c: f64,
}

/// Two-point sum over `f` (window indices, `origin` the index of `0`).
pub fn two_point_sum(
    samples: &[InterlacementSample],
    origin: usize,
    f: &[usize],
    u: f64,
    g0: f64,
    n: u32,
    c: f64,
    c1: f64,
) -> Result<TwoPointReport> {
    let level = g0 * u;
    if samples.iter().any(|s| s.u_max < level) {
        return Err(Error::Parameter(format!("samples drawn below level {level}")));
    }
    let per: Vec<f64> = samples
        .iter()
        .map(|s| {
            let occ = s.occupied(level);
            if occ[origin] {
                0.0
            } else {
                f.iter().filter(|&&v| !occ[v]).count() as f64
            }
        })
        .collect();
    let m = per.len() as f64;
    let mean = per.iter().sum::<f64>() / m;
    let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let n2 = (n as f64).powi(2);
    let envelope = (-2.0 * u).exp() * (f.len() as f64 + c * u * n2) + c * (-c1 * u).exp();
    let fitted_c = if u > 0.0 { (mean * (2.0 * u).exp() - f.len() as f64) / (u * n2) } else { 0.0 };
    Ok(TwoPointReport { u, sum: mean, std_error: (var / m).sqrt(), f_size: f.len(), envelope, fitted_c })
}
