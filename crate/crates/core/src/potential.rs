//! Discrete potential theory for simple random walk on `Z^d`.
//!
//! Two independent Green function computations are provided:
//!
//! * [`GreenTable::solve`] solves `g - P g = δ_0` on a box with far-field
//!   boundary data, by conjugate gradients on the symmetry-reduced lattice.
//! * [`green_monte_carlo`] counts visits of walks stopped on a sphere and adds
//!   the far-field expected number of further visits.
//!
//! Capacities come from a dense Cholesky solve of `Σ_y g(x - y) e(y) = 1`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::torus::{Label, LatticePoint, TorusGeometry, MAX_DIM};
use crate::walk::DirectionSource;

/// Leading constant of `g(x) ~ C_d |x|^{2-d}`: `C_d = d Γ(d/2) / ((d-2) π^{d/2})`.
pub fn green_leading_constant(d: usize) -> f64 {
    let d_f = d as f64;
    d_f * statrs::function::gamma::gamma(d_f / 2.0) / ((d_f - 2.0) * std::f64::consts::PI.powf(d_f / 2.0))
}

/// Far-field approximation of `g(x)`.
///
/// In `d = 3` the first lattice correction is included:
/// `g(x) ≈ (3 / 2π|x|) (1 + (5 Σ x_i^4 / |x|^4 - 3) / (8 |x|^2))`.
pub fn green_asymptotic(x: &LatticePoint) -> f64 {
    green_asymptotic_coords(x.coords())
}

pub fn green_asymptotic_coords(x: &[i64]) -> f64 {
    static CONSTANTS: OnceLock<[f64; MAX_DIM + 1]> = OnceLock::new();
    let cs = CONSTANTS.get_or_init(|| {
        let mut c = [0.0; MAX_DIM + 1];
        for (d, v) in c.iter_mut().enumerate().skip(3) {
            *v = green_leading_constant(d);
        }
        c
    });
    let d = x.len();
    let r2: f64 = x.iter().map(|&c| (c * c) as f64).sum();
    if r2 == 0.0 {
        return f64::INFINITY;
    }
    if d == 3 {
        let q: f64 = x.iter().map(|&c| ((c * c) as f64).powi(2)).sum();
        cs[3] / r2.sqrt() * (1.0 + (5.0 * q / (r2 * r2) - 3.0) / (8.0 * r2))
    } else {
        cs[d] * r2.powf(1.0 - d as f64 / 2.0)
    }
}

/// Indexing of the fundamental domain `0 ≤ a_1 ≤ … ≤ a_d ≤ R` of the signed
/// permutation group, via the combinatorial number system.
#[derive(Clone, Debug)]
struct Wedge {
    d: usize,
    radius: usize,
    binom: Vec<Vec<usize>>,
    size: usize,
}

impl Wedge {
    fn new(d: usize, radius: usize) -> Self {
        let top = radius + d + 1;
        let mut binom = vec![vec![0usize; d + 2]; top + 1];
        for n in 0..=top {
            binom[n][0] = 1;
            for k in 1..=(d + 1).min(n) {
                binom[n][k] = binom[n - 1][k - 1] + if k <= n - 1 { binom[n - 1][k] } else { 0 };
            }
        }
        let size = binom[radius + d][d];
        Wedge { d, radius, binom, size }
    }

    /// Sorted absolute coordinates.
    fn canonical(&self, x: &[i64]) -> [usize; MAX_DIM] {
        let mut a = [0usize; MAX_DIM];
        for (i, &c) in x.iter().enumerate() {
            a[i] = c.unsigned_abs() as usize;
        }
        a[..self.d].sort_unstable();
        a
    }

    fn index_sorted(&self, a: &[usize]) -> usize {
        a.iter().enumerate().map(|(i, &v)| self.binom[v + i][i + 1]).sum()
    }

    fn index(&self, x: &[i64]) -> Option<usize> {
        let a = self.canonical(x);
        if a[self.d - 1] > self.radius {
            return None;
        }
        Some(self.index_sorted(&a[..self.d]))
    }

    /// All canonical tuples in index order.
    fn tuples(&self) -> Vec<[usize; MAX_DIM]> {
        let mut out = vec![[0usize; MAX_DIM]; self.size];
        let mut cur = [0usize; MAX_DIM];
        fn rec(w: &Wedge, pos: usize, lo: usize, cur: &mut [usize; MAX_DIM], out: &mut Vec<[usize; MAX_DIM]>) {
            if pos == w.d {
                let i = w.index_sorted(&cur[..w.d]);
                out[i] = *cur;
                return;
            }
            for v in lo..=w.radius {
                cur[pos] = v;
                rec(w, pos + 1, v, cur, out);
            }
        }
        rec(self, 0, 0, &mut cur, &mut out);
        out
    }

    /// Size of the signed-permutation orbit of a canonical tuple.
    fn orbit(&self, a: &[usize]) -> f64 {
        let mut perms = (1..=self.d).product::<usize>() as f64;
        let mut i = 0;
        while i < self.d {
            let mut j = i;
            while j < self.d && a[j] == a[i] {
                j += 1;
            }
            perms /= (1..=(j - i)).product::<usize>() as f64;
            i = j;
        }
        let nonzero = a.iter().filter(|&&v| v != 0).count();
        perms * 2f64.powi(nonzero as i32)
    }
}

/// How a [`GreenTable`] was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GreenMethod {
    /// Conjugate gradients on a box with far-field boundary values.
    BoxSolve,
    /// Visit counts of walks stopped on a sphere.
    MonteCarlo,
}

/// Tabulated Green function on `|x|_∞ ≤ radius`, stored on the fundamental
/// domain so that symmetry holds exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GreenTable {
    pub d: usize,
    pub radius: usize,
    pub method: GreenMethod,
    /// Half-width of the box (solve) or exit radius (Monte Carlo).
    pub domain: usize,
    pub tolerance: f64,
    /// Estimated absolute error of the tabulated values.
    pub error_estimate: f64,
    /// Per-entry standard errors; empty for the box solve.
    #[serde(default)]
    pub std_errors: Vec<f64>,
    values: Vec<f64>,
    #[serde(skip)]
    wedge: Option<Wedge>,
}

impl GreenTable {
    fn wedge(&self) -> Wedge {
        self.wedge.clone().unwrap_or_else(|| Wedge::new(self.d, self.radius))
    }

    fn attach(mut self) -> Self {
        self.wedge = Some(Wedge::new(self.d, self.radius));
        self
    }

    /// Solve on the box `|x|_∞ ≤ domain` and keep `|x|_∞ ≤ radius`.
    ///
    /// The error estimate is the change of `g(0)` against a solve on half the
    /// box.
    pub fn solve(d: usize, radius: usize, domain: usize, tolerance: f64) -> Result<GreenTable> {
        if d < 3 || d > MAX_DIM {
            return Err(Error::Parameter(format!("dimension {d} unsupported")));
        }
        if radius > domain {
            return Err(Error::Parameter("table radius exceeds the solve domain".into()));
        }
        let full = solve_box(d, domain, tolerance)?;
        let half = solve_box(d, (domain / 2).max(radius.max(2)), tolerance)?;
        let big = Wedge::new(d, domain);
        let small = Wedge::new(d, radius);
        let values: Vec<f64> = small.tuples().iter().map(|a| full[big.index_sorted(&a[..d])]).collect();
        let error_estimate = (full[0] - half[0]).abs().max(tolerance);
        Ok(GreenTable {
            d,
            radius,
            method: GreenMethod::BoxSolve,
            domain,
            tolerance,
            error_estimate,
            std_errors: Vec::new(),
            values,
            wedge: None,
        }
        .attach())
    }

    /// Default table for `d`: box half-width 96, table radius 32.
    pub fn default_for(d: usize) -> Result<GreenTable> {
        let (radius, domain) = if d == 3 { (32, 96) } else { (12, 40) };
        GreenTable::solve(d, radius, domain, 1e-12)
    }

    pub fn g0(&self) -> f64 {
        self.values[0]
    }

    pub fn g_e1(&self) -> f64 {
        self.get(&LatticePoint::unit(self.d, 0)).expect("radius ≥ 1")
    }

    /// Tabulated value, or an error when `|x|_∞` exceeds the radius.
    pub fn get(&self, x: &LatticePoint) -> Result<f64> {
        let w = self.wedge.as_ref().expect("wedge attached on construction");
        match w.index(x.coords()) {
            Some(i) => Ok(self.values[i]),
            None => Err(Error::GreenRadius { radius: self.radius, requested: x.norm_inf() }),
        }
    }

    /// Tabulated value, extended by the far-field formula outside the table.
    pub fn value(&self, x: &LatticePoint) -> f64 {
        self.get(x).unwrap_or_else(|_| green_asymptotic(x))
    }

    pub fn value_coords(&self, x: &[i64]) -> f64 {
        self.value(&LatticePoint::new(x))
    }

    /// Canonical points and values, in storage order.
    pub fn entries(&self) -> Vec<(Vec<usize>, f64)> {
        self.wedge().tuples().iter().zip(&self.values).map(|(a, &v)| (a[..self.d].to_vec(), v)).collect()
    }

    /// Largest violation of `g(x) = δ_0(x) + (1/2d) Σ g(x ± e_i)` over
    /// `|x|_∞ < radius`.
    pub fn harmonicity_defect(&self) -> f64 {
        let mut worst = 0f64;
        for (a, v) in self.entries() {
            if a[self.d - 1] + 1 > self.radius {
                continue;
            }
            let x = LatticePoint::new(&a.iter().map(|&c| c as i64).collect::<Vec<_>>());
            let mut s = 0.0;
            for i in 0..self.d {
                for sg in [-1, 1] {
                    let mut y = x;
                    y.set(i, y.get(i) + sg);
                    s += self.value(&y);
                }
            }
            let delta = if a.iter().all(|&c| c == 0) { 1.0 } else { 0.0 };
            worst = worst.max((v - delta - s / (2 * self.d) as f64).abs());
        }
        worst
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("table serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<GreenTable> {
        let t: GreenTable = serde_json::from_str(s)?;
        if t.values.len() != Wedge::new(t.d, t.radius).size {
            return Err(Error::Format("Green table size does not match its radius".into()));
        }
        Ok(t.attach())
    }

    /// Load from or store into the cache directory (`COVERLAB_CACHE` by
    /// default), keyed by all solve parameters.
    pub fn cached(d: usize, radius: usize, domain: usize, tolerance: f64, dir: Option<&Path>) -> Result<GreenTable> {
        let dir: Option<PathBuf> = dir.map(Path::to_path_buf).or_else(|| std::env::var_os("COVERLAB_CACHE").map(PathBuf::from));
        let Some(dir) = dir else {
            return GreenTable::solve(d, radius, domain, tolerance);
        };
        let name = format!("green-v1-d{d}-r{radius}-box{domain}-boxsolve-tol{tolerance:e}.json");
        let path = dir.join(name);
        if let Ok(s) = std::fs::read_to_string(&path) {
            if let Ok(t) = GreenTable::from_json(&s) {
                return Ok(t);
            }
        }
        let t = GreenTable::solve(d, radius, domain, tolerance)?;
        std::fs::create_dir_all(&dir)?;
        std::fs::write(&path, t.to_json()?)?;
        Ok(t)
    }
}

/// Weighted conjugate gradients for `g - P g = δ_0` on the fundamental domain
/// of the box `|x|_∞ ≤ r`. Outside the box `g` is the far-field formula.
fn solve_box(d: usize, r: usize, tol: f64) -> Result<Vec<f64>> {
    let w = Wedge::new(d, r);
    let tuples = w.tuples();
    let n = w.size;
    let deg = (2 * d) as f64;
    // Neighbour indices; boundary contributions go to the right-hand side.
    let mut nbrs: Vec<u32> = Vec::with_capacity(n * 2 * d);
    let mut rhs = vec![0.0; n];
    let mut weight = vec![0.0; n];
    const OUT: u32 = u32::MAX;
    for (idx, a) in tuples.iter().enumerate() {
        weight[idx] = w.orbit(&a[..d]);
        let x: Vec<i64> = a[..d].iter().map(|&c| c as i64).collect();
        for i in 0..d {
            for sg in [-1i64, 1] {
                let mut y = x.clone();
                y[i] += sg;
                match w.index(&y) {
                    Some(j) => nbrs.push(j as u32),
                    None => {
                        nbrs.push(OUT);
                        rhs[idx] += green_asymptotic(&LatticePoint::new(&y)) / deg;
                    }
                }
            }
        }
    }
    rhs[0] += 1.0;
    let apply = |u: &[f64], out: &mut [f64]| {
        for i in 0..n {
            let mut s = 0.0;
            for &j in &nbrs[i * 2 * d..(i + 1) * 2 * d] {
                if j != OUT {
                    s += u[j as usize];
                }
            }
            out[i] = u[i] - s / deg;
        }
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&weight).map(|((x, y), w)| x * y * w).sum() };
    let mut x = vec![0.0; n];
    let mut res = rhs.clone();
    let mut p = res.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&res, &res);
    let b_norm = rr.sqrt();
    for _ in 0..20 * n.max(100) {
        if rr.sqrt() <= tol * b_norm {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            res[i] -= alpha * ap[i];
        }
        let rr_new = dot(&res, &res);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = res[i] + beta * p[i];
        }
    }
    Err(Error::Singular { condition: f64::INFINITY })
}

/// Monte Carlo Green function near the origin.
///
/// Each walk starts at `0` and stops on first reaching Euclidean norm
/// `≥ exit_radius`. For every `x` with `|x|_∞ ≤ radius` the estimator is the
/// number of visits to `x` plus the far-field value of `g(Z - x)` at the exit
/// point `Z`, averaged over the symmetry orbit of `x`.
pub fn green_monte_carlo<S: DirectionSource>(
    d: usize,
    radius: usize,
    walks: u64,
    exit_radius: f64,
    src: &mut S,
) -> Result<GreenTable> {
    if d < 3 || d > MAX_DIM {
        return Err(Error::Parameter(format!("dimension {d} unsupported")));
    }
    if exit_radius <= (radius as f64) * (d as f64).sqrt() + 1.0 {
        return Err(Error::Parameter("exit radius must enclose the table".into()));
    }
    if walks < 2 {
        return Err(Error::Parameter("need at least two walks".into()));
    }
    let w = Wedge::new(d, radius);
    let tuples = w.tuples();
    let m = w.size;
    let orbit: Vec<f64> = tuples.iter().map(|a| w.orbit(&a[..d])).collect();
    // Every point of the box with its wedge index.
    let side = 2 * radius + 1;
    let box_len = side.pow(d as u32);
    let mut box_index = vec![0u32; box_len];
    let mut box_points = Vec::with_capacity(box_len);
    for (k, slot) in box_index.iter_mut().enumerate() {
        let mut rem = k;
        let mut x = [0i64; MAX_DIM];
        for c in x.iter_mut().take(d) {
            *c = (rem % side) as i64 - radius as i64;
            rem /= side;
        }
        *slot = w.index(&x[..d]).unwrap() as u32;
        box_points.push(x);
    }
    let box_of = |x: &[i64; MAX_DIM]| -> Option<usize> {
        let mut k = 0usize;
        for i in (0..d).rev() {
            let c = x[i] + radius as i64;
            if c < 0 || c >= side as i64 {
                return None;
            }
            k = k * side + c as usize;
        }
        Some(k)
    };
    let r_exit2 = exit_radius * exit_radius;
    let near2 = (radius * radius * d) as i64;
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let mut per_walk = vec![0.0; m];
    for _ in 0..walks {
        per_walk.iter_mut().for_each(|v| *v = 0.0);
        let mut x = [0i64; MAX_DIM];
        let mut r2: i64 = 0;
        per_walk[0] += 1.0;
        loop {
            let dir = src.next_direction(2 * d).ok_or(Error::Parameter("direction source exhausted".into()))?;
            let a = (dir >> 1) as usize;
            let s = if dir & 1 == 1 { -1 } else { 1 };
            r2 += 2 * s * x[a] + 1;
            x[a] += s;
            if r2 <= near2 {
                if let Some(k) = box_of(&x) {
                    per_walk[box_index[k] as usize] += 1.0;
                }
            } else if r2 as f64 >= r_exit2 {
                break;
            }
        }
        // Far-field continuation from the exit point.
        for (k, y) in box_points.iter().enumerate() {
            let mut diff = [0i64; MAX_DIM];
            for i in 0..d {
                diff[i] = x[i] - y[i];
            }
            per_walk[box_index[k] as usize] += green_asymptotic_coords(&diff[..d]);
        }
        for i in 0..m {
            let v = per_walk[i] / orbit[i];
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let nw = walks as f64;
    let values: Vec<f64> = sum.iter().map(|s| s / nw).collect();
    let std_errors: Vec<f64> = sum_sq
        .iter()
        .zip(&values)
        .map(|(sq, mean)| ((sq / nw - mean * mean).max(0.0) / (nw - 1.0)).sqrt())
        .collect();
    Ok(GreenTable {
        d,
        radius,
        method: GreenMethod::MonteCarlo,
        domain: exit_radius.ceil() as usize,
        tolerance: 0.0,
        error_estimate: 3.0 * std_errors[0],
        std_errors,
        values,
        wedge: None,
    }
    .attach())
}

/// Monte Carlo estimate of `g(0)` and `g(e_1)`.
///
/// `g(e_1)` is the symmetrized visit-count estimate at the neighbours of the
/// origin, and `g(0)` is taken as `1 + g(e_1)`: the harmonic identity at the
/// origin is the estimator, so it holds to rounding. The neighbour estimate
/// has about half the variance of the direct visit count at `0`, which is
/// kept in `g0_direct` as a cross-check.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct McGreenEstimate {
    pub g0: f64,
    pub g0_direct: f64,
    pub g0_direct_std_error: f64,
    pub g_e1: f64,
    pub escape: f64,
    pub std_error: f64,
    pub walks: u64,
}

/// Estimate `g(0)` by visit counts of `walks` walks stopped at Euclidean
/// radius `exit_radius`.
pub fn green_origin_monte_carlo<S: DirectionSource>(d: usize, walks: u64, exit_radius: f64, src: &mut S) -> Result<McGreenEstimate> {
    let t = green_monte_carlo(d, 1, walks, exit_radius, src)?;
    let g_e1 = t.g_e1();
    let g0 = 1.0 + g_e1;
    Ok(McGreenEstimate {
        g0,
        g0_direct: t.g0(),
        g0_direct_std_error: t.std_errors[0],
        g_e1,
        escape: 1.0 / g0,
        std_error: t.std_errors[1],
        walks,
    })
}

/// `Z_N(0, 0) = N^{-d} Σ_{k ≠ 0} 1 / (1 - φ(k))` with
/// `φ(k) = d^{-1} Σ_i cos(2π k_i / N)`: the fundamental matrix of the walk on
/// `T_N` at the diagonal (group inverse when `N` is even), so that
/// `E_π H_x = N^d Z_N(0, 0)`. Tends to `g(0)`.
pub fn torus_green_origin(d: usize, n: u32) -> Result<f64> {
    let geo = TorusGeometry::new(d, n)?;
    let cos: Vec<f64> = (0..n).map(|k| (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()).collect();
    let mut sum = 0.0;
    for l in geo.all_labels() {
        let phi = (0..d).map(|a| cos[geo.label_coord(l, a) as usize]).sum::<f64>() / d as f64;
        if l != 0 {
            sum += 1.0 / (1.0 - phi);
        }
    }
    Ok(sum / geo.volume() as f64)
}

/// `g(0)` for `d = 3` (Watson's integral).
pub const WATSON_G0: f64 = 1.516_386_059_151_978;

/// Constants derived from the Green function.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Constants {
    pub d: usize,
    pub g0: f64,
    pub g_e1: f64,
    /// `c_4 = 2 g(0) / (g(0) + g(e_1))`.
    pub c4: f64,
    /// `c_3 = (1 + c_4) / 2`.
    pub c3: f64,
    /// Escape probability `Es_d = 1 / g(0)`.
    pub escape: f64,
}

impl Constants {
    pub fn from_values(d: usize, g0: f64, g_e1: f64) -> Result<Constants> {
        let c4 = 2.0 * g0 / (g0 + g_e1);
        let c3 = 0.5 * (1.0 + c4);
        if !(c4 > 1.0 && c3 > 1.0 && c3 < c4) {
            return Err(Error::Parameter(format!("inconsistent Green values g0={g0}, g_e1={g_e1}")));
        }
        Ok(Constants { d, g0, g_e1, c4, c3, escape: 1.0 / g0 })
    }

    /// Reference values for `d = 3`, with `g(e_1) = g(0) - 1`.
    pub fn watson() -> Constants {
        Constants::from_values(3, WATSON_G0, WATSON_G0 - 1.0).expect("valid reference values")
    }

    pub fn from_table(t: &GreenTable) -> Result<Constants> {
        Constants::from_values(t.d, t.g0(), t.g_e1())
    }
}

/// Which points carry unknowns in the capacity solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapacitySupport {
    /// Internal boundary only: the equilibrium measure vanishes elsewhere.
    InternalBoundary,
    /// Every point of `K`.
    Full,
}

/// Equilibrium measure and capacity of a finite set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CapacityResult {
    pub set: Vec<LatticePoint>,
    /// `e_K(x)` for each point of `set`, in the same order.
    pub equilibrium: Vec<f64>,
    pub capacity: f64,
    /// Largest `|Σ_y g(x - y) e(y) - 1|` over `x ∈ K`.
    pub residual: f64,
    pub condition_estimate: f64,
}

impl CapacityResult {
    /// `ē_K = e_K / cap(K)`.
    pub fn normalized(&self) -> Vec<f64> {
        self.equilibrium.iter().map(|e| e / self.capacity).collect()
    }

    /// Indices into `set` of the points with positive mass.
    pub fn support(&self) -> Vec<usize> {
        (0..self.set.len()).filter(|&i| self.equilibrium[i] > 0.0).collect()
    }

    /// `P_z(H_K < ∞) = Σ_y g(z - y) e_K(y)`.
    pub fn hitting_probability(&self, green: &GreenTable, z: &LatticePoint) -> f64 {
        self.set
            .iter()
            .zip(&self.equilibrium)
            .filter(|(_, &e)| e > 0.0)
            .map(|(y, &e)| green.value(&z.sub(y)) * e)
            .sum()
    }
}

/// Largest set accepted by the dense solver.
pub const MAX_DENSE: usize = 4000;

/// Solve for the equilibrium measure of `K ⊂ Z^d`.
pub fn equilibrium_and_capacity(k: &[LatticePoint], green: &GreenTable, support: CapacitySupport) -> Result<CapacityResult> {
    if k.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut set: Vec<LatticePoint> = k.to_vec();
    set.sort_by(|a, b| a.coords().cmp(b.coords()));
    set.dedup();
    let members: HashMap<LatticePoint, usize> = set.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let d = green.d;
    let unknowns: Vec<usize> = match support {
        CapacitySupport::Full => (0..set.len()).collect(),
        CapacitySupport::InternalBoundary => (0..set.len())
            .filter(|&i| {
                (0..d).any(|a| {
                    [-1, 1].iter().any(|&s| {
                        let mut y = set[i];
                        y.set(a, y.get(a) + s);
                        !members.contains_key(&y)
                    })
                })
            })
            .collect(),
    };
    let m = unknowns.len();
    if m > MAX_DENSE {
        return Err(Error::SetTooLarge { size: m, limit: MAX_DENSE });
    }
    let g = DMatrix::from_fn(m, m, |i, j| green.value(&set[unknowns[i]].sub(&set[unknowns[j]])));
    let chol = g.clone().cholesky().ok_or(Error::Singular { condition: f64::INFINITY })?;
    let l = chol.l();
    let diag: Vec<f64> = (0..m).map(|i| l[(i, i)]).collect();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let condition_estimate = (hi / lo).powi(2);
    if !condition_estimate.is_finite() || condition_estimate > 1e12 {
        return Err(Error::Singular { condition: condition_estimate });
    }
    let e = chol.solve(&DVector::from_element(m, 1.0));
    let mut equilibrium = vec![0.0; set.len()];
    for (i, &u) in unknowns.iter().enumerate() {
        equilibrium[u] = e[i];
    }
    let capacity: f64 = equilibrium.iter().sum();
    let mut residual = 0f64;
    for x in &set {
        let s: f64 = unknowns.iter().map(|&u| green.value(&x.sub(&set[u])) * equilibrium[u]).sum();
        residual = residual.max((s - 1.0).abs());
    }
    Ok(CapacityResult { set, equilibrium, capacity, residual, condition_estimate })
}

/// Lift a torus set to `Z^d`: along each axis the circle is cut at the
/// largest gap. Sets whose lift does not fit in a cube of side `N - 1` are
/// rejected.
pub fn lift_torus_set(geo: &TorusGeometry, set: &[Label]) -> Result<Vec<LatticePoint>> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = geo.N() as i64;
    let d = geo.d();
    let mut shift = vec![0i64; d];
    for (a, sh) in shift.iter_mut().enumerate() {
        let mut cs: Vec<i64> = set.iter().map(|&l| geo.label_coord(l, a) as i64).collect();
        cs.sort_unstable();
        cs.dedup();
        // Largest gap between consecutive occupied coordinates, cyclically.
        let mut best = (cs[0] + n - cs[cs.len() - 1], cs[0]);
        for w in cs.windows(2) {
            best = best.max((w[1] - w[0], w[1]));
        }
        let extent = n - best.0;
        if extent > n - 2 {
            return Err(Error::DiameterTooLarge(format!("axis {a} spans {} of {n}", extent + 1)));
        }
        *sh = best.1;
    }
    Ok(set
        .iter()
        .map(|&l| {
            let mut p = LatticePoint::zero(d);
            for a in 0..d {
                p.set(a, (geo.label_coord(l, a) as i64 - shift[a]).rem_euclid(n));
            }
            p
        })
        .collect())
}

/// Capacity of a torus set of diameter below `N`, via its lift.
pub fn torus_capacity(geo: &TorusGeometry, set: &[Label], green: &GreenTable) -> Result<CapacityResult> {
    let lifted = lift_torus_set(geo, set)?;
    equilibrium_and_capacity(&lifted, green, CapacitySupport::InternalBoundary)
}

/// The cube `Q(0, R)` as a point list.
pub fn cube_points(d: usize, side: u64) -> Vec<LatticePoint> {
    crate::torus::LatticeCube::new(LatticePoint::zero(d), side).expect("side ≥ 1").points()
}

/// Draw an index from a discrete distribution given by cumulative weights.
pub fn sample_cumulative<R: RngCore>(cum: &[f64], rng: &mut R) -> usize {
    let total = *cum.last().expect("nonempty");
    let u = rand::Rng::gen::<f64>(rng) * total;
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::RngStream;
    use std::sync::OnceLock;

    fn table() -> &'static GreenTable {
        static T: OnceLock<GreenTable> = OnceLock::new();
        T.get_or_init(|| GreenTable::solve(3, 16, 48, 1e-12).unwrap())
    }

    #[test]
    fn leading_constant_d3() {
        assert!((green_leading_constant(3) - 3.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-14);
    }

    #[test]
    fn wedge_indexing_is_a_bijection() {
        for d in 3..=5 {
            let w = Wedge::new(d, 6);
            let tuples = w.tuples();
            for (i, a) in tuples.iter().enumerate() {
                assert_eq!(w.index_sorted(&a[..d]), i);
                assert!(a[..d].windows(2).all(|p| p[0] <= p[1]));
            }
            // Orbit sizes add up to the full box.
            let total: f64 = tuples.iter().map(|a| w.orbit(&a[..d])).sum();
            assert_eq!(total as usize, 13usize.pow(d as u32));
        }
    }

    #[test]
    fn harmonic_identity_at_origin() {
        let t = table();
        assert!((t.g0() - t.g_e1() - 1.0).abs() < 1e-9);
        assert!(t.harmonicity_defect() < 1e-9);
    }

    #[test]
    fn known_value_d3() {
        // Watson's integral: g(0) = 1.516386...
        assert!((table().g0() - 1.516386).abs() < 1e-4, "{}", table().g0());
    }

    #[test]
    fn symmetric_lookup() {
        let t = table();
        let v = t.value_coords(&[1, -2, 3]);
        for p in [[3, 2, 1], [-1, 3, -2], [2, 1, -3]] {
            assert_eq!(t.value_coords(&p), v);
        }
    }

    #[test]
    fn monotone_in_l1_shells() {
        let t = table();
        let shell_max = |n: i64| {
            let mut best = 0f64;
            for a in -n..=n {
                for b in -n..=n {
                    let c = n - a.abs() - b.abs();
                    if c >= 0 {
                        best = best.max(t.value_coords(&[a, b, c]));
                    }
                }
            }
            best
        };
        for n in 0..12 {
            assert!(shell_max(n + 1) <= shell_max(n));
        }
    }

    #[test]
    fn far_field_is_accurate_on_the_table() {
        let t = table();
        for x in [[10i64, 0, 0], [7, 7, 0], [6, 6, 6], [12, 3, 1]] {
            let p = LatticePoint::new(&x);
            let rel = (t.value(&p) - green_asymptotic(&p)).abs() / t.value(&p);
            assert!(rel < 2e-4, "{x:?}: {rel}");
        }
    }

    #[test]
    fn cap_single_point() {
        let t = table();
        let c = equilibrium_and_capacity(&[LatticePoint::zero(3)], t, CapacitySupport::InternalBoundary).unwrap();
        assert!((c.capacity * t.g0() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_two_points() {
        let t = table();
        let k = [LatticePoint::zero(3), LatticePoint::unit(3, 0)];
        let c = equilibrium_and_capacity(&k, t, CapacitySupport::InternalBoundary).unwrap();
        let expect = 2.0 / (t.g0() + t.g_e1());
        assert!((c.capacity - expect).abs() / expect < 1e-12);
        assert!(c.normalized().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn cube_capacity_band_and_interior() {
        let t = table();
        let mut ratios = Vec::new();
        for r in [3u64, 5, 9] {
            let k = cube_points(3, r);
            let c = equilibrium_and_capacity(&k, t, CapacitySupport::InternalBoundary).unwrap();
            assert!(c.residual < 1e-9, "residual {}", c.residual);
            assert!(c.equilibrium.iter().all(|&e| e >= 0.0));
            ratios.push(c.capacity / r as f64);
        }
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo < 4.0);
        // Full solve: interior masses vanish.
        let k = cube_points(3, 4);
        let c = equilibrium_and_capacity(&k, t, CapacitySupport::Full).unwrap();
        let b = equilibrium_and_capacity(&k, t, CapacitySupport::InternalBoundary).unwrap();
        assert!((c.capacity - b.capacity).abs() < 1e-9);
        // Q(0,4) spans offsets -1..=2, so the interior is {0,1}^3.
        let mut interior = 0;
        for (p, e) in c.set.iter().zip(&c.equilibrium) {
            if p.coords().iter().all(|&v| v == 0 || v == 1) {
                assert!(e.abs() < 1e-9);
                interior += 1;
            }
        }
        assert_eq!(interior, 8);
    }

    #[test]
    fn capacity_is_monotone() {
        let t = table();
        let mut rng = RngStream::new(4, "capmono", 0);
        for _ in 0..20 {
            let mut big: Vec<LatticePoint> = Vec::new();
            while big.len() < 30 {
                let p = LatticePoint::new(&[
                    rand::Rng::gen_range(&mut rng, -3..=3),
                    rand::Rng::gen_range(&mut rng, -3..=3),
                    rand::Rng::gen_range(&mut rng, -3..=3),
                ]);
                if !big.contains(&p) {
                    big.push(p);
                }
            }
            let small = &big[..15];
            let cb = equilibrium_and_capacity(&big, t, CapacitySupport::Full).unwrap();
            let cs = equilibrium_and_capacity(small, t, CapacitySupport::Full).unwrap();
            assert!(cs.capacity <= cb.capacity + 1e-12);
        }
    }

    #[test]
    fn empty_set_rejected() {
        assert_eq!(equilibrium_and_capacity(&[], table(), CapacitySupport::Full).unwrap_err(), Error::EmptySet);
    }

    #[test]
    fn constants_d3() {
        let c = Constants::from_table(table()).unwrap();
        assert!((c.c4 - 2.0 * c.g0 / (2.0 * c.g0 - 1.0)).abs() < 1e-9);
        assert!(c.c4 > 1.0 && 1.0 < c.c3 && c.c3 < c.c4);
        assert!((c.escape * c.g0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_agrees_near_origin() {
        let mut rng = RngStream::new(9, "green-mc", 0);
        let mc = green_monte_carlo(3, 1, 200_000, 8.0, &mut rng).unwrap();
        let t = table();
        for (a, v) in mc.entries() {
            let x = LatticePoint::new(&a.iter().map(|&c| c as i64).collect::<Vec<_>>());
            let i = mc.wedge().index(x.coords()).unwrap();
            let se = mc.std_errors[i];
            assert!((v - t.value(&x)).abs() < 4.0 * se + 2e-4, "{a:?}: {v} vs {}", t.value(&x));
        }
        let est = green_origin_monte_carlo(3, 1000, 6.0, &mut rng).unwrap();
        assert!((est.g0 - est.g_e1 - 1.0).abs() < 1e-9);
        assert!((est.g0 - est.g0_direct).abs() < 4.0 * est.g0_direct_std_error + 0.01);
    }

    #[test]
    fn torus_lift() {
        let g = TorusGeometry::new(3, 8).unwrap();
        let l = |c: [u32; 3]| g.label(&g.point(&c).unwrap());
        let lifted = lift_torus_set(&g, &[l([7, 0, 0]), l([0, 0, 0]), l([1, 0, 0])]).unwrap();
        let xs: Vec<i64> = lifted.iter().map(|p| p.get(0)).collect();
        assert_eq!(xs, vec![0, 1, 2]);
        let row: Vec<Label> = (0..8).map(|i| l([i, 0, 0])).collect();
        assert!(matches!(lift_torus_set(&g, &row), Err(Error::DiameterTooLarge(_))));
        let c = torus_capacity(&g, &[l([7, 0, 0]), l([0, 0, 0])], table()).unwrap();
        assert!((c.capacity - 2.0 / (table().g0() + table().g_e1())).abs() < 1e-12);
    }

    #[test]
    fn json_roundtrip_and_cache() {
        let t = GreenTable::solve(3, 4, 12, 1e-12).unwrap();
        let back = GreenTable::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back.digest(), t.digest());
        assert_eq!(back.value_coords(&[1, 2, 3]), t.value_coords(&[1, 2, 3]));
        let dir = tempfile::tempdir().unwrap();
        let a = GreenTable::cached(3, 4, 12, 1e-12, Some(dir.path())).unwrap();
        let b = GreenTable::cached(3, 4, 12, 1e-12, Some(dir.path())).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn radius_error() {
        let t = GreenTable::solve(3, 4, 12, 1e-12).unwrap();
        assert!(matches!(t.get(&LatticePoint::new(&[5, 0, 0])), Err(Error::GreenRadius { radius: 4, requested: 5 })));
    }
}
