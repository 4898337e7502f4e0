//! Late points and the bookkeeping around them: the proximity graph `G(F)`,
//! the surgery parameters, distances to the walk segment `ω(T_2, T_3]`, the
//! modified total distance, niceness and good paths.

use std::fmt;
use std::str::FromStr;

use petgraph::unionfind::UnionFind;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::Constants;
use crate::torus::{Label, TorusGeometry};
use crate::walk::Trajectory;

/// How `l_N` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LnPolicy {
    /// `⌊(ln N)^4⌋`.
    Formula,
    /// `min(⌊(ln N)^4⌋, cap)`, with `cap = ⌊N/8⌋` when not given.
    Clamped(Option<usize>),
}

impl Default for LnPolicy {
    fn default() -> Self {
        LnPolicy::Clamped(None)
    }
}

impl LnPolicy {
    pub fn value(&self, n: u32) -> usize {
        let formula = ((n as f64).ln().powi(4)).floor().max(1.0) as usize;
        match *self {
            LnPolicy::Formula => formula,
            LnPolicy::Clamped(cap) => formula.min(cap.unwrap_or(n as usize / 8)).max(1),
        }
    }
}

impl fmt::Display for LnPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LnPolicy::Formula => write!(f, "paper"),
            LnPolicy::Clamped(None) => write!(f, "clamped"),
            LnPolicy::Clamped(Some(v)) => write!(f, "clamped:{v}"),
        }
    }
}

impl FromStr for LnPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(LnPolicy::Formula),
            "clamped" => Ok(LnPolicy::Clamped(None)),
            _ => {
                let v = s
                    .strip_prefix("clamped:")
                    .and_then(|v| v.parse::<usize>().ok())
                    .filter(|&v| v >= 1)
                    .ok_or_else(|| Error::Parameter(format!("lN policy `{s}`: expected paper, clamped or clamped:<v>=1..")))?;
                Ok(LnPolicy::Clamped(Some(v)))
            }
        }
    }
}

/// The graph on `F` joining points at `d_inf ≤ 3 l_N`, with its components
/// and their label-minimal representatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxiliaryGraph {
    l_n: usize,
    vertices: Vec<Label>,
    /// Component index of each vertex, parallel to `vertices`.
    component_index: Vec<u32>,
    /// Sorted members; components are ordered by representative label.
    components: Vec<Vec<Label>>,
    edges: u64,
}

fn prepare_vertices(geo: &TorusGeometry, f: &[Label], l_n: usize) -> Result<Vec<Label>> {
    if l_n < 1 {
        return Err(Error::Parameter("l_N must be at least 1".into()));
    }
    let mut v = f.to_vec();
    v.sort_unstable();
    v.dedup();
    if let Some(&bad) = v.iter().find(|&&l| l >= geo.volume()) {
        return Err(Error::Geometry(format!("label {bad} outside the torus")));
    }
    Ok(v)
}

impl AuxiliaryGraph {
    /// Builds `G(F)`, scanning the `(6 l_N + 1)^d` stencil around each point
    /// unless comparing all pairs is cheaper.
    pub fn new(geo: &TorusGeometry, f: &[Label], l_n: usize) -> Result<Self> {
        let width = (6 * l_n as u64 + 1).min(geo.N() as u64);
        let stencil = width.saturating_pow(geo.d() as u32);
        if stencil < f.len() as u64 {
            Self::stencil(geo, f, l_n)
        } else {
            Self::pairwise(geo, f, l_n)
        }
    }

    /// Union-find over a stencil scan.
    pub fn stencil(geo: &TorusGeometry, f: &[Label], l_n: usize) -> Result<Self> {
        let vertices = prepare_vertices(geo, f, l_n)?;
        let index: FxHashMap<Label, u32> = vertices.iter().enumerate().map(|(i, &l)| (l, i as u32)).collect();
        let n = geo.N() as i64;
        let r = 3 * l_n as i64;
        let offsets: Vec<i64> = if 2 * r + 1 >= n { (0..n).collect() } else { (-r..=r).collect() };
        let d = geo.d();
        let mut uf = UnionFind::new(vertices.len());
        let mut edges = 0u64;
        let mut digits = vec![0usize; d];
        for (i, &l) in vertices.iter().enumerate() {
            let base: Vec<i64> = (0..d).map(|a| geo.label_coord(l, a) as i64).collect();
            digits.iter_mut().for_each(|x| *x = 0);
            loop {
                let mut label = 0u64;
                for a in 0..d {
                    let c = (base[a] + offsets[digits[a]]).rem_euclid(n);
                    label = label * n as u64 + c as u64;
                }
                if let Some(&j) = index.get(&(label as Label)) {
                    if j as usize > i {
                        edges += 1;
                        uf.union(i, j as usize);
                    }
                }
                let mut a = d;
                loop {
                    if a == 0 {
                        break;
                    }
                    a -= 1;
                    digits[a] += 1;
                    if digits[a] < offsets.len() {
                        break;
                    }
                    digits[a] = 0;
                }
                if digits.iter().all(|&x| x == 0) {
                    break;
                }
            }
        }
        Ok(Self::assemble(vertices, uf, edges, l_n))
    }

    /// Union-find over all pairs. Quadratic; the reference construction.
    pub fn pairwise(geo: &TorusGeometry, f: &[Label], l_n: usize) -> Result<Self> {
        let vertices = prepare_vertices(geo, f, l_n)?;
        let r = 3 * l_n as u32;
        let mut uf = UnionFind::new(vertices.len());
        let mut edges = 0u64;
        for i in 0..vertices.len() {
            for j in i + 1..vertices.len() {
                if geo.dist_inf_labels(vertices[i], vertices[j]) <= r {
                    edges += 1;
                    uf.union(i, j);
                }
            }
        }
        Ok(Self::assemble(vertices, uf, edges, l_n))
    }

    fn assemble(vertices: Vec<Label>, uf: UnionFind<usize>, edges: u64, l_n: usize) -> Self {
        let roots = uf.into_labeling();
        // Vertices are sorted, so the first vertex met in each class is its
        // representative and components come out ordered by it.
        let mut slot: FxHashMap<usize, u32> = FxHashMap::default();
        let mut components: Vec<Vec<Label>> = Vec::new();
        let mut component_index = Vec::with_capacity(vertices.len());
        for (i, &l) in vertices.iter().enumerate() {
            let c = *slot.entry(roots[i]).or_insert_with(|| {
                components.push(Vec::new());
                (components.len() - 1) as u32
            });
            components[c as usize].push(l);
            component_index.push(c);
        }
        AuxiliaryGraph { l_n, vertices, component_index, components, edges }
    }

    pub fn l_n(&self) -> usize {
        self.l_n
    }

    /// Edge threshold `3 l_N`.
    pub fn radius(&self) -> u32 {
        3 * self.l_n as u32
    }

    pub fn vertices(&self) -> &[Label] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// `|E(F)|`.
    pub fn edge_count(&self) -> u64 {
        self.edges
    }

    /// `C(F)`, ordered by representative.
    pub fn components(&self) -> &[Vec<Label>] {
        &self.components
    }

    /// `R(F)`, increasing.
    pub fn representatives(&self) -> Vec<Label> {
        self.components.iter().map(|c| c[0]).collect()
    }

    pub fn component_of(&self, l: Label) -> Option<&[Label]> {
        let i = self.vertices.binary_search(&l).ok()?;
        Some(&self.components[self.component_index[i] as usize])
    }

    pub fn is_representative(&self, l: Label) -> bool {
        self.component_of(l).is_some_and(|c| c[0] == l)
    }
}

/// Free parameters of the lower-bound construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurgeryConfig {
    pub gamma: f64,
    pub delta: f64,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "M0")]
    pub m0: f64,
}

impl Default for SurgeryConfig {
    fn default() -> Self {
        SurgeryConfig { gamma: 0.9, delta: 0.25, eps: 0.5, k: 4.0, m0: 1.0 }
    }
}

/// `γ_0 = (d + 2) / (2d)`.
pub fn gamma0(d: usize) -> f64 {
    (d as f64 + 2.0) / (2.0 * d as f64)
}

/// Parameters and derived time points for a torus and a choice of
/// `γ, δ, ε, K, M_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryParams {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: u32,
    pub gamma: f64,
    pub delta: f64,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "M0")]
    pub m0: f64,
    pub g0: f64,
    pub g_e1: f64,
    pub l_n: usize,
    pub l_policy: LnPolicy,
    /// `u_N = g(0) log N^d`, so that `u_N N^d = t_cov`.
    pub u_n: f64,
    pub alpha_n: f64,
    pub beta_n: f64,
    pub t_cov: f64,
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
    pub t4: usize,
    pub c3: f64,
    pub c4: f64,
}

impl SurgeryParams {
    pub fn new(geo: &TorusGeometry, cfg: &SurgeryConfig, constants: &Constants, policy: LnPolicy) -> Result<Self> {
        let SurgeryConfig { gamma, delta, eps, k, m0 } = *cfg;
        if constants.d != geo.d() {
            return Err(Error::Parameter(format!("Green constants for d={} used on d={}", constants.d, geo.d())));
        }
        if geo.d() < 3 {
            return Err(Error::Parameter(format!("surgery needs d >= 3, got d={}", geo.d())));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Parameter(format!("gamma={gamma} outside (0,1)")));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::Parameter(format!("delta={delta} outside [0,1]")));
        }
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("eps={eps} must be positive")));
        }
        if !(k > 6.0 * eps) {
            return Err(Error::Parameter(format!("K={k} must exceed 6 eps = {}", 6.0 * eps)));
        }
        if !(m0 > 0.0) {
            return Err(Error::Parameter(format!("M0={m0} must be positive")));
        }
        let vol = geo.volume() as f64;
        let t_cov = constants.g0 * vol * geo.log_volume();
        let u_n = constants.g0 * geo.log_volume();
        let alpha_n = gamma - k / u_n;
        let beta_n = gamma - 5.0 * eps / u_n;
        if !(beta_n > alpha_n && alpha_n > 0.0) {
            return Err(Error::Parameter(format!(
                "need beta_N > alpha_N > 0, got alpha_N={alpha_n}, beta_N={beta_n} (N too small for K={k})"
            )));
        }
        let time = |x: f64| x.floor() as usize;
        Ok(SurgeryParams {
            d: geo.d(),
            n: geo.N(),
            gamma,
            delta,
            eps,
            k,
            m0,
            g0: constants.g0,
            g_e1: constants.g_e1,
            l_n: policy.value(geo.N()),
            l_policy: policy,
            u_n,
            alpha_n,
            beta_n,
            t_cov,
            t1: time(gamma * t_cov - k * vol),
            t2: time(gamma * t_cov - 5.0 * eps * vol),
            t3: time(gamma * t_cov - eps * vol),
            t4: time(gamma * t_cov),
            c3: constants.c3,
            c4: constants.c4,
        })
    }

    /// Rejects `γ ≤ γ_0`.
    pub fn require_sharp_regime(&self) -> Result<()> {
        let g0 = gamma0(self.d);
        if self.gamma > g0 {
            Ok(())
        } else {
            Err(Error::Parameter(format!("gamma={} outside ({g0}, 1)", self.gamma)))
        }
    }

    pub fn geometry(&self) -> Result<TorusGeometry> {
        TorusGeometry::new(self.d, self.n)
    }

    /// `J(F, M_0) = 2d M_0 |F| N^{-dγ}`.
    pub fn j(&self, f_size: usize) -> f64 {
        2.0 * self.d as f64 * self.m0 * f_size as f64 * (self.n as f64).powf(-(self.d as f64) * self.gamma)
    }

    /// `ε N^d`.
    pub fn eps_volume(&self) -> f64 {
        self.eps * (self.n as f64).powi(self.d as i32)
    }

    /// Checks `J(F, M_0) + 2 ≤ ε N^d`.
    pub fn check_budget(&self, f_size: usize) -> Result<()> {
        let j = self.j(f_size);
        if j + 2.0 <= self.eps_volume() {
            Ok(())
        } else {
            Err(Error::Precondition(format!("J + 2 = {} exceeds eps N^d = {}", j + 2.0, self.eps_volume())))
        }
    }

    /// `M_0` for which `J(F, M_0) = 2d · mdist`.
    /// Rounded up so that the float `J` is never below `2d · mdist`.
    pub fn m0_for(&self, f_size: usize, mdist: u64) -> f64 {
        let m0 = mdist as f64 * (self.n as f64).powf(self.d as f64 * self.gamma) / f_size as f64;
        m0 * (1.0 + 8.0 * f64::EPSILON)
    }
}

/// Vertex set of a walk segment, answering nearest-point queries by
/// growing `d_inf` shells around the query.
pub struct SegmentIndex {
    geo: TorusGeometry,
    bits: Vec<u64>,
    empty: bool,
}

impl SegmentIndex {
    /// Vertices of `ω(t_from, t_to]`.
    pub fn new(omega: &Trajectory, t_from: usize, t_to: usize) -> Result<Self> {
        if t_from >= t_to || t_to > omega.len() {
            return Err(Error::EmptySegment { from: t_from, to: t_to });
        }
        let geo = *omega.geometry();
        let mut bits = vec![0u64; (geo.volume() as usize).div_ceil(64)];
        for &p in &omega.positions()[t_from + 1..=t_to] {
            bits[p as usize >> 6] |= 1 << (p & 63);
        }
        Ok(SegmentIndex { geo, bits, empty: false })
    }

    #[inline]
    pub fn contains(&self, l: Label) -> bool {
        self.bits[l as usize >> 6] >> (l & 63) & 1 == 1
    }

    /// `(Near(x), r_x)`; ties go to the smallest label.
    pub fn nearest(&self, x: Label) -> (Label, u32) {
        debug_assert!(!self.empty);
        if self.contains(x) {
            return (x, 0);
        }
        let d = self.geo.d();
        let n = self.geo.N() as i64;
        let base: Vec<i64> = (0..d).map(|a| self.geo.label_coord(x, a) as i64).collect();
        let mut off = vec![0i64; d];
        for r in 1..=(n / 2) {
            let mut best = Label::MAX;
            off.iter_mut().for_each(|o| *o = -r);
            loop {
                if off.iter().any(|o| o.abs() == r) {
                    let mut label = 0u64;
                    for a in 0..d {
                        label = label * n as u64 + (base[a] + off[a]).rem_euclid(n) as u64;
                    }
                    let label = label as Label;
                    if label < best && self.contains(label) {
                        best = label;
                    }
                }
                let mut a = d;
                let mut done = true;
                while a > 0 {
                    a -= 1;
                    if off[a] < r {
                        off[a] += 1;
                        done = false;
                        break;
                    }
                    off[a] = -r;
                }
                if done {
                    break;
                }
            }
            if best != Label::MAX {
                return (best, r as u32);
            }
        }
        unreachable!("segment index is nonempty")
    }
}

/// `Mdist(F) = Σ_{x ∈ R(F)} (r_x + 2) + 3 l_N (|F| - |R(F)|)`.
pub fn mdist(graph: &AuxiliaryGraph, seg: &SegmentIndex) -> u64 {
    let reps = graph.components().len() as u64;
    let near: u64 = graph.components().iter().map(|c| seg.nearest(c[0]).1 as u64 + 2).sum();
    near + 3 * graph.l_n() as u64 * (graph.len() as u64 - reps)
}

/// Sorted membership mask of a label set.
pub fn label_mask(geo: &TorusGeometry, set: &[Label]) -> Vec<bool> {
    let mut m = vec![false; geo.volume() as usize];
    for &l in set {
        m[l as usize] = true;
    }
    m
}

/// Points of `F` not visited by `ω[0, t]`.
pub fn late_in(omega: &Trajectory, f: &[Label], t: usize) -> Vec<Label> {
    let geo = omega.geometry();
    let mut seen = vec![false; geo.volume() as usize];
    for &p in &omega.positions()[..=t.min(omega.len())] {
        seen[p as usize] = true;
    }
    let mut late: Vec<Label> = f.iter().copied().filter(|&l| !seen[l as usize]).collect();
    late.sort_unstable();
    late.dedup();
    late
}

/// Regularity test `(1 - υ)|F| N^{-dα} ≤ count ≤ (1 + υ)|F| N^{-dα}`,
/// compared as reals.
pub fn is_regular(count: usize, f_size: usize, n: u32, d: usize, alpha: f64, upsilon: f64) -> bool {
    let mean = f_size as f64 * (n as f64).powf(-(d as f64) * alpha);
    let c = count as f64;
    (1.0 - upsilon) * mean <= c && c <= (1.0 + upsilon) * mean
}

/// The three niceness conditions on an `α_N`-late set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiceVerdict {
    pub bulk_late: usize,
    pub bulk_size: usize,
    pub edge_late: usize,
    pub edge_size: usize,
    pub edge_representatives: usize,
    pub separation_threshold: f64,
    pub bulk_regular: bool,
    pub edge_regular: bool,
    pub edge_separated: bool,
}

impl NiceVerdict {
    pub fn is_nice(&self) -> bool {
        self.bulk_regular && self.edge_regular && self.edge_separated
    }
}

/// Evaluates `(δ, ε)`-niceness of `late` (the `α_N`-late set).
pub fn is_nice(geo: &TorusGeometry, late: &[Label], params: &SurgeryParams) -> Result<NiceVerdict> {
    let bulk = geo.bulk_mask(params.delta)?;
    let bulk_size = bulk.iter().filter(|&&b| b).count();
    let edge_size = bulk.len() - bulk_size;
    let (lb, le): (Vec<Label>, Vec<Label>) = late.iter().partition(|&&l| bulk[l as usize]);
    let graph = AuxiliaryGraph::new(geo, &le, params.l_n)?;
    let reps = graph.components().len();
    let threshold = (params.n as f64).powf(params.d as f64 * (1.0 - params.c3 * params.alpha_n));
    Ok(NiceVerdict {
        bulk_late: lb.len(),
        bulk_size,
        edge_late: le.len(),
        edge_size,
        edge_representatives: reps,
        separation_threshold: threshold,
        bulk_regular: is_regular(lb.len(), bulk_size, params.n, params.d, params.alpha_n, params.eps),
        edge_regular: is_regular(le.len(), edge_size, params.n, params.d, params.alpha_n, 0.5),
        edge_separated: ((le.len() - reps) as f64) <= threshold,
    })
}

/// `β_N`-late points of a path of length at least `T_3`, with their
/// components and nearest points on `ω(T_2, T_3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LateAnalysis {
    pub late: Vec<Label>,
    pub graph: AuxiliaryGraph,
    /// `(Near(ω, x), r_x)` for each late point, parallel to `late`.
    pub near: Vec<(Label, u32)>,
}

impl LateAnalysis {
    pub fn new(omega: &Trajectory, f: &[Label], params: &SurgeryParams) -> Result<Self> {
        if omega.len() < params.t3 {
            return Err(Error::Precondition(format!("path length {} below T_3 = {}", omega.len(), params.t3)));
        }
        let late = late_in(omega, f, params.t2);
        let graph = AuxiliaryGraph::new(omega.geometry(), &late, params.l_n)?;
        let seg = SegmentIndex::new(omega, params.t2, params.t3)?;
        let near = late.iter().map(|&x| seg.nearest(x)).collect();
        Ok(LateAnalysis { late, graph, near })
    }

    pub fn near_of(&self, x: Label) -> Option<(Label, u32)> {
        self.late.binary_search(&x).ok().map(|i| self.near[i])
    }

    pub fn max_r(&self) -> u32 {
        self.near.iter().map(|n| n.1).max().unwrap_or(0)
    }

    pub fn mdist(&self) -> u64 {
        let reps = self.graph.components().len() as u64;
        let near: u64 = self.graph.components().iter().map(|c| self.near_of(c[0]).unwrap().1 as u64 + 2).sum();
        near + 3 * self.graph.l_n() as u64 * (self.late.len() as u64 - reps)
    }
}

/// The three clauses of `(F, ε, M_0)`-goodness for one path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodVerdict {
    pub covers_complement: bool,
    pub islands_small: bool,
    pub cost_bounded: bool,
    pub mdist: u64,
    pub j: f64,
    pub analysis: LateAnalysis,
}

impl GoodVerdict {
    pub fn is_good(&self) -> bool {
        self.covers_complement && self.islands_small && self.cost_bounded
    }
}

/// Evaluates goodness of `ω` (of length exactly `T_3`) relative to the
/// sorted set `f`.
pub fn is_good_path(omega: &Trajectory, f: &[Label], params: &SurgeryParams) -> Result<GoodVerdict> {
    if omega.len() != params.t3 {
        return Err(Error::Precondition(format!("path length {} differs from T_3 = {}", omega.len(), params.t3)));
    }
    let geo = omega.geometry();
    let in_f = label_mask(geo, f);
    let mut seen = vec![false; geo.volume() as usize];
    for &p in omega.positions() {
        seen[p as usize] = true;
    }
    let covers_complement = seen.iter().zip(&in_f).all(|(&s, &f)| s || f);
    let analysis = LateAnalysis::new(omega, f, params)?;
    let islands_small = analysis.max_r() as usize <= params.l_n;
    let mdist = analysis.mdist();
    let j = params.j(f.len());
    Ok(GoodVerdict {
        covers_complement,
        islands_small,
        cost_bounded: 2.0 * params.d as f64 * mdist as f64 <= j,
        mdist,
        j,
        analysis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::{simulate_from, RngStream};
    use proptest::prelude::*;

    fn geo(n: u32) -> TorusGeometry {
        TorusGeometry::new(3, n).unwrap()
    }

    fn lbl(g: &TorusGeometry, c: [u32; 3]) -> Label {
        g.label(&g.point(&c).unwrap())
    }

    fn constants() -> Constants {
        Constants::from_values(3, 1.516386059, 0.516386059).unwrap()
    }

    #[test]
    fn ln_policy() {
        assert_eq!(LnPolicy::Formula.value(16), 59);
        assert_eq!(LnPolicy::Clamped(None).value(16), 2);
        assert_eq!(LnPolicy::Clamped(None).value(32), 4);
        assert_eq!(LnPolicy::Clamped(Some(7)).value(32), 7);
        assert_eq!(LnPolicy::Clamped(None).value(4), 1);
        for p in [LnPolicy::Formula, LnPolicy::Clamped(None), LnPolicy::Clamped(Some(3))] {
            assert_eq!(p.to_string().parse::<LnPolicy>().unwrap(), p);
        }
        assert!("clamped:0".parse::<LnPolicy>().is_err());
        assert!("loose".parse::<LnPolicy>().is_err());
    }

    #[test]
    fn empty_graph() {
        let g = geo(8);
        let a = AuxiliaryGraph::new(&g, &[], 1).unwrap();
        assert!(a.is_empty());
        assert_eq!(a.components().len(), 0);
        assert!(AuxiliaryGraph::new(&g, &[1], 0).is_err());
    }

    #[test]
    fn two_components() {
        let g = geo(32);
        let f = [lbl(&g, [0, 0, 0]), lbl(&g, [2, 0, 0]), lbl(&g, [10, 0, 0])];
        for a in [AuxiliaryGraph::stencil(&g, &f, 1).unwrap(), AuxiliaryGraph::pairwise(&g, &f, 1).unwrap()] {
            assert_eq!(a.components(), &[vec![f[0], f[1]], vec![f[2]]]);
            assert_eq!(a.representatives(), vec![f[0], f[2]]);
            assert_eq!(a.edge_count(), 1);
            assert!(a.is_representative(f[0]) && !a.is_representative(f[1]));
        }
    }

    #[test]
    fn spread_grid_is_discrete() {
        let g = geo(32);
        let f: Vec<Label> = (0..4).flat_map(|i| (0..4).map(move |j| (i * 8, j * 8))).map(|(a, b)| lbl(&g, [a, b, 0])).collect();
        let a = AuxiliaryGraph::new(&g, &f, 2).unwrap();
        assert_eq!(a.representatives().len(), f.len());
        assert_eq!(a.edge_count(), 0);
    }

    #[test]
    fn wraparound_edge() {
        let g = geo(32);
        let f = [lbl(&g, [0, 0, 0]), lbl(&g, [30, 0, 31])];
        let a = AuxiliaryGraph::stencil(&g, &f, 1).unwrap();
        assert_eq!(a.components().len(), 1);
    }

    fn random_set(g: &TorusGeometry, size: usize, seed: u64) -> Vec<Label> {
        use rand::Rng;
        let mut rng = RngStream::new(seed, "aux", 0);
        (0..size).map(|_| rng.gen_range(0..g.volume())).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn stencil_matches_pairwise(seed in 0u64..1000, size in 0usize..200, l in 1usize..4, n in 6u32..20) {
            let g = geo(n);
            let f = random_set(&g, size, seed);
            let a = AuxiliaryGraph::stencil(&g, &f, l).unwrap();
            let b = AuxiliaryGraph::pairwise(&g, &f, l).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.edge_count() >= (a.len() - a.components().len()) as u64);
            let reps = a.representatives();
            for i in 0..reps.len() {
                for j in i + 1..reps.len() {
                    prop_assert!(g.dist_inf_labels(reps[i], reps[j]) > a.radius());
                }
            }
            for c in a.components() {
                prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    fn constructed_path(g: &TorusGeometry, len: usize, seed: u64) -> Trajectory {
        let mut rng = RngStream::new(seed, "late-test", 0);
        simulate_from(g, 0, len as u64, &mut rng).unwrap().0
    }

    #[test]
    fn segment_index_matches_scan() {
        let g = geo(12);
        let w = constructed_path(&g, 400, 3);
        let seg = SegmentIndex::new(&w, 100, 300).unwrap();
        for x in g.all_labels() {
            assert_eq!(seg.nearest(x), w.nearest_on_segment(x, 100, 300).unwrap(), "x={x}");
        }
        assert!(SegmentIndex::new(&w, 300, 300).is_err());
    }

    fn path_through(g: &TorusGeometry, pts: &[Label]) -> Trajectory {
        Trajectory::from_positions(*g, pts.to_vec()).unwrap()
    }

    #[test]
    fn mdist_examples() {
        let g = geo(32);
        let o = lbl(&g, [0, 0, 0]);
        let e1 = lbl(&g, [1, 0, 0]);
        let w = path_through(&g, &[e1, o, e1]);
        let seg = SegmentIndex::new(&w, 0, 2).unwrap();
        assert_eq!(mdist(&AuxiliaryGraph::new(&g, &[o], 1).unwrap(), &seg), 2);
        let w = path_through(&g, &[o, e1]);
        let seg = SegmentIndex::new(&w, 0, 1).unwrap();
        let two = lbl(&g, [2, 0, 0]);
        assert_eq!(mdist(&AuxiliaryGraph::new(&g, &[two], 1).unwrap(), &seg), 3);
        // One two-point component at distance 1: (1 + 2) + 3 * 1 * 1.
        let three = lbl(&g, [3, 0, 0]);
        let a = AuxiliaryGraph::new(&g, &[two, three], 1).unwrap();
        assert_eq!(mdist(&a, &seg), 6);
        let naive = {
            let reps = a.representatives();
            reps.iter().map(|&x| w.nearest_on_segment(x, 0, 1).unwrap().1 as u64 + 2).sum::<u64>()
                + 3 * (a.len() - reps.len()) as u64
        };
        assert_eq!(naive, 6);
    }

    #[test]
    fn mdist_decreases_on_removal() {
        let g = geo(16);
        let w = constructed_path(&g, 600, 11);
        let seg = SegmentIndex::new(&w, 0, 600).unwrap();
        let l_n = 3;
        let f: Vec<Label> = g.all_labels().filter(|&x| seg.nearest(x).1 >= 1 && seg.nearest(x).1 + 2 <= 3 * l_n as u32).take(40).collect();
        let full = mdist(&AuxiliaryGraph::new(&g, &f, l_n).unwrap(), &seg);
        for i in 0..f.len() {
            let mut h = f.clone();
            h.remove(i);
            assert!(mdist(&AuxiliaryGraph::new(&g, &h, l_n).unwrap(), &seg) <= full);
        }
    }

    #[test]
    fn params_derivation() {
        let g = geo(32);
        let p = SurgeryParams::new(&g, &SurgeryConfig::default(), &constants(), LnPolicy::default()).unwrap();
        let vol = 32f64.powi(3);
        assert!((p.t_cov - 1.516386059 * vol * vol.ln()).abs() < 1e-6);
        assert!((p.beta_n * p.t_cov - (0.9 * p.t_cov - 2.5 * vol)).abs() < 1e-6);
        assert!((p.alpha_n * p.t_cov - (0.9 * p.t_cov - 4.0 * vol)).abs() < 1e-6);
        assert!(p.t1 <= p.t2 && p.t2 <= p.t3 && p.t3 <= p.t4);
        assert_eq!(p.t2, (0.9 * p.t_cov - 2.5 * vol).floor() as usize);
        assert_eq!(p.l_n, 4);
        let j = p.j(100);
        assert!((j - 6.0 * 100.0 * 32f64.powf(-2.7)).abs() < 1e-12);
        let bad = SurgeryConfig { k: 3.0, ..SurgeryConfig::default() };
        assert!(SurgeryParams::new(&g, &bad, &constants(), LnPolicy::default()).is_err());
        let bad = SurgeryConfig { gamma: 1.0, ..SurgeryConfig::default() };
        assert!(SurgeryParams::new(&g, &bad, &constants(), LnPolicy::default()).is_err());
        let small = SurgeryConfig { k: 40.0, ..SurgeryConfig::default() };
        assert!(SurgeryParams::new(&geo(4), &small, &constants(), LnPolicy::default()).is_err());
        assert!(p.require_sharp_regime().is_ok());
        let low = SurgeryParams::new(&g, &SurgeryConfig { gamma: 0.8, ..SurgeryConfig::default() }, &constants(), LnPolicy::default()).unwrap();
        assert!(low.require_sharp_regime().is_err());
        assert!((p.m0_for(100, 5) * 6.0 * 100.0 * 32f64.powf(-2.7) - 30.0).abs() < 1e-9);
    }

    fn naive_nice(g: &TorusGeometry, late: &[Label], p: &SurgeryParams) -> (bool, bool, bool) {
        let (bulk, edge) = g.bulk_edge_split(p.delta).unwrap();
        let lb = late.iter().filter(|x| bulk.binary_search(x).is_ok()).count();
        let le: Vec<Label> = late.iter().copied().filter(|x| edge.binary_search(x).is_ok()).collect();
        let a = AuxiliaryGraph::pairwise(g, &le, p.l_n).unwrap();
        let nd = |f: usize| f as f64 * (p.n as f64).powf(-3.0 * p.alpha_n);
        let thr = (p.n as f64).powf(3.0 * (1.0 - p.c3 * p.alpha_n));
        (
            (1.0 - p.eps) * nd(bulk.len()) <= lb as f64 && lb as f64 <= (1.0 + p.eps) * nd(bulk.len()),
            0.5 * nd(edge.len()) <= le.len() as f64 && le.len() as f64 <= 1.5 * nd(edge.len()),
            (le.len() - a.representatives().len()) as f64 <= thr,
        )
    }

    #[test]
    fn niceness() {
        let g = geo(32);
        let p = SurgeryParams::new(&g, &SurgeryConfig::default(), &constants(), LnPolicy::Clamped(Some(1))).unwrap();
        let v = is_nice(&g, &[], &p).unwrap();
        assert!(!v.bulk_regular && !v.is_nice());

        // Spread-out points hitting the expected counts in bulk and edge.
        let (bulk, edge) = g.bulk_edge_split(p.delta).unwrap();
        let target = |f: usize| (f as f64 * 32f64.powf(-3.0 * p.alpha_n)).round() as usize;
        let spread = |set: &[Label], k: usize| -> Vec<Label> {
            let mut out: Vec<Label> = Vec::new();
            for &x in set {
                if out.len() == k {
                    break;
                }
                if out.iter().all(|&y| g.dist_inf_labels(x, y) > 3 * p.l_n as u32) {
                    out.push(x);
                }
            }
            out
        };
        let kb = target(bulk.len());
        let mut late: Vec<Label> = bulk.iter().step_by(bulk.len() / kb).take(kb).copied().collect();
        let ke = target(edge.len());
        let mut e = spread(&edge, ke);
        let mut extra = edge.iter().step_by(97);
        while e.len() < ke {
            let x = *extra.next().unwrap();
            if !e.contains(&x) {
                e.push(x);
            }
        }
        late.extend(&e);
        late.sort_unstable();
        let v = is_nice(&g, &late, &p).unwrap();
        assert!(v.is_nice(), "{v:?}");
        let n = naive_nice(&g, &late, &p);
        assert_eq!((v.bulk_regular, v.edge_regular, v.edge_separated), n);

        // Two close edge points with a threshold below one.
        let tight = SurgeryParams { alpha_n: 0.85, ..p.clone() };
        assert!(32f64.powf(3.0 * (1.0 - tight.c3 * 0.85)) < 1.0);
        let x = edge[0];
        let y = *edge.iter().find(|&&y| g.dist_inf_labels(x, y) == 2).unwrap();
        let v = is_nice(&g, &[x, y], &tight).unwrap();
        assert!(!v.edge_separated);
        assert_eq!((v.bulk_regular, v.edge_regular, v.edge_separated), naive_nice(&g, &[x, y], &tight));
    }

    #[test]
    fn good_path_on_covering_walk() {
        let g = geo(4);
        let cfg = SurgeryConfig { gamma: 0.9, k: 4.0, eps: 0.5, ..SurgeryConfig::default() };
        let c = Constants::from_values(3, 1.516386059, 0.516386059).unwrap();
        let p = SurgeryParams::new(&g, &SurgeryConfig { k: 3.1, ..cfg }, &c, LnPolicy::default()).unwrap();
        // Boustrophedon sweep of the torus, then back and forth to length T_3.
        let mut pts = Vec::new();
        for a in 0..4u32 {
            for bi in 0..4u32 {
                let b = if a % 2 == 0 { bi } else { 3 - bi };
                for ci in 0..4u32 {
                    let c = if (a * 4 + bi) % 2 == 0 { ci } else { 3 - ci };
                    pts.push(lbl(&g, [a, b, c]));
                }
            }
        }
        let (u, v) = (pts[62], pts[63]);
        while pts.len() <= p.t3 {
            pts.push(if pts.len() % 2 == 0 { u } else { v });
        }
        let w = path_through(&g, &pts);
        let (_, edge) = g.bulk_edge_split(p.delta).unwrap();
        let v = is_good_path(&w, &edge, &p).unwrap();
        assert!(v.analysis.late.is_empty());
        assert!(v.is_good());
        assert!(is_good_path(&w.restrict(p.t3 - 1).unwrap(), &edge, &p).is_err());
    }
}
