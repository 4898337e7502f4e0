//! Simple random walk on the torus and on `Z^d`.
//!
//! A [`Trajectory`] stores the visited labels `ω(0), …, ω(L)`; steps are
//! recovered from consecutive positions. Long runs that only need first-visit
//! times use [`run_visits`] or [`cover_time`], which never store the path.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::torus::{direction_axis, Direction, Label, LatticePoint, TorusGeometry, TorusPoint, MAX_DIM};

/// Marker for "never visited" in first-visit tables.
pub const NEVER: u32 = u32::MAX;

/// Reproducible random stream keyed by (master seed, experiment id, trial).
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    experiment: String,
    trial: u64,
    rng: ChaCha8Rng,
    // Unused random bytes for direction draws.
    buf: u64,
    left: u8,
}

impl RngStream {
    pub fn new(master_seed: u64, experiment: &str, trial: u64) -> Self {
        let mut h = Sha256::new();
        h.update(master_seed.to_le_bytes());
        h.update(experiment.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(trial);
        RngStream { master_seed, experiment: experiment.to_string(), trial, rng, buf: 0, left: 0 }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn experiment(&self) -> &str {
        &self.experiment
    }

    pub fn trial(&self) -> u64 {
        self.trial
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Supplies step directions. `None` means the source is exhausted.
pub trait DirectionSource {
    fn next_direction(&mut self, degree: usize) -> Option<Direction>;
}

impl DirectionSource for RngStream {
    /// Uniform over `0..degree`, by rejection on single random bytes.
    #[inline]
    fn next_direction(&mut self, degree: usize) -> Option<Direction> {
        debug_assert!((1..=64).contains(&degree));
        let limit = 256 - 256 % degree as u32;
        loop {
            if self.left == 0 {
                self.buf = self.rng.next_u64();
                self.left = 8;
            }
            let b = (self.buf & 0xff) as u32;
            self.buf >>= 8;
            self.left -= 1;
            if b < limit {
                return Some((b % degree as u32) as Direction);
            }
        }
    }
}

/// A fixed, finite sequence of directions.
#[derive(Clone, Debug)]
pub struct Scripted {
    dirs: Vec<Direction>,
    pos: usize,
}

impl Scripted {
    pub fn new(dirs: Vec<Direction>) -> Self {
        Scripted { dirs, pos: 0 }
    }
}

impl DirectionSource for Scripted {
    fn next_direction(&mut self, degree: usize) -> Option<Direction> {
        let d = *self.dirs.get(self.pos)?;
        assert!((d as usize) < degree, "scripted direction out of range");
        self.pos += 1;
        Some(d)
    }
}

/// Starting law of a walk.
#[derive(Clone, Copy, Debug)]
pub enum Start {
    At(TorusPoint),
    Uniform,
}

impl Start {
    fn resolve<R: RngCore>(&self, geo: &TorusGeometry, rng: &mut R) -> Label {
        match self {
            Start::At(p) => geo.label(p),
            Start::Uniform => rng.gen_range(0..geo.volume()),
        }
    }
}

/// A nearest-neighbour path `ω(0), …, ω(L)` on the torus.
#[derive(Clone, PartialEq, Eq)]
pub struct Trajectory {
    geo: TorusGeometry,
    positions: Vec<Label>,
}

impl std::fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Trajectory(L={}, {:?})", self.len(), &self.positions[..self.positions.len().min(16)])
    }
}

impl Trajectory {
    pub fn from_positions(geo: TorusGeometry, positions: Vec<Label>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptySegment { from: 0, to: 0 });
        }
        for (k, w) in positions.windows(2).enumerate() {
            if !geo.is_step(w[0], w[1]) {
                return Err(Error::NotAPath { index: k });
            }
        }
        if *positions.last().unwrap() >= geo.volume() {
            return Err(Error::NotAPath { index: positions.len() - 1 });
        }
        Ok(Trajectory { geo, positions })
    }

    /// Trust the caller that `positions` is a path.
    pub(crate) fn from_positions_unchecked(geo: TorusGeometry, positions: Vec<Label>) -> Self {
        Trajectory { geo, positions }
    }

    pub fn from_steps(geo: TorusGeometry, start: Label, steps: &[Direction]) -> Self {
        let mut positions = Vec::with_capacity(steps.len() + 1);
        let mut cur = start;
        positions.push(cur);
        for &s in steps {
            cur = geo.step_label(cur, s);
            positions.push(cur);
        }
        Trajectory { geo, positions }
    }

    pub(crate) fn positions_mut(&mut self) -> &mut Vec<Label> {
        &mut self.positions
    }

    pub fn single(geo: TorusGeometry, start: Label) -> Self {
        Trajectory { geo, positions: vec![start] }
    }

    pub fn geometry(&self) -> &TorusGeometry {
        &self.geo
    }

    /// `L(ω)`, the number of steps.
    pub fn len(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> &[Label] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<Label> {
        self.positions
    }

    /// `ω(k)`.
    #[inline]
    pub fn at(&self, k: usize) -> Label {
        self.positions[k]
    }

    pub fn point(&self, k: usize) -> TorusPoint {
        self.geo.from_label(self.positions[k])
    }

    pub fn start(&self) -> Label {
        self.positions[0]
    }

    pub fn end(&self) -> Label {
        *self.positions.last().unwrap()
    }

    /// Direction code of step `k -> k+1`.
    pub fn step(&self, k: usize) -> Direction {
        self.geo
            .direction_between(self.positions[k], self.positions[k + 1])
            .expect("trajectory invariant: unit steps")
    }

    pub fn steps(&self) -> Vec<Direction> {
        (0..self.len()).map(|k| self.step(k)).collect()
    }

    /// `Dir(ω, k)`: the axis (counted from zero) of step `k -> k+1`.
    pub fn dir(&self, k: usize) -> Option<usize> {
        if k + 1 < self.positions.len() {
            Some(direction_axis(self.step(k)))
        } else {
            None
        }
    }

    /// `ω|_t`, the first `t` steps.
    pub fn restrict(&self, t: usize) -> Result<Trajectory> {
        if t > self.len() {
            return Err(Error::IndexOutOfRange { index: t, len: self.len() });
        }
        Ok(Trajectory { geo: self.geo, positions: self.positions[..=t].to_vec() })
    }

    pub fn truncate(&mut self, t: usize) {
        self.positions.truncate(t + 1);
    }

    /// Whether `self` is an extension of `other`.
    pub fn extends(&self, other: &Trajectory) -> bool {
        self.len() >= other.len() && self.positions[..other.positions.len()] == other.positions[..]
    }

    /// Append steps drawn from `src` until the length is `target`.
    pub fn extend_with<S: DirectionSource>(&mut self, target: usize, src: &mut S) -> Result<()> {
        let deg = self.geo.degree();
        while self.len() < target {
            let Some(dir) = src.next_direction(deg) else {
                return Err(Error::InsufficientRun { ran: self.len() as u64, needed: target as u64 });
            };
            let next = self.geo.step_label(self.end(), dir);
            self.positions.push(next);
        }
        Ok(())
    }

    /// First `k >= from` with `ω(k) = z`.
    pub fn first_hit_from(&self, z: Label, from: usize) -> Option<usize> {
        self.positions.get(from..)?.iter().position(|&p| p == z).map(|i| i + from)
    }

    /// `H_λ(ω, z) = inf{k ≥ λ t_cov : ω(k) = z}`.
    pub fn hit_after(&self, z: Label, lambda: f64, t_cov: f64) -> Result<usize> {
        let from = (lambda * t_cov).ceil().max(0.0) as u64;
        if from > self.len() as u64 {
            return Err(Error::NeverVisited { from });
        }
        self.first_hit_from(z, from as usize).ok_or(Error::NeverVisited { from })
    }

    /// `Near(ω, x)` over `ω(t_from, t_to]` and its distance `r_x`.
    /// Ties go to the smallest label.
    pub fn nearest_on_segment(&self, x: Label, t_from: usize, t_to: usize) -> Result<(Label, u32)> {
        if t_from >= t_to || t_to > self.len() {
            return Err(Error::EmptySegment { from: t_from, to: t_to });
        }
        let mut best = (u32::MAX, Label::MAX);
        for &p in &self.positions[t_from + 1..=t_to] {
            let key = (self.geo.dist_inf_labels(p, x), p);
            if key < best {
                best = key;
                if key.0 == 0 {
                    break;
                }
            }
        }
        Ok((best.1, best.0))
    }

    /// First-visit table of the whole trajectory.
    pub fn visit_record(&self) -> VisitRecord {
        let mut rec = VisitRecord::new(&self.geo);
        for (k, &p) in self.positions.iter().enumerate() {
            rec.visit(p, k as u64);
        }
        rec.steps = self.len() as u64;
        rec
    }

    /// Whether every vertex of the torus is visited.
    pub fn covers_torus(&self) -> bool {
        self.visit_record().unvisited() == 0
    }

    /// Whether the trajectory visits every vertex of `set`.
    pub fn covers(&self, set: &[Label]) -> bool {
        let rec = self.visit_record();
        set.iter().all(|&l| rec.first_visit(l).is_some())
    }
}

/// First-visit times of a walk, with a visited bitset for fast lookup.
#[derive(Clone, Debug)]
pub struct VisitRecord {
    first: Vec<u32>,
    bits: Vec<u64>,
    unvisited: u32,
    saturated: bool,
    steps: u64,
}

impl VisitRecord {
    pub fn new(geo: &TorusGeometry) -> Self {
        let v = geo.volume() as usize;
        VisitRecord {
            first: vec![NEVER; v],
            bits: vec![0; v.div_ceil(64)],
            unvisited: v as u32,
            saturated: false,
            steps: 0,
        }
    }

    #[inline]
    pub fn is_visited(&self, l: Label) -> bool {
        self.bits[(l >> 6) as usize] >> (l & 63) & 1 == 1
    }

    /// Record a visit at time `t`; returns whether it was the first one.
    #[inline]
    pub fn visit(&mut self, l: Label, t: u64) -> bool {
        let w = &mut self.bits[(l >> 6) as usize];
        let m = 1u64 << (l & 63);
        if *w & m != 0 {
            return false;
        }
        *w |= m;
        if t >= NEVER as u64 {
            self.saturated = true;
            self.first[l as usize] = NEVER - 1;
        } else {
            self.first[l as usize] = t as u32;
        }
        self.unvisited -= 1;
        true
    }

    /// `H_x`, or `None` if never visited.
    pub fn first_visit(&self, l: Label) -> Option<u64> {
        if self.is_visited(l) {
            Some(self.first[l as usize] as u64)
        } else {
            None
        }
    }

    pub fn unvisited(&self) -> u32 {
        self.unvisited
    }

    pub fn volume(&self) -> usize {
        self.first.len()
    }

    /// Number of steps the walk ran.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Whether some first-visit time did not fit in 32 bits.
    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// `max_x H_x` if everything was visited.
    pub fn cover_time(&self) -> Option<u64> {
        if self.unvisited > 0 {
            return None;
        }
        self.first.iter().map(|&t| t as u64).max()
    }

    /// Vertices with `H_x > threshold`, sorted by label.
    pub fn later_than(&self, threshold: u64) -> Vec<Label> {
        (0..self.first.len() as u32)
            .filter(|&l| match self.first_visit(l) {
                None => true,
                Some(t) => t > threshold,
            })
            .collect()
    }
}

/// Position on the torus kept as coordinates and label together, so a step
/// costs no division.
#[derive(Clone, Copy, Debug)]
struct Walker {
    coords: [u32; MAX_DIM],
    label: Label,
    n: u32,
    strides: [u32; MAX_DIM],
}

impl Walker {
    fn new(geo: &TorusGeometry, start: Label) -> Self {
        let p = geo.from_label(start);
        let mut coords = [0u32; MAX_DIM];
        coords[..geo.d()].copy_from_slice(p.coords());
        let mut strides = [0u32; MAX_DIM];
        for (i, s) in strides.iter_mut().enumerate().take(geo.d()) {
            let mut e = [0u32; MAX_DIM];
            e[i] = 1;
            *s = geo.label(&geo.point(&e[..geo.d()]).expect("unit point"));
        }
        Walker { coords, label: start, n: geo.N(), strides }
    }

    #[inline]
    fn step(&mut self, dir: Direction) {
        let a = direction_axis(dir);
        let c = self.coords[a];
        let s = self.strides[a];
        if dir & 1 == 1 {
            if c == 0 {
                self.coords[a] = self.n - 1;
                self.label += (self.n - 1) * s;
            } else {
                self.coords[a] = c - 1;
                self.label -= s;
            }
        } else if c == self.n - 1 {
            self.coords[a] = 0;
            self.label -= (self.n - 1) * s;
        } else {
            self.coords[a] = c + 1;
            self.label += s;
        }
    }
}

/// Run `n_steps` steps and keep the trajectory and its visit record.
///
/// `budget` caps the number of stored positions.
pub fn simulate<R: RngCore + DirectionSource>(
    geo: &TorusGeometry,
    start: Start,
    n_steps: u64,
    rng: &mut R,
    budget: u64,
) -> Result<(Trajectory, VisitRecord)> {
    if n_steps > budget {
        return Err(Error::StepBudget { requested: n_steps, budget });
    }
    let s = start.resolve(geo, rng);
    simulate_from(geo, s, n_steps, rng)
}

/// As [`simulate`], with any direction source (scripted replays included).
pub fn simulate_from<S: DirectionSource>(
    geo: &TorusGeometry,
    start: Label,
    n_steps: u64,
    src: &mut S,
) -> Result<(Trajectory, VisitRecord)> {
    let mut w = Walker::new(geo, start);
    let mut rec = VisitRecord::new(geo);
    let mut positions = Vec::with_capacity(n_steps as usize + 1);
    positions.push(start);
    rec.visit(start, 0);
    let deg = geo.degree();
    for t in 1..=n_steps {
        let dir = src
            .next_direction(deg)
            .ok_or(Error::InsufficientRun { ran: t - 1, needed: n_steps })?;
        w.step(dir);
        positions.push(w.label);
        rec.visit(w.label, t);
    }
    rec.steps = n_steps;
    Ok((Trajectory { geo: *geo, positions }, rec))
}

/// Run `n_steps` steps keeping only first-visit times.
pub fn run_visits<S: DirectionSource>(geo: &TorusGeometry, start: Label, n_steps: u64, src: &mut S) -> VisitRecord {
    let mut w = Walker::new(geo, start);
    let mut rec = VisitRecord::new(geo);
    rec.visit(start, 0);
    let deg = geo.degree();
    let mut t = 0;
    while t < n_steps {
        let Some(dir) = src.next_direction(deg) else { break };
        t += 1;
        w.step(dir);
        rec.visit(w.label, t);
    }
    rec.steps = t;
    rec
}

/// Result of a cover-time run.
#[derive(Clone, Debug)]
pub enum CoverOutcome {
    Covered { time: u64, record: VisitRecord },
    NotCovered { steps: u64, record: VisitRecord },
}

impl CoverOutcome {
    pub fn time(&self) -> Option<u64> {
        match self {
            CoverOutcome::Covered { time, .. } => Some(*time),
            CoverOutcome::NotCovered { .. } => None,
        }
    }

    pub fn record(&self) -> &VisitRecord {
        match self {
            CoverOutcome::Covered { record, .. } | CoverOutcome::NotCovered { record, .. } => record,
        }
    }
}

/// Walk until every vertex is visited or `max_steps` steps have been taken.
pub fn cover_time<S: DirectionSource>(geo: &TorusGeometry, start: Label, src: &mut S, max_steps: u64) -> CoverOutcome {
    let mut w = Walker::new(geo, start);
    let mut rec = VisitRecord::new(geo);
    rec.visit(start, 0);
    let deg = geo.degree();
    let mut t = 0u64;
    while rec.unvisited > 0 && t < max_steps {
        let Some(dir) = src.next_direction(deg) else { break };
        t += 1;
        w.step(dir);
        rec.visit(w.label, t);
    }
    rec.steps = t;
    if rec.unvisited == 0 {
        CoverOutcome::Covered { time: t, record: rec }
    } else {
        CoverOutcome::NotCovered { steps: t, record: rec }
    }
}

/// `t_cov = g(0) N^d log N^d`.
pub fn t_cov(geo: &TorusGeometry, g0: f64) -> f64 {
    g0 * geo.volume() as f64 * geo.log_volume()
}

/// `L^α = {x : H_x > α t_cov}`, sorted by label.
///
/// The walk must have run at least `⌈α t_cov⌉` steps.
pub fn late_points(record: &VisitRecord, alpha: f64, t_cov: f64) -> Result<Vec<Label>> {
    let a = alpha * t_cov;
    let needed = a.ceil().max(0.0) as u64;
    if record.steps() < needed {
        return Err(Error::InsufficientRun { ran: record.steps(), needed });
    }
    Ok(record.later_than(a.floor().max(0.0) as u64))
}

/// Completed excursions from `∂A` to `∂A'` before `t_max`.
///
/// `∂` is the inner boundary: vertices of the set with a neighbour outside.
/// An excursion starts at a visit to `∂A` and completes at the next visit to
/// `∂A'`.
pub fn count_excursions(omega: &Trajectory, a: &[Label], a_prime: &[Label], t_max: usize) -> Result<u64> {
    let geo = omega.geometry();
    let v = geo.volume() as usize;
    let mut in_a = vec![false; v];
    let mut in_ap = vec![false; v];
    for &l in a {
        in_a[l as usize] = true;
    }
    for &l in a_prime {
        in_ap[l as usize] = true;
    }
    if a.iter().any(|&l| !in_ap[l as usize]) {
        return Err(Error::MalformedSets("A is not contained in A'".into()));
    }
    let boundary = |mask: &Vec<bool>, l: Label| {
        mask[l as usize] && (0..geo.degree() as u8).any(|dir| !mask[geo.step_label(l, dir) as usize])
    };
    if a.iter().any(|&l| boundary(&in_ap, l)) {
        return Err(Error::MalformedSets("A meets the boundary of A'".into()));
    }
    let d_a: Vec<bool> = (0..v as u32).map(|l| boundary(&in_a, l)).collect();
    let d_ap: Vec<bool> = (0..v as u32).map(|l| boundary(&in_ap, l)).collect();
    let mut count = 0;
    let mut inside = false;
    for &p in &omega.positions()[..=t_max.min(omega.len())] {
        if !inside && d_a[p as usize] {
            inside = true;
        } else if inside && d_ap[p as usize] {
            inside = false;
            count += 1;
        }
    }
    Ok(count)
}

/// `ξ*(n)`: largest visit count over sites of `Z^d` for `n` steps of simple
/// random walk started at the origin (which counts as one visit).
pub fn max_local_time<S: DirectionSource>(d: usize, n_steps: u64, src: &mut S) -> Result<u64> {
    if d < 3 || d > MAX_DIM {
        return Err(Error::Parameter(format!("dimension {d} unsupported")));
    }
    let bits = 128 / d as u32;
    if n_steps >= 1u64 << (bits - 1).min(63) {
        return Err(Error::Parameter("too many steps for the coordinate packing".into()));
    }
    let offset = 1i128 << (bits - 1);
    let pack = |p: &[i64; MAX_DIM]| -> u128 {
        let mut k = 0u128;
        for &c in p.iter().take(d) {
            k = (k << bits) | (c as i128 + offset) as u128;
        }
        k
    };
    let mut counts: FxHashMap<u128, u32> = FxHashMap::default();
    let mut pos = [0i64; MAX_DIM];
    counts.insert(pack(&pos), 1);
    let mut best = 1u32;
    for _ in 0..n_steps {
        let Some(dir) = src.next_direction(2 * d) else { break };
        let a = direction_axis(dir);
        pos[a] += if dir & 1 == 1 { -1 } else { 1 };
        let c = counts.entry(pack(&pos)).or_insert(0);
        *c += 1;
        best = best.max(*c);
    }
    Ok(best as u64)
}

/// Label sets on the torus serialize as sorted label lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet(pub Vec<Label>);

/// Positions of a lattice path in `Z^d` are needed by a few callers.
pub fn lattice_step(p: &LatticePoint, dir: Direction) -> LatticePoint {
    let mut q = *p;
    let a = direction_axis(dir);
    q.set(a, q.get(a) + if dir & 1 == 1 { -1 } else { 1 });
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn geo(n: u32) -> TorusGeometry {
        TorusGeometry::new(3, n).unwrap()
    }

    #[test]
    fn zero_steps() {
        let g = geo(4);
        let mut rng = RngStream::new(1, "t", 0);
        let (tr, rec) = simulate(&g, Start::At(g.origin()), 0, &mut rng, 10).unwrap();
        assert_eq!(tr.len(), 0);
        assert_eq!(rec.volume() - rec.unvisited() as usize, 1);
    }

    #[test]
    fn budget_is_enforced() {
        let g = geo(4);
        let mut rng = RngStream::new(1, "t", 0);
        assert!(matches!(
            simulate(&g, Start::Uniform, 11, &mut rng, 10),
            Err(Error::StepBudget { requested: 11, budget: 10 })
        ));
    }

    #[test]
    fn replay_is_deterministic() {
        let g = geo(4);
        let run = |trial| {
            let mut rng = RngStream::new(7, "replay", trial);
            simulate(&g, Start::At(g.origin()), 10, &mut rng, 100).unwrap().0.steps()
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn step_distribution_is_uniform() {
        let mut rng = RngStream::new(3, "dist", 0);
        let mut counts = [0u32; 6];
        let n = 60_000;
        for _ in 0..n {
            counts[rng.next_direction(6).unwrap() as usize] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 10_000.0).powi(2) / 10_000.0).sum();
        // 5 degrees of freedom, 99.9% quantile is 20.5.
        assert!(chi2 < 20.5, "chi2 = {chi2}");
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    fn hash_set_cover(g: &TorusGeometry, start: Label, dirs: &[Direction]) -> Option<u64> {
        let mut seen = HashSet::new();
        let mut cur = start;
        seen.insert(cur);
        if seen.len() == g.volume() as usize {
            return Some(0);
        }
        for (t, &d) in dirs.iter().enumerate() {
            cur = g.step_label(cur, d);
            seen.insert(cur);
            if seen.len() == g.volume() as usize {
                return Some(t as u64 + 1);
            }
        }
        None
    }

    #[test]
    fn cover_on_n2_scripted() {
        let g = geo(2);
        // Gray-code tour of the 2x2x2 torus.
        let dirs = vec![0u8, 2, 1, 4, 0, 3, 1];
        let out = cover_time(&g, 0, &mut Scripted::new(dirs.clone()), 100);
        assert_eq!(out.time(), hash_set_cover(&g, 0, &dirs));
        assert_eq!(out.time(), Some(7));
    }

    #[test]
    fn cover_zero_budget() {
        let g = geo(2);
        let mut rng = RngStream::new(1, "t", 0);
        assert!(cover_time(&g, 0, &mut rng, 0).time().is_none());
    }

    #[test]
    fn streaming_cover_matches_hash_set() {
        for n in 2..=6 {
            let g = geo(n);
            for trial in 0..20 {
                let mut rng = RngStream::new(11, "cover-oracle", trial);
                let dirs: Vec<Direction> = (0..200_000).map(|_| rng.next_direction(6).unwrap()).collect();
                let out = cover_time(&g, 0, &mut Scripted::new(dirs.clone()), 200_000);
                assert_eq!(out.time(), hash_set_cover(&g, 0, &dirs));
                let rec = out.record();
                let max = (0..g.volume()).filter_map(|l| rec.first_visit(l)).max();
                assert_eq!(max, out.time());
            }
        }
    }

    #[test]
    fn late_points_match_prefix_recomputation() {
        let g = geo(5);
        let mut rng = RngStream::new(5, "late", 0);
        let (tr, rec) = simulate(&g, Start::At(g.origin()), 3000, &mut rng, 10_000).unwrap();
        let tc = t_cov(&g, 1.5);
        for alpha in [0.0, 0.01, 0.05, 0.1, 0.2] {
            let late = late_points(&rec, alpha, tc).unwrap();
            let cut = (alpha * tc).floor() as usize;
            let seen: HashSet<Label> = tr.positions()[..=cut].iter().copied().collect();
            let expect: Vec<Label> = (0..g.volume()).filter(|l| !seen.contains(l)).collect();
            assert_eq!(late, expect);
        }
        let l0 = late_points(&rec, 0.0, tc).unwrap();
        assert_eq!(l0.len(), 124);
        assert!(late_points(&rec, 4.0, tc).is_err());
    }

    #[test]
    fn late_points_are_nested() {
        let g = geo(6);
        let mut rng = RngStream::new(5, "nest", 0);
        let rec = run_visits(&g, 0, 5000, &mut rng);
        let tc = t_cov(&g, 1.5);
        let mut prev: Option<Vec<Label>> = None;
        for a in [0.0, 0.05, 0.1, 0.2, 0.3] {
            let cur = late_points(&rec, a, tc).unwrap();
            if let Some(p) = &prev {
                assert!(cur.iter().all(|x| p.contains(x)));
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn hit_after_examples() {
        let g = geo(8);
        let path: Vec<Label> = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 0, 0], [0, 0, 0], [0, 1, 0], [0, 2, 0]]
            .iter()
            .map(|c| g.label(&g.point(c).unwrap()))
            .collect();
        let tr = Trajectory::from_positions(g, path.clone()).unwrap();
        assert_eq!(tr.hit_after(path[0], 0.0, 100.0), Ok(0));
        // λ t_cov = 3, z = ω(5).
        assert_eq!(tr.hit_after(path[5], 0.03, 100.0), Ok(5));
        assert_eq!(tr.hit_after(path[2], 0.03, 100.0), Err(Error::NeverVisited { from: 3 }));
        // Linear scan oracle.
        for z in &path {
            let expect = (3..path.len()).find(|&k| path[k] == *z);
            assert_eq!(tr.hit_after(*z, 0.03, 100.0).ok(), expect);
        }
    }

    #[test]
    fn nearest_examples() {
        let g = geo(32);
        let l = |c: [u32; 3]| g.label(&g.point(&c).unwrap());
        let tr = Trajectory::from_positions(g, vec![l([0, 0, 0]), l([1, 0, 0]), l([1, 1, 0])]).unwrap();
        assert_eq!(tr.nearest_on_segment(l([3, 0, 0]), 0, 2), Ok((l([1, 0, 0]), 2)));
        assert_eq!(tr.nearest_on_segment(l([1, 1, 0]), 0, 2), Ok((l([1, 1, 0]), 0)));
        assert!(tr.nearest_on_segment(l([1, 1, 0]), 2, 2).is_err());
        // Tie at distance 1: (1,0,0) and (1,1,0) are both at distance 1 from (2,1,0)... and
        // (1,0,0) has the smaller label.
        let x = l([2, 0, 1]);
        let (near, r) = tr.nearest_on_segment(x, 0, 2).unwrap();
        let oracle = tr.positions()[1..]
            .iter()
            .copied()
            .min_by_key(|&p| (g.dist_inf_labels(p, x), p))
            .unwrap();
        assert_eq!((near, r), (oracle, 1));
        assert_eq!(near, l([1, 0, 0]));
    }

    fn line(g: &TorusGeometry, xs: &[i64]) -> Trajectory {
        let pos = xs.iter().map(|&x| g.label(&g.project_coords(&[x, 0, 0]))).collect();
        Trajectory::from_positions(*g, pos).unwrap()
    }

    #[test]
    fn excursions() {
        let g = geo(16);
        let cube = |r: i64| -> Vec<Label> {
            let mut v = Vec::new();
            for a in -r..=r {
                for b in -r..=r {
                    for c in -r..=r {
                        v.push(g.label(&g.project_coords(&[a, b, c])));
                    }
                }
            }
            v.sort();
            v
        };
        let a = cube(1);
        let ap = cube(3);
        // Never enters A.
        assert_eq!(count_excursions(&line(&g, &[6, 7, 8]), &a, &ap, 2), Ok(0));
        // In once and out once.
        let once: Vec<i64> = (1..=3).rev().chain(2..=3).collect();
        assert_eq!(count_excursions(&line(&g, &once), &a, &ap, 100), Ok(1));
        // Three round trips, oracle replay of the state machine.
        let mut xs = vec![5];
        for _ in 0..3 {
            xs.extend((1..5).rev());
            xs.extend(2..=5);
        }
        let tr = line(&g, &xs);
        assert_eq!(count_excursions(&tr, &a, &ap, tr.len()), Ok(3));
        assert_eq!(count_excursions(&tr, &a, &ap, 0), Ok(0));
        assert!(count_excursions(&tr, &ap, &a, 5).is_err());
        assert!(count_excursions(&tr, &cube(3), &cube(3), 5).is_err());
    }

    #[test]
    fn local_time_small_n() {
        let mut rng = RngStream::new(1, "lt", 0);
        assert_eq!(max_local_time(3, 0, &mut rng), Ok(1));
        assert_eq!(max_local_time(3, 1, &mut rng), Ok(1));
        assert_eq!(max_local_time(3, 2, &mut Scripted::new(vec![0, 1])), Ok(2));
    }

    #[test]
    fn uniform_start_mixes() {
        let g = geo(3);
        let mut counts = vec![0u32; 27];
        let trials = 27_000;
        for t in 0..trials {
            let mut rng = RngStream::new(2, "mix", t);
            let (tr, _) = simulate(&g, Start::Uniform, 50, &mut rng, 100).unwrap();
            counts[tr.end() as usize] += 1;
        }
        let p = 1.0 / 27.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for c in counts {
            assert!((c as f64 / trials as f64 - p).abs() < 5.0 * sigma);
        }
    }

    #[test]
    fn from_positions_rejects_jumps() {
        let g = geo(5);
        assert_eq!(Trajectory::from_positions(g, vec![0, 2]), Err(Error::NotAPath { index: 0 }));
    }
}
