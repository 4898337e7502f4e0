//! Loop surgery on good paths.
//!
//! A good path `ω` of length `T_3` is turned into a covering path in two
//! insertion rounds. First each representative `x` of a late component gets
//! a loop `β_x` rooted at `Near(ω, x)`, inserted at the first visit of that
//! root after `T_2`. Then each component gets a tree loop rooted at its
//! representative, inserted at the first visit of the representative. Free
//! steps up to `T_4` complete the family `Ψ(ω)`.
//!
//! The decoder reads a member of `Ψ(ω)` and recovers `ω` without any side
//! information; every deduction that can fail reports a [`DecodeError`].
//!
//! Sign convention: the `y → x` leg steps by `-sgn(Δ_i) e_i` with
//! `Δ = y - x`, so each step decreases the `l^1` distance to `x`; the
//! `x → y` leg steps by `+sgn(Δ_i) e_i`.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::late::{is_good_path, late_in, AuxiliaryGraph, SurgeryParams};
use crate::torus::{direction, Direction, Label, TorusGeometry};
use crate::walk::{DirectionSource, Trajectory};

/// Shape of a covering loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoopKind {
    /// At least two nonzero components of `Δ`.
    A,
    /// One nonzero component, not the last axis.
    B,
    /// Only the last component is nonzero.
    C,
    /// `Δ = 0`: the two-step loop `(x, x + e_i, x)`.
    D,
    Tree,
}

impl LoopKind {
    /// Extra steps after the visit of `x` that break the symmetry of the
    /// loop: 0, 2, 4 for kinds a, b, c.
    pub fn ext(self) -> Option<usize> {
        match self {
            LoopKind::A => Some(0),
            LoopKind::B => Some(2),
            LoopKind::C => Some(4),
            _ => None,
        }
    }
}

/// Kind of the loop joining `x` to `y`, read off `Δ = y - x`.
pub fn classify(geo: &TorusGeometry, x: Label, y: Label) -> LoopKind {
    let delta = geo.difference_vector(&geo.from_label(x), &geo.from_label(y));
    let nonzero: Vec<usize> = (0..geo.d()).filter(|&i| delta.get(i) != 0).collect();
    match nonzero.len() {
        0 => LoopKind::D,
        1 if nonzero[0] + 1 < geo.d() => LoopKind::B,
        1 => LoopKind::C,
        _ => LoopKind::A,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Loop {
    pub kind: LoopKind,
    /// The covered vertex `x`, or the tree root.
    pub anchor: Label,
    /// First and last vertex.
    pub root: Label,
    pub positions: Vec<Label>,
}

impl Loop {
    pub fn len(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First index at which the loop visits `z`.
    pub fn hit(&self, z: Label) -> Option<usize> {
        self.positions.iter().position(|&p| p == z)
    }
}

struct Stepper<'a> {
    geo: &'a TorusGeometry,
    out: Vec<Label>,
}

impl Stepper<'_> {
    fn go(&mut self, axis: usize, negative: bool, times: usize) {
        for _ in 0..times {
            let next = self.geo.step_label(*self.out.last().unwrap(), direction(axis, negative));
            self.out.push(next);
        }
    }
}

/// `Path(y, x)`: from `y`, fix coordinates in increasing axis order,
/// each step moving toward `x`. Both endpoints included.
pub fn build_path(geo: &TorusGeometry, y: Label, x: Label) -> Result<Vec<Label>> {
    if x == y {
        return Err(Error::LoopConstruction("Path(y, x) needs x != y".into()));
    }
    let delta = geo.difference_vector(&geo.from_label(x), &geo.from_label(y));
    let mut s = Stepper { geo, out: vec![y] };
    for i in 0..geo.d() {
        let di = delta.get(i);
        s.go(i, di > 0, di.unsigned_abs() as usize);
    }
    debug_assert_eq!(*s.out.last().unwrap(), x);
    Ok(s.out)
}

/// `β(x, y)` for `x != y`, rooted at `y`.
pub fn build_beta(geo: &TorusGeometry, x: Label, y: Label) -> Result<Loop> {
    if x == y {
        return Err(Error::LoopConstruction("β(x, y) needs x != y; use build_beta_i".into()));
    }
    let kind = classify(geo, x, y);
    let delta = geo.difference_vector(&geo.from_label(x), &geo.from_label(y));
    let path = build_path(geo, y, x)?;
    let mut s = Stepper { geo, out: path };
    let d = geo.d();
    match kind {
        LoopKind::A => {
            for i in 0..d {
                let di = delta.get(i);
                s.go(i, di < 0, di.unsigned_abs() as usize);
            }
        }
        LoopKind::B => {
            let i = (0..d).find(|&i| delta.get(i) != 0).unwrap();
            let di = delta.get(i);
            s.go(i + 1, false, 1);
            s.go(i, di < 0, di.unsigned_abs() as usize);
            s.go(i + 1, true, 1);
        }
        LoopKind::C => {
            let dd = delta.get(d - 1);
            s.go(1, false, 1);
            s.go(0, false, 1);
            s.go(d - 1, dd < 0, dd.unsigned_abs() as usize);
            s.go(0, true, 1);
            s.go(1, true, 1);
        }
        LoopKind::D | LoopKind::Tree => unreachable!(),
    }
    let lp = Loop { kind, anchor: x, root: y, positions: s.out };
    check_beta(geo, &lp)?;
    Ok(lp)
}

/// Structural checks on a kind a-c loop: closed, unit steps, a single
/// visit of `x`, and no vertex shared between the two legs.
pub fn check_beta(geo: &TorusGeometry, lp: &Loop) -> Result<()> {
    let p = &lp.positions;
    let bad = |m: &str| Err(Error::LoopConstruction(format!("{m} (x={}, y={})", lp.anchor, lp.root)));
    if p.len() < 3 || p[0] != lp.root || *p.last().unwrap() != lp.root {
        return bad("not closed at its root");
    }
    if p.windows(2).any(|w| geo.dist_1_labels(w[0], w[1]) != 1) {
        return bad("not a nearest-neighbour path");
    }
    if p.iter().filter(|&&z| z == lp.anchor).count() != 1 {
        return bad("x visited more than once");
    }
    let h = lp.hit(lp.anchor).unwrap();
    let mut before: Vec<Label> = p[1..h].to_vec();
    before.sort_unstable();
    let len = p.len() - 1;
    if p[h + 1..len].iter().any(|z| before.binary_search(z).is_ok()) {
        return bad("legs intersect");
    }
    let bound = 2 * geo.d() * (geo.dist_inf_labels(lp.anchor, lp.root) as usize + 2);
    if len > bound {
        return bad("length bound exceeded");
    }
    Ok(())
}

/// `β_i(x) = (x, x + e_i, x)`, with the axis counted from zero.
pub fn build_beta_i(geo: &TorusGeometry, x: Label, axis: usize) -> Result<Loop> {
    if axis >= geo.d() {
        return Err(Error::LoopConstruction(format!("axis {axis} out of range for d={}", geo.d())));
    }
    let up = geo.step_label(x, direction(axis, false));
    Ok(Loop { kind: LoopKind::D, anchor: x, root: x, positions: vec![x, up, x] })
}

/// `β^Tree(C, x)`: depth-first search of `G(C)` from `x`, neighbours in
/// increasing label order, each tree step replaced by a `Path`.
pub fn build_tree_loop(geo: &TorusGeometry, component: &[Label], x: Label, l_n: usize) -> Result<Loop> {
    let graph = AuxiliaryGraph::new(geo, component, l_n)?;
    let verts = graph.vertices();
    let Ok(root) = verts.binary_search(&x) else {
        return Err(Error::LoopConstruction(format!("root {x} not in the component")));
    };
    if graph.components().len() != 1 {
        return Err(Error::LoopConstruction("G(C) is not connected".into()));
    }
    let r = graph.radius();
    let nbrs: Vec<Vec<usize>> = (0..verts.len())
        .map(|i| (0..verts.len()).filter(|&j| j != i && geo.dist_inf_labels(verts[i], verts[j]) <= r).collect())
        .collect();
    let mut seen = vec![false; verts.len()];
    let mut aux = vec![root];
    let mut stack = vec![(root, 0usize)];
    seen[root] = true;
    while let Some(&mut (v, ref mut next)) = stack.last_mut() {
        if let Some(&u) = nbrs[v][*next..].iter().find(|&&u| !seen[u]) {
            *next = nbrs[v].iter().position(|&w| w == u).unwrap() + 1;
            seen[u] = true;
            aux.push(u);
            stack.push((u, 0));
        } else {
            stack.pop();
            if let Some(&(parent, _)) = stack.last() {
                aux.push(parent);
            }
        }
    }
    let mut positions = vec![x];
    for w in aux.windows(2) {
        let leg = build_path(geo, verts[w[0]], verts[w[1]])?;
        positions.extend_from_slice(&leg[1..]);
    }
    Ok(Loop { kind: LoopKind::Tree, anchor: x, root: x, positions })
}

/// `Ins(ω, β, k) = ω[0, k] ++ β[1, L] ++ ω[k + 1, ...]`.
pub fn insert(omega: &Trajectory, beta: &[Label], k: usize) -> Result<Trajectory> {
    let mut out = omega.clone();
    insert_in_place(out.positions_mut(), beta, k)?;
    Ok(out)
}

/// `Del(ω, k1, k2)`: removes `ω(k1 + 1), ..., ω(k2)`.
pub fn delete(omega: &Trajectory, k1: usize, k2: usize) -> Result<Trajectory> {
    let mut out = omega.clone();
    delete_in_place(out.positions_mut(), k1, k2)?;
    Ok(out)
}

fn insert_in_place(pos: &mut Vec<Label>, beta: &[Label], k: usize) -> Result<()> {
    let len = pos.len() - 1;
    if k > len {
        return Err(Error::IndexOutOfRange { index: k, len });
    }
    if beta.is_empty() || beta[0] != pos[k] || *beta.last().unwrap() != pos[k] {
        return Err(Error::AnchorMismatch { index: k });
    }
    pos.splice(k + 1..k + 1, beta[1..].iter().copied());
    Ok(())
}

fn delete_in_place(pos: &mut Vec<Label>, k1: usize, k2: usize) -> Result<()> {
    let len = pos.len() - 1;
    if k2 > len || k1 > k2 {
        return Err(Error::IndexOutOfRange { index: k2.max(k1), len });
    }
    if pos[k1] != pos[k2] {
        return Err(Error::AnchorMismatch { index: k1 });
    }
    pos.drain(k1 + 1..=k2);
    Ok(())
}

/// Version of the tie-break and ordering rules (path leg order, DFS
/// neighbour order, loop detours) that serialized plans and transcripts
/// depend on.
pub const RULES_VERSION: u32 = 1;

/// One loop of the first round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneRecord {
    pub j: usize,
    pub x: Label,
    pub near: Label,
    pub r: u32,
    /// `H_j(ω)`, the first visit of `Near(ω, x_j)` after `T_2`.
    pub hit: usize,
    /// `H_j(ω) + S^{(j-1)}`.
    pub at: usize,
    pub beta: Loop,
}

/// One tree loop of the second round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub j: usize,
    pub x: Label,
    pub component: Vec<Label>,
    /// First visit of `x_j` after `T_2` in `ω^{(n)}`.
    pub hit: usize,
    pub at: usize,
    pub tree: Loop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryPlan {
    pub rules_version: u32,
    pub late: Vec<Label>,
    pub stage_one: Vec<StageOneRecord>,
    pub stage_two: Vec<TreeRecord>,
    /// `S^{(n)}`.
    pub s_one: usize,
    /// `S^{(n), Tree}`.
    pub s_tree: usize,
    pub mdist: u64,
    pub j_budget: f64,
}

impl SurgeryPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct Surgery {
    pub plan: SurgeryPlan,
    /// After the first round.
    pub omega_n: Trajectory,
    /// After both rounds.
    pub omega_2n: Trajectory,
}

/// Runs both insertion rounds on a good path.
pub fn build_surgery(omega: &Trajectory, f: &[Label], params: &SurgeryParams) -> Result<Surgery> {
    let geo = *omega.geometry();
    let verdict = is_good_path(omega, f, params)?;
    if !verdict.is_good() {
        return Err(Error::Precondition(format!(
            "path is not good: covers complement {}, islands {}, cost {}",
            verdict.covers_complement, verdict.islands_small, verdict.cost_bounded
        )));
    }
    params.check_budget(f.len())?;
    let an = &verdict.analysis;
    let t2 = params.t2;

    let mut firsts: Vec<(usize, Label, Label, u32)> = Vec::new();
    for x in an.graph.representatives() {
        let (near, r) = an.near_of(x).unwrap();
        let hit = omega.first_hit_from(near, t2 + 1).expect("Near lies on ω(T_2, T_3]");
        firsts.push((hit, x, near, r));
    }
    firsts.sort_unstable();
    if firsts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Disjointness("Near(ω, ·) is not injective on the representatives".into()));
    }

    let mut stage_one = Vec::with_capacity(firsts.len());
    let mut owner: FxHashMap<Label, usize> = FxHashMap::default();
    let mut pos = omega.positions().to_vec();
    let mut s = 0;
    for (j, &(hit, x, near, r)) in firsts.iter().enumerate() {
        let beta = if near != x {
            build_beta(&geo, x, near)?
        } else {
            build_beta_i(&geo, x, omega.dir(hit - 1).unwrap())?
        };
        for &z in &beta.positions {
            if let Some(&other) = owner.get(&z) {
                if other != j {
                    return Err(Error::Disjointness(format!("loops of {} and {x} share vertex {z}", firsts[other].1)));
                }
            }
            owner.insert(z, j);
        }
        let at = hit + s;
        insert_in_place(&mut pos, &beta.positions, at)?;
        s += beta.len();
        stage_one.push(StageOneRecord { j: j + 1, x, near, r, hit, at, beta });
    }
    let omega_n = Trajectory::from_positions_unchecked(geo, pos.clone());

    let mut stage_two = Vec::with_capacity(firsts.len());
    let mut s_tree = 0;
    for rec in &stage_one {
        let component = an.graph.component_of(rec.x).unwrap().to_vec();
        let tree = build_tree_loop(&geo, &component, rec.x, params.l_n)?;
        let hit = omega_n.first_hit_from(rec.x, t2 + 1).expect("x_j is visited by its loop");
        let at = hit + s_tree;
        insert_in_place(&mut pos, &tree.positions, at)?;
        s_tree += tree.len();
        stage_two.push(TreeRecord { j: rec.j, x: rec.x, component, hit, at, tree });
    }
    let omega_2n = Trajectory::from_positions_unchecked(geo, pos);

    let total = (s + s_tree) as f64;
    if total > verdict.j || omega_2n.len() as f64 > params.t3 as f64 + verdict.j {
        return Err(Error::LengthOverflow(format!("inserted {total} steps, budget J = {}", verdict.j)));
    }
    debug_assert_eq!(&omega_2n.positions()[..=t2], &omega.positions()[..=t2]);
    Ok(Surgery {
        plan: SurgeryPlan {
            rules_version: RULES_VERSION,
            late: an.late.clone(),
            stage_one,
            stage_two,
            s_one: s,
            s_tree,
            mdist: verdict.mdist,
            j_budget: verdict.j,
        },
        omega_n,
        omega_2n,
    })
}

/// `Ψ(ω)`: all extensions of `ω^{(2n)}` to length `T_4`.
pub struct PsiFamily<'a> {
    base: &'a Trajectory,
    t4: usize,
}

/// Largest gap `T_4 - L(ω^{(2n)})` for which [`PsiFamily::enumerate`] runs.
pub const MAX_ENUMERATION_GAP: usize = 8;

impl<'a> PsiFamily<'a> {
    pub fn new(base: &'a Trajectory, t4: usize) -> Result<Self> {
        if base.len() > t4 {
            return Err(Error::LengthOverflow(format!("L(ω^(2n)) = {} exceeds T_4 = {t4}", base.len())));
        }
        Ok(PsiFamily { base, t4 })
    }

    /// Number of free steps.
    pub fn gap(&self) -> usize {
        self.t4 - self.base.len()
    }

    /// `ln |Ψ(ω)| = gap · ln(2d)`.
    pub fn log_count(&self) -> f64 {
        self.gap() as f64 * (self.base.geometry().degree() as f64).ln()
    }

    /// `|Ψ(ω)| = (2d)^gap`, when it fits.
    pub fn count(&self) -> Option<u128> {
        (self.base.geometry().degree() as u128).checked_pow(self.gap() as u32)
    }

    pub fn member(&self, suffix: &[Direction]) -> Result<Trajectory> {
        if suffix.len() != self.gap() {
            return Err(Error::Parameter(format!("suffix of {} steps, gap is {}", suffix.len(), self.gap())));
        }
        let mut out = self.base.clone();
        let geo = *self.base.geometry();
        let pos = out.positions_mut();
        pos.reserve(suffix.len());
        for &s in suffix {
            let next = geo.step_label(*pos.last().unwrap(), s);
            pos.push(next);
        }
        Ok(out)
    }

    pub fn sample<S: DirectionSource>(&self, src: &mut S) -> Result<Trajectory> {
        let mut out = self.base.clone();
        out.extend_with(self.t4, src)?;
        Ok(out)
    }

    /// All free suffixes, in lexicographic order of direction codes.
    pub fn enumerate(&self) -> Result<SuffixIter> {
        if self.gap() > MAX_ENUMERATION_GAP {
            return Err(Error::Parameter(format!("gap {} above the enumeration cap {MAX_ENUMERATION_GAP}", self.gap())));
        }
        Ok(SuffixIter { degree: self.base.geometry().degree() as u8, next: Some(vec![0; self.gap()]) })
    }
}

pub struct SuffixIter {
    degree: u8,
    next: Option<Vec<Direction>>,
}

impl Iterator for SuffixIter {
    type Item = Vec<Direction>;

    fn next(&mut self) -> Option<Vec<Direction>> {
        let cur = self.next.take()?;
        let mut succ = cur.clone();
        let mut i = succ.len();
        loop {
            if i == 0 {
                break;
            }
            i -= 1;
            succ[i] += 1;
            if succ[i] < self.degree {
                self.next = Some(succ);
                break;
            }
            succ[i] = 0;
        }
        Some(cur)
    }
}

/// `log P̂(A) - J log(2d)`.
pub fn certified_log_lower_bound(log_p_hat: f64, j: f64, d: usize) -> f64 {
    log_p_hat - j * (2.0 * d as f64).ln()
}

/// Failure of a decoding step.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("input of length {len} is shorter than T_3 = {t3}")]
    TooShort { len: usize, t3: usize },
    #[error("late set of the prefix could not be organized: {0}")]
    LateSet(String),
    #[error("representative {x} is not visited after T_2")]
    RepresentativeNotHit { x: Label },
    #[error("tree loop of representative {x} not found at time {at}")]
    TreeLoopMismatch { x: Label, at: usize },
    #[error("loops of consecutive representatives overlap at {x}")]
    Order { x: Label },
    #[error("type of representative {x} undetermined: path ends near time {at}")]
    TypeUndetermined { x: Label, at: usize },
    #[error("no closing time for the loop window of {x} hit at time {at}")]
    WindowDiverged { x: Label, at: usize },
    #[error("window at {x} is not the kind-{kind:?} loop it must be")]
    LoopShape { x: Label, kind: LoopKind },
    #[error("recovered path does not re-encode to the input: {0}")]
    Reencode(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDeletion {
    pub x: Label,
    pub at: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeducedLoop {
    pub x: Label,
    /// First visit of `x` after `T_2` in the input.
    pub first_hit: usize,
    /// `Dir` at the first visit minus one, at it, and plus one.
    pub dirs: [usize; 3],
    pub kind: LoopKind,
    pub ext: Option<usize>,
    /// Position of `x` inside its loop.
    pub offset: usize,
    pub at: usize,
    pub len: usize,
    pub root: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTranscript {
    pub rules_version: u32,
    pub late: Vec<Label>,
    pub representatives: Vec<Label>,
    pub tree_deletions: Vec<TreeDeletion>,
    pub loops: Vec<DeducedLoop>,
    /// `(k1, k2)` pairs in the order the deletions were applied.
    pub deletions: Vec<(usize, usize)>,
    pub recovered_len: usize,
    pub recovered_sha256: String,
}

impl RecoveryTranscript {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn prefix_graph(path: &Trajectory, f: &[Label], params: &SurgeryParams) -> Result<(Vec<Label>, AuxiliaryGraph), DecodeError> {
    if path.len() < params.t3 {
        return Err(DecodeError::TooShort { len: path.len(), t3: params.t3 });
    }
    let late = late_in(path, f, params.t2);
    let graph = AuxiliaryGraph::new(path.geometry(), &late, params.l_n).map_err(|e| DecodeError::LateSet(e.to_string()))?;
    Ok((late, graph))
}

/// Removes the tree loops from a member of `Ψ(ω)`, giving an extension of
/// `ω^{(n)}`.
pub fn recover_stage_two(
    tilde: &Trajectory,
    f: &[Label],
    params: &SurgeryParams,
) -> Result<(Trajectory, Vec<TreeDeletion>), DecodeError> {
    let geo = *tilde.geometry();
    let (_, graph) = prefix_graph(tilde, f, params)?;
    let mut hits = Vec::new();
    for c in graph.components() {
        let x = c[0];
        let h = tilde.first_hit_from(x, params.t2 + 1).ok_or(DecodeError::RepresentativeNotHit { x })?;
        hits.push((h, x, c));
    }
    hits.sort_unstable_by_key(|h| h.0);
    let mut dels: Vec<TreeDeletion> = Vec::new();
    for &(h, x, c) in &hits {
        let tree = build_tree_loop(&geo, c, x, params.l_n).map_err(|e| DecodeError::LateSet(e.to_string()))?;
        let window = tilde.positions().get(h..=h + tree.len());
        if window != Some(&tree.positions[..]) {
            return Err(DecodeError::TreeLoopMismatch { x, at: h });
        }
        if let Some(prev) = dels.last() {
            if prev.at + prev.len >= h {
                return Err(DecodeError::Order { x });
            }
        }
        dels.push(TreeDeletion { x, at: h, len: tree.len() });
    }
    let mut pos = tilde.positions().to_vec();
    for t in dels.iter().rev() {
        delete_in_place(&mut pos, t.at, t.at + t.len).expect("window checked above");
    }
    Ok((Trajectory::from_positions_unchecked(geo, pos), dels))
}

/// Deduces and removes the first-round loops from an extension of
/// `ω^{(n)}`, then truncates to `T_3`.
pub fn recover_from_extension(
    bar: &Trajectory,
    f: &[Label],
    params: &SurgeryParams,
) -> Result<(Trajectory, Vec<DeducedLoop>, Vec<(usize, usize)>), DecodeError> {
    let geo = *bar.geometry();
    let (_, graph) = prefix_graph(bar, f, params)?;
    let len = bar.len();
    let mut loops = Vec::new();
    for x in graph.representatives() {
        let h = bar.first_hit_from(x, params.t2 + 1).ok_or(DecodeError::RepresentativeNotHit { x })?;
        let dir = |k: usize| bar.dir(k).ok_or(DecodeError::TypeUndetermined { x, at: h });
        let dirs = [dir(h - 1)?, dir(h)?, dir(h + 1)?];
        let kind = if dirs[0] == dirs[1] {
            LoopKind::D
        } else if dirs[0] < dirs[1] {
            LoopKind::B
        } else if dirs[1] <= dirs[2] {
            LoopKind::A
        } else {
            LoopKind::C
        };
        let (offset, lp) = match kind.ext() {
            None => {
                let lp = build_beta_i(&geo, x, dirs[0]).map_err(|_| DecodeError::LoopShape { x, kind })?;
                if bar.positions()[h..=h + 2] != lp.positions[..] {
                    return Err(DecodeError::LoopShape { x, kind });
                }
                (0, lp)
            }
            Some(ext) => {
                let mut k = 1;
                loop {
                    if h - k <= params.t2 || h + k + ext > len {
                        return Err(DecodeError::WindowDiverged { x, at: h });
                    }
                    if bar.at(h - k) == bar.at(h + k + ext) {
                        break;
                    }
                    k += 1;
                }
                let root = bar.at(h - k);
                let window = &bar.positions()[h - k..=h + k + ext];
                let expected = build_beta(&geo, x, root).map_err(|_| DecodeError::LoopShape { x, kind })?;
                if expected.kind != kind || expected.positions[..] != *window {
                    return Err(DecodeError::LoopShape { x, kind });
                }
                (k, expected)
            }
        };
        loops.push(DeducedLoop {
            x,
            first_hit: h,
            dirs,
            kind,
            ext: kind.ext(),
            offset,
            at: h - offset,
            len: lp.len(),
            root: lp.root,
        });
    }
    loops.sort_unstable_by_key(|l| l.first_hit);
    for w in loops.windows(2) {
        if w[0].at + w[0].len >= w[1].at {
            return Err(DecodeError::Order { x: w[1].x });
        }
    }
    let mut pos = bar.positions().to_vec();
    let mut deletions = Vec::with_capacity(loops.len());
    for l in loops.iter().rev() {
        delete_in_place(&mut pos, l.at, l.at + l.len).expect("window checked above");
        deletions.push((l.at, l.at + l.len));
    }
    if pos.len() - 1 < params.t3 {
        return Err(DecodeError::TooShort { len: pos.len() - 1, t3: params.t3 });
    }
    pos.truncate(params.t3 + 1);
    Ok((Trajectory::from_positions_unchecked(geo, pos), loops, deletions))
}

fn path_digest(p: &Trajectory) -> String {
    let mut h = Sha256::new();
    for &l in p.positions() {
        h.update(l.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Recovers `ω` from a member of `Ψ(ω)`. The answer is re-encoded and
/// compared with the input before it is returned.
pub fn recover(tilde: &Trajectory, f: &[Label], params: &SurgeryParams) -> Result<(Trajectory, RecoveryTranscript), DecodeError> {
    let (late, graph) = prefix_graph(tilde, f, params)?;
    let (bar, tree_deletions) = recover_stage_two(tilde, f, params)?;
    let (omega, loops, mut deletions) = recover_from_extension(&bar, f, params)?;
    let s = build_surgery(&omega, f, params).map_err(|e| DecodeError::Reencode(e.to_string()))?;
    if !tilde.extends(&s.omega_2n) {
        return Err(DecodeError::Reencode("input does not extend the surgered path".into()));
    }
    let mut all = tree_deletions.iter().rev().map(|t| (t.at, t.at + t.len)).collect::<Vec<_>>();
    all.append(&mut deletions);
    let transcript = RecoveryTranscript {
        rules_version: RULES_VERSION,
        late,
        representatives: graph.representatives(),
        tree_deletions,
        loops,
        deletions: all,
        recovered_len: omega.len(),
        recovered_sha256: path_digest(&omega),
    };
    Ok((omega, transcript))
}

/// As [`recover`], for an extension of `ω^{(n)}`.
pub fn recover_first_round(bar: &Trajectory, f: &[Label], params: &SurgeryParams) -> Result<Trajectory, DecodeError> {
    let (omega, _, _) = recover_from_extension(bar, f, params)?;
    let s = build_surgery(&omega, f, params).map_err(|e| DecodeError::Reencode(e.to_string()))?;
    if !bar.extends(&s.omega_n) {
        return Err(DecodeError::Reencode("input does not extend ω^(n)".into()));
    }
    Ok(omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo(n: u32) -> TorusGeometry {
        TorusGeometry::new(3, n).unwrap()
    }

    fn lbl(g: &TorusGeometry, c: [u32; 3]) -> Label {
        g.label(&g.point(&c).unwrap())
    }

    fn coords(g: &TorusGeometry, l: Label) -> Vec<u32> {
        g.from_label(l).coords().to_vec()
    }

    #[test]
    fn classification() {
        let g = geo(16);
        let o = lbl(&g, [0, 0, 0]);
        assert_eq!(classify(&g, o, lbl(&g, [2, 3, 0])), LoopKind::A);
        assert_eq!(classify(&g, o, lbl(&g, [0, 5, 0])), LoopKind::B);
        assert_eq!(classify(&g, o, lbl(&g, [0, 0, 4])), LoopKind::C);
        assert_eq!(classify(&g, o, o), LoopKind::D);
        // Antipode on even N: Δ = (+8, 0, 0) from either lift.
        let a = lbl(&g, [8, 0, 0]);
        assert_eq!(classify(&g, o, a), LoopKind::B);
        assert_eq!(classify(&g, a, o), LoopKind::B);
        assert_eq!(LoopKind::A.ext(), Some(0));
        assert_eq!(LoopKind::B.ext(), Some(2));
        assert_eq!(LoopKind::C.ext(), Some(4));
        assert_eq!(LoopKind::D.ext(), None);
    }

    #[test]
    fn beta_type_b_trace() {
        let g = geo(16);
        let lp = build_beta(&g, lbl(&g, [0, 0, 0]), lbl(&g, [2, 0, 0])).unwrap();
        let trace: Vec<Vec<u32>> = lp.positions.iter().map(|&l| coords(&g, l)).collect();
        let expect: Vec<Vec<u32>> = [[2, 0, 0], [1, 0, 0], [0, 0, 0], [0, 1, 0], [1, 1, 0], [2, 1, 0], [2, 0, 0]]
            .iter()
            .map(|c| c.to_vec())
            .collect();
        assert_eq!(trace, expect);
        assert!(lp.len() <= 24);
    }

    #[test]
    fn beta_type_c_trace() {
        let g = geo(16);
        let lp = build_beta(&g, lbl(&g, [0, 0, 0]), lbl(&g, [0, 0, 1])).unwrap();
        assert_eq!(lp.kind, LoopKind::C);
        assert_eq!(lp.len(), 6);
        let trace: Vec<Vec<u32>> = lp.positions.iter().map(|&l| coords(&g, l)).collect();
        assert_eq!(trace[2], vec![0, 1, 0]);
        assert_eq!(trace[3], vec![1, 1, 0]);
        assert_eq!(trace[4], vec![1, 1, 1]);
    }

    #[test]
    fn beta_type_a_trace() {
        let g = geo(16);
        let x = lbl(&g, [0, 0, 0]);
        let lp = build_beta(&g, x, lbl(&g, [1, 1, 0])).unwrap();
        assert_eq!(lp.kind, LoopKind::A);
        assert_eq!(lp.len(), 4);
        assert_eq!(lp.hit(x), Some(2));
        assert_eq!(coords(&g, lp.positions[1]), vec![0, 1, 0]);
        assert_eq!(coords(&g, lp.positions[3]), vec![1, 0, 0]);
    }

    #[test]
    fn beta_i_shape() {
        let g = geo(16);
        let o = lbl(&g, [0, 0, 0]);
        let lp = build_beta_i(&g, o, 1).unwrap();
        assert_eq!(lp.positions, vec![o, lbl(&g, [0, 1, 0]), o]);
        assert_eq!(lp.len(), 2);
        assert!(build_beta_i(&g, o, 3).is_err());
        assert!(build_beta(&g, o, o).is_err());
    }

    fn check_path(g: &TorusGeometry, y: Label, x: Label) {
        let p = build_path(g, y, x).unwrap();
        assert_eq!(p[0], y);
        assert_eq!(*p.last().unwrap(), x);
        let mut s = p.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), p.len());
        let r = g.dist_inf_labels(x, y);
        assert!(p.len() - 1 <= 3 * r as usize);
        assert!(p.iter().all(|&z| g.dist_inf_labels(z, x) <= r));
        for w in p.windows(2) {
            assert_eq!(g.dist_1_labels(w[0], w[1]), 1);
            assert_eq!(g.dist_1_labels(w[1], x) + 1, g.dist_1_labels(w[0], x));
        }
    }

    #[test]
    fn path_fixtures() {
        let g = geo(16);
        let x = lbl(&g, [3, 3, 3]);
        check_path(&g, lbl(&g, [5, 1, 3]), x);
        check_path(&g, lbl(&g, [3, 7, 3]), x);
        check_path(&g, lbl(&g, [3, 3, 15]), x);
        assert!(build_path(&g, x, x).is_err());
    }

    proptest! {
        #[test]
        fn loop_laws(n in 3u32..20, a in any::<u32>(), b in any::<u32>()) {
            let g = geo(n);
            let x = a % g.volume();
            let y = b % g.volume();
            prop_assume!(x != y);
            let lp = build_beta(&g, x, y).unwrap();
            prop_assert!(check_beta(&g, &lp).is_ok());
            let h = lp.hit(x).unwrap();
            prop_assert_eq!(h, lp.len() - h - lp.kind.ext().unwrap());
            check_path(&g, y, x);
        }
    }

    #[test]
    fn tree_loops() {
        let g = geo(32);
        let x = lbl(&g, [0, 0, 0]);
        assert!(build_tree_loop(&g, &[x], x, 1).unwrap().is_empty());
        let y = lbl(&g, [2, 0, 0]);
        let t = build_tree_loop(&g, &[x, y], x, 1).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.len() <= 2 * 3 * 2 && t.len() <= 18);
        assert!(build_tree_loop(&g, &[x, lbl(&g, [10, 0, 0])], x, 1).is_err());
        assert!(build_tree_loop(&g, &[y], x, 1).is_err());
        let c = [x, lbl(&g, [0, 3, 0]), lbl(&g, [0, 5, 2])];
        let t1 = build_tree_loop(&g, &c, x, 1).unwrap();
        let t2 = build_tree_loop(&g, &c, x, 1).unwrap();
        assert_eq!(t1, t2);
        assert!(c.iter().all(|z| t1.positions.contains(z)));
        assert!(t1.len() <= 6 * 3 * 1 * 2);
        // Label-order DFS: the root visits its smaller-label neighbour first.
        let i1 = t1.hit(c[1]).unwrap();
        let i2 = t1.hit(c[2]).unwrap();
        assert!(i1 < i2);
    }

    #[test]
    fn insert_delete() {
        let g = geo(8);
        let a = lbl(&g, [0, 0, 0]);
        let b = lbl(&g, [1, 0, 0]);
        let c = lbl(&g, [1, 1, 0]);
        let w = Trajectory::from_positions(g, vec![a, b, a]).unwrap();
        let ins = insert(&w, &[b, c, b], 1).unwrap();
        assert_eq!(ins.positions(), &[a, b, c, b, a]);
        assert_eq!(delete(&ins, 1, 3).unwrap(), w);
        let z = insert(&w, &[a, b, a], 0).unwrap();
        assert_eq!(delete(&z, 0, 2).unwrap(), w);
        let e = insert(&w, &[a, b, a], 2).unwrap();
        assert_eq!(e.len(), 4);
        assert_eq!(delete(&e, 2, 4).unwrap(), w);
        assert_eq!(insert(&w, &[c, b, c], 1), Err(Error::AnchorMismatch { index: 1 }));
        assert!(insert(&w, &[a, b, a], 3).is_err());
        assert_eq!(delete(&ins, 0, 3), Err(Error::AnchorMismatch { index: 0 }));
    }

    #[test]
    fn suffix_enumeration() {
        let g = geo(4);
        let w = Trajectory::single(g, 0);
        let psi = PsiFamily::new(&w, 2).unwrap();
        let all: Vec<_> = psi.enumerate().unwrap().collect();
        assert_eq!(all.len(), 36);
        assert_eq!(psi.count(), Some(36));
        assert_eq!(all[0], vec![0, 0]);
        assert_eq!(all[35], vec![5, 5]);
        let zero = PsiFamily::new(&w, 0).unwrap();
        assert_eq!(zero.enumerate().unwrap().count(), 1);
        assert_eq!(zero.member(&[]).unwrap(), w);
        assert!(PsiFamily::new(&w, 9).unwrap().enumerate().is_err());
        let long = Trajectory::from_steps(g, 0, &[0, 1]);
        assert!(PsiFamily::new(&long, 1).is_err());
    }

    #[test]
    fn certificate_arithmetic() {
        assert_eq!(certified_log_lower_bound(0.0, 0.0, 3), 0.0);
        assert_eq!(certified_log_lower_bound(0.0, 6.0, 3), -6.0 * 6f64.ln());
    }
}
