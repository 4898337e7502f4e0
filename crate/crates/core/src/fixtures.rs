//! Constructed good paths for exercising surgery and recovery.
//!
//! A handful of small clusters is planted in the edge `H_δ`. The path first
//! sweeps the torus along a boustrophedon order while stepping around the
//! clusters, then walks at random (still avoiding them) until `T_2`. On
//! `(T_2, T_3]` it is routed to a chosen point near each representative, or
//! onto the representative itself, and finishes with a random walk that
//! keeps its distance. Near points, types and `M_0` are recomputed from the
//! finished path, and the result is checked with [`is_good_path`].

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::late::{is_good_path, GoodVerdict, LnPolicy, SurgeryConfig, SurgeryParams};
use crate::potential::Constants;
use crate::surgery::{build_surgery, classify, recover, LoopKind, PsiFamily, RecoveryTranscript, Surgery};
use crate::torus::{Label, TorusGeometry};
use crate::walk::{DirectionSource, RngStream, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureOptions {
    pub n: u32,
    pub policy: LnPolicy,
    pub config: SurgeryConfig,
    /// Number of planted clusters; drawn from `1..=4` when `None`.
    pub clusters: Option<usize>,
    /// Members besides the representative, per cluster, at most.
    pub max_members: usize,
    /// Loop kind per cluster; drawn at random when `None`.
    pub kinds: Option<Vec<LoopKind>>,
}

impl FixtureOptions {
    pub fn new(n: u32) -> Self {
        FixtureOptions {
            n,
            policy: LnPolicy::default(),
            config: SurgeryConfig::default(),
            clusters: None,
            max_members: 2,
            kinds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedCluster {
    pub rep: Label,
    pub members: Vec<Label>,
    /// Kind the construction aimed for.
    pub planned: LoopKind,
    pub target: Label,
    /// Kind of `β(x, Near(ω, x))` on the finished path.
    pub kind: LoopKind,
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub params: SurgeryParams,
    /// `F = H_δ`, sorted.
    pub f: Vec<Label>,
    pub omega: Trajectory,
    pub clusters: Vec<PlantedCluster>,
    pub verdict: GoodVerdict,
    pub attempts: usize,
}

/// Reflected mixed-radix order on `T_N`: consecutive vertices are neighbours.
pub fn snake_order(geo: &TorusGeometry) -> Vec<Label> {
    let d = geo.d();
    let n = geo.N();
    let mut coords = vec![0u32; d];
    (0..geo.volume())
        .map(|idx| {
            let mut raw = vec![0u32; d];
            let mut rest = idx;
            for i in (0..d).rev() {
                raw[i] = rest % n;
                rest /= n;
            }
            // A digit runs backwards when the index of its enclosing row is odd.
            let mut prefix = 0u64;
            for i in 0..d {
                coords[i] = if prefix % 2 == 0 { raw[i] } else { n - 1 - raw[i] };
                prefix = prefix * n as u64 + raw[i] as u64;
            }
            geo.label(&geo.point(&coords).unwrap())
        })
        .collect()
}

/// Shortest path from `from` to `to` through vertices not in `blocked`,
/// both ends included. Ties go to the lower direction code.
pub fn route(geo: &TorusGeometry, from: Label, to: Label, blocked: &[bool]) -> Option<Vec<Label>> {
    if from == to {
        return Some(vec![from]);
    }
    let mut parent = vec![Label::MAX; geo.volume() as usize];
    parent[from as usize] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        for dir in 0..geo.degree() as u8 {
            let u = geo.step_label(v, dir);
            if parent[u as usize] != Label::MAX || (blocked[u as usize] && u != to) {
                continue;
            }
            parent[u as usize] = v;
            if u == to {
                let mut path = vec![to];
                let mut z = to;
                while z != from {
                    z = parent[z as usize];
                    path.push(z);
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back(u);
        }
    }
    None
}

/// Shortest way from `from` to the nearest vertex outside `region`, never
/// entering `blocked`.
fn route_out(geo: &TorusGeometry, from: Label, region: &[bool], blocked: &[bool]) -> Option<Vec<Label>> {
    let mut parent = vec![Label::MAX; geo.volume() as usize];
    parent[from as usize] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        if !region[v as usize] {
            let mut path = vec![v];
            let mut z = v;
            while z != from {
                z = parent[z as usize];
                path.push(z);
            }
            path.reverse();
            return Some(path);
        }
        for dir in 0..geo.degree() as u8 {
            let u = geo.step_label(v, dir);
            if parent[u as usize] == Label::MAX && !blocked[u as usize] {
                parent[u as usize] = v;
                queue.push_back(u);
            }
        }
    }
    None
}

fn walk_avoiding(geo: &TorusGeometry, pos: &mut Vec<Label>, until: usize, blocked: &[bool], src: &mut RngStream) -> Result<()> {
    let deg = geo.degree();
    let mut here = *pos.last().unwrap();
    if (0..deg as u8).all(|dir| blocked[geo.step_label(here, dir) as usize]) {
        return Err(Error::Precondition(format!("vertex {here} is walled in")));
    }
    while pos.len() <= until {
        let dir = src.next_direction(deg).unwrap();
        let next = geo.step_label(here, dir);
        if !blocked[next as usize] {
            pos.push(next);
            here = next;
        }
    }
    Ok(())
}

fn follow(pos: &mut Vec<Label>, leg: Option<Vec<Label>>) -> Result<()> {
    let leg = leg.ok_or_else(|| Error::Precondition("fixture route blocked".into()))?;
    pos.extend_from_slice(&leg[1..]);
    Ok(())
}

/// Labels within `d_inf` distance `r` of `x`.
fn ball(geo: &TorusGeometry, x: Label, r: i64) -> Vec<Label> {
    let d = geo.d();
    let base: Vec<i64> = geo.from_label(x).coords().iter().map(|&c| c as i64).collect();
    let side = (2 * r + 1) as usize;
    let mut out = Vec::with_capacity(side.pow(d as u32));
    let mut off = vec![-r; d];
    loop {
        let c: Vec<i64> = base.iter().zip(&off).map(|(b, o)| b + o).collect();
        out.push(geo.label(&geo.project_coords(&c)));
        let mut i = 0;
        while i < d {
            off[i] += 1;
            if off[i] <= r {
                break;
            }
            off[i] = -r;
            i += 1;
        }
        if i == d {
            break;
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn random_offset(kind: LoopKind, d: usize, reach: i64, rng: &mut RngStream) -> Vec<i64> {
    let nz = |rng: &mut RngStream| {
        let v = rng.gen_range(1..=reach);
        if rng.gen_bool(0.5) { v } else { -v }
    };
    let mut off = vec![0i64; d];
    match kind {
        LoopKind::A => {
            let mut axes: Vec<usize> = (0..d).collect();
            axes.shuffle(rng);
            let k = rng.gen_range(2..=d);
            for &i in &axes[..k] {
                off[i] = nz(rng);
            }
        }
        LoopKind::B => {
            let i = rng.gen_range(0..d - 1);
            off[i] = nz(rng);
        }
        LoopKind::C => off[d - 1] = nz(rng),
        LoopKind::D | LoopKind::Tree => {}
    }
    off
}

fn plant(geo: &TorusGeometry, f: &[Label], in_f: &[bool], count: usize, opts: &FixtureOptions, l_n: usize, rng: &mut RngStream) -> Vec<(Label, Vec<Label>)> {
    let sep = 3 * l_n as u32;
    let mut reps: Vec<Label> = Vec::new();
    for _ in 0..400 * count {
        if reps.len() == count {
            break;
        }
        let x = f[rng.gen_range(0..f.len())];
        if reps.iter().all(|&y| geo.dist_inf_labels(x, y) > sep) {
            reps.push(x);
        }
    }
    // Members may not bring two clusters within 3 l_N of each other.
    let mut taken: Vec<(usize, Label)> = reps.iter().copied().enumerate().collect();
    let mut out: Vec<(Label, Vec<Label>)> = reps.iter().map(|&x| (x, Vec::new())).collect();
    for (j, &x) in reps.iter().enumerate() {
        let mut cand: Vec<Label> = ball(geo, x, 1).into_iter().filter(|&z| z > x && in_f[z as usize]).collect();
        cand.shuffle(rng);
        let m = rng.gen_range(0..=opts.max_members.min(cand.len()));
        for z in cand {
            if out[j].1.len() == m {
                break;
            }
            if taken.iter().all(|&(k, y)| k == j || geo.dist_inf_labels(z, y) > sep) {
                taken.push((j, z));
                out[j].1.push(z);
            }
        }
        out[j].1.sort_unstable();
    }
    out
}

/// Builds a good path according to `opts`, retrying with fresh randomness
/// until [`is_good_path`] accepts it.
pub fn good_fixture(opts: &FixtureOptions, constants: &Constants, seed: u64, trial: u64) -> Result<Fixture> {
    let geo = TorusGeometry::new(3, opts.n)?;
    let mut rng = RngStream::new(seed, "fixture", trial);
    let base = SurgeryParams::new(&geo, &opts.config, constants, opts.policy)?;
    let (_, f) = geo.bulk_edge_split(opts.config.delta)?;
    for attempt in 1..=8 {
        if let Some(fx) = attempt_fixture(&geo, &f, opts, constants, &base, &mut rng, attempt)? {
            return Ok(fx);
        }
    }
    Err(Error::Precondition(format!("no good fixture after 8 attempts (N={}, trial {trial})", opts.n)))
}

fn attempt_fixture(
    geo: &TorusGeometry,
    f: &[Label],
    opts: &FixtureOptions,
    constants: &Constants,
    base: &SurgeryParams,
    rng: &mut RngStream,
    attempt: usize,
) -> Result<Option<Fixture>> {
    let vol = geo.volume() as usize;
    let l_n = base.l_n;
    let mut in_f = vec![false; vol];
    for &z in f {
        in_f[z as usize] = true;
    }
    let count = opts.clusters.unwrap_or_else(|| rng.gen_range(1..=4));
    let planted = plant(geo, f, &in_f, count, opts, l_n, rng);
    if planted.len() < count {
        return Ok(None);
    }
    let mut blocked = vec![false; vol];
    for (x, m) in &planted {
        blocked[*x as usize] = true;
        for &z in m {
            blocked[z as usize] = true;
        }
    }

    // Targets on (T_2, T_3]: the representative itself for kind d, otherwise
    // a point y with the wanted kind, the unique visited point of the ball
    // B(x, |y - x|_inf).
    let kinds: Vec<LoopKind> = match &opts.kinds {
        Some(k) => k.clone(),
        None => (0..planted.len())
            .map(|_| {
                if l_n < 2 {
                    return LoopKind::D;
                }
                *[LoopKind::A, LoopKind::B, LoopKind::C, LoopKind::D].choose(rng).unwrap()
            })
            .collect(),
    };
    if kinds.len() != planted.len() {
        return Err(Error::Parameter(format!("{} kinds for {} clusters", kinds.len(), planted.len())));
    }
    let mut keep_out = vec![false; vol];
    let mut targets = Vec::with_capacity(planted.len());
    for ((x, _), &kind) in planted.iter().zip(&kinds) {
        if kind == LoopKind::D {
            targets.push(*x);
            continue;
        }
        if l_n < 2 {
            return Err(Error::Parameter(format!("kind {kind:?} needs l_N >= 2")));
        }
        let off = random_offset(kind, 3, l_n as i64 - 1, rng);
        let r = off.iter().map(|v| v.abs()).max().unwrap();
        for z in ball(geo, *x, r) {
            keep_out[z as usize] = true;
        }
        let c: Vec<i64> = geo.from_label(*x).coords().iter().zip(&off).map(|(&a, o)| a as i64 + o).collect();
        targets.push(geo.label(&geo.project_coords(&c)));
    }

    // Sweep, then wander, up to T_2.
    let snake: Vec<Label> = snake_order(geo).into_iter().filter(|&z| !blocked[z as usize]).collect();
    let mut pos = Vec::with_capacity(base.t4 + 1);
    pos.push(snake[0]);
    for &z in &snake[1..] {
        let here = *pos.last().unwrap();
        if geo.dist_1_labels(here, z) == 1 {
            pos.push(z);
        } else {
            follow(&mut pos, route(geo, here, z, &blocked))?;
        }
    }
    if pos.len() > base.t2 {
        return Err(Error::Parameter(format!("sweep of {} steps does not fit before T_2 = {}", pos.len(), base.t2)));
    }
    let wander: Vec<bool> = blocked.iter().zip(&keep_out).map(|(a, b)| *a || *b).collect();
    let here = *pos.last().unwrap();
    if wander[here as usize] {
        follow(&mut pos, route_out(geo, here, &wander, &blocked))?;
    }
    walk_avoiding(geo, &mut pos, base.t2, &wander, rng)?;

    let mut order: Vec<usize> = (0..planted.len()).collect();
    order.shuffle(rng);
    for &j in &order {
        let here = *pos.last().unwrap();
        follow(&mut pos, route(geo, here, targets[j], &keep_out))?;
    }
    if pos.len() > base.t3 {
        return Ok(None);
    }
    walk_avoiding(geo, &mut pos, base.t3, &keep_out, rng)?;
    let omega = Trajectory::from_positions_unchecked(*geo, pos);

    // Price the surgery honestly and set M_0 to match.
    let probe = is_good_path(&omega, f, base)?;
    let mdist = probe.mdist.max(1);
    let cfg = SurgeryConfig { m0: base.m0_for(f.len(), mdist), ..opts.config };
    let params = SurgeryParams::new(geo, &cfg, constants, opts.policy)?;
    let verdict = is_good_path(&omega, f, &params)?;
    if !verdict.is_good() || params.check_budget(f.len()).is_err() {
        return Ok(None);
    }
    let clusters = planted
        .into_iter()
        .zip(kinds)
        .zip(targets)
        .map(|(((rep, members), planned), target)| {
            let near = verdict.analysis.near_of(rep).unwrap().0;
            PlantedCluster { rep, members, planned, target, kind: classify(geo, rep, near) }
        })
        .collect();
    Ok(Some(Fixture { params, f: f.to_vec(), omega, clusters, verdict, attempts: attempt }))
}

/// Result of surgery, one draw from `Ψ(ω)`, and decoding.
#[derive(Clone, Debug)]
pub struct RoundTrip {
    pub surgery: Surgery,
    pub sample: Trajectory,
    pub recovered: Trajectory,
    pub transcript: RecoveryTranscript,
}

impl RoundTrip {
    pub fn exact(&self, omega: &Trajectory) -> bool {
        self.recovered == *omega
    }
}

pub fn round_trip<S: DirectionSource>(fx: &Fixture, src: &mut S) -> Result<RoundTrip> {
    let surgery = build_surgery(&fx.omega, &fx.f, &fx.params)?;
    let psi = PsiFamily::new(&surgery.omega_2n, fx.params.t4)?;
    let sample = psi.sample(src)?;
    let (recovered, transcript) = recover(&sample, &fx.f, &fx.params).map_err(|e| Error::Format(e.to_string()))?;
    Ok(RoundTrip { surgery, sample, recovered, transcript })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snake_is_hamiltonian() {
        for n in [3, 4, 5] {
            let g = TorusGeometry::new(3, n).unwrap();
            let s = snake_order(&g);
            let mut sorted = s.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, g.all_labels().collect::<Vec<_>>());
            assert!(s.windows(2).all(|w| g.dist_1_labels(w[0], w[1]) == 1));
        }
    }

    #[test]
    fn route_avoids() {
        let g = TorusGeometry::new(3, 8).unwrap();
        let mut blocked = vec![false; 512];
        let mid = g.label(&g.point(&[1, 0, 0]).unwrap());
        blocked[mid as usize] = true;
        let to = g.label(&g.point(&[2, 0, 0]).unwrap());
        let p = route(&g, 0, to, &blocked).unwrap();
        assert_eq!(p.len(), 5);
        assert!(!p.contains(&mid));
        assert_eq!(ball(&g, 0, 1).len(), 27);
    }

    #[test]
    fn fixtures_are_good_and_round_trip() {
        let c = Constants::watson();
        for trial in 0..6 {
            let fx = good_fixture(&FixtureOptions::new(16), &c, 7, trial).unwrap();
            assert!(fx.verdict.is_good());
            assert!(fx.clusters.iter().all(|c| c.kind == c.planned));
            assert_eq!(fx.omega.len(), fx.params.t3);
            let late = &fx.verdict.analysis.late;
            assert_eq!(late.len(), fx.clusters.iter().map(|c| 1 + c.members.len()).sum::<usize>());
            let mut src = RngStream::new(7, "psi", trial);
            let rt = round_trip(&fx, &mut src).unwrap();
            assert!(rt.exact(&fx.omega));
            assert!(rt.sample.covers_torus());
        }
    }
}
