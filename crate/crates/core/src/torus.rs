//! Geometry of the discrete torus `(Z/NZ)^d` and of cubes in `Z^d`.
//!
//! Vertices are addressed by their row-major label: the first coordinate is
//! the most significant digit, so labels increase with lexicographic order.
//! That order is the one used for every tie-break in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported dimension. Points are stored inline.
pub const MAX_DIM: usize = 8;

/// Largest supported vertex count `N^d`.
pub const MAX_VERTICES: u64 = 1 << 31;

/// A vertex label in `[0, N^d)`.
pub type Label = u32;

/// A point of `Z^d` (not reduced).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatticePoint {
    coords: [i64; MAX_DIM],
    dim: u8,
}

impl LatticePoint {
    pub fn new(coords: &[i64]) -> Self {
        assert!(coords.len() <= MAX_DIM, "dimension above MAX_DIM");
        let mut c = [0i64; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        LatticePoint { coords: c, dim: coords.len() as u8 }
    }

    pub fn zero(dim: usize) -> Self {
        LatticePoint { coords: [0; MAX_DIM], dim: dim as u8 }
    }

    /// The unit vector `e_i`, with `i` counted from zero.
    pub fn unit(dim: usize, axis: usize) -> Self {
        let mut p = Self::zero(dim);
        p.coords[axis] = 1;
        p
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn coords(&self) -> &[i64] {
        &self.coords[..self.dim as usize]
    }

    pub fn get(&self, i: usize) -> i64 {
        self.coords[i]
    }

    pub fn set(&mut self, i: usize, v: i64) {
        self.coords[i] = v;
    }

    pub fn norm_inf(&self) -> i64 {
        self.coords().iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn norm_1(&self) -> i64 {
        self.coords().iter().map(|c| c.abs()).sum()
    }

    pub fn norm_2(&self) -> f64 {
        self.coords().iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt()
    }

    pub fn add(&self, o: &LatticePoint) -> LatticePoint {
        let mut r = *self;
        for i in 0..self.dim() {
            r.coords[i] += o.coords[i];
        }
        r
    }

    pub fn sub(&self, o: &LatticePoint) -> LatticePoint {
        let mut r = *self;
        for i in 0..self.dim() {
            r.coords[i] -= o.coords[i];
        }
        r
    }

    pub fn neg(&self) -> LatticePoint {
        let mut r = *self;
        for i in 0..self.dim() {
            r.coords[i] = -r.coords[i];
        }
        r
    }

    /// Number of nonzero components.
    pub fn support_size(&self) -> usize {
        self.coords().iter().filter(|&&c| c != 0).count()
    }
}

impl serde::Serialize for LatticePoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for LatticePoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v: Vec<i64> = Vec::deserialize(d)?;
        if v.len() > MAX_DIM {
            return Err(serde::de::Error::custom("dimension above MAX_DIM"));
        }
        Ok(LatticePoint::new(&v))
    }
}

impl std::fmt::Debug for LatticePoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.coords())
    }
}

/// A vertex of the torus, coordinates in `[0, N)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct TorusPoint {
    coords: [u32; MAX_DIM],
    dim: u8,
}

impl TorusPoint {
    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn coords(&self) -> &[u32] {
        &self.coords[..self.dim as usize]
    }

    pub fn get(&self, i: usize) -> u32 {
        self.coords[i]
    }
}

impl std::fmt::Debug for TorusPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.coords())
    }
}

/// Step directions are coded as `2 * axis + s`, where `s = 0` means `+e_axis`
/// and `s = 1` means `-e_axis`.
pub type Direction = u8;

pub fn direction(axis: usize, negative: bool) -> Direction {
    (2 * axis + negative as usize) as Direction
}

pub fn direction_axis(dir: Direction) -> usize {
    (dir >> 1) as usize
}

pub fn direction_is_negative(dir: Direction) -> bool {
    dir & 1 == 1
}

pub fn reverse_direction(dir: Direction) -> Direction {
    dir ^ 1
}

/// `T_N = (Z/NZ)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct TorusGeometry {
    d: usize,
    n: u32,
    volume: u32,
    strides: [u32; MAX_DIM],
}

#[derive(Serialize, Deserialize)]
struct RawGeometry {
    d: usize,
    #[serde(rename = "N")]
    n: u32,
}

impl TryFrom<RawGeometry> for TorusGeometry {
    type Error = Error;
    fn try_from(r: RawGeometry) -> Result<Self> {
        TorusGeometry::new(r.d, r.n)
    }
}

impl From<TorusGeometry> for RawGeometry {
    fn from(g: TorusGeometry) -> Self {
        RawGeometry { d: g.d, n: g.n }
    }
}

impl TorusGeometry {
    pub fn new(d: usize, n: u32) -> Result<Self> {
        if d < 3 {
            return Err(Error::Geometry(format!("d = {d} < 3")));
        }
        if d > MAX_DIM {
            return Err(Error::Geometry(format!("d = {d} > {MAX_DIM}")));
        }
        if n < 2 {
            return Err(Error::Geometry(format!("N = {n} < 2")));
        }
        let vol = (n as u64).checked_pow(d as u32).filter(|&v| v <= MAX_VERTICES);
        let Some(vol) = vol else {
            return Err(Error::Geometry(format!("N^d = {n}^{d} exceeds 2^31")));
        };
        let mut strides = [0u32; MAX_DIM];
        let mut s = 1u32;
        for i in (0..d).rev() {
            strides[i] = s;
            s = s.wrapping_mul(n);
        }
        Ok(TorusGeometry { d, n, volume: vol as u32, strides })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[allow(non_snake_case)]
    pub fn N(&self) -> u32 {
        self.n
    }

    pub fn side(&self) -> u32 {
        self.n
    }

    /// `N^d`.
    pub fn volume(&self) -> u32 {
        self.volume
    }

    /// Number of step directions, `2d`.
    pub fn degree(&self) -> usize {
        2 * self.d
    }

    /// `log N^d`, natural logarithm.
    pub fn log_volume(&self) -> f64 {
        (self.volume as f64).ln()
    }

    /// Point from coordinates that must already lie in `[0, N)`.
    pub fn point(&self, coords: &[u32]) -> Result<TorusPoint> {
        if coords.len() != self.d {
            return Err(Error::GeometryMismatch);
        }
        if coords.iter().any(|&c| c >= self.n) {
            return Err(Error::Geometry(format!("coordinates {coords:?} not reduced mod {}", self.n)));
        }
        let mut c = [0u32; MAX_DIM];
        c[..self.d].copy_from_slice(coords);
        Ok(TorusPoint { coords: c, dim: self.d as u8 })
    }

    pub fn origin(&self) -> TorusPoint {
        TorusPoint { coords: [0; MAX_DIM], dim: self.d as u8 }
    }

    /// Canonical projection `Z^d -> T_N`.
    pub fn project(&self, p: &LatticePoint) -> TorusPoint {
        debug_assert_eq!(p.dim(), self.d);
        let n = self.n as i64;
        let mut c = [0u32; MAX_DIM];
        for i in 0..self.d {
            c[i] = p.get(i).rem_euclid(n) as u32;
        }
        TorusPoint { coords: c, dim: self.d as u8 }
    }

    pub fn project_coords(&self, coords: &[i64]) -> TorusPoint {
        self.project(&LatticePoint::new(coords))
    }

    /// The representative of `x` in `[0, N)^d`.
    pub fn lift(&self, x: &TorusPoint) -> LatticePoint {
        let mut p = LatticePoint::zero(self.d);
        for i in 0..self.d {
            p.set(i, x.get(i) as i64);
        }
        p
    }

    pub fn contains(&self, x: &TorusPoint) -> bool {
        x.dim() == self.d && x.coords().iter().all(|&c| c < self.n)
    }

    fn check(&self, x: &TorusPoint) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch)
        }
    }

    /// Row-major label.
    pub fn label(&self, x: &TorusPoint) -> Label {
        let mut l = 0u32;
        for i in 0..self.d {
            l += x.get(i) * self.strides[i];
        }
        l
    }

    pub fn from_label(&self, mut l: Label) -> TorusPoint {
        debug_assert!(l < self.volume);
        let mut c = [0u32; MAX_DIM];
        for i in (0..self.d).rev() {
            c[i] = l % self.n;
            l /= self.n;
        }
        TorusPoint { coords: c, dim: self.d as u8 }
    }

    /// Coordinate `axis` of the vertex with label `l`.
    pub fn label_coord(&self, l: Label, axis: usize) -> u32 {
        (l / self.strides[axis]) % self.n
    }

    /// Whether `a` and `b` are nearest neighbours. Filters on the label gap
    /// first, so a path check costs one `step_label` per step.
    #[inline]
    pub fn is_step(&self, a: Label, b: Label) -> bool {
        if a >= self.volume || b >= self.volume {
            return false;
        }
        let gap = a.abs_diff(b);
        (0..self.d).any(|i| {
            let s = self.strides[i];
            (gap == s || gap == (self.n - 1) * s)
                && (self.step_label(a, direction(i, false)) == b || self.step_label(a, direction(i, true)) == b)
        })
    }

    /// Neighbour of `l` in direction `dir`, computed on labels.
    #[inline]
    pub fn step_label(&self, l: Label, dir: Direction) -> Label {
        let axis = direction_axis(dir);
        let stride = self.strides[axis];
        let c = (l / stride) % self.n;
        if direction_is_negative(dir) {
            if c == 0 {
                l + (self.n - 1) * stride
            } else {
                l - stride
            }
        } else if c == self.n - 1 {
            l - (self.n - 1) * stride
        } else {
            l + stride
        }
    }

    pub fn step(&self, x: &TorusPoint, dir: Direction) -> TorusPoint {
        let axis = direction_axis(dir);
        let mut y = *x;
        let c = y.coords[axis];
        y.coords[axis] = if direction_is_negative(dir) {
            if c == 0 { self.n - 1 } else { c - 1 }
        } else if c == self.n - 1 {
            0
        } else {
            c + 1
        };
        y
    }

    /// `x + v` on the torus.
    pub fn translate(&self, x: &TorusPoint, v: &LatticePoint) -> TorusPoint {
        self.project(&self.lift(x).add(v))
    }

    /// Direction `dir` such that `step(x, dir) = y`, if the two are neighbours.
    pub fn direction_between(&self, x: Label, y: Label) -> Option<Direction> {
        (0..self.degree() as u8).find(|&dir| self.step_label(x, dir) == y)
    }

    /// The minimal representative of `y - x`, with the even-`N` tie at
    /// `N/2` resolved to `+N/2`.
    pub fn difference_vector(&self, x: &TorusPoint, y: &TorusPoint) -> LatticePoint {
        let n = self.n as i64;
        let mut v = LatticePoint::zero(self.d);
        for i in 0..self.d {
            let mut r = (y.get(i) as i64 - x.get(i) as i64).rem_euclid(n);
            if 2 * r > n {
                r -= n;
            }
            v.set(i, r);
        }
        v
    }

    pub fn try_difference_vector(&self, x: &TorusPoint, y: &TorusPoint) -> Result<LatticePoint> {
        self.check(x)?;
        self.check(y)?;
        Ok(self.difference_vector(x, y))
    }

    #[inline]
    fn axis_dist(&self, a: u32, b: u32) -> u32 {
        let r = a.abs_diff(b);
        r.min(self.n - r)
    }

    pub fn dist_inf(&self, x: &TorusPoint, y: &TorusPoint) -> u32 {
        (0..self.d).map(|i| self.axis_dist(x.get(i), y.get(i))).max().unwrap_or(0)
    }

    pub fn dist_1(&self, x: &TorusPoint, y: &TorusPoint) -> u32 {
        (0..self.d).map(|i| self.axis_dist(x.get(i), y.get(i))).sum()
    }

    pub fn try_dist_inf(&self, x: &TorusPoint, y: &TorusPoint) -> Result<u32> {
        self.check(x)?;
        self.check(y)?;
        Ok(self.dist_inf(x, y))
    }

    pub fn try_dist_1(&self, x: &TorusPoint, y: &TorusPoint) -> Result<u32> {
        self.check(x)?;
        self.check(y)?;
        Ok(self.dist_1(x, y))
    }

    /// `d_inf` on labels, without materializing points.
    pub fn dist_inf_labels(&self, a: Label, b: Label) -> u32 {
        let mut m = 0;
        for i in 0..self.d {
            let r = self.axis_dist(self.label_coord(a, i), self.label_coord(b, i));
            m = m.max(r);
        }
        m
    }

    pub fn dist_1_labels(&self, a: Label, b: Label) -> u32 {
        (0..self.d)
            .map(|i| self.axis_dist(self.label_coord(a, i), self.label_coord(b, i)))
            .sum()
    }

    /// Split `T_N` into the bulk `Q_delta`, the projection of
    /// `Q(0, floor((1 - delta) N))`, and the edge `H_delta`. Both are returned
    /// as sorted label lists.
    pub fn bulk_edge_split(&self, delta: f64) -> Result<(Vec<Label>, Vec<Label>)> {
        let mask = self.bulk_mask(delta)?;
        let mut bulk = Vec::new();
        let mut edge = Vec::new();
        for (l, &b) in mask.iter().enumerate() {
            if b {
                bulk.push(l as Label);
            } else {
                edge.push(l as Label);
            }
        }
        Ok((bulk, edge))
    }

    /// Membership mask of the bulk `Q_delta`, indexed by label.
    pub fn bulk_mask(&self, delta: f64) -> Result<Vec<bool>> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::Parameter(format!("delta = {delta} not in [0, 1]")));
        }
        let side = ((1.0 - delta) * self.n as f64).floor() as i64;
        if side < 1 {
            return Err(Error::DegenerateDelta { delta, side });
        }
        let side = side.min(self.n as i64);
        let cube = LatticeCube::new(LatticePoint::zero(self.d), side as u64)?;
        // Per-axis membership of the projected interval.
        let n = self.n as i64;
        let (lo, hi) = cube.offsets();
        let mut axis_in = vec![false; self.n as usize];
        for k in lo..=hi {
            axis_in[k.rem_euclid(n) as usize] = true;
        }
        let mask = (0..self.volume)
            .map(|l| (0..self.d).all(|i| axis_in[self.label_coord(l, i) as usize]))
            .collect();
        Ok(mask)
    }

    pub fn all_labels(&self) -> std::ops::Range<Label> {
        0..self.volume
    }
}

/// The cube `Q(x, R) = x + ([-floor((R-1)/2), ceil((R-1)/2)] ∩ Z)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatticeCube {
    center: LatticePoint,
    side: u64,
}

impl LatticeCube {
    pub fn new(center: LatticePoint, side: u64) -> Result<Self> {
        if side < 1 {
            return Err(Error::Parameter("cube side must be at least 1".into()));
        }
        Ok(LatticeCube { center, side })
    }

    pub fn center(&self) -> &LatticePoint {
        &self.center
    }

    pub fn side(&self) -> u64 {
        self.side
    }

    /// Offsets `(lo, hi)` relative to the center along each axis.
    pub fn offsets(&self) -> (i64, i64) {
        let r = self.side as i64 - 1;
        (-(r / 2), (r + 1) / 2)
    }

    pub fn contains(&self, p: &LatticePoint) -> bool {
        let (lo, hi) = self.offsets();
        (0..self.center.dim()).all(|i| {
            let o = p.get(i) - self.center.get(i);
            lo <= o && o <= hi
        })
    }

    pub fn volume(&self) -> u64 {
        self.side.pow(self.center.dim() as u32)
    }

    /// All lattice points, in lexicographic order.
    pub fn points(&self) -> Vec<LatticePoint> {
        let d = self.center.dim();
        let (lo, hi) = self.offsets();
        let mut out = Vec::with_capacity(self.volume() as usize);
        let mut cur = LatticePoint::zero(d);
        for i in 0..d {
            cur.set(i, self.center.get(i) + lo);
        }
        loop {
            out.push(cur);
            let mut i = d;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if cur.get(i) < self.center.get(i) + hi {
                    cur.set(i, cur.get(i) + 1);
                    break;
                }
                cur.set(i, self.center.get(i) + lo);
            }
        }
    }

    /// Inner boundary: points of the cube with a lattice neighbour outside.
    pub fn is_inner_boundary(&self, p: &LatticePoint) -> bool {
        let (lo, hi) = self.offsets();
        self.contains(p)
            && (0..self.center.dim()).any(|i| {
                let o = p.get(i) - self.center.get(i);
                o == lo || o == hi
            })
    }
}
