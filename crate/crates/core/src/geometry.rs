//! Triadic cubes and aligned structured grids.
//!
//! Coordinates of box faces are stored as integers in units of ½ so that
//! trimming and alignment checks are exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn pow3(n: u32) -> i64 {
    3i64.pow(n)
}

/// Open axis-aligned box with faces at half-integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxDomain {
    dim: usize,
    /// Doubled lower corner.
    pub lo2: [i64; 3],
    /// Doubled upper corner.
    pub hi2: [i64; 3],
}

impl BoxDomain {
    pub fn from_doubled(dim: usize, lo2: [i64; 3], hi2: [i64; 3]) -> Self {
        assert!(dim == 2 || dim == 3);
        for k in 0..dim {
            assert!(lo2[k] < hi2[k], "empty box");
        }
        BoxDomain { dim, lo2, hi2 }
    }

    /// `(−w, w)^d` with `w` rounded to the nearest multiple of ½.
    pub fn centered(dim: usize, half_width: f64) -> Self {
        let w2 = (2.0 * half_width).round() as i64;
        let mut lo2 = [0; 3];
        let mut hi2 = [0; 3];
        for k in 0..dim {
            lo2[k] = -w2;
            hi2[k] = w2;
        }
        Self::from_doubled(dim, lo2, hi2)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self, k: usize) -> f64 {
        self.lo2[k] as f64 / 2.0
    }

    pub fn hi(&self, k: usize) -> f64 {
        self.hi2[k] as f64 / 2.0
    }

    pub fn side(&self, k: usize) -> f64 {
        (self.hi2[k] - self.lo2[k]) as f64 / 2.0
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|k| self.side(k)).product()
    }

    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for k in 0..self.dim {
            c[k] = (self.lo2[k] + self.hi2[k]) as f64 / 4.0;
        }
        c
    }

    /// Closed containment.
    pub fn contains_point(&self, x: &[f64]) -> bool {
        (0..self.dim).all(|k| x[k] >= self.lo(k) && x[k] <= self.hi(k))
    }

    pub fn contains_box(&self, other: &BoxDomain) -> bool {
        (0..self.dim).all(|k| other.lo2[k] >= self.lo2[k] && other.hi2[k] <= self.hi2[k])
    }

    pub fn intersects(&self, other: &BoxDomain) -> bool {
        (0..self.dim).all(|k| other.lo2[k] < self.hi2[k] && self.lo2[k] < other.hi2[k])
    }

    /// Box grown by `delta` (a multiple of ½) on every side.
    pub fn grown(&self, delta: f64) -> BoxDomain {
        let d2 = (2.0 * delta).round() as i64;
        let mut b = *self;
        for k in 0..self.dim {
            b.lo2[k] -= d2;
            b.hi2[k] += d2;
        }
        b
    }
}

/// Triadic cube: untrimmed `anchor + (−3ⁿ/2, 3ⁿ/2)^d` or trimmed with side `3ⁿ − 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cube {
    pub dim: usize,
    pub n: u32,
    pub anchor: [i64; 3],
    pub trimmed: bool,
}

fn lattice_anchor(dim: usize, n: u32, x: &[f64]) -> [i64; 3] {
    let s = pow3(n) as f64;
    let mut a = [0i64; 3];
    for k in 0..dim {
        a[k] = pow3(n) * (x[k] / s + 0.5).floor() as i64;
    }
    a
}

/// `Q_n(x)`: the scale-n triadic cube, centered on `3ⁿℤ^d`, that contains `x`.
pub fn triadic_cube(dim: usize, n: u32, x: &[f64]) -> Cube {
    Cube { dim, n, anchor: lattice_anchor(dim, n, x), trimmed: false }
}

/// `Q_n°(x)`: the triadic cube with a layer of thickness ½ removed.
pub fn trimmed_cube(dim: usize, n: u32, x: &[f64]) -> Result<Cube> {
    if n == 0 {
        return Err(Error::Geometry("trimmed cube of scale 0 is empty".into()));
    }
    Ok(Cube { dim, n, anchor: lattice_anchor(dim, n, x), trimmed: true })
}

/// Cube of side `3^{n+1}` centered at the anchor of `Q_n(x)`.
pub fn overlapping_cube(dim: usize, n: u32, x: &[f64]) -> Cube {
    Cube { dim, n: n + 1, anchor: lattice_anchor(dim, n, x), trimmed: false }
}

/// Anchors `z' ≠ z` on `3ⁿℤ^d` whose overlapping cubes meet the one at `z`.
pub fn overlapping_neighbors(dim: usize, n: u32, anchor: &[i64; 3]) -> Vec<[i64; 3]> {
    let s = pow3(n);
    let mut out = Vec::new();
    for_each_offset(dim, -2, 2, |off| {
        if off[..dim].iter().any(|&o| o != 0) {
            let mut z = *anchor;
            for k in 0..dim {
                z[k] += off[k] * s;
            }
            out.push(z);
        }
    });
    out
}

/// Visit every integer offset in `[lo, hi]^dim` in lexicographic order (axis 0 fastest).
pub fn for_each_offset(dim: usize, lo: i64, hi: i64, mut f: impl FnMut([i64; 3])) {
    let r = (hi - lo + 1) as usize;
    let total = r.pow(dim as u32);
    for idx in 0..total {
        let mut off = [0i64; 3];
        let mut rem = idx;
        for o in off.iter_mut().take(dim) {
            *o = lo + (rem % r) as i64;
            rem /= r;
        }
        f(off);
    }
}

impl Cube {
    /// Doubled side length.
    pub fn side2(&self) -> i64 {
        2 * pow3(self.n) - if self.trimmed { 2 } else { 0 }
    }

    pub fn side(&self) -> f64 {
        self.side2() as f64 / 2.0
    }

    pub fn to_box(&self) -> BoxDomain {
        let s = self.side2() / 2;
        let mut lo2 = [0; 3];
        let mut hi2 = [0; 3];
        for k in 0..self.dim {
            lo2[k] = 2 * self.anchor[k] - s;
            hi2[k] = 2 * self.anchor[k] + s;
        }
        BoxDomain::from_doubled(self.dim, lo2, hi2)
    }

    pub fn volume(&self) -> f64 {
        self.side().powi(self.dim as i32)
    }

    /// Barycenter.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for k in 0..self.dim {
            c[k] = self.anchor[k] as f64;
        }
        c
    }

    pub fn trimmed(&self) -> Result<Cube> {
        if self.n == 0 {
            return Err(Error::Geometry("trimmed cube of scale 0 is empty".into()));
        }
        Ok(Cube { trimmed: true, ..*self })
    }

    /// The `3^d` scale-(n−1) triadic cubes partitioning this cube.
    pub fn subdivide(&self) -> Result<Vec<Cube>> {
        if self.trimmed {
            return Err(Error::Geometry("cannot subdivide a trimmed cube".into()));
        }
        if self.n == 0 {
            return Err(Error::Geometry("cannot subdivide a unit cube".into()));
        }
        let s = pow3(self.n - 1);
        let mut out = Vec::with_capacity(3usize.pow(self.dim as u32));
        for_each_offset(self.dim, -1, 1, |off| {
            let mut a = self.anchor;
            for k in 0..self.dim {
                a[k] += off[k] * s;
            }
            out.push(Cube { dim: self.dim, n: self.n - 1, anchor: a, trimmed: false });
        });
        Ok(out)
    }
}

/// Structured grid of fine cells of side `h = 1/m` (m even) on a box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub domain: BoxDomain,
    /// Fine cells per unit length.
    pub m: usize,
    /// Fine cells per axis.
    pub cells: [usize; 3],
}

/// Cells per unit length for spacing `h`, checking that `1/h` is an even integer.
pub fn cells_per_unit(h: f64) -> Result<usize> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Geometry(format!("grid spacing must be positive, got {h}")));
    }
    let inv = 1.0 / h;
    let m = inv.round();
    if (inv - m).abs() > 1e-9 * inv || m < 2.0 || (m as usize) % 2 != 0 {
        return Err(Error::Geometry(format!("1/h must be an even integer, got h = {h}")));
    }
    Ok(m as usize)
}

pub fn discretize(cube: &Cube, h: f64) -> Result<Grid> {
    Grid::new(cube.to_box(), h)
}

impl Grid {
    pub fn new(domain: BoxDomain, h: f64) -> Result<Grid> {
        Ok(Self::with_cells_per_unit(domain, cells_per_unit(h)?))
    }

    pub fn with_cells_per_unit(domain: BoxDomain, m: usize) -> Grid {
        assert!(m >= 2 && m % 2 == 0);
        let mut cells = [1usize; 3];
        for k in 0..domain.dim() {
            cells[k] = ((domain.hi2[k] - domain.lo2[k]) as usize * m) / 2;
        }
        Grid { domain, m, cells }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn nodes_per_axis(&self, k: usize) -> usize {
        if k < self.dim() {
            self.cells[k] + 1
        } else {
            1
        }
    }

    pub fn node_dims(&self) -> [usize; 3] {
        [self.nodes_per_axis(0), self.nodes_per_axis(1), self.nodes_per_axis(2)]
    }

    pub fn n_nodes(&self) -> usize {
        self.node_dims().iter().product()
    }

    pub fn cell_dims(&self) -> [usize; 3] {
        let mut c = [1usize; 3];
        c[..self.dim()].copy_from_slice(&self.cells[..self.dim()]);
        c
    }

    pub fn n_cells(&self) -> usize {
        self.cell_dims().iter().product()
    }

    #[inline]
    pub fn node_index(&self, i: [usize; 3]) -> usize {
        let n = self.node_dims();
        i[0] + n[0] * (i[1] + n[1] * i[2])
    }

    #[inline]
    pub fn node_multi(&self, idx: usize) -> [usize; 3] {
        let n = self.node_dims();
        [idx % n[0], (idx / n[0]) % n[1], idx / (n[0] * n[1])]
    }

    #[inline]
    pub fn node_coord_multi(&self, i: [usize; 3]) -> [f64; 3] {
        let mut x = [0.0; 3];
        let h = self.h();
        for k in 0..self.dim() {
            x[k] = self.domain.lo(k) + i[k] as f64 * h;
        }
        x
    }

    #[inline]
    pub fn node_coord(&self, idx: usize) -> [f64; 3] {
        self.node_coord_multi(self.node_multi(idx))
    }

    pub fn is_boundary_multi(&self, i: [usize; 3]) -> bool {
        (0..self.dim()).any(|k| i[k] == 0 || i[k] == self.cells[k])
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        self.is_boundary_multi(self.node_multi(idx))
    }

    #[inline]
    pub fn cell_multi(&self, c: usize) -> [usize; 3] {
        let n = self.cell_dims();
        [c % n[0], (c / n[0]) % n[1], c / (n[0] * n[1])]
    }

    /// Unit coefficient cell `z` with `z + [0,1)^d` containing fine cell `c`.
    #[inline]
    pub fn unit_cell_of(&self, c: [usize; 3]) -> [i64; 3] {
        let m = self.m as i64;
        let mut z = [0i64; 3];
        for k in 0..self.dim() {
            // fine cell center in units of 1/(2m)
            let twice = self.domain.lo2[k] * m + 2 * c[k] as i64 + 1;
            z[k] = twice.div_euclid(2 * m);
        }
        z
    }

    /// Node offset of `sub` inside this grid, if it is an aligned subgrid.
    pub fn offset_of(&self, sub: &Grid) -> Option<[usize; 3]> {
        if sub.m != self.m || sub.dim() != self.dim() || !self.domain.contains_box(&sub.domain) {
            return None;
        }
        let mut off = [0usize; 3];
        for k in 0..self.dim() {
            let diff2 = sub.domain.lo2[k] - self.domain.lo2[k];
            off[k] = (diff2 as usize * self.m) / 2;
        }
        Some(off)
    }

    /// Trapezoid weights: the exact integral of the multilinear interpolant is `Σ w_i u_i`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let hd = self.h().powi(self.dim() as i32);
        (0..self.n_nodes())
            .map(|idx| {
                let i = self.node_multi(idx);
                let mut w = hd;
                for k in 0..self.dim() {
                    if i[k] == 0 || i[k] == self.cells[k] {
                        w *= 0.5;
                    }
                }
                w
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triadic_examples() {
        let c = triadic_cube(2, 1, &[0.0, 0.0]).to_box();
        assert_eq!((c.lo(0), c.hi(0), c.lo(1), c.hi(1)), (-1.5, 1.5, -1.5, 1.5));
        let c = triadic_cube(2, 1, &[4.0, 4.0]);
        assert_eq!(&c.anchor[..2], &[3, 3]);
        assert_eq!((c.to_box().lo(0), c.to_box().hi(0)), (1.5, 4.5));
        let c = triadic_cube(2, 0, &[0.2, -0.3]).to_box();
        assert_eq!((c.lo(0), c.hi(0), c.lo(1), c.hi(1)), (-0.5, 0.5, -0.5, 0.5));
    }

    #[test]
    fn trimmed_examples() {
        let c = trimmed_cube(2, 1, &[0.0, 0.0]).unwrap().to_box();
        assert_eq!((c.lo(0), c.hi(0)), (-1.0, 1.0));
        let c = trimmed_cube(2, 2, &[0.0, 0.0]).unwrap().to_box();
        assert_eq!((c.lo(0), c.hi(0)), (-4.0, 4.0));
        let a = trimmed_cube(2, 1, &[0.0, 0.0]).unwrap().to_box();
        let b = trimmed_cube(2, 1, &[3.0, 0.0]).unwrap().to_box();
        assert_eq!(b.lo(0) - a.hi(0), 1.0);
        assert!(trimmed_cube(2, 0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn subdivide_examples() {
        let kids = triadic_cube(2, 1, &[0.0, 0.0]).subdivide().unwrap();
        assert_eq!(kids.len(), 9);
        let mut anchors: Vec<_> = kids.iter().map(|c| (c.anchor[0], c.anchor[1])).collect();
        anchors.sort();
        let mut expected = vec![];
        for x in -1..=1 {
            for y in -1..=1 {
                expected.push((x, y));
            }
        }
        assert_eq!(anchors, expected);
        let kids = triadic_cube(2, 2, &[0.0, 0.0]).subdivide().unwrap();
        assert!(kids.iter().all(|c| c.side() == 3.0));
        assert_eq!(triadic_cube(3, 1, &[0.0; 3]).subdivide().unwrap().len(), 27);
        assert!(trimmed_cube(2, 1, &[0.0, 0.0]).unwrap().subdivide().is_err());
    }

    #[test]
    fn overlapping_examples() {
        let c = overlapping_cube(2, 1, &[0.0, 0.0]).to_box();
        assert_eq!((c.lo(0), c.hi(0)), (-4.5, 4.5));
        let c = overlapping_cube(2, 0, &[1.0, 0.0]);
        assert_eq!(&c.anchor[..2], &[1, 0]);
        assert_eq!(c.side(), 3.0);
        let nb = overlapping_neighbors(2, 1, &[0, 0, 0]);
        assert_eq!(nb.len(), 24);
        let me = overlapping_cube(2, 1, &[0.0, 0.0]).to_box();
        for z in &nb {
            let other = Cube { dim: 2, n: 2, anchor: *z, trimmed: false }.to_box();
            assert!(me.intersects(&other));
        }
        let far = Cube { dim: 2, n: 2, anchor: [9, 0, 0], trimmed: false }.to_box();
        assert!(!me.intersects(&far));
    }

    #[test]
    fn discretize_examples() {
        let g = discretize(&triadic_cube(2, 1, &[0.0, 0.0]), 0.5).unwrap();
        assert_eq!((g.nodes_per_axis(0), g.nodes_per_axis(1), g.n_cells()), (7, 7, 36));
        let g = discretize(&trimmed_cube(2, 1, &[0.0, 0.0]).unwrap(), 0.5).unwrap();
        assert_eq!((g.nodes_per_axis(0), g.n_cells()), (5, 16));
        let g = discretize(&triadic_cube(2, 2, &[0.0, 0.0]), 0.25).unwrap();
        assert_eq!(g.n_nodes(), 37 * 37);
        assert!(discretize(&triadic_cube(2, 1, &[0.0, 0.0]), 1.0 / 3.0).is_err());
        assert!(discretize(&triadic_cube(2, 1, &[0.0, 0.0]), 0.3).is_err());
    }

    #[test]
    fn unit_cells_of_fine_cells() {
        let g = discretize(&triadic_cube(2, 1, &[0.0, 0.0]), 0.25).unwrap();
        // first fine cell spans [-1.5, -1.25]
        assert_eq!(g.unit_cell_of([0, 0, 0])[0], -2);
        assert_eq!(g.unit_cell_of([2, 0, 0])[0], -1);
        assert_eq!(g.unit_cell_of([11, 0, 0])[0], 1);
    }
}
