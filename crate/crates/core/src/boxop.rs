//! Finite-box restrictions of H(e, V) = h(e) - V and exact eigenvalue
//! counting below a threshold via matrix inertia, with a box-doubling
//! stabilization protocol standing in for the infinite-volume count.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispersion::Dispersion;
use crate::inertia::{
    nested_dissection_box, tridiag_negative_count, BandedSymmetric, InertiaError, SparseSymmetric,
};
use crate::lattice::LatticePoint;
use crate::potential::Potential;

#[derive(Debug, Error)]
pub enum BoxError {
    #[error("box half-width {box_l} smaller than the hopping range {range}")]
    BoxTooSmall { box_l: i64, range: i64 },
    #[error("threshold {t} is numerically singular; retry at {suggested}")]
    SingularShift { t: f64, suggested: f64 },
}

/// Boundary convention for the finite box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryCondition {
    /// Compression of h(e) to the box (matrix elements simply restricted).
    Restriction,
    /// Periodic wrap; with V = 0 the spectrum is e at discrete momenta.
    Periodic,
}

/// Sparse symmetric restriction of H(e, V) to the box |x|_inf <= box_l,
/// sites ordered lexicographically. Off-diagonal structure is the hopping
/// stencil; the diagonal carries c(0) - shift - V(x).
pub struct BoxOperator {
    pub dim: usize,
    pub box_l: i64,
    pub bc: BoundaryCondition,
    side: usize,
    n: usize,
    diag: Vec<f64>,
    /// Canonical hopping offsets (one per +-pair) with their coefficients.
    offsets: Vec<(Vec<i64>, f64)>,
    /// Scale estimate ||H||_inf for pivot guards and jitters.
    scale: f64,
}

impl BoxOperator {
    pub fn size(&self) -> usize {
        self.n
    }

    fn flat_index(&self, x: &LatticePoint) -> usize {
        let mut flat = 0usize;
        for &c in x.coords() {
            flat = flat * self.side + (c + self.box_l) as usize;
        }
        flat
    }

    fn coords_of(&self, mut flat: usize) -> Vec<i64> {
        let mut coords = vec![0i64; self.dim];
        for a in (0..self.dim).rev() {
            coords[a] = (flat % self.side) as i64 - self.box_l;
            flat /= self.side;
        }
        coords
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Materialize entry list (row, col, value) of the upper triangle,
    /// shifted by -t on the diagonal.
    fn upper_triplets(&self, t: f64) -> Vec<(u32, u32, f64)> {
        let mut trip = Vec::with_capacity(self.n * (1 + self.offsets.len()));
        for (i, &d) in self.diag.iter().enumerate() {
            trip.push((i as u32, i as u32, d - t));
        }
        for i in 0..self.n {
            let coords = self.coords_of(i);
            for (off, c) in &self.offsets {
                match self.neighbor(&coords, off) {
                    Some(j) if j != i => {
                        let (a, b) = if i < j { (i, j) } else { (j, i) };
                        trip.push((a as u32, b as u32, *c));
                    }
                    Some(_) => {
                        // periodic wrap onto itself contributes to the diagonal
                        trip.push((i as u32, i as u32, *c * 2.0));
                    }
                    None => {}
                }
            }
        }
        trip
    }

    fn neighbor(&self, coords: &[i64], off: &[i64]) -> Option<usize> {
        let mut flat = 0usize;
        for a in 0..self.dim {
            let mut c = coords[a] + off[a];
            match self.bc {
                BoundaryCondition::Restriction => {
                    if c.abs() > self.box_l {
                        return None;
                    }
                }
                BoundaryCondition::Periodic => {
                    let side = self.side as i64;
                    c = (c + self.box_l).rem_euclid(side) - self.box_l;
                }
            }
            flat = flat * self.side + (c + self.box_l) as usize;
        }
        Some(flat)
    }

    /// Dense materialization (diagnostics and small-box oracles).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.upper_triplets(0.0) {
            a[(r as usize, c as usize)] += v;
            if r != c {
                a[(c as usize, r as usize)] += v;
            }
        }
        a
    }

    /// Coordinate-triplet text export (row, col, value), full symmetric.
    pub fn to_triplet_text(&self) -> String {
        let mut out = String::from("row,col,value\n");
        for (r, c, v) in self.upper_triplets(0.0) {
            out.push_str(&format!("{r},{c},{v}\n"));
            if r != c {
                out.push_str(&format!("{c},{r},{v}\n"));
            }
        }
        out
    }
}

/// Assemble the box restriction of H(e, V).
pub fn assemble(
    e: &Dispersion,
    v: &Potential,
    box_l: i64,
    bc: BoundaryCondition,
) -> Result<BoxOperator, BoxError> {
    let range = e.range();
    if box_l < range {
        return Err(BoxError::BoxTooSmall { box_l, range });
    }
    let dim = e.dim();
    let side = (2 * box_l + 1) as usize;
    let n = side.pow(dim as u32);
    let c0 = e.hopping(&LatticePoint::zero(dim));
    let mut offsets = Vec::new();
    let mut offdiag_scale = 0.0;
    for (x, &c) in e.coeffs() {
        if !x.is_zero() && *x == x.canonical_sign() {
            offsets.push((x.coords().to_vec(), c));
            offdiag_scale += 2.0 * c.abs();
        }
    }
    let mut diag = vec![c0; n];
    let mut vmax = 0.0f64;
    let op = BoxOperator {
        dim,
        box_l,
        bc,
        side,
        n,
        diag: Vec::new(),
        offsets,
        scale: 0.0,
    };
    for i in 0..n {
        let coords = LatticePoint::new(op.coords_of(i));
        let val = v.value(&coords);
        vmax = vmax.max(val);
        diag[i] -= val;
    }
    Ok(BoxOperator {
        diag,
        scale: c0.abs() + offdiag_scale + vmax,
        ..op
    })
}

const PIVOT_GUARD: f64 = 1e-12;

/// Exact count of eigenvalues of H strictly below t, by inertia of H - tI.
/// The kernel is chosen by structure: Sturm sequence for tridiagonal,
/// banded LDL^T while the band is cheap, sparse nested-dissection LDL^T
/// beyond.
pub fn count_below(h: &BoxOperator, t: f64) -> Result<u64, BoxError> {
    let guard = PIVOT_GUARD * h.scale.max(1.0);
    let singular = |pivot: f64| {
        let _ = pivot;
        BoxError::SingularShift {
            t,
            suggested: t - 1e-9 * h.scale.max(1.0),
        }
    };

    // tridiagonal: d = 1, nearest-neighbor hopping, restriction bc
    if h.dim == 1
        && h.bc == BoundaryCondition::Restriction
        && h.offsets.iter().all(|(o, _)| o[0].abs() == 1)
    {
        let off_c = h.offsets.first().map(|(_, c)| *c).unwrap_or(0.0);
        let diag: Vec<f64> = h.diag.iter().map(|&d| d - t).collect();
        let off = vec![off_c; h.n.saturating_sub(1)];
        return match tridiag_negative_count(&diag, &off, guard) {
            Ok(c) => Ok(c as u64),
            Err(InertiaError::SingularPivot { pivot }) => Err(singular(pivot)),
        };
    }

    let trip = h.upper_triplets(t);
    if h.bc == BoundaryCondition::Restriction {
        // bandwidth under lexicographic order
        let mut bw = 0usize;
        for (off, _) in &h.offsets {
            let mut delta = 0i64;
            for &o in off {
                delta = delta * h.side as i64 + o;
            }
            bw = bw.max(delta.unsigned_abs() as usize);
        }
        let banded_flops = h.n as f64 * (bw as f64) * (bw as f64);
        if banded_flops < 3e9 {
            let mut b = BandedSymmetric::zeros(h.n, bw.max(1));
            for (r, c, v) in trip {
                b.add(c as usize, r as usize, v);
            }
            return match b.ldl_negative_count(guard) {
                Ok(c) => Ok(c as u64),
                Err(InertiaError::SingularPivot { pivot }) => Err(singular(pivot)),
            };
        }
    }

    // general sparse path with geometric nested dissection
    let dims = vec![h.side; h.dim];
    let order = nested_dissection_box(&dims, h.range_cells());
    let permuted: Vec<(u32, u32, f64)> = trip
        .into_iter()
        .map(|(r, c, v)| {
            let (pr, pc) = (order[r as usize] as u32, order[c as usize] as u32);
            if pr <= pc {
                (pr, pc, v)
            } else {
                (pc, pr, v)
            }
        })
        .collect();
    let sp = SparseSymmetric::from_triplets(h.n, permuted);
    match sp.ldl_negative_count(guard) {
        Ok(c) => Ok(c as u64),
        Err(InertiaError::SingularPivot { pivot }) => Err(singular(pivot)),
    }
}

impl BoxOperator {
    fn range_cells(&self) -> usize {
        self.offsets
            .iter()
            .map(|(o, _)| o.iter().map(|c| c.unsigned_abs() as usize).max().unwrap_or(1))
            .max()
            .unwrap_or(1)
    }
}

/// Result of the box-doubling protocol.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountResult {
    pub count: u64,
    pub stabilized: bool,
    pub history: Vec<(i64, u64)>,
    pub threshold: f64,
}

/// Operational threshold for "negative eigenvalues": excludes numerical
/// zero modes.
pub const NEGATIVE_THRESHOLD: f64 = -1e-10;

/// Count eigenvalues below `t` on boxes start_l, 2 start_l, ... until three
/// consecutive sizes agree (stabilized) or max_l is passed. Thresholds that
/// hit a factorization singularity are jittered downward per the
/// SingularShift suggestion.
pub fn n_bound_states(
    e: &Dispersion,
    v: &Potential,
    t: f64,
    start_l: i64,
    max_l: i64,
) -> Result<CountResult, BoxError> {
    let mut history: Vec<(i64, u64)> = Vec::new();
    let mut box_l = start_l.max(e.range());
    let mut stabilized = false;
    while box_l <= max_l {
        let h = assemble(e, v, box_l, BoundaryCondition::Restriction)?;
        let mut threshold = t;
        let mut count = None;
        for _ in 0..4 {
            match count_below(&h, threshold) {
                Ok(c) => {
                    count = Some(c);
                    break;
                }
                Err(BoxError::SingularShift { suggested, .. }) => {
                    threshold = suggested;
                }
                Err(other) => return Err(other),
            }
        }
        let Some(c) = count else {
            return Err(BoxError::SingularShift {
                t,
                suggested: threshold,
            });
        };
        history.push((box_l, c));
        if history.len() >= 3 {
            let k = history.len();
            if history[k - 1].1 == history[k - 2].1 && history[k - 2].1 == history[k - 3].1 {
                stabilized = true;
                break;
            }
        }
        box_l *= 2;
    }
    let count = history.last().map(|&(_, c)| c).unwrap_or(0);
    Ok(CountResult {
        count,
        stabilized,
        history,
        threshold: t,
    })
}

/// The k smallest eigenvalues: dense solve for small boxes, otherwise
/// inertia bisection to absolute accuracy ~1e-11 * scale.
pub fn lowest_eigenvalues(h: &BoxOperator, k: usize) -> Vec<f64> {
    if k == 0 {
        return Vec::new();
    }
    let k = k.min(h.n);
    if h.n <= 1200 {
        let dense = h.to_dense();
        let mut eigs: Vec<f64> = nalgebra::SymmetricEigen::new(dense)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        eigs.truncate(k);
        return eigs;
    }
    let lo0 = -h.scale;
    let hi0 = h.scale;
    let tol = 1e-11 * h.scale.max(1.0);
    let count_at = |t: f64| -> u64 {
        let mut shift = t;
        for _ in 0..4 {
            match count_below(h, shift) {
                Ok(c) => return c,
                Err(BoxError::SingularShift { suggested, .. }) => shift = suggested,
                Err(_) => break,
            }
        }
        0
    };
    (1..=k as u64)
        .map(|rank| {
            let (mut lo, mut hi) = (lo0, hi0);
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if count_at(mid) >= rank {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispersion::laplacian;
    use crate::potential::from_samples;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn pt(coords: &[i64]) -> LatticePoint {
        LatticePoint::new(coords.to_vec())
    }

    fn delta(dim: usize, v: f64) -> Potential {
        from_samples(dim, BTreeMap::from([(LatticePoint::zero(dim), v)])).unwrap()
    }

    #[test]
    fn tridiagonal_matrix_shape() {
        let e = laplacian(1);
        let v = from_samples(1, BTreeMap::new()).unwrap();
        let h = assemble(&e, &v, 1, BoundaryCondition::Restriction).unwrap();
        let dense = h.to_dense();
        let expect = nalgebra::dmatrix![
            1.0, -0.5, 0.0;
            -0.5, 1.0, -0.5;
            0.0, -0.5, 1.0
        ];
        assert_relative_eq!(dense, expect, epsilon = 1e-14);
    }

    #[test]
    fn periodic_spectrum_is_dispersion_at_discrete_momenta() {
        let e = laplacian(1);
        let v = from_samples(1, BTreeMap::new()).unwrap();
        for box_l in [2i64, 5] {
            let h = assemble(&e, &v, box_l, BoundaryCondition::Periodic).unwrap();
            let side = (2 * box_l + 1) as usize;
            let mut eigs: Vec<f64> = nalgebra::SymmetricEigen::new(h.to_dense())
                .eigenvalues
                .iter()
                .copied()
                .collect();
            eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut expect: Vec<f64> = (0..side)
                .map(|kk| {
                    let p = 2.0 * std::f64::consts::PI * kk as f64 / side as f64;
                    e.eval(&[p])
                })
                .collect();
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (a, b) in eigs.iter().zip(&expect) {
                assert_relative_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn periodic_minimum_is_zero() {
        let e = laplacian(2);
        let v = from_samples(2, BTreeMap::new()).unwrap();
        let h = assemble(&e, &v, 3, BoundaryCondition::Periodic).unwrap();
        let eigs = lowest_eigenvalues(&h, 1);
        assert!(eigs[0].abs() < 1e-10);
    }

    #[test]
    fn potential_lowers_center_diagonal() {
        let e = laplacian(2);
        let v0 = from_samples(2, BTreeMap::new()).unwrap();
        let v1 = delta(2, 0.7);
        let h0 = assemble(&e, &v0, 2, BoundaryCondition::Restriction).unwrap();
        let h1 = assemble(&e, &v1, 2, BoundaryCondition::Restriction).unwrap();
        let d = h0.to_dense() - h1.to_dense();
        let center = h0.flat_index(&pt(&[0, 0]));
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                let expect = if i == center && j == center { 0.7 } else { 0.0 };
                assert_relative_eq!(d[(i, j)], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn count_below_simple_cases() {
        let e = laplacian(1);
        // V = 0: H >= 0
        let v0 = from_samples(1, BTreeMap::new()).unwrap();
        let h = assemble(&e, &v0, 16, BoundaryCondition::Restriction).unwrap();
        assert_eq!(count_below(&h, NEGATIVE_THRESHOLD).unwrap(), 0);
        // single bound state at -0.25
        let v = delta(1, 0.75);
        let h = assemble(&e, &v, 64, BoundaryCondition::Restriction).unwrap();
        assert_eq!(count_below(&h, NEGATIVE_THRESHOLD).unwrap(), 1);
    }

    #[test]
    fn box_too_small_rejected() {
        let e = laplacian(2);
        let v = from_samples(2, BTreeMap::new()).unwrap();
        assert!(matches!(
            assemble(&e, &v, 0, BoundaryCondition::Restriction),
            Err(BoxError::BoxTooSmall { .. })
        ));
    }

    #[test]
    fn inertia_consistency_across_kernels() {
        // d=2 box exercises the banded path against a dense eigensolve
        let e = laplacian(2);
        let mut m = BTreeMap::new();
        m.insert(pt(&[0, 0]), 3.0);
        m.insert(pt(&[1, -1]), 7.5);
        m.insert(pt(&[2, 2]), 1.2);
        let v = from_samples(2, m).unwrap();
        let h = assemble(&e, &v, 4, BoundaryCondition::Restriction).unwrap();
        let dense = h.to_dense();
        let eigs = nalgebra::SymmetricEigen::new(dense).eigenvalues;
        for &t in &[-2.0, -0.5, -1e-10, 0.3, 1.0, 3.9] {
            let expect = eigs.iter().filter(|&&l| l < t).count() as u64;
            assert_eq!(count_below(&h, t).unwrap(), expect, "t = {t}");
        }
    }

    #[test]
    fn sparse_kernel_matches_dense_d3() {
        let e = laplacian(3);
        let v = delta(3, 9.0);
        let h = assemble(&e, &v, 2, BoundaryCondition::Restriction).unwrap();
        let dense = h.to_dense();
        let eigs = nalgebra::SymmetricEigen::new(dense).eigenvalues;
        for &t in &[-1.0, -1e-10, 0.5] {
            let expect = eigs.iter().filter(|&&l| l < t).count() as u64;
            // force the sparse path by calling through count_below on a
            // d=3 operator (banded flops are small here, so exercise the
            // nested-dissection path directly)
            let trip = h.upper_triplets(t);
            let dims = vec![h.side; h.dim];
            let order = nested_dissection_box(&dims, 1);
            let permuted: Vec<(u32, u32, f64)> = trip
                .into_iter()
                .map(|(r, c, val)| {
                    let (pr, pc) = (order[r as usize] as u32, order[c as usize] as u32);
                    if pr <= pc { (pr, pc, val) } else { (pc, pr, val) }
                })
                .collect();
            let sp = SparseSymmetric::from_triplets(h.n, permuted);
            assert_eq!(sp.ldl_negative_count(1e-12).unwrap() as u64, expect);
        }
    }

    #[test]
    fn stabilization_protocol() {
        let e = laplacian(1);
        // V = 0 stabilizes immediately at 0
        let v0 = from_samples(1, BTreeMap::new()).unwrap();
        let r = n_bound_states(&e, &v0, NEGATIVE_THRESHOLD, 4, 64).unwrap();
        assert_eq!(r.count, 0);
        assert!(r.stabilized);
        // deep 5-site potential saturates at 5
        let mut m = BTreeMap::new();
        for i in 0..5i64 {
            m.insert(pt(&[i]), 100.0 * 2.0);
        }
        let v = from_samples(1, m).unwrap();
        let r = n_bound_states(&e, &v, NEGATIVE_THRESHOLD, 8, 256).unwrap();
        assert_eq!(r.count, 5);
        assert!(r.stabilized);
    }

    #[test]
    fn lowest_eigenvalue_closed_form() {
        let e = laplacian(1);
        let v = delta(1, 0.75);
        let h = assemble(&e, &v, 64, BoundaryCondition::Restriction).unwrap();
        let eigs = lowest_eigenvalues(&h, 1);
        assert!((eigs[0] + 0.25).abs() < 1e-8, "{}", eigs[0]);
        assert!(lowest_eigenvalues(&h, 0).is_empty());
    }

    #[test]
    fn lowest_eigenvalues_bisection_path() {
        // force the bisection path with a moderately large d=2 box
        let e = laplacian(2);
        let v = delta(2, 6.0);
        let h = assemble(&e, &v, 20, BoundaryCondition::Restriction).unwrap();
        assert!(h.size() > 1200);
        let bis = lowest_eigenvalues(&h, 1)[0];
        // compare against a smaller dense box (state is well localized)
        let hs = assemble(&e, &v, 10, BoundaryCondition::Restriction).unwrap();
        let dense = lowest_eigenvalues(&hs, 1)[0];
        assert!((bis - dense).abs() < 1e-6, "{bis} vs {dense}");
    }

    #[test]
    fn monotone_in_potential() {
        let e = laplacian(2);
        let mut m1 = BTreeMap::new();
        m1.insert(pt(&[0, 0]), 2.0);
        m1.insert(pt(&[1, 0]), 1.0);
        let v1 = from_samples(2, m1.clone()).unwrap();
        let mut m2 = m1;
        m2.insert(pt(&[0, 0]), 5.0);
        m2.insert(pt(&[-2, 1]), 3.0);
        let v2 = from_samples(2, m2).unwrap();
        let h1 = assemble(&e, &v1, 8, BoundaryCondition::Restriction).unwrap();
        let h2 = assemble(&e, &v2, 8, BoundaryCondition::Restriction).unwrap();
        let c1 = count_below(&h1, NEGATIVE_THRESHOLD).unwrap();
        let c2 = count_below(&h2, NEGATIVE_THRESHOLD).unwrap();
        assert!(c1 <= c2);
    }
}
