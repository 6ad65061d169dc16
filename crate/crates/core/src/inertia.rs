//! Symmetric-indefinite factorization kernels for exact eigenvalue
//! counting: Sturm sequences for tridiagonal matrices, banded LDL^T, and a
//! simplicial sparse LDL^T with a geometric nested-dissection ordering for
//! box-shaped stencil graphs. Counting negative pivots of A - tI counts
//! eigenvalues below t (Sylvester inertia).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum InertiaError {
    #[error("factorization pivot {pivot:.3e} within the singular guard; shift the threshold")]
    SingularPivot { pivot: f64 },
}

/// Negative-pivot count of a symmetric tridiagonal matrix (Sturm sequence).
pub fn tridiag_negative_count(
    diag: &[f64],
    off: &[f64],
    guard: f64,
) -> Result<usize, InertiaError> {
    let n = diag.len();
    if n == 0 {
        return Ok(0);
    }
    debug_assert_eq!(off.len(), n - 1);
    let mut count = 0usize;
    let mut q = diag[0];
    if q.abs() <= guard {
        return Err(InertiaError::SingularPivot { pivot: q });
    }
    if q < 0.0 {
        count += 1;
    }
    for i in 1..n {
        q = diag[i] - off[i - 1] * off[i - 1] / q;
        if q.abs() <= guard {
            return Err(InertiaError::SingularPivot { pivot: q });
        }
        if q < 0.0 {
            count += 1;
        }
    }
    Ok(count)
}

/// Symmetric banded matrix, lower storage by diagonals:
/// `bands[d][i] = A[i][i - d]` for d = 0..=bw (entries with i < d unused).
pub struct BandedSymmetric {
    pub n: usize,
    pub bw: usize,
    pub bands: Vec<Vec<f64>>,
}

impl BandedSymmetric {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandedSymmetric {
            n,
            bw,
            bands: (0..=bw).map(|_| vec![0.0; n]).collect(),
        }
    }

    /// Add to entry (i, j) with i >= j and i - j <= bw.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= self.bw);
        self.bands[i - j][i] += v;
    }

    /// LDL^T in place; returns the number of negative pivots.
    pub fn ldl_negative_count(mut self, guard: f64) -> Result<usize, InertiaError> {
        let n = self.n;
        let bw = self.bw;
        let mut d = vec![0.0f64; n];
        let mut count = 0usize;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for jj in lo..i {
                // L[i][jj]
                let dist = i - jj;
                let mut sum = self.bands[dist][i];
                for k in lo..jj {
                    sum -= self.bands[i - k][i] * self.bands[jj - k][jj] * d[k];
                }
                self.bands[dist][i] = sum / d[jj];
            }
            let mut di = self.bands[0][i];
            for k in lo..i {
                let l = self.bands[i - k][i];
                di -= l * l * d[k];
            }
            if di.abs() <= guard {
                return Err(InertiaError::SingularPivot { pivot: di });
            }
            if di < 0.0 {
                count += 1;
            }
            d[i] = di;
        }
        Ok(count)
    }
}

/// Sparse symmetric matrix, upper triangle in CSC (row <= col, rows sorted).
pub struct SparseSymmetric {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseSymmetric {
    /// Build from upper-triangle triplets (must have row <= col);
    /// duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx: Vec<u32> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(u32, u32)> = None;
        for &(r, c, v) in &triplets {
            debug_assert!(r <= c);
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_ptr[c as usize + 1] += 1;
                row_idx.push(r);
                values.push(v);
                last = Some((r, c));
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseSymmetric {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Simplicial LDL^T (up-looking, elimination-tree based); returns the
    /// number of negative pivots.
    pub fn ldl_negative_count(&self, guard: f64) -> Result<usize, InertiaError> {
        let n = self.n;
        // symbolic: elimination tree and column counts
        let mut parent = vec![usize::MAX; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for p in self.col_ptr[k]..self.col_ptr[k + 1] {
                let mut i = self.row_idx[p] as usize;
                while i < k && flag[i] != k {
                    if parent[i] == usize::MAX {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        let mut li = vec![0u32; total];
        let mut lx = vec![0.0f64; total];
        let mut lfill = vec![0usize; n];
        let mut y = vec![0.0f64; n];
        let mut pattern = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut d = vec![0.0f64; n];
        let mut negatives = 0usize;

        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            y[k] = 0.0;
            for p in self.col_ptr[k]..self.col_ptr[k + 1] {
                let i0 = self.row_idx[p] as usize;
                if i0 > k {
                    continue;
                }
                y[i0] += self.values[p];
                let mut len = 0usize;
                let mut i = i0;
                while flag[i] != k {
                    stack[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = stack[len];
                }
            }
            let mut dk = y[k];
            y[k] = 0.0;
            for &j in &pattern[top..n] {
                let yj = y[j];
                y[j] = 0.0;
                let start = lp[j];
                let end = lp[j] + lfill[j];
                for q in start..end {
                    y[li[q] as usize] -= lx[q] * yj;
                }
                let lkj = yj / d[j];
                dk -= lkj * yj;
                li[end] = k as u32;
                lx[end] = lkj;
                lfill[j] += 1;
            }
            if dk.abs() <= guard {
                return Err(InertiaError::SingularPivot { pivot: dk });
            }
            if dk < 0.0 {
                negatives += 1;
            }
            d[k] = dk;
        }
        Ok(negatives)
    }
}

/// Geometric nested-dissection ordering for a box graph with stencil reach
/// `range`: recursively cut the longest axis with a separator slab of that
/// thickness, ordering the separator last. Returns `order[old] = new`.
pub fn nested_dissection_box(dims: &[usize], range: usize) -> Vec<usize> {
    let total: usize = dims.iter().product();
    let mut order = vec![0usize; total];
    let mut next = 0usize;
    let lo = vec![0usize; dims.len()];
    let hi = dims.to_vec();
    dissect(dims, range.max(1), &lo, &hi, &mut order, &mut next);
    debug_assert_eq!(next, total);
    order
}

fn dissect(
    dims: &[usize],
    range: usize,
    lo: &[usize],
    hi: &[usize],
    order: &mut [usize],
    next: &mut usize,
) {
    let sizes: Vec<usize> = lo.iter().zip(hi).map(|(&a, &b)| b - a).collect();
    let cells: usize = sizes.iter().product();
    if cells == 0 {
        return;
    }
    let (axis, &axis_len) = sizes
        .iter()
        .enumerate()
        .max_by_key(|&(_, &s)| s)
        .unwrap();
    if cells <= 64 || axis_len <= 2 * range + 1 {
        emit_block(dims, lo, hi, order, next);
        return;
    }
    let mid = lo[axis] + (axis_len - range) / 2;
    // left part
    let mut hi_left = hi.to_vec();
    hi_left[axis] = mid;
    dissect(dims, range, lo, &hi_left, order, next);
    // right part
    let mut lo_right = lo.to_vec();
    lo_right[axis] = mid + range;
    dissect(dims, range, &lo_right, hi, order, next);
    // separator slab, ordered last
    let mut lo_sep = lo.to_vec();
    let mut hi_sep = hi.to_vec();
    lo_sep[axis] = mid;
    hi_sep[axis] = mid + range;
    emit_block(dims, &lo_sep, &hi_sep, order, next);
}

fn emit_block(dims: &[usize], lo: &[usize], hi: &[usize], order: &mut [usize], next: &mut usize) {
    let d = dims.len();
    let mut idx = lo.to_vec();
    loop {
        let mut flat = 0usize;
        for a in 0..d {
            flat = flat * dims[a] + idx[a];
        }
        order[flat] = *next;
        *next += 1;
        // odometer increment
        let mut a = d;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < hi[a] {
                break;
            }
            idx[a] = lo[a];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dense_count_below(a: &DMatrix<f64>, t: f64) -> usize {
        let shifted = a - DMatrix::identity(a.nrows(), a.ncols()) * t;
        nalgebra::SymmetricEigen::new(shifted)
            .eigenvalues
            .iter()
            .filter(|&&l| l < 0.0)
            .count()
    }

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn sturm_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(2..40);
            let diag: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let off: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut a = DMatrix::zeros(n, n);
            for i in 0..n {
                a[(i, i)] = diag[i];
                if i + 1 < n {
                    a[(i, i + 1)] = off[i];
                    a[(i + 1, i)] = off[i];
                }
            }
            for _ in 0..5 {
                let t = rng.gen_range(-3.0..3.0);
                let shifted: Vec<f64> = diag.iter().map(|&d| d - t).collect();
                let got = tridiag_negative_count(&shifted, &off, 1e-13).unwrap();
                assert_eq!(got, dense_count_below(&a, t));
            }
        }
    }

    #[test]
    fn banded_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..12 {
            let n = rng.gen_range(3..60);
            let bw = rng.gen_range(1..5.min(n));
            let mut a = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i.saturating_sub(bw)..=i {
                    let v = rng.gen_range(-1.0..1.0);
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
            for _ in 0..5 {
                let t = rng.gen_range(-2.0..2.0);
                let mut b = BandedSymmetric::zeros(n, bw);
                for i in 0..n {
                    for j in i.saturating_sub(bw)..=i {
                        let v = a[(i, j)] - if i == j { t } else { 0.0 };
                        b.add(i, j, v);
                    }
                }
                let got = b.ldl_negative_count(1e-13).unwrap();
                assert_eq!(got, dense_count_below(&a, t));
            }
        }
    }

    #[test]
    fn sparse_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..12 {
            let n = rng.gen_range(5..120);
            let a = random_symmetric(n, &mut rng);
            // sparsify: keep diagonal and a few off-diagonals
            let mut dense = DMatrix::zeros(n, n);
            for i in 0..n {
                dense[(i, i)] = a[(i, i)];
            }
            for _ in 0..3 * n {
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                if i != j {
                    dense[(i, j)] = a[(i, j)];
                    dense[(j, i)] = a[(i, j)];
                }
            }
            for _ in 0..3 {
                let t = rng.gen_range(-2.0..2.0);
                let mut trip = Vec::new();
                for c in 0..n {
                    for r in 0..=c {
                        let v = dense[(r, c)] - if r == c { t } else { 0.0 };
                        if v != 0.0 {
                            trip.push((r as u32, c as u32, v));
                        }
                    }
                }
                let sp = SparseSymmetric::from_triplets(n, trip);
                match sp.ldl_negative_count(1e-12) {
                    Ok(got) => assert_eq!(got, dense_count_below(&dense, t), "trial {trial}"),
                    Err(InertiaError::SingularPivot { .. }) => {
                        // legitimate: jittering t is the caller's job
                    }
                }
            }
        }
    }

    #[test]
    fn nested_dissection_is_permutation() {
        for dims in [vec![9usize, 9, 9], vec![17, 5], vec![33]] {
            let order = nested_dissection_box(&dims, 1);
            let mut seen = vec![false; order.len()];
            for &o in &order {
                assert!(!seen[o]);
                seen[o] = true;
            }
        }
    }

    #[test]
    fn singular_pivot_detected() {
        // diag(1, 0, -1) at t = 0 hits an exact zero pivot
        let trip = vec![(0u32, 0u32, 1.0), (1, 1, 0.0), (2, 2, -1.0)];
        let sp = SparseSymmetric::from_triplets(3, trip);
        assert!(matches!(
            sp.ldl_negative_count(1e-12),
            Err(InertiaError::SingularPivot { .. })
        ));
    }
}
