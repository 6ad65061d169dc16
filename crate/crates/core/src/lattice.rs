//! Points of the hypercubic lattice Z^d and lattice counting helpers.

use serde::{Deserialize, Serialize};

/// A point of Z^d. The dimension is the length of the coordinate vector and
/// must be consistent across one computation.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct LatticePoint(pub Vec<i64>);

impl LatticePoint {
    pub fn new(coords: Vec<i64>) -> Self {
        LatticePoint(coords)
    }

    pub fn zero(dim: usize) -> Self {
        LatticePoint(vec![0; dim])
    }

    /// Point (t, 0, ..., 0) on the first coordinate axis.
    pub fn axis(dim: usize, t: i64) -> Self {
        let mut c = vec![0; dim];
        c[0] = t;
        LatticePoint(c)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    /// Euclidean norm |x|.
    pub fn norm_l2(&self) -> f64 {
        self.0
            .iter()
            .map(|&c| (c as f64) * (c as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Sup norm |x|_inf.
    pub fn norm_inf(&self) -> i64 {
        self.0.iter().map(|&c| c.abs()).max().unwrap_or(0)
    }

    /// Japanese bracket <x> = 1 + |x| with the Euclidean norm.
    pub fn bracket(&self) -> f64 {
        1.0 + self.norm_l2()
    }

    pub fn neg(&self) -> Self {
        LatticePoint(self.0.iter().map(|&c| -c).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        LatticePoint(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| a - b)
                .collect(),
        )
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    /// Lexicographically canonical representative of {x, -x}.
    pub fn canonical_sign(&self) -> Self {
        match self.0.iter().find(|&&c| c != 0) {
            Some(&c) if c < 0 => self.neg(),
            _ => self.clone(),
        }
    }
}

/// Iterate over the box |x|_inf <= l in lexicographic order.
pub fn box_points(dim: usize, l: i64) -> impl Iterator<Item = LatticePoint> {
    let side = (2 * l + 1) as usize;
    let n = side.pow(dim as u32);
    (0..n).map(move |mut idx| {
        let mut coords = vec![0i64; dim];
        for coord in coords.iter_mut().rev() {
            *coord = (idx % side) as i64 - l;
            idx /= side;
        }
        LatticePoint(coords)
    })
}

/// Number of lattice points in the closed Euclidean ball |x| <= r, exactly,
/// as long as the enumeration stays cheap for the given dimension.
pub fn ball_count_exact(dim: usize, r: f64) -> Option<u64> {
    if r < 0.0 {
        return Some(0);
    }
    let rf = r.floor() as i64;
    match dim {
        1 => Some((2 * rf + 1) as u64),
        2 => {
            if rf > 2_000_000 {
                return None;
            }
            let r2 = r * r;
            let mut count: u64 = 0;
            for a in -rf..=rf {
                let rem = r2 - (a as f64) * (a as f64);
                if rem >= 0.0 {
                    count += (2 * (rem.sqrt().floor() as i64) + 1) as u64;
                }
            }
            Some(count)
        }
        3 => {
            if rf > 2_500 {
                return None;
            }
            let r2 = r * r;
            let mut count: u64 = 0;
            for a in -rf..=rf {
                let rem = r2 - (a as f64) * (a as f64);
                if rem < 0.0 {
                    continue;
                }
                count += ball_count_exact(2, rem.sqrt())?;
            }
            Some(count)
        }
        _ => {
            if rf > 40 {
                return None;
            }
            let r2 = r * r;
            let mut count: u64 = 0;
            for a in -rf..=rf {
                let rem = r2 - (a as f64) * (a as f64);
                if rem < 0.0 {
                    continue;
                }
                count += ball_count_exact(dim - 1, rem.sqrt())?;
            }
            Some(count)
        }
    }
}

/// Lattice points in the closed Euclidean ball |x| <= r: exact where cheap,
/// volume asymptotics omega_d r^d beyond the exact range.
pub fn ball_count(dim: usize, r: f64) -> f64 {
    if r < 0.0 {
        return 0.0;
    }
    if let Some(c) = ball_count_exact(dim, r) {
        return c as f64;
    }
    unit_ball_volume(dim) * r.powi(dim as i32)
}

/// Volume of the unit ball in R^d.
pub fn unit_ball_volume(dim: usize) -> f64 {
    let d = dim as f64;
    std::f64::consts::PI.powf(d / 2.0) / gamma_half_integer(dim + 2)
}

/// Gamma(n/2) for integer n >= 1, by the half-integer recursion.
fn gamma_half_integer(n: usize) -> f64 {
    match n {
        1 => std::f64::consts::PI.sqrt(),
        2 => 1.0,
        _ => (n as f64 / 2.0 - 1.0) * gamma_half_integer(n - 2),
    }
}

/// Surface area of the unit sphere S^{d-1}.
pub fn unit_sphere_area(dim: usize) -> f64 {
    let d = dim as f64;
    2.0 * std::f64::consts::PI.powf(d / 2.0) / gamma_half_integer(dim)
}

/// Exact number of points on the sup-norm shell |x|_inf = m.
pub fn sup_shell_count(dim: usize, m: i64) -> f64 {
    if m == 0 {
        return 1.0;
    }
    let s = (2 * m + 1) as f64;
    let t = (2 * m - 1) as f64;
    s.powi(dim as i32) - t.powi(dim as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_counts_small() {
        assert_eq!(ball_count_exact(1, 9.0), Some(19));
        assert_eq!(ball_count_exact(2, 1.0), Some(5));
        assert_eq!(ball_count_exact(2, 1.5), Some(9));
        assert_eq!(ball_count_exact(3, 1.0), Some(7));
        // d=3, r=sqrt(3) picks up the 8 cube corners
        assert_eq!(ball_count_exact(3, 3f64.sqrt() + 1e-12), Some(27));
    }

    #[test]
    fn ball_count_matches_volume_at_scale() {
        let r = 2000.0;
        let exact = ball_count_exact(2, r).unwrap() as f64;
        let vol = unit_ball_volume(2) * r * r;
        assert!((exact - vol).abs() / vol < 1e-3);
    }

    #[test]
    fn sphere_and_ball_constants() {
        assert!((unit_ball_volume(3) - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-14);
        assert!((unit_sphere_area(3) - 4.0 * std::f64::consts::PI).abs() < 1e-14);
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-14);
        assert!((unit_sphere_area(2) - 2.0 * std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn box_iteration_is_lexicographic() {
        let pts: Vec<_> = box_points(2, 1).collect();
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], LatticePoint::new(vec![-1, -1]));
        assert_eq!(pts[8], LatticePoint::new(vec![1, 1]));
        let mut sorted = pts.clone();
        sorted.sort();
        assert_eq!(pts, sorted);
    }

    #[test]
    fn shell_counts() {
        assert_eq!(sup_shell_count(3, 1) as i64, 26);
        assert_eq!(sup_shell_count(2, 2) as i64, 16);
    }
}
