//! Decaying nonnegative potentials on Z^d: level-set functionals,
//! rearrangements, growth exponents and the special constructions used by
//! the counting experiments.
//!
//! A potential is a finite explicit map on the window |x|_inf <= window_r
//! plus an optional analytic tail descriptor outside. The Japanese bracket
//! is <x> = 1 + |x| with the Euclidean norm, so level sets of power tails
//! are lattice ball counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispersion::Dispersion;
use crate::lattice::{ball_count, ball_count_exact, box_points, sup_shell_count, LatticePoint};

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("negative value {value} at {point:?}")]
    NegativeValue { point: LatticePoint, value: f64 },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("alpha must be positive")]
    NonpositiveAlpha,
    #[error("operation requires a finite-support potential (tail present)")]
    TailedPotential,
    #[error("integer overflow building lattice coordinates")]
    Overflow,
    #[error("bad lambda sequence: {0}")]
    BadLambdas(String),
    #[error("sparse chain point {0:?} collides with the kept support; increase r0")]
    ChainCollision(LatticePoint),
    #[error("window too small: {0}")]
    WindowTooSmall(String),
    #[error("level set too large to enumerate exactly")]
    LevelSetTooLarge,
}

/// Analytic decay descriptors, evaluated at r = |x| (Euclidean).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Tail {
    None,
    /// c <x>^{-alpha}
    Power { c: f64, alpha: f64 },
    /// c e^{-alpha |x|} <x>^{weight_pow} (weight_pow = 0 is the plain case)
    Exp { c: f64, alpha: f64, weight_pow: f64 },
    /// c <x>^{-alpha} max(ln <x>, 1)^{-eta}
    PowerLog { c: f64, alpha: f64, eta: f64 },
    /// Shell interleaving: `inside` on the radial bands, `outside` off them.
    Banded {
        bands: Vec<(f64, f64)>,
        inside: Box<Tail>,
        outside: Box<Tail>,
    },
}

impl Tail {
    pub fn is_none(&self) -> bool {
        matches!(self, Tail::None)
    }

    /// Value at Euclidean radius r >= 0.
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Tail::None => 0.0,
            Tail::Power { c, alpha } => c * (1.0 + r).powf(-alpha),
            Tail::Exp { c, alpha, weight_pow } => {
                c * (-alpha * r).exp() * (1.0 + r).powf(*weight_pow)
            }
            Tail::PowerLog { c, alpha, eta } => {
                let br = 1.0 + r;
                c * br.powf(-alpha) * br.ln().max(1.0).powf(-eta)
            }
            Tail::Banded { bands, inside, outside } => {
                if bands.iter().any(|&(lo, hi)| r >= lo && r <= hi) {
                    inside.eval(r)
                } else {
                    outside.eval(r)
                }
            }
        }
    }

    /// Radius from which the tail is nonincreasing.
    fn monotone_from(&self) -> f64 {
        match self {
            Tail::None | Tail::Power { .. } | Tail::PowerLog { .. } => 0.0,
            Tail::Exp { alpha, weight_pow, .. } => (weight_pow / alpha - 1.0).max(0.0),
            Tail::Banded { inside, outside, .. } => {
                inside.monotone_from().max(outside.monotone_from())
            }
        }
    }

    /// Largest radius with eval(r) >= a, for a simple (non-banded) tail,
    /// assuming monotonicity beyond `monotone_from`. Returns < 0 when the
    /// tail is everywhere below a.
    fn threshold_radius(&self, a: f64) -> f64 {
        debug_assert!(a > 0.0);
        match self {
            Tail::None => -1.0,
            Tail::Power { c, alpha } => (c / a).powf(1.0 / alpha) - 1.0,
            Tail::Exp { c, alpha, weight_pow } => {
                if *weight_pow == 0.0 {
                    if c / a <= 1.0 {
                        -1.0
                    } else {
                        (c / a).ln() / alpha
                    }
                } else {
                    self.bisect_threshold(a)
                }
            }
            Tail::PowerLog { .. } => self.bisect_threshold(a),
            Tail::Banded { .. } => unreachable!("banded tails use interval logic"),
        }
    }

    /// Monotone bisection for tails without a closed-form inverse.
    fn bisect_threshold(&self, a: f64) -> f64 {
        let start = self.monotone_from();
        if self.eval(start) < a {
            return start - 1.0;
        }
        let mut hi = (start + 1.0).max(2.0);
        while self.eval(hi) >= a {
            hi *= 2.0;
            if hi > 1e300 {
                return f64::INFINITY;
            }
        }
        let mut lo = start;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) >= a {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// A nonnegative potential: explicit window values plus optional tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    dim: usize,
    explicit: BTreeMap<LatticePoint, f64>,
    tail: Tail,
    window_r: i64,
}

impl Potential {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tail(&self) -> &Tail {
        &self.tail
    }

    pub fn window_r(&self) -> i64 {
        self.window_r
    }

    pub fn explicit(&self) -> &BTreeMap<LatticePoint, f64> {
        &self.explicit
    }

    /// V(x): explicit inside the window, tail outside.
    pub fn value(&self, x: &LatticePoint) -> f64 {
        if x.norm_inf() <= self.window_r {
            self.explicit.get(x).copied().unwrap_or(0.0)
        } else {
            self.tail.eval(x.norm_l2())
        }
    }

    pub fn is_finite_support(&self) -> bool {
        self.tail.is_none()
    }

    /// Support of the explicit part (positive values only).
    pub fn support(&self) -> Vec<LatticePoint> {
        self.explicit
            .iter()
            .filter(|(_, &v)| v > 0.0)
            .map(|(x, _)| x.clone())
            .collect()
    }

    pub fn support_size(&self) -> usize {
        self.explicit.values().filter(|&&v| v > 0.0).count()
    }

    pub fn max_value(&self) -> f64 {
        self.explicit.values().copied().fold(0.0, f64::max)
    }

    pub fn min_positive_value(&self) -> Option<f64> {
        self.explicit
            .values()
            .filter(|&&v| v > 0.0)
            .copied()
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.min(v)))
            })
    }

    /// Pointwise scaling lambda V.
    pub fn scaled(&self, lambda: f64) -> Potential {
        assert!(lambda >= 0.0);
        let explicit = self
            .explicit
            .iter()
            .map(|(x, &v)| (x.clone(), lambda * v))
            .collect();
        let tail = scale_tail(&self.tail, lambda);
        Potential {
            dim: self.dim,
            explicit,
            tail,
            window_r: self.window_r,
        }
    }
}

fn scale_tail(tail: &Tail, lambda: f64) -> Tail {
    match tail {
        Tail::None => Tail::None,
        Tail::Power { c, alpha } => Tail::Power { c: lambda * c, alpha: *alpha },
        Tail::Exp { c, alpha, weight_pow } => Tail::Exp {
            c: lambda * c,
            alpha: *alpha,
            weight_pow: *weight_pow,
        },
        Tail::PowerLog { c, alpha, eta } => Tail::PowerLog {
            c: lambda * c,
            alpha: *alpha,
            eta: *eta,
        },
        Tail::Banded { bands, inside, outside } => Tail::Banded {
            bands: bands.clone(),
            inside: Box::new(scale_tail(inside, lambda)),
            outside: Box::new(scale_tail(outside, lambda)),
        },
    }
}

/// Finite-support potential from explicit samples.
pub fn from_samples(
    dim: usize,
    map: BTreeMap<LatticePoint, f64>,
) -> Result<Potential, PotentialError> {
    let mut window_r = 0;
    for (x, &v) in &map {
        if x.dim() != dim {
            return Err(PotentialError::BadParameter(format!(
                "point {x:?} has dimension {} != {dim}",
                x.dim()
            )));
        }
        if v < 0.0 {
            return Err(PotentialError::NegativeValue {
                point: x.clone(),
                value: v,
            });
        }
        window_r = window_r.max(x.norm_inf());
    }
    let explicit = map.into_iter().filter(|(_, v)| *v > 0.0).collect();
    Ok(Potential {
        dim,
        explicit,
        tail: Tail::None,
        window_r,
    })
}

/// Potential defined by an analytic tail, sampled explicitly on the window.
pub fn from_tail(dim: usize, tail: Tail, window_r: i64) -> Result<Potential, PotentialError> {
    validate_tail(&tail)?;
    if window_r < 0 {
        return Err(PotentialError::BadParameter("window_r < 0".into()));
    }
    let needed = tail.monotone_from().ceil() as i64;
    if window_r < needed {
        return Err(PotentialError::WindowTooSmall(format!(
            "window_r {window_r} must reach the monotone region (>= {needed})"
        )));
    }
    let mut explicit = BTreeMap::new();
    for x in box_points(dim, window_r) {
        let v = tail.eval(x.norm_l2());
        if v > 1e-300 {
            explicit.insert(x, v);
        }
    }
    Ok(Potential {
        dim,
        explicit,
        tail,
        window_r,
    })
}

fn validate_tail(tail: &Tail) -> Result<(), PotentialError> {
    match tail {
        Tail::None => Ok(()),
        Tail::Power { c, alpha } => {
            if *c > 0.0 && *alpha > 0.0 {
                Ok(())
            } else {
                Err(PotentialError::BadParameter("Power needs c, alpha > 0".into()))
            }
        }
        Tail::Exp { c, alpha, weight_pow } => {
            if *c > 0.0 && *alpha > 0.0 && *weight_pow >= 0.0 {
                Ok(())
            } else {
                Err(PotentialError::BadParameter("Exp needs c, alpha > 0".into()))
            }
        }
        Tail::PowerLog { c, alpha, eta } => {
            if *c > 0.0 && *alpha > 0.0 && *eta > 0.0 {
                Ok(())
            } else {
                Err(PotentialError::BadParameter(
                    "PowerLog needs c, alpha, eta > 0".into(),
                ))
            }
        }
        Tail::Banded { bands, inside, outside } => {
            let mut prev = -1.0;
            for &(lo, hi) in bands {
                if lo <= prev || hi < lo {
                    return Err(PotentialError::BadParameter(
                        "bands must be disjoint and increasing".into(),
                    ));
                }
                prev = hi;
            }
            validate_tail(inside)?;
            validate_tail(outside)
        }
    }
}

/// L_V[alpha] = #{x : V(x) >= alpha}, exact. Tail level sets are inverted
/// analytically (power tails become lattice ball counts) and the window is
/// enumerated.
pub fn level_count(v: &Potential, alpha: f64) -> Result<u64, PotentialError> {
    if alpha <= 0.0 {
        return Err(PotentialError::NonpositiveAlpha);
    }
    let explicit_count = v.explicit.values().filter(|&&val| val >= alpha).count() as u64;
    let tail_count = tail_level_count(v, alpha, true)?;
    Ok(explicit_count + tail_count as u64)
}

/// Level count allowing the asymptotic ball-count path for huge level sets
/// (used by the growth-exponent window estimates).
pub fn level_count_f64(v: &Potential, alpha: f64) -> Result<f64, PotentialError> {
    if alpha <= 0.0 {
        return Err(PotentialError::NonpositiveAlpha);
    }
    let explicit_count = v.explicit.values().filter(|&&val| val >= alpha).count() as f64;
    Ok(explicit_count + tail_level_count(v, alpha, false)?)
}

/// Count of tail sites (|x|_inf > window_r) with V(x) >= alpha.
fn tail_level_count(v: &Potential, alpha: f64, exact: bool) -> Result<f64, PotentialError> {
    match &v.tail {
        Tail::None => Ok(0.0),
        Tail::Banded { bands, inside, outside } => {
            // count ball-intersections band by band
            let r_in = inside.threshold_radius(alpha);
            let r_out = outside.threshold_radius(alpha);
            let mut total = 0.0;
            // inside-band contribution: radii in [band_lo, min(band_hi, r_in)]
            for &(lo, hi) in bands {
                let upper = hi.min(r_in);
                if upper >= lo {
                    total += annulus_count(v.dim, lo, upper, exact)?;
                }
            }
            // outside-band contribution on [0, r_out] minus the bands
            if r_out >= 0.0 {
                total += annulus_count(v.dim, 0.0, r_out, exact)?;
                for &(lo, hi) in bands {
                    let upper = hi.min(r_out);
                    if upper >= lo {
                        total -= annulus_count(v.dim, lo, upper, exact)?;
                    }
                }
            }
            // subtract whatever the window already covered
            let win = window_ball_overlap(v, alpha);
            Ok((total - win).max(0.0))
        }
        tail => {
            let r_star = tail.threshold_radius(alpha);
            if r_star < 0.0 {
                return Ok(0.0);
            }
            if !r_star.is_finite() {
                return Err(PotentialError::LevelSetTooLarge);
            }
            let ball = if exact {
                match ball_count_exact(v.dim, r_star) {
                    Some(c) => c as f64,
                    None => return Err(PotentialError::LevelSetTooLarge),
                }
            } else {
                ball_count(v.dim, r_star)
            };
            Ok((ball - window_ball_overlap_radius(v, r_star)).max(0.0))
        }
    }
}

fn annulus_count(dim: usize, lo: f64, hi: f64, exact: bool) -> Result<f64, PotentialError> {
    let outer = if exact {
        ball_count_exact(dim, hi).ok_or(PotentialError::LevelSetTooLarge)? as f64
    } else {
        ball_count(dim, hi)
    };
    let eps = 1e-9;
    let inner = if lo <= 0.0 {
        0.0
    } else if exact {
        ball_count_exact(dim, lo - eps).ok_or(PotentialError::LevelSetTooLarge)? as f64
    } else {
        ball_count(dim, lo - eps)
    };
    Ok(outer - inner)
}

/// Sites inside the window box that the tail-threshold ball also covers.
fn window_ball_overlap_radius(v: &Potential, r_star: f64) -> f64 {
    let mut n = 0u64;
    for x in box_points(v.dim, v.window_r) {
        if x.norm_l2() <= r_star {
            n += 1;
        }
    }
    n as f64
}

fn window_ball_overlap(v: &Potential, alpha: f64) -> f64 {
    let mut n = 0u64;
    for x in box_points(v.dim, v.window_r) {
        if v.tail.eval(x.norm_l2()) >= alpha {
            n += 1;
        }
    }
    n as f64
}

/// Level-set profile: counts at a list of thresholds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelProfile {
    pub thresholds: Vec<f64>,
    pub counts: Vec<u64>,
    pub truncation_exact: bool,
}

impl LevelProfile {
    pub fn build(v: &Potential, thresholds: &[f64]) -> Result<LevelProfile, PotentialError> {
        let mut ts: Vec<f64> = thresholds.to_vec();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        let counts = ts
            .iter()
            .map(|&t| level_count(v, t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LevelProfile {
            thresholds: ts,
            counts,
            truncation_exact: true,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,count\n");
        for (t, c) in self.thresholds.iter().zip(&self.counts) {
            out.push_str(&format!("{t},{c}\n"));
        }
        out
    }
}

/// True iff W is a rearrangement of V: identical multisets of positive
/// values (finite-support potentials only).
pub fn is_rearrangement(v: &Potential, w: &Potential) -> Result<bool, PotentialError> {
    if !v.is_finite_support() || !w.is_finite_support() {
        return Err(PotentialError::TailedPotential);
    }
    let mut a: Vec<f64> = v.explicit.values().copied().filter(|&x| x > 0.0).collect();
    let mut b: Vec<f64> = w.explicit.values().copied().filter(|&x| x > 0.0).collect();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(a == b)
}

/// Chain points x_k = (9^k r0, 0, ..., 0), k = 0..n-1. Consecutive ratios
/// are exactly 9, so 9 r_k <= r_{k+1}.
pub fn sparse_chain(dim: usize, r0: i64, n: usize) -> Result<Vec<LatticePoint>, PotentialError> {
    if r0 < 1 {
        return Err(PotentialError::BadParameter("r0 must be >= 1".into()));
    }
    let mut points = Vec::with_capacity(n);
    let mut r = r0;
    for k in 0..n {
        points.push(LatticePoint::axis(dim, r));
        if k + 1 < n {
            r = r.checked_mul(9).ok_or(PotentialError::Overflow)?;
        }
    }
    Ok(points)
}

/// Potential with prescribed coupling staircase: value eta/lambda_j at the
/// j-th sparse-chain point (chain indices 0-based, ratios exactly 9).
pub fn build_prescribed(
    dim: usize,
    lambdas: &[f64],
    eta: f64,
    r0: i64,
) -> Result<Potential, PotentialError> {
    if eta <= 0.0 {
        return Err(PotentialError::BadParameter("eta must be positive".into()));
    }
    let mut prev = 1.0;
    for &l in lambdas {
        if l < 1.0 || l < prev {
            return Err(PotentialError::BadLambdas(
                "lambdas must be nondecreasing and >= 1".into(),
            ));
        }
        prev = l;
    }
    let chain = sparse_chain(dim, r0, lambdas.len())?;
    let mut map = BTreeMap::new();
    for (x, &l) in chain.into_iter().zip(lambdas) {
        map.insert(x, eta / l);
    }
    from_samples(dim, map)
}

/// Spread the sub-threshold values of a finite potential onto a sparse
/// chain, keeping values >= (1 - eps) eta(e) in place. The output is a
/// rearrangement of the input.
pub fn rearrange_sparse(
    v: &Potential,
    eps: f64,
    e: &Dispersion,
    r0: i64,
) -> Result<Potential, PotentialError> {
    if !v.is_finite_support() {
        return Err(PotentialError::TailedPotential);
    }
    if !(0.0..1.0).contains(&eps) || eps == 0.0 {
        return Err(PotentialError::BadParameter("eps must lie in (0,1)".into()));
    }
    if v.dim < 3 {
        return Err(PotentialError::BadParameter(
            "rearrange_sparse requires d >= 3".into(),
        ));
    }
    let eta = e
        .eta(1e-6)
        .map_err(|err| PotentialError::BadParameter(format!("eta: {err}")))?;
    let threshold = (1.0 - eps) * eta;
    let mut kept = BTreeMap::new();
    let mut moved: Vec<(LatticePoint, f64)> = Vec::new();
    for (x, &val) in &v.explicit {
        if val >= threshold {
            kept.insert(x.clone(), val);
        } else if val > 0.0 {
            moved.push((x.clone(), val));
        }
    }
    let chain = sparse_chain(v.dim, r0, moved.len())?;
    for p in &chain {
        if kept.contains_key(p) {
            return Err(PotentialError::ChainCollision(p.clone()));
        }
    }
    let mut out = kept;
    for ((_, val), p) in moved.into_iter().zip(chain) {
        out.insert(p, val);
    }
    from_samples(v.dim, out)
}

/// Lattice sampling of a continuum profile: V_L(x) = L^{-2} v(x/L), zero
/// outside the scaled support box.
pub fn scale_continuum<F>(
    v: F,
    support_radius: f64,
    dim: usize,
    l: i64,
) -> Result<Potential, PotentialError>
where
    F: Fn(&[f64]) -> f64,
{
    if l < 1 {
        return Err(PotentialError::BadParameter("L must be >= 1".into()));
    }
    let window = (support_radius * l as f64).ceil() as i64;
    let scale = 1.0 / ((l * l) as f64);
    let mut map = BTreeMap::new();
    for x in box_points(dim, window) {
        let y: Vec<f64> = x.coords().iter().map(|&c| c as f64 / l as f64).collect();
        let val = v(&y);
        if val < 0.0 {
            return Err(PotentialError::NegativeValue {
                point: x,
                value: val,
            });
        }
        if val > 1e-300 {
            map.insert(x, scale * val);
        }
    }
    from_samples(dim, map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrowthCaveat {
    /// Finite-scale window estimates, not limits.
    WindowEstimate,
    /// Finite support: the exponents degenerate to 0.
    DegenerateFiniteSupport,
}

/// Finite-scale surrogates for the level-set growth exponents g+-(V):
/// the defining quotients sampled at the largest window scale ell_max,
/// sup/inf over the r grid.
pub fn g_bounds(
    v: &Potential,
    ell_max: f64,
    r_grid: &[f64],
) -> Result<(f64, f64, GrowthCaveat), PotentialError> {
    if v.is_finite_support() {
        return Ok((0.0, 0.0, GrowthCaveat::DegenerateFiniteSupport));
    }
    if r_grid.is_empty() || r_grid.iter().any(|&r| r <= 0.0) {
        return Err(PotentialError::BadParameter("r grid must be positive".into()));
    }
    if ell_max <= 1.0 {
        return Err(PotentialError::WindowTooSmall("ell_max must exceed 1".into()));
    }
    let d = v.dim as f64;
    let base = level_count_f64(v, (-ell_max).exp())?;
    if base < 1.0 {
        return Err(PotentialError::WindowTooSmall(format!(
            "level set at e^-{ell_max} is empty"
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &r in r_grid {
        let shifted = level_count_f64(v, (-ell_max - r).exp())?;
        let g = 2.0 / (d * r) * (shifted.ln() - base.ln());
        lo = lo.min(g);
        hi = hi.max(g);
    }
    Ok((lo, hi, GrowthCaveat::WindowEstimate))
}

/// Interleave two potentials along radial shells: on the odd-indexed bands
/// [a_{1+2n}, a_{2+2n}] take V1, elsewhere V2.
pub fn interleave(
    v1: &Potential,
    v2: &Potential,
    shells: &[f64],
) -> Result<Potential, PotentialError> {
    if v1.dim != v2.dim {
        return Err(PotentialError::BadParameter("dimension mismatch".into()));
    }
    if shells.len() % 2 != 0 {
        return Err(PotentialError::BadParameter(
            "shells must pair into closed bands".into(),
        ));
    }
    let mut prev = -1.0;
    for &s in shells {
        if s <= prev {
            return Err(PotentialError::BadParameter(
                "shells must be strictly increasing".into(),
            ));
        }
        prev = s;
    }
    let bands: Vec<(f64, f64)> = shells.chunks(2).map(|c| (c[0], c[1])).collect();
    let window = v1.window_r.max(v2.window_r);
    let in_band = |r: f64| bands.iter().any(|&(lo, hi)| r >= lo && r <= hi);
    let mut map = BTreeMap::new();
    for x in box_points(v1.dim, window) {
        let val = if in_band(x.norm_l2()) {
            v1.value(&x)
        } else {
            v2.value(&x)
        };
        if val < 0.0 {
            return Err(PotentialError::NegativeValue { point: x, value: val });
        }
        if val > 1e-300 {
            map.insert(x, val);
        }
    }
    let tail = match (&v1.tail, &v2.tail) {
        (Tail::None, Tail::None) => {
            if bands.iter().any(|&(_, hi)| hi > window as f64) {
                return Err(PotentialError::WindowTooSmall(
                    "bands extend beyond both windows with no tails".into(),
                ));
            }
            Tail::None
        }
        (t1, t2) => Tail::Banded {
            bands,
            inside: Box::new(t1.clone()),
            outside: Box::new(t2.clone()),
        },
    };
    validate_tail(&tail)?;
    Ok(Potential {
        dim: v1.dim,
        explicit: map,
        tail,
        window_r: window,
    })
}

/// Two-sided bracket of a sum (or an infinite marker).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SumBracket {
    Finite { lo: f64, hi: f64 },
    Infinite,
}

impl SumBracket {
    pub fn lo(&self) -> f64 {
        match self {
            SumBracket::Finite { lo, .. } => *lo,
            SumBracket::Infinite => f64::INFINITY,
        }
    }

    pub fn hi(&self) -> f64 {
        match self {
            SumBracket::Finite { hi, .. } => *hi,
            SumBracket::Infinite => f64::INFINITY,
        }
    }
}

/// Decide whether sum over the tail of V^p <x>^m converges, from the
/// descriptor parameters alone.
pub fn tail_sum_converges(tail: &Tail, p: f64, m: f64, dim: usize) -> bool {
    let d = dim as f64;
    match tail {
        Tail::None => true,
        Tail::Exp { .. } => true,
        Tail::Power { alpha, .. } => p * alpha - m > d,
        Tail::PowerLog { alpha, eta, .. } => {
            let decay = p * alpha - m;
            decay > d || (decay == d && p * eta > 1.0)
        }
        Tail::Banded { inside, outside, .. } => {
            // bands are finitely many closed intervals: convergence is
            // governed by both descriptors
            tail_sum_converges(inside, p, m, dim) && tail_sum_converges(outside, p, m, dim)
        }
    }
}

/// Bracket sum over tail sites (|x|_inf > from_r) of V(x)^p <x>^m, using
/// exact sup-norm shell counts and the radial monotone envelope of the
/// tail: on the shell |x|_inf = s the Euclidean radius ranges over
/// [s, s sqrt(d)].
pub fn tail_sum_bracket(tail: &Tail, p: f64, m: f64, dim: usize, from_r: i64) -> SumBracket {
    if tail.is_none() {
        return SumBracket::Finite { lo: 0.0, hi: 0.0 };
    }
    if !tail_sum_converges(tail, p, m, dim) {
        return SumBracket::Infinite;
    }
    let sqrt_d = (dim as f64).sqrt();
    let term = |r: f64| tail.eval(r).powf(p) * (1.0 + r).powf(m);
    let band_extrema = |a: f64, b: f64| -> (f64, f64) {
        // envelope of `term` over radii in [a, b]: sample ends plus any
        // band edges for interleaved tails
        let mut lo = term(a).min(term(b));
        let mut hi = term(a).max(term(b));
        if let Tail::Banded { bands, .. } = tail {
            for &(l, h) in bands {
                for edge in [l, h, l - 1e-9, h + 1e-9] {
                    if edge >= a && edge <= b {
                        let t = term(edge);
                        lo = lo.min(t);
                        hi = hi.max(t);
                    }
                }
            }
        }
        (lo, hi)
    };
    let mut lo_sum = 0.0;
    let mut hi_sum = 0.0;
    let mut s = from_r + 1;
    let start_mono = tail.monotone_from().ceil() as i64 + 1;
    loop {
        let count = sup_shell_count(dim, s);
        let (tlo, thi) = band_extrema(s as f64, s as f64 * sqrt_d);
        lo_sum += count * tlo;
        hi_sum += count * thi;
        // geometric/overwhelming decay: stop once the remainder bound
        // is negligible relative to the accumulated sum
        if s > start_mono && count * thi < 1e-16 * hi_sum.max(1e-300) {
            break;
        }
        if s > 200_000_000 {
            // analytic remainder for the slow power case
            let d = dim as f64;
            let decay = match tail {
                Tail::Power { alpha, .. } => p * alpha - m,
                Tail::PowerLog { alpha, .. } => p * alpha - m,
                _ => p * 1.0,
            };
            if decay > d {
                let c_d = 2.0 * d * 3f64.powf(d - 1.0);
                hi_sum += c_d * thi * (s as f64) / (decay - d);
            }
            break;
        }
        s += 1;
    }
    SumBracket::Finite { lo: lo_sum, hi: hi_sum }
}

/// Weighted functional |V|_{p,m} = (sum V^p <x>^m)^{1/p}, exact on the
/// window and bracketed analytically on the tail.
pub fn weighted_norm(v: &Potential, p: f64, m: f64, radius: i64) -> SumBracket {
    assert!(p > 0.0 && m >= 0.0);
    let mut window_sum = 0.0;
    for (x, &val) in &v.explicit {
        if x.norm_inf() <= radius && val > 0.0 {
            window_sum += val.powf(p) * x.bracket().powf(m);
        }
    }
    let from = radius.min(v.window_r);
    match tail_sum_bracket(&v.tail, p, m, v.dim, from) {
        SumBracket::Infinite => SumBracket::Infinite,
        SumBracket::Finite { lo, hi } => SumBracket::Finite {
            lo: (window_sum + lo).powf(1.0 / p),
            hi: (window_sum + hi).powf(1.0 / p),
        },
    }
}

/// Multiply by the bracket weight: x -> V(x) <x>^exponent, updating the
/// tail descriptor analytically.
pub fn weight_by_power(v: &Potential, exponent: f64) -> Result<Potential, PotentialError> {
    let new_tail = match &v.tail {
        Tail::None => Tail::None,
        Tail::Power { c, alpha } => {
            if alpha - exponent <= 0.0 {
                return Err(PotentialError::BadParameter(
                    "weighted power tail no longer decays".into(),
                ));
            }
            Tail::Power { c: *c, alpha: alpha - exponent }
        }
        Tail::Exp { c, alpha, weight_pow } => Tail::Exp {
            c: *c,
            alpha: *alpha,
            weight_pow: weight_pow + exponent,
        },
        Tail::PowerLog { c, alpha, eta } => {
            if alpha - exponent <= 0.0 {
                return Err(PotentialError::BadParameter(
                    "weighted power-log tail no longer decays".into(),
                ));
            }
            Tail::PowerLog { c: *c, alpha: alpha - exponent, eta: *eta }
        }
        Tail::Banded { .. } => {
            return Err(PotentialError::BadParameter(
                "weighting banded tails is not supported".into(),
            ))
        }
    };
    // the weighted Exp tail peaks at <x> = weight_pow/alpha; the window
    // must still cover the non-monotone region
    let needed = new_tail.monotone_from().ceil() as i64;
    let window_r = v.window_r.max(needed);
    let mut explicit = BTreeMap::new();
    for x in box_points(v.dim, window_r) {
        let base = v.value(&x);
        let val = base * x.bracket().powf(exponent);
        if val > 1e-300 {
            explicit.insert(x, val);
        }
    }
    Ok(Potential {
        dim: v.dim,
        explicit,
        tail: new_tail,
        window_r,
    })
}

/// The default weighting exponent d + 5 used by the low-dimension bounds.
pub fn default_weight_exponent(dim: usize) -> f64 {
    dim as f64 + 5.0
}

/// Serialization mirror: {dim, explicit: [{x, v}], tail, window_r}.
#[derive(Serialize, Deserialize)]
pub struct PotentialDoc {
    pub dim: usize,
    pub explicit: Vec<SampleEntry>,
    pub tail: TailDoc,
    pub window_r: i64,
}

#[derive(Serialize, Deserialize)]
pub struct SampleEntry {
    pub x: Vec<i64>,
    pub v: f64,
}

#[derive(Serialize, Deserialize, Clone)]
pub struct TailDoc {
    pub kind: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl Potential {
    pub fn to_doc(&self) -> PotentialDoc {
        let tail = match &self.tail {
            Tail::None => TailDoc { kind: "none".into(), params: vec![] },
            Tail::Power { c, alpha } => TailDoc {
                kind: "power".into(),
                params: vec![*c, *alpha],
            },
            Tail::Exp { c, alpha, weight_pow } => TailDoc {
                kind: "exp".into(),
                params: vec![*c, *alpha, *weight_pow],
            },
            Tail::PowerLog { c, alpha, eta } => TailDoc {
                kind: "powerlog".into(),
                params: vec![*c, *alpha, *eta],
            },
            Tail::Banded { .. } => TailDoc { kind: "banded".into(), params: vec![] },
        };
        PotentialDoc {
            dim: self.dim,
            explicit: self
                .explicit
                .iter()
                .map(|(x, &v)| SampleEntry { x: x.coords().to_vec(), v })
                .collect(),
            tail,
            window_r: self.window_r,
        }
    }

    pub fn from_doc(doc: &PotentialDoc) -> Result<Potential, PotentialError> {
        let tail = match doc.tail.kind.as_str() {
            "none" => Tail::None,
            "power" => Tail::Power {
                c: doc.tail.params[0],
                alpha: doc.tail.params[1],
            },
            "exp" => Tail::Exp {
                c: doc.tail.params[0],
                alpha: doc.tail.params[1],
                weight_pow: doc.tail.params.get(2).copied().unwrap_or(0.0),
            },
            "powerlog" => Tail::PowerLog {
                c: doc.tail.params[0],
                alpha: doc.tail.params[1],
                eta: doc.tail.params[2],
            },
            other => {
                return Err(PotentialError::BadParameter(format!(
                    "unknown tail kind {other}"
                )))
            }
        };
        let mut explicit = BTreeMap::new();
        for e in &doc.explicit {
            explicit.insert(LatticePoint::new(e.x.clone()), e.v);
        }
        if tail.is_none() {
            from_samples(doc.dim, explicit)
        } else {
            let mut v = from_tail(doc.dim, tail, doc.window_r)?;
            // explicit entries override the sampled window
            for (x, val) in explicit {
                v.explicit.insert(x, val);
            }
            Ok(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispersion::laplacian;

    fn pt(coords: &[i64]) -> LatticePoint {
        LatticePoint::new(coords.to_vec())
    }

    #[test]
    fn samples_basics() {
        let mut m = BTreeMap::new();
        m.insert(pt(&[0, 0, 0]), 3.0);
        m.insert(pt(&[1, 0, 0]), 1.0);
        let v = from_samples(3, m).unwrap();
        assert_eq!(v.support_size(), 2);
        let empty = from_samples(2, BTreeMap::new()).unwrap();
        assert_eq!(empty.support_size(), 0);
        let mut bad = BTreeMap::new();
        bad.insert(pt(&[0]), -1.0);
        assert!(matches!(
            from_samples(1, bad),
            Err(PotentialError::NegativeValue { .. })
        ));
    }

    #[test]
    fn tail_construction_values() {
        let v = from_tail(3, Tail::Power { c: 1.0, alpha: 2.0 }, 4).unwrap();
        let x = pt(&[1, 2, 2]);
        assert!((v.value(&x) - (1.0 + 3.0f64).powi(-2)).abs() < 1e-14);
        let w = from_tail(1, Tail::Exp { c: 1.0, alpha: 1.0, weight_pow: 0.0 }, 4).unwrap();
        assert!((w.value(&pt(&[7])) - (-7.0f64).exp()).abs() < 1e-14);
        let pl = from_tail(3, Tail::PowerLog { c: 1.0, alpha: 2.0, eta: 1.0 }, 4).unwrap();
        let r = pt(&[10, 0, 0]).norm_l2();
        assert!((pl.value(&pt(&[10, 0, 0])) - 1.0 / ((1.0 + r).powi(2) * (1.0 + r).ln())).abs() < 1e-14);
    }

    #[test]
    fn level_counts() {
        let mut m = BTreeMap::new();
        m.insert(pt(&[0, 0]), 3.0);
        m.insert(pt(&[1, 0]), 1.0);
        let v = from_samples(2, m).unwrap();
        assert_eq!(level_count(&v, 2.0).unwrap(), 1);
        assert_eq!(level_count(&v, 0.5).unwrap(), 2);
        assert_eq!(level_count(&v, 4.0).unwrap(), 0);
        assert!(matches!(
            level_count(&v, 0.0),
            Err(PotentialError::NonpositiveAlpha)
        ));

        // Power(1,2) d=1, alpha=0.01: sites with <x> <= 10 i.e. |x| <= 9
        let p = from_tail(1, Tail::Power { c: 1.0, alpha: 2.0 }, 2).unwrap();
        assert_eq!(level_count(&p, 0.01).unwrap(), 19);
    }

    #[test]
    fn level_count_monotone_in_alpha() {
        let v = from_tail(2, Tail::Power { c: 2.0, alpha: 3.0 }, 3).unwrap();
        let mut alphas = vec![0.003, 0.01, 0.05, 0.2, 0.9, 1.7, 2.5];
        alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let counts: Vec<u64> = alphas
            .iter()
            .map(|&a| level_count(&v, a).unwrap())
            .collect();
        for w in counts.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn rearrangement_relation() {
        let mut m = BTreeMap::new();
        m.insert(pt(&[0, 0]), 1.0);
        m.insert(pt(&[2, 1]), 0.5);
        let v = from_samples(2, m.clone()).unwrap();
        assert!(is_rearrangement(&v, &v).unwrap());
        let mut translated = BTreeMap::new();
        for (x, &val) in &m {
            let mut c = x.coords().to_vec();
            c[0] += 5;
            translated.insert(LatticePoint::new(c), val);
        }
        let w = from_samples(2, translated).unwrap();
        assert!(is_rearrangement(&v, &w).unwrap());
        let mut changed = m.clone();
        changed.insert(pt(&[2, 1]), 0.75);
        let u = from_samples(2, changed).unwrap();
        assert!(!is_rearrangement(&v, &u).unwrap());
    }

    #[test]
    fn sparse_chain_examples() {
        let c = sparse_chain(2, 2, 3).unwrap();
        assert_eq!(c[0], pt(&[2, 0]));
        assert_eq!(c[1], pt(&[18, 0]));
        assert_eq!(c[2], pt(&[162, 0]));
        assert_eq!(sparse_chain(1, 1, 1).unwrap(), vec![pt(&[1])]);
        assert!(matches!(
            sparse_chain(1, 1, 25),
            Err(PotentialError::Overflow)
        ));
    }

    #[test]
    fn prescribed_values() {
        let v = build_prescribed(3, &[1.0, 2.0, 3.0], 2.0, 4).unwrap();
        assert_eq!(v.value(&pt(&[4, 0, 0])), 2.0);
        assert_eq!(v.value(&pt(&[36, 0, 0])), 1.0);
        assert!((v.value(&pt(&[324, 0, 0])) - 2.0 / 3.0).abs() < 1e-15);
        let empty = build_prescribed(3, &[], 2.0, 4).unwrap();
        assert_eq!(empty.support_size(), 0);
        assert!(matches!(
            build_prescribed(3, &[2.0, 1.0], 2.0, 4),
            Err(PotentialError::BadLambdas(_))
        ));
    }

    #[test]
    fn rearrange_sparse_preserves_levels() {
        let e = laplacian(3);
        let eta = e.eta(1e-6).unwrap();
        let mut m = BTreeMap::new();
        m.insert(pt(&[0, 0, 0]), 2.0 * eta);
        m.insert(pt(&[1, 0, 0]), 0.1 * eta);
        m.insert(pt(&[0, 1, 0]), 0.3 * eta);
        m.insert(pt(&[1, 1, 1]), 0.05 * eta);
        let v = from_samples(3, m).unwrap();
        let w = rearrange_sparse(&v, 0.25, &e, 4).unwrap();
        assert!(is_rearrangement(&v, &w).unwrap());
        assert_eq!(v.support_size(), w.support_size());
        // big value kept in place
        assert_eq!(w.value(&pt(&[0, 0, 0])), 2.0 * eta);
        // level sets agree on a grid of thresholds
        for &a in &[0.01, 0.04 * eta, 0.2 * eta, 0.9 * eta, 1.5 * eta, 3.0 * eta] {
            assert_eq!(
                level_count(&v, a).unwrap(),
                level_count(&w, a).unwrap(),
                "alpha = {a}"
            );
        }
    }

    #[test]
    fn rearrange_keeps_everything_when_all_large() {
        let e = laplacian(3);
        let eta = e.eta(1e-6).unwrap();
        let mut m = BTreeMap::new();
        m.insert(pt(&[0, 0, 0]), 2.0 * eta);
        m.insert(pt(&[2, 0, 0]), 1.5 * eta);
        let v = from_samples(3, m).unwrap();
        let w = rearrange_sparse(&v, 0.25, &e, 4).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn continuum_scaling() {
        let bump = |y: &[f64]| {
            let r2: f64 = y.iter().map(|c| c * c).sum();
            (1.0 - r2).max(0.0)
        };
        let v1 = scale_continuum(bump, 1.0, 2, 1).unwrap();
        assert!((v1.value(&pt(&[0, 0])) - 1.0).abs() < 1e-14);
        for l in [8i64, 16, 32] {
            let v = scale_continuum(bump, 1.0, 2, l).unwrap();
            let sup = v.max_value();
            assert!((sup - 1.0 / (l * l) as f64).abs() < 1e-12);
            let count = v.support_size() as f64;
            let expected = std::f64::consts::PI * (l * l) as f64;
            assert!(
                (count - expected).abs() / expected < 0.2,
                "L={l}: {count} vs {expected}"
            );
        }
    }

    #[test]
    fn growth_exponents() {
        // exponential tail: g+ ~ 2/ell_max -> below 0.1 by ell_max = 20
        let v = from_tail(3, Tail::Exp { c: 1.0, alpha: 1.0, weight_pow: 0.0 }, 2).unwrap();
        let (_, hi, caveat) = g_bounds(&v, 20.0, &[1.0, 2.0, 4.0, 8.0]).unwrap();
        assert_eq!(caveat, GrowthCaveat::WindowEstimate);
        assert!(hi <= 0.105, "g_plus_hat = {hi}");

        // power tail <x>^-2 in d=3: the defining quotients give 2/beta = 1
        let p = from_tail(3, Tail::Power { c: 1.0, alpha: 2.0 }, 2).unwrap();
        let (lo, hi, _) = g_bounds(&p, 20.0, &[1.0, 2.0, 4.0]).unwrap();
        assert!((lo - 1.0).abs() < 0.1 && (hi - 1.0).abs() < 0.1, "{lo} {hi}");

        let fin = from_samples(1, BTreeMap::from([(pt(&[0]), 1.0)])).unwrap();
        let (_, _, c) = g_bounds(&fin, 20.0, &[1.0]).unwrap();
        assert_eq!(c, GrowthCaveat::DegenerateFiniteSupport);
    }

    #[test]
    fn growth_exponent_window_convergence() {
        // error of the window estimate vs 2/beta shrinks as the window grows
        let p = from_tail(3, Tail::Power { c: 1.0, alpha: 2.0 }, 2).unwrap();
        let mut errs = Vec::new();
        for ell in [10.0, 20.0, 40.0] {
            let (lo, hi, _) = g_bounds(&p, ell, &[1.0, 2.0]).unwrap();
            errs.push((lo - 1.0).abs().max((hi - 1.0).abs()));
        }
        assert!(errs[1] <= 0.75 * errs[0] + 1e-9);
        assert!(errs[2] <= 0.75 * errs[1] + 1e-9);
    }

    #[test]
    fn interleave_basics() {
        let v1 = from_tail(3, Tail::PowerLog { c: 1.0, alpha: 2.0, eta: 1.0 }, 3).unwrap();
        let v2 = from_tail(3, Tail::Exp { c: 1.0, alpha: 1.0, weight_pow: 0.0 }, 3).unwrap();
        // empty shells: reduces to v2
        let w = interleave(&v1, &v2, &[]).unwrap();
        for x in box_points(3, 3) {
            assert_eq!(w.value(&x), v2.value(&x));
        }
        assert_eq!(w.value(&pt(&[9, 0, 0])), v2.value(&pt(&[9, 0, 0])));
        // a band selects v1
        let w2 = interleave(&v1, &v2, &[2.0, 2.5]).unwrap();
        let on_band = pt(&[2, 0, 0]);
        assert_eq!(w2.value(&on_band), v1.value(&on_band));
        let off_band = pt(&[0, 0, 0]);
        assert_eq!(w2.value(&off_band), v2.value(&off_band));
        // nonnegative everywhere sampled
        for x in box_points(3, 3) {
            assert!(w2.value(&x) >= 0.0);
        }
        // level counts stay consistent across the band structure
        let direct = |alpha: f64| {
            let mut n = 0u64;
            for x in box_points(3, 30) {
                if w2.value(&x) >= alpha {
                    n += 1;
                }
            }
            n
        };
        for &a in &[0.3, 0.05, 0.01] {
            assert_eq!(level_count(&w2, a).unwrap(), direct(a), "alpha={a}");
        }
    }

    #[test]
    fn weighted_norms() {
        // V = 4 delta_0, p = 1/2, m = 0: (4^{1/2})^2 = 4
        let v = from_samples(1, BTreeMap::from([(pt(&[0]), 4.0)])).unwrap();
        match weighted_norm(&v, 0.5, 0.0, 2) {
            SumBracket::Finite { lo, hi } => {
                assert!((lo - 4.0).abs() < 1e-12 && (hi - 4.0).abs() < 1e-12);
            }
            _ => panic!("finite"),
        }
        // V = delta_0 + delta_(1,0), p = 1/2, m = 2: (1 + 4)^2 = 25
        let v2 = from_samples(
            2,
            BTreeMap::from([(pt(&[0, 0]), 1.0), (pt(&[1, 0]), 1.0)]),
        )
        .unwrap();
        match weighted_norm(&v2, 0.5, 2.0, 2) {
            SumBracket::Finite { lo, hi } => {
                assert!((lo - 25.0).abs() < 1e-12 && (hi - 25.0).abs() < 1e-12);
            }
            _ => panic!("finite"),
        }
        // Exp tail, p = 1/2, m = 2, d = 1: finite bracket
        let v3 = from_tail(1, Tail::Exp { c: 1.0, alpha: 1.0, weight_pow: 0.0 }, 6).unwrap();
        match weighted_norm(&v3, 0.5, 2.0, 6) {
            SumBracket::Finite { lo, hi } => {
                assert!(lo.is_finite() && hi.is_finite() && lo <= hi && lo > 0.0);
            }
            _ => panic!("finite"),
        }
    }

    #[test]
    fn weight_by_power_rules() {
        // delta_0 unchanged
        let v = from_samples(2, BTreeMap::from([(pt(&[0, 0]), 2.5)])).unwrap();
        let w = weight_by_power(&v, 7.0).unwrap();
        assert_eq!(w.value(&pt(&[0, 0])), 2.5);
        // power tail exponent shifts; rejected when decay is lost
        let p = from_tail(3, Tail::Power { c: 1.0, alpha: 9.0 }, 2).unwrap();
        let wp = weight_by_power(&p, 2.0).unwrap();
        assert_eq!(*wp.tail(), Tail::Power { c: 1.0, alpha: 7.0 });
        assert!(weight_by_power(&p, 9.0).is_err());
        // exp tail picks up the bracket weight: V(x) = e^{-|x|}, exponent 6,
        // d = 1, x = 2 -> e^{-2} 3^6
        let ex = from_tail(1, Tail::Exp { c: 1.0, alpha: 1.0, weight_pow: 0.0 }, 3).unwrap();
        let we = weight_by_power(&ex, 6.0).unwrap();
        let expect = (-2.0f64).exp() * 3f64.powi(6);
        assert!((we.value(&pt(&[2])) - expect).abs() < 1e-12 * expect);
        // far outside the window the weighted tail is used
        let far = pt(&[40]);
        let expect_far = (-40.0f64).exp() * 41f64.powi(6);
        assert!((we.value(&far) - expect_far).abs() < 1e-12 * expect_far);
    }

    #[test]
    fn scaling_potentials() {
        let v = from_tail(3, Tail::Power { c: 1.0, alpha: 3.0 }, 2).unwrap();
        let s = v.scaled(10.0);
        assert!((s.value(&pt(&[0, 0, 0])) - 10.0).abs() < 1e-14);
        assert!((s.value(&pt(&[5, 0, 0])) - 10.0 * 6f64.powi(-3)).abs() < 1e-14);
    }

    #[test]
    fn doc_roundtrip() {
        let v = from_tail(2, Tail::Power { c: 2.0, alpha: 3.5 }, 3).unwrap();
        let doc = v.to_doc();
        let text = toml::to_string(&doc).unwrap();
        let parsed: PotentialDoc = toml::from_str(&text).unwrap();
        let w = Potential::from_doc(&parsed).unwrap();
        assert_eq!(v, w);
    }
}
