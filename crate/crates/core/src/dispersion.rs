//! Admissible dispersion relations on the torus [-pi, pi)^d.
//!
//! A dispersion is a real, even trigonometric polynomial
//! `e(p) = sum_x c(x) cos(p.x) - shift`, normalized so that `min e = 0`.
//! The Fourier coefficients `c` are exactly the hopping matrix elements
//! `h(e)_{x,y} = c(x - y)` (with the normalization shift folded into the
//! diagonal), so finite-box assembly, derivatives and `e_max` are exact.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::green::{self, GreenEngine};
use crate::lattice::LatticePoint;

#[derive(Debug, Error)]
pub enum DispersionError {
    #[error("coefficient map is empty")]
    EmptyCoefficients,
    #[error("coefficients are not symmetric at {0:?}: c(x) != c(-x)")]
    AsymmetricCoefficients(LatticePoint),
    #[error("coefficient keys disagree on the lattice dimension")]
    DimensionMismatch,
    #[error("dispersion is not Morse: critical point {point:?} has Hessian eigenvalue {eig:.3e}")]
    NotMorse { point: Vec<f64>, eig: f64 },
    #[error("normalized dispersion failed grid verification: {0}")]
    Verification(String),
    #[error("quadrature did not converge: bracket {err:.3e} above tolerance {tol:.3e}")]
    QuadratureNotConverged { err: f64, tol: f64 },
    #[error("rho = 0 requires d >= 3 (got d = {0})")]
    ZeroRhoLowDimension(usize),
}

/// One polished critical point of the dispersion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalPoint {
    /// Location on the torus, coordinates in [-pi, pi).
    pub location: Vec<f64>,
    /// Energy after normalization (so minima sit at 0).
    pub energy: f64,
    /// Eigenvalues of the Hessian at the point, ascending.
    pub hessian_eigs: Vec<f64>,
}

impl CriticalPoint {
    pub fn is_minimum(&self) -> bool {
        self.hessian_eigs.iter().all(|&l| l > 0.0)
    }
}

/// Certificate that the dispersion is a Morse function: the full critical
/// set with curvature data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MorseReport {
    pub critical_points: Vec<CriticalPoint>,
    /// Minimal curvature K(e) = min |lambda|^{1/2} over all critical points.
    pub k_min: f64,
    /// Number of minima.
    pub n_min: usize,
    /// Minimum of e over critical points that are not minima.
    pub delta: f64,
    /// Seeds whose Newton iteration failed to converge (run continues).
    pub diverged_seeds: usize,
}

impl MorseReport {
    /// Locations of the minima of e.
    pub fn minima(&self) -> impl Iterator<Item = &CriticalPoint> {
        self.critical_points.iter().filter(|c| c.is_minimum())
    }
}

/// An admissible dispersion relation: even trigonometric polynomial with
/// min 0, verified Morse.
#[derive(Debug)]
pub struct Dispersion {
    dim: usize,
    coeffs: BTreeMap<LatticePoint, f64>,
    shift: f64,
    e_max: f64,
    morse: MorseReport,
    eta_cache: OnceLock<Result<(f64, f64), String>>,
    decay_cache: OnceLock<f64>,
}

/// Serialization mirror: {dim, coeffs: [{x, c}], tol}.
#[derive(Serialize, Deserialize)]
pub struct DispersionDoc {
    pub dim: usize,
    pub coeffs: Vec<CoeffEntry>,
    pub tol: f64,
}

#[derive(Serialize, Deserialize)]
pub struct CoeffEntry {
    pub x: Vec<i64>,
    pub c: f64,
}

pub const DEFAULT_MORSE_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 50;
const DEDUP_DIST: f64 = 1e-6;

/// Build a dispersion from its Fourier coefficients, normalize the minimum
/// to zero and certify the Morse property.
pub fn make_dispersion(
    coeffs: BTreeMap<LatticePoint, f64>,
    tol: f64,
) -> Result<Dispersion, DispersionError> {
    let coeffs: BTreeMap<LatticePoint, f64> =
        coeffs.into_iter().filter(|(_, c)| *c != 0.0).collect();
    if coeffs.is_empty() {
        return Err(DispersionError::EmptyCoefficients);
    }
    let dim = coeffs.keys().next().unwrap().dim();
    if dim == 0 || coeffs.keys().any(|x| x.dim() != dim) {
        return Err(DispersionError::DimensionMismatch);
    }
    for (x, &c) in &coeffs {
        match coeffs.get(&x.neg()) {
            Some(&cn) if cn == c => {}
            _ => return Err(DispersionError::AsymmetricCoefficients(x.clone())),
        }
    }
    if coeffs.keys().all(|x| x.is_zero()) {
        // constant dispersion: gradient vanishes identically
        return Err(DispersionError::NotMorse {
            point: vec![0.0; dim],
            eig: 0.0,
        });
    }

    let mut disp = Dispersion {
        dim,
        coeffs,
        shift: 0.0,
        e_max: 0.0,
        morse: MorseReport {
            critical_points: Vec::new(),
            k_min: 0.0,
            n_min: 0,
            delta: 0.0,
            diverged_seeds: 0,
        },
        eta_cache: OnceLock::new(),
        decay_cache: OnceLock::new(),
    };
    let report = scan_critical_points(&disp, default_seed_grid(&disp), tol)?;

    let min_energy = report
        .critical_points
        .iter()
        .map(|c| c.energy)
        .fold(f64::INFINITY, f64::min);
    let max_energy = report
        .critical_points
        .iter()
        .map(|c| c.energy)
        .fold(f64::NEG_INFINITY, f64::max);
    disp.shift = min_energy;
    disp.e_max = max_energy - min_energy;
    disp.morse = normalize_report(report, min_energy);

    // verification grid: the trig polynomial cannot oscillate faster than
    // its degree, so a grid of 8 points per unit hopping range resolves it
    let range = disp.range();
    let m = (8 * range.max(8)).min(64) as usize;
    let mut grid_min = f64::INFINITY;
    let mut grid_max = f64::NEG_INFINITY;
    for p in grid_iter(dim, m) {
        let v = disp.eval(&p);
        grid_min = grid_min.min(v);
        grid_max = grid_max.max(v);
    }
    let scale = disp.coeffs.values().map(|c| c.abs()).sum::<f64>().max(1.0);
    if grid_min < -tol * scale || grid_min > tol * scale + disp.e_max * 0.5 {
        return Err(DispersionError::Verification(format!(
            "grid minimum {grid_min:.3e} outside [{:.1e}, ..]",
            -tol * scale
        )));
    }
    if grid_max > disp.e_max + tol * scale {
        return Err(DispersionError::Verification(format!(
            "grid maximum {grid_max:.6} exceeds e_max {:.6}",
            disp.e_max
        )));
    }
    Ok(disp)
}

/// The discrete-Laplacian dispersion e(p) = sum_i (1 - cos p_i) on Z^d.
pub fn laplacian(dim: usize) -> Dispersion {
    assert!(dim >= 1, "dimension must be >= 1");
    let mut coeffs = BTreeMap::new();
    coeffs.insert(LatticePoint::zero(dim), dim as f64);
    for i in 0..dim {
        let mut plus = vec![0i64; dim];
        plus[i] = 1;
        let mut minus = vec![0i64; dim];
        minus[i] = -1;
        coeffs.insert(LatticePoint::new(plus), -0.5);
        coeffs.insert(LatticePoint::new(minus), -0.5);
    }
    make_dispersion(coeffs, DEFAULT_MORSE_TOL).expect("discrete Laplacian is admissible")
}

impl Dispersion {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest sup-norm of a hopping vector.
    pub fn range(&self) -> i64 {
        self.coeffs.keys().map(|x| x.norm_inf()).max().unwrap_or(0)
    }

    pub fn e_max(&self) -> f64 {
        self.e_max
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn coeffs(&self) -> &BTreeMap<LatticePoint, f64> {
        &self.coeffs
    }

    /// Hopping matrix element h(e)_{x,y} = c(x-y) - shift * [x = y].
    pub fn hopping(&self, diff: &LatticePoint) -> f64 {
        let c = self.coeffs.get(diff).copied().unwrap_or(0.0);
        if diff.is_zero() {
            c - self.shift
        } else {
            c
        }
    }

    pub fn morse_report(&self) -> &MorseReport {
        &self.morse
    }

    /// Evaluate the normalized dispersion at momentum p.
    pub fn eval(&self, p: &[f64]) -> f64 {
        debug_assert_eq!(p.len(), self.dim);
        let mut sum = 0.0;
        for (x, &c) in &self.coeffs {
            let phase: f64 = x
                .coords()
                .iter()
                .zip(p)
                .map(|(&xi, &pi)| xi as f64 * pi)
                .sum();
            sum += c * phase.cos();
        }
        sum - self.shift
    }

    /// Gradient of e at p.
    pub fn grad(&self, p: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim);
        for (x, &c) in &self.coeffs {
            let phase: f64 = x
                .coords()
                .iter()
                .zip(p)
                .map(|(&xi, &pi)| xi as f64 * pi)
                .sum();
            let s = phase.sin();
            for i in 0..self.dim {
                g[i] -= c * x.coords()[i] as f64 * s;
            }
        }
        g
    }

    /// Hessian of e at p.
    pub fn hess(&self, p: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for (x, &c) in &self.coeffs {
            let phase: f64 = x
                .coords()
                .iter()
                .zip(p)
                .map(|(&xi, &pi)| xi as f64 * pi)
                .sum();
            let co = phase.cos();
            for i in 0..self.dim {
                for j in 0..self.dim {
                    h[(i, j)] -= c * x.coords()[i] as f64 * x.coords()[j] as f64 * co;
                }
            }
        }
        h
    }

    /// Single-site coupling threshold eta(e): 1 / int dmu*/e for d >= 3,
    /// exactly 0 for d in {1, 2}.
    pub fn eta(&self, tol: f64) -> Result<f64, DispersionError> {
        if self.dim <= 2 {
            return Ok(0.0);
        }
        let cached = self.eta_cache.get_or_init(|| {
            let engine = GreenEngine::new(self, green::eta_grid(self.dim));
            let (value, err) = engine.zero_site_integral(0.0);
            if value <= 0.0 {
                return Err("eta integral not positive".to_string());
            }
            let eta = 1.0 / value;
            Ok((eta, err / (value * value)))
        });
        match cached {
            Ok((eta, err)) => {
                if *err <= tol {
                    Ok(*eta)
                } else {
                    Err(DispersionError::QuadratureNotConverged { err: *err, tol })
                }
            }
            Err(msg) => Err(DispersionError::Verification(msg.clone())),
        }
    }

    /// Measured resolvent-decay coefficient: max over rho in (0,1] and
    /// 1 <= |x| <= 8 of |x|^{1/2} |G_rho(x)|, cached per dispersion.
    pub fn decay_coefficient(&self) -> f64 {
        *self.decay_cache.get_or_init(|| {
            let engine = GreenEngine::new(self, green::default_grid(self.dim));
            let radius = if self.dim >= 3 { 6 } else { 8 };
            let mut xs = Vec::new();
            for p in crate::lattice::box_points(self.dim, radius) {
                if !p.is_zero() && p == p.canonical_sign() {
                    xs.push(p);
                }
            }
            let mut best = 0.0f64;
            let mut rhos = vec![0.01, 0.1, 0.5, 1.0];
            if self.dim >= 3 {
                rhos.push(0.0);
            }
            for rho in rhos {
                let vals = engine.values(rho, &xs);
                for (x, (v, _)) in xs.iter().zip(&vals) {
                    best = best.max(x.norm_l2().sqrt() * v.abs());
                }
            }
            best
        })
    }

    pub fn to_doc(&self, tol: f64) -> DispersionDoc {
        DispersionDoc {
            dim: self.dim,
            coeffs: self
                .coeffs
                .iter()
                .map(|(x, &c)| CoeffEntry {
                    x: x.coords().to_vec(),
                    c,
                })
                .collect(),
            tol,
        }
    }

    pub fn from_doc(doc: &DispersionDoc) -> Result<Dispersion, DispersionError> {
        let coeffs = doc
            .coeffs
            .iter()
            .map(|e| (LatticePoint::new(e.x.clone()), e.c))
            .collect();
        make_dispersion(coeffs, doc.tol)
    }
}

/// Green's function value G_rho(x) = int cos(p.x)/(rho + e(p)) dmu*(p)
/// with a grid-doubling error bracket.
pub fn green_value(
    e: &Dispersion,
    rho: f64,
    x: &LatticePoint,
    grid_m: usize,
) -> Result<(f64, f64), DispersionError> {
    if rho < 0.0 || (rho == 0.0 && e.dim() <= 2) {
        return Err(DispersionError::ZeroRhoLowDimension(e.dim()));
    }
    let engine = GreenEngine::new(e, grid_m);
    Ok(engine.value(rho, x))
}

/// Table of Green's function values on the cube |x|_inf <= radius.
#[derive(Clone, Debug)]
pub struct GreenTable {
    pub rho: f64,
    pub radius: i64,
    pub values: BTreeMap<LatticePoint, f64>,
    pub err: f64,
    pub grid_m: usize,
}

impl GreenTable {
    pub fn get(&self, x: &LatticePoint) -> Option<f64> {
        self.values.get(x).copied()
    }

    /// CSV export with columns x1..xd,value,err.
    pub fn to_csv(&self) -> String {
        let dim = self.values.keys().next().map(|x| x.dim()).unwrap_or(0);
        let mut out = String::new();
        for i in 1..=dim {
            out.push_str(&format!("x{i},"));
        }
        out.push_str("value,err\n");
        for (x, v) in &self.values {
            for c in x.coords() {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&format!("{v},{}\n", self.err));
        }
        out
    }
}

/// Batched Green values on a cube, doubling the grid until the bracket
/// meets `tol` (or the size cap is reached).
pub fn green_table(
    e: &Dispersion,
    rho: f64,
    radius: i64,
    tol: f64,
) -> Result<GreenTable, DispersionError> {
    if rho < 0.0 || (rho == 0.0 && e.dim() <= 2) {
        return Err(DispersionError::ZeroRhoLowDimension(e.dim()));
    }
    let dim = e.dim();
    let xs: Vec<LatticePoint> = crate::lattice::box_points(dim, radius)
        .filter(|x| *x == x.canonical_sign())
        .collect();
    let mut m = green::default_grid(dim).max(4 * radius.unsigned_abs() as usize);
    let cap = green::grid_cap(dim);
    loop {
        let engine = GreenEngine::new(e, m);
        let vals = engine.values(rho, &xs);
        let err = vals.iter().map(|v| v.1).fold(0.0f64, f64::max);
        if err <= tol || 2 * m > cap {
            if err > tol {
                return Err(DispersionError::QuadratureNotConverged { err, tol });
            }
            let mut values = BTreeMap::new();
            for (x, (v, _)) in xs.iter().zip(&vals) {
                values.insert(x.clone(), *v);
                values.insert(x.neg(), *v);
            }
            return Ok(GreenTable {
                rho,
                radius,
                values,
                err,
                grid_m: 2 * m,
            });
        }
        m *= 2;
    }
}

/// Rerun the critical-point scan with explicit seeding and tolerance.
pub fn morse_report(
    e: &Dispersion,
    seed_grid_n: usize,
    tol: f64,
) -> Result<MorseReport, DispersionError> {
    let report = scan_critical_points(e, seed_grid_n, tol)?;
    Ok(normalize_report(report, e.shift))
}

fn default_seed_grid(e: &Dispersion) -> usize {
    let by_range = 6 * e.range() as usize + 6;
    let cap = match e.dim {
        1 => 512,
        2 => 64,
        3 => 28,
        _ => 10,
    };
    by_range.clamp(12, cap)
}

fn grid_iter(dim: usize, m: usize) -> impl Iterator<Item = Vec<f64>> {
    let n = m.pow(dim as u32);
    let h = 2.0 * std::f64::consts::PI / m as f64;
    (0..n).map(move |mut idx| {
        let mut p = vec![0.0; dim];
        for pi in p.iter_mut().rev() {
            *pi = -std::f64::consts::PI + (idx % m) as f64 * h + 0.5 * h;
            idx /= m;
        }
        p
    })
}

fn wrap_torus(p: &mut [f64]) {
    for c in p.iter_mut() {
        *c = (*c + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
            - std::f64::consts::PI;
    }
}

fn torus_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let mut d = (x - y).abs() % (2.0 * std::f64::consts::PI);
            if d > std::f64::consts::PI {
                d = 2.0 * std::f64::consts::PI - d;
            }
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Grid seeding plus Newton polishing of grad e = 0. Energies are reported
/// unnormalized (no shift applied).
fn scan_critical_points(
    e: &Dispersion,
    seed_n: usize,
    tol: f64,
) -> Result<MorseReport, DispersionError> {
    let dim = e.dim;
    let scale = e.coeffs.values().map(|c| c.abs()).sum::<f64>().max(1.0);
    let grad_tol = 1e-11 * scale * (e.range() as f64).max(1.0);
    let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut diverged = 0usize;

    for seed in grid_iter(dim, seed_n) {
        let mut p = seed;
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let g = e.grad(&p);
            if g.amax() <= grad_tol {
                converged = true;
                break;
            }
            let h = e.hess(&p);
            let Some(step) = h.lu().solve(&g) else {
                break;
            };
            if step.amax() > std::f64::consts::PI {
                break; // Newton step left the basin
            }
            for i in 0..dim {
                p[i] -= step[i];
            }
            wrap_torus(&mut p);
        }
        if !converged {
            diverged += 1;
            continue;
        }
        if found.iter().all(|(q, _)| torus_dist(&p, q) > DEDUP_DIST) {
            let energy = e.eval_unshifted(&p);
            found.push((p, energy));
        }
    }

    if found.is_empty() {
        return Err(DispersionError::NotMorse {
            point: vec![0.0; dim],
            eig: 0.0,
        });
    }

    let mut points = Vec::with_capacity(found.len());
    for (p, energy) in found {
        let h = e.hess(&p);
        let eigs = nalgebra::SymmetricEigen::new(h).eigenvalues;
        let mut hessian_eigs: Vec<f64> = eigs.iter().copied().collect();
        hessian_eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if let Some(&bad) = hessian_eigs.iter().find(|l| l.abs() < tol) {
            return Err(DispersionError::NotMorse {
                point: p,
                eig: bad,
            });
        }
        points.push(CriticalPoint {
            location: p,
            energy,
            hessian_eigs,
        });
    }
    points.sort_by(|a, b| {
        a.energy
            .partial_cmp(&b.energy)
            .unwrap()
            .then_with(|| a.location.partial_cmp(&b.location).unwrap())
    });

    Ok(MorseReport {
        critical_points: points,
        k_min: 0.0,
        n_min: 0,
        delta: 0.0,
        diverged_seeds: diverged,
    })
}

impl Dispersion {
    fn eval_unshifted(&self, p: &[f64]) -> f64 {
        self.eval(p) + self.shift
    }

    /// Evaluate e(p) as a difference from the critical point at `xi` with
    /// energy `energy`. Near minima this is exact to relative precision,
    /// while the plain cosine sum only reaches absolute precision ~1e-16.
    pub(crate) fn eval_near(&self, p: &[f64], xi: &[f64], energy: f64) -> f64 {
        let mut sum = energy;
        for (x, &c) in &self.coeffs {
            let mut half_sum = 0.0;
            let mut half_diff = 0.0;
            for ((&pa, &xa), &cx) in p.iter().zip(xi).zip(x.coords()) {
                half_sum += 0.5 * (pa + xa) * cx as f64;
                half_diff += 0.5 * (pa - xa) * cx as f64;
            }
            // cos(p.x) - cos(xi.x)
            sum -= 2.0 * c * half_sum.sin() * half_diff.sin();
        }
        sum
    }
}

fn normalize_report(mut report: MorseReport, shift: f64) -> MorseReport {
    // the anchor minimum lands at exactly 0.0; other minima keep their
    // tiny polish residuals so difference-form evaluation stays honest
    for c in &mut report.critical_points {
        c.energy -= shift;
    }
    let energy_tol = 1e-9;
    report.n_min = report
        .critical_points
        .iter()
        .filter(|c| c.energy <= energy_tol)
        .count();
    report.k_min = report
        .critical_points
        .iter()
        .flat_map(|c| c.hessian_eigs.iter())
        .map(|l| l.abs().sqrt())
        .fold(f64::INFINITY, f64::min);
    report.delta = report
        .critical_points
        .iter()
        .filter(|c| c.energy > energy_tol)
        .map(|c| c.energy)
        .fold(f64::INFINITY, f64::min);
    report
}
