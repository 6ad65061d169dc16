//! Phase-space functionals: sublevel volumes of the dispersion, the
//! semi-classical count N_sc[e,V] with two-sided brackets, its > / < split,
//! the sublevel-envelope constants and the CLR constant via the trace
//! criterion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispersion::{Dispersion, DispersionError};
use crate::green::GreenEngine;
use crate::potential::{level_count, tail_sum_bracket, tail_sum_converges, Potential, SumBracket};

#[derive(Debug, Error)]
pub enum SemiclassicalError {
    #[error(transparent)]
    Dispersion(#[from] DispersionError),
    #[error(transparent)]
    Potential(#[from] crate::potential::PotentialError),
    #[error("clr constant requires d >= 3 (got {0})")]
    LowDimension(usize),
}

/// Two-sided bracket for a phase-space volume or count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScBracket {
    pub lower: f64,
    pub upper: f64,
    pub grid_m: usize,
    /// Set when a tail contribution was estimated rather than enumerated.
    pub truncation_note: bool,
}

impl ScBracket {
    pub fn exact(v: f64, grid_m: usize) -> Self {
        ScBracket {
            lower: v,
            upper: v,
            grid_m,
            truncation_note: false,
        }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }

    fn add(&self, other: &ScBracket) -> ScBracket {
        ScBracket {
            lower: self.lower + other.lower,
            upper: self.upper + other.upper,
            grid_m: self.grid_m.max(other.grid_m),
            truncation_note: self.truncation_note || other.truncation_note,
        }
    }

    fn scale(&self, c: f64) -> ScBracket {
        ScBracket {
            lower: c * self.lower,
            upper: c * self.upper,
            grid_m: self.grid_m,
            truncation_note: self.truncation_note,
        }
    }
}

/// Semi-classical count: finite bracket or the first-class infinite marker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NscResult {
    Finite(ScBracket),
    Infinite,
}

impl NscResult {
    pub fn is_infinite(&self) -> bool {
        matches!(self, NscResult::Infinite)
    }

    pub fn bracket(&self) -> Option<ScBracket> {
        match self {
            NscResult::Finite(b) => Some(*b),
            NscResult::Infinite => None,
        }
    }
}

/// Sorted samples of e on midpoint grids M and 2M; sublevel volumes for many
/// thresholds become binary searches.
pub struct SampleStore {
    dim: usize,
    e_max: f64,
    m: usize,
    sorted_m: Vec<f64>,
    sorted_2m: Vec<f64>,
    /// Bound on |grad e|_2, for the boundary-layer widening.
    lip: f64,
}

impl SampleStore {
    pub fn build(e: &Dispersion, m: usize) -> SampleStore {
        let dim = e.dim();
        let mut sorted_m = sample_grid(e, m);
        let mut sorted_2m = sample_grid(e, 2 * m);
        sorted_m.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted_2m.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut per_axis = vec![0.0f64; dim];
        for (x, &c) in e.coeffs() {
            for i in 0..dim {
                per_axis[i] += c.abs() * x.coords()[i].abs() as f64;
            }
        }
        let lip = per_axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        SampleStore {
            dim,
            e_max: e.e_max(),
            m,
            sorted_m,
            sorted_2m,
            lip,
        }
    }

    pub fn grid_m(&self) -> usize {
        self.m
    }

    /// Bracket for mu*{p : e(p) < t}: fraction-below counts on both grids,
    /// widened by the cells that can straddle the level set (centers within
    /// a Lipschitz cell radius of t).
    pub fn sublevel(&self, t: f64) -> ScBracket {
        if t <= 0.0 {
            return ScBracket::exact(0.0, 2 * self.m);
        }
        if t > self.e_max {
            return ScBracket::exact(1.0, 2 * self.m);
        }
        let mut lower = 0.0f64;
        let mut upper = 1.0f64;
        for (samples, m) in [(&self.sorted_m, self.m), (&self.sorted_2m, 2 * self.m)] {
            let n = samples.len() as f64;
            let frac = samples.partition_point(|&v| v < t) as f64 / n;
            let halfcell = std::f64::consts::PI / m as f64 * (self.dim as f64).sqrt();
            let eps = self.lip * halfcell;
            let near = (samples.partition_point(|&v| v < t + eps)
                - samples.partition_point(|&v| v < t - eps)) as f64
                / n;
            lower = lower.max((frac - near).max(0.0));
            upper = upper.min((frac + near).min(1.0));
        }
        if lower > upper {
            // straddle estimates disagreed; fall back to the union
            std::mem::swap(&mut lower, &mut upper);
        }
        ScBracket {
            lower,
            upper,
            grid_m: 2 * self.m,
            truncation_note: false,
        }
    }
}

fn sample_grid(e: &Dispersion, m: usize) -> Vec<f64> {
    let dim = e.dim();
    let h = 2.0 * std::f64::consts::PI / m as f64;
    let axis: Vec<f64> = (0..m)
        .map(|k| -std::f64::consts::PI + (k as f64 + 0.5) * h)
        .collect();
    let n = m.pow(dim as u32);
    let mut out = Vec::with_capacity(n);
    let mut p = vec![0.0f64; dim];
    for mut idx in 0..n {
        for a in (0..dim).rev() {
            p[a] = axis[idx % m];
            idx /= m;
        }
        out.push(e.eval(&p));
    }
    out
}

/// Bracket for mu*{p : e(p) < t} at an explicit grid size.
pub fn sublevel_volume(e: &Dispersion, t: f64, grid_m: usize) -> ScBracket {
    SampleStore::build(e, grid_m).sublevel(t)
}

pub fn default_store_grid(dim: usize) -> usize {
    match dim {
        1 => 4096,
        2 => 256,
        3 => 48,
        _ => 10,
    }
}

/// N_sc[e, V] = sum_x mu*{e < V(x)}: explicit sites through the sample
/// store, the tail bounded above by the sublevel envelope and below by 0.
pub fn n_sc(e: &Dispersion, v: &Potential, store: &SampleStore) -> NscResult {
    let d = e.dim();
    if !tail_sum_converges(v.tail(), d as f64 / 2.0, 0.0, d) {
        return NscResult::Infinite;
    }
    // group duplicate values so each distinct one costs two binary searches
    let mut groups: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &val in v.explicit().values() {
        if val > 0.0 {
            let entry = groups.entry(val.to_bits()).or_insert((val, 0));
            entry.1 += 1;
        }
    }
    let mut total = ScBracket::exact(0.0, store.grid_m() * 2);
    for (_, (val, count)) in groups {
        total = total.add(&store.sublevel(val).scale(count as f64));
    }
    if !v.tail().is_none() {
        let e_max = e.e_max();
        // sites beyond the window where the tail still reaches e_max count
        // with full measure 1
        let big_sites = tail_level_count_beyond_window(v, e_max);
        // remaining tail sites contribute at most c2 (V/e_max)^{d/2}
        let c2 = envelope_c2(e, store);
        let tail_poly = tail_sum_bracket(v.tail(), d as f64 / 2.0, 0.0, d, v.window_r());
        let tail_hi = match tail_poly {
            SumBracket::Infinite => return NscResult::Infinite,
            SumBracket::Finite { hi, .. } => {
                big_sites + c2 * hi / e_max.powf(d as f64 / 2.0)
            }
        };
        total = total.add(&ScBracket {
            lower: 0.0,
            upper: tail_hi,
            grid_m: store.grid_m() * 2,
            truncation_note: true,
        });
    }
    NscResult::Finite(total)
}

fn tail_level_count_beyond_window(v: &Potential, threshold: f64) -> f64 {
    match crate::potential::level_count_f64(v, threshold) {
        Ok(total) => {
            let explicit = v
                .explicit()
                .values()
                .filter(|&&val| val >= threshold)
                .count() as f64;
            (total - explicit).max(0.0)
        }
        Err(_) => 0.0,
    }
}

fn envelope_c2(e: &Dispersion, store: &SampleStore) -> f64 {
    let mut c2 = 1.0f64;
    let e_max = e.e_max();
    let d2 = e.dim() as f64 / 2.0;
    for k in 0..=16 {
        let t = e_max * 0.5f64.powi(k);
        let denom = (t / e_max).powf(d2).min(1.0);
        c2 = c2.max(store.sublevel(t).upper / denom);
    }
    c2
}

/// The split of Definition-style counting: exact integer count of sites
/// with V >= e_max, and the sum of V^{d/2} below e_max with a tail bracket.
pub fn n_sc_split(
    e: &Dispersion,
    v: &Potential,
) -> Result<(u64, NscResult), SemiclassicalError> {
    let e_max = e.e_max();
    let d2 = e.dim() as f64 / 2.0;
    let n_gt = level_count(v, e_max)?;
    if !tail_sum_converges(v.tail(), d2, 0.0, e.dim()) {
        return Ok((n_gt, NscResult::Infinite));
    }
    let mut explicit_sum = 0.0;
    for &val in v.explicit().values() {
        if val > 0.0 && val < e_max {
            explicit_sum += val.powf(d2);
        }
    }
    // tail sites at or above e_max belong to n_gt, not here; subtract their
    // upper envelope from the tail bracket by summing only below e_max
    let bracket = match tail_sum_bracket(v.tail(), d2, 0.0, e.dim(), v.window_r()) {
        SumBracket::Infinite => return Ok((n_gt, NscResult::Infinite)),
        SumBracket::Finite { lo, hi } => {
            let big = tail_level_count_beyond_window(v, e_max);
            let cap = e_max.powf(d2) * big;
            ScBracket {
                lower: explicit_sum + (lo - cap).max(0.0),
                upper: explicit_sum + hi,
                grid_m: 0,
                truncation_note: !v.tail().is_none(),
            }
        }
    };
    Ok((n_gt, NscResult::Finite(bracket)))
}

/// Envelope and CLR constants attached to one dispersion.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScConstants {
    pub c1: f64,
    pub c2: f64,
    pub clr_c: Option<f64>,
    pub clr_total: Option<f64>,
}

/// Fit c1 <= mu*{e<t} / min(1, (t/e_max)^{d/2}) <= c2 over a threshold grid,
/// widened by the sublevel bracket radii.
pub fn sandwich_constants(e: &Dispersion, store: &SampleStore, t_grid: &[f64]) -> ScConstants {
    let e_max = e.e_max();
    let d2 = e.dim() as f64 / 2.0;
    let mut c1 = f64::INFINITY;
    let mut c2 = 0.0f64;
    for &t in t_grid {
        if t <= 0.0 {
            continue;
        }
        let denom = (t / e_max).powf(d2).min(1.0);
        let b = store.sublevel(t);
        c1 = c1.min(b.lower.max(0.0) / denom);
        c2 = c2.max(b.upper / denom);
    }
    ScConstants {
        c1,
        c2,
        clr_c: None,
        clr_total: None,
    }
}

pub fn default_t_grid(e_max: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=10).map(|k| e_max * 0.5f64.powi(k)).collect();
    grid.extend([0.75, 0.375, 0.1875].iter().map(|&f| e_max * f));
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid
}

/// CLR constant via the trace criterion: clr_c bounds
/// f(E) = int_{0<e<=E} dmu*/e by clr_c E^{(d-2)/2} on the grid, and
/// clr_total = clr_c (d/2) (d/(d-2))^{d-2}.
pub fn clr_constant(
    e: &Dispersion,
    e_grid: &[f64],
    base: ScConstants,
) -> Result<ScConstants, SemiclassicalError> {
    let d = e.dim();
    if d < 3 {
        return Err(SemiclassicalError::LowDimension(d));
    }
    let engine = GreenEngine::new(e, crate::green::default_grid(d));
    let vals = engine.band_integrals(e_grid);
    let mut clr_c = 0.0f64;
    for (&en, (f, err)) in e_grid.iter().zip(&vals) {
        if en <= 0.0 {
            continue;
        }
        clr_c = clr_c.max((f + err) / en.powf((d as f64 - 2.0) / 2.0));
    }
    let nu = d as f64;
    let clr_total = clr_c * nu / 2.0 * (nu / (nu - 2.0)).powf(nu - 2.0);
    Ok(ScConstants {
        clr_c: Some(clr_c),
        clr_total: Some(clr_total),
        ..base
    })
}

pub fn default_e_grid(e_max: f64) -> Vec<f64> {
    (0..=12).map(|k| e_max * 0.5f64.powi(k)).collect()
}
