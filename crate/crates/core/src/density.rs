//! Conversions between particle configurations and piecewise-constant
//! densities, plus the exact L¹ and W₁ metrics used by the diagnostics.
//!
//! The convention throughout: `N+1` sorted particles carry mass `1/N` per
//! inter-particle interval, the reconstructed density is
//! `rho_i = 1/(N (x_i - x_{i-1}))` on each interior interval and zero outside
//! the hull.

use thiserror::Error;

use crate::exprdsl::ExprError;
use crate::scenario::InitialDatum;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("particle positions must be strictly increasing (index {index})")]
    NotSorted { index: usize },
    #[error("need at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("position at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("particle configs have different interval counts ({a} vs {b})")]
    MismatchedCounts { a: usize, b: usize },
    #[error("invalid initial datum: {0}")]
    InvalidDatum(String),
    #[error("quantile quadrature failed: {0}")]
    Quadrature(String),
    #[error("field evaluation failed: {0}")]
    Eval(#[from] ExprError),
}

/// Sorted particle positions for one species; `N = positions.len() - 1`
/// intervals, each carrying mass `1/N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleConfig {
    positions: Vec<f64>,
}

impl ParticleConfig {
    pub fn new(positions: Vec<f64>) -> Result<ParticleConfig, DensityError> {
        if positions.len() < 2 {
            return Err(DensityError::TooFewParticles(positions.len()));
        }
        for (i, w) in positions.windows(2).enumerate() {
            if !w[0].is_finite() {
                return Err(DensityError::NonFinite { index: i });
            }
            if !(w[0] < w[1]) {
                return Err(DensityError::NotSorted { index: i + 1 });
            }
        }
        if !positions[positions.len() - 1].is_finite() {
            return Err(DensityError::NonFinite {
                index: positions.len() - 1,
            });
        }
        Ok(ParticleConfig { positions })
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn n_intervals(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn hull(&self) -> (f64, f64) {
        (self.positions[0], self.positions[self.positions.len() - 1])
    }

    /// Density of interval `i` (between particles `i` and `i+1`).
    pub fn interval_density(&self, i: usize) -> f64 {
        let n = self.n_intervals() as f64;
        1.0 / (n * (self.positions[i + 1] - self.positions[i]))
    }

    /// Split every interval at its mass midpoint (equals the geometric
    /// midpoint for a piecewise-constant density), doubling the resolution
    /// while keeping the reconstructed density identical.
    pub fn refine_split(&self) -> ParticleConfig {
        let mut out = Vec::with_capacity(self.positions.len() * 2 - 1);
        for w in self.positions.windows(2) {
            out.push(w[0]);
            out.push(0.5 * (w[0] + w[1]));
        }
        out.push(self.positions[self.positions.len() - 1]);
        ParticleConfig { positions: out }
    }
}

/// Piecewise-constant density: `values[i]` on `(edges[i], edges[i+1])`, zero
/// outside.
#[derive(Clone, Debug, PartialEq)]
pub struct PwcDensity {
    edges: Vec<f64>,
    values: Vec<f64>,
}

impl PwcDensity {
    pub fn new(edges: Vec<f64>, values: Vec<f64>) -> Result<PwcDensity, DensityError> {
        if edges.len() != values.len() + 1 || edges.len() < 2 {
            return Err(DensityError::InvalidDatum(format!(
                "{} edges for {} values",
                edges.len(),
                values.len()
            )));
        }
        for (i, w) in edges.windows(2).enumerate() {
            if !(w[0] < w[1]) {
                return Err(DensityError::NotSorted { index: i + 1 });
            }
        }
        Ok(PwcDensity { edges, values })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.values
            .iter()
            .zip(self.edges.windows(2))
            .map(|(v, w)| v * (w[1] - w[0]))
            .sum()
    }

    pub fn value_at(&self, x: f64) -> f64 {
        if x < self.edges[0] || x >= self.edges[self.edges.len() - 1] {
            return 0.0;
        }
        // partition_point: first edge > x, minus one gives the interval.
        let k = self.edges.partition_point(|&e| e <= x);
        if k == 0 || k >= self.edges.len() {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Reconstruct the piecewise-constant density of a particle configuration.
pub fn reconstruct(p: &ParticleConfig) -> PwcDensity {
    let n = p.n_intervals() as f64;
    let values = p
        .positions
        .windows(2)
        .map(|w| 1.0 / (n * (w[1] - w[0])))
        .collect();
    PwcDensity {
        edges: p.positions.clone(),
        values,
    }
}

/// Exact integral of |a - b| on the merged breakpoint partition.
pub fn l1_distance(a: &PwcDensity, b: &PwcDensity) -> f64 {
    let mut total = 0.0;
    let (ea, eb) = (&a.edges, &b.edges);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut x = ea[0].min(eb[0]);
    let end = ea[ea.len() - 1].max(eb[eb.len() - 1]);
    while x < end {
        // advance interval indices so edges[i] <= x < edges[i+1]
        while ia + 1 < ea.len() && ea[ia + 1] <= x {
            ia += 1;
        }
        while ib + 1 < eb.len() && eb[ib + 1] <= x {
            ib += 1;
        }
        let next_a = if x < ea[0] {
            ea[0]
        } else if ia + 1 < ea.len() {
            ea[ia + 1]
        } else {
            end
        };
        let next_b = if x < eb[0] {
            eb[0]
        } else if ib + 1 < eb.len() {
            eb[ib + 1]
        } else {
            end
        };
        let next = next_a.min(next_b).min(end);
        if next <= x {
            break;
        }
        let va = if x >= ea[0] && ia < a.values.len() && x < ea[ia + 1] {
            a.values[ia]
        } else {
            0.0
        };
        let vb = if x >= eb[0] && ib < b.values.len() && x < eb[ib + 1] {
            b.values[ib]
        } else {
            0.0
        };
        total += (va - vb).abs() * (next - x);
        x = next;
    }
    total
}

/// Total variation including the exterior zero levels.
pub fn total_variation(d: &PwcDensity) -> f64 {
    let mut tv = d.values[0].abs();
    for w in d.values.windows(2) {
        tv += (w[1] - w[0]).abs();
    }
    tv + d.values[d.values.len() - 1].abs()
}

/// Exact 1-Wasserstein distance between the reconstructed densities of two
/// equal-count configurations, via the piecewise-affine quantile functions.
///
/// On each quantile cell `[(i-1)/N, i/N]` both inverse CDFs are affine, so the
/// integral of their absolute difference has a closed form per cell.
pub fn w1_distance(a: &ParticleConfig, b: &ParticleConfig) -> Result<f64, DensityError> {
    if a.n_intervals() != b.n_intervals() {
        return Err(DensityError::MismatchedCounts {
            a: a.n_intervals(),
            b: b.n_intervals(),
        });
    }
    let n = a.n_intervals();
    let mut total = 0.0;
    for i in 0..n {
        let d0 = a.positions[i] - b.positions[i];
        let d1 = a.positions[i + 1] - b.positions[i + 1];
        let seg = if d0 * d1 >= 0.0 {
            0.5 * (d0.abs() + d1.abs())
        } else {
            // sign change: split at the root of the affine difference
            (d0 * d0 + d1 * d1) / (2.0 * (d0.abs() + d1.abs()))
        };
        total += seg / n as f64;
    }
    Ok(total)
}

/// One-sided densities of every species at every particle of every species.
///
/// Layout per species `sigma`: `data[sigma][i * 2S + side * S + s]` holds the
/// density of species `s` on `side` (0 = left, 1 = right) of particle `i` of
/// species `sigma`. The `S` values for a fixed `(i, side)` are contiguous so
/// they can be fed straight into a mobility expression.
#[derive(Clone, Debug)]
pub struct SideDensities {
    n_species: usize,
    counts: Vec<usize>,
    data: Vec<Vec<f64>>,
    // sweep scratch
    ind: Vec<usize>,
    current: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl SideDensities {
    pub fn new(n_species: usize) -> SideDensities {
        SideDensities {
            n_species,
            counts: vec![0; n_species],
            data: vec![Vec::new(); n_species],
            ind: vec![0; n_species],
            current: vec![0.0; n_species],
        }
    }

    pub fn compute(positions: &[&[f64]]) -> SideDensities {
        let mut sd = SideDensities::new(positions.len());
        sd.recompute(positions);
        sd
    }

    /// Single left-to-right sweep over the merged particle sequence;
    /// co-located particles across species are processed as one group.
    pub fn recompute(&mut self, positions: &[&[f64]]) {
        let s_count = self.n_species;
        assert_eq!(positions.len(), s_count);
        for (s, pos) in positions.iter().enumerate() {
            self.counts[s] = pos.len();
            self.data[s].clear();
            self.data[s].resize(pos.len() * 2 * s_count, 0.0);
            self.ind[s] = 0;
            self.current[s] = 0.0;
        }
        let mass: Vec<f64> = positions
            .iter()
            .map(|p| 1.0 / (p.len() as f64 - 1.0))
            .collect();
        let mut group: Vec<usize> = Vec::with_capacity(s_count);
        loop {
            group.clear();
            let mut min_x = f64::INFINITY;
            for s in 0..s_count {
                if self.ind[s] < positions[s].len() {
                    let x = positions[s][self.ind[s]];
                    if x < min_x {
                        min_x = x;
                        group.clear();
                        group.push(s);
                    } else if x == min_x {
                        group.push(s);
                    }
                }
            }
            if group.is_empty() {
                break;
            }
            for &s in &group {
                let base = self.ind[s] * 2 * s_count;
                self.data[s][base..base + s_count].copy_from_slice(&self.current);
            }
            for &s in &group {
                let i = self.ind[s];
                self.current[s] = if i + 1 < positions[s].len() {
                    mass[s] / (positions[s][i + 1] - positions[s][i])
                } else {
                    0.0
                };
            }
            for &s in &group {
                let base = self.ind[s] * 2 * s_count + s_count;
                self.data[s][base..base + s_count].copy_from_slice(&self.current);
            }
            for &s in &group {
                self.ind[s] += 1;
            }
        }
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    /// Densities of all species on one side of particle `i` of species `sigma`.
    pub fn side(&self, sigma: usize, i: usize, side: Side) -> &[f64] {
        let s = self.n_species;
        let off = match side {
            Side::Left => 0,
            Side::Right => s,
        };
        &self.data[sigma][i * 2 * s + off..i * 2 * s + off + s]
    }

    pub fn value(&self, sigma: usize, i: usize, side: Side, species: usize) -> f64 {
        self.side(sigma, i, side)[species]
    }
}

/// Convenience wrapper over [`SideDensities::compute`] for owned configs.
pub fn side_densities(configs: &[&ParticleConfig]) -> SideDensities {
    let slices: Vec<&[f64]> = configs.iter().map(|c| c.positions()).collect();
    SideDensities::compute(&slices)
}

// ---------------------------------------------------------------------------
// Quantile initialization
// ---------------------------------------------------------------------------

/// Place `n + 1` particles so every consecutive pair brackets mass `1/n` of
/// the initial datum. Hull endpoints become the first and last particle;
/// quantile ties over zero-density plateaus resolve to the leftmost point.
pub fn quantile_init(datum: &InitialDatum, n: usize) -> Result<ParticleConfig, DensityError> {
    if n < 1 {
        return Err(DensityError::TooFewParticles(n));
    }
    match datum {
        InitialDatum::UniformBlocks(blocks) => {
            let pieces: Vec<(f64, f64, f64)> = blocks
                .iter()
                .map(|b| (b.interval.0, b.interval.1, b.weight))
                .collect();
            quantiles_of_pieces(&pieces, n)
        }
        InitialDatum::ExplicitParticles(pos) => {
            if pos.len() == n + 1 {
                return ParticleConfig::new(pos.clone());
            }
            // Re-discretize at a different resolution: exact quantiles of the
            // piecewise-constant reconstruction.
            let base = ParticleConfig::new(pos.clone())?;
            let m = base.n_intervals() as f64;
            let pieces: Vec<(f64, f64, f64)> = base
                .positions
                .windows(2)
                .map(|w| (w[0], w[1], 1.0 / m))
                .collect();
            quantiles_of_pieces(&pieces, n)
        }
        InitialDatum::PerturbedUniform {
            center,
            halfwidth,
            amplitude,
            frequency,
        } => {
            let mut pos = Vec::with_capacity(n + 1);
            for i in 0..=n {
                let u = (2.0 * i as f64 - n as f64) / n as f64;
                pos.push(center + halfwidth * u + amplitude * (frequency * u).sin());
            }
            ParticleConfig::new(pos)
        }
        InitialDatum::TruncatedGaussian { halfwidth } => {
            let h = *halfwidth;
            if !(h > 0.0) {
                return Err(DensityError::InvalidDatum(
                    "gaussian halfwidth must be positive".into(),
                ));
            }
            quantiles_of_density(&|x| Ok((-0.5 * x * x).exp()), (-h, h), n)
        }
        InitialDatum::DensityExpr { expr, support } => {
            if !(support.0 < support.1) {
                return Err(DensityError::InvalidDatum(
                    "density support must be a nonempty interval".into(),
                ));
            }
            quantiles_of_density(&|x| expr.eval(&[x]), *support, n)
        }
    }
}

/// Exact quantiles of a union of disjoint uniform pieces `(a, b, weight)`.
fn quantiles_of_pieces(pieces: &[(f64, f64, f64)], n: usize) -> Result<ParticleConfig, DensityError> {
    if pieces.is_empty() {
        return Err(DensityError::InvalidDatum("no blocks".into()));
    }
    for (i, &(a, b, w)) in pieces.iter().enumerate() {
        if !(a < b) || !(w > 0.0) {
            return Err(DensityError::InvalidDatum(format!(
                "block {i} must have a < b and positive weight"
            )));
        }
        if i > 0 && pieces[i - 1].1 > a {
            return Err(DensityError::InvalidDatum(format!(
                "blocks must be sorted and disjoint (block {i})"
            )));
        }
    }
    let total: f64 = pieces.iter().map(|p| p.2).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(DensityError::InvalidDatum(format!(
            "total mass is {total}, expected 1 (use --normalize to rescale)"
        )));
    }
    let mut cum = Vec::with_capacity(pieces.len() + 1);
    cum.push(0.0);
    for p in pieces {
        cum.push(cum[cum.len() - 1] + p.2);
    }
    let nf = n as f64;
    let mut out = Vec::with_capacity(n + 1);
    out.push(pieces[0].0);
    let mut k = 0usize; // current piece
    for i in 1..n {
        let q = i as f64 / nf;
        while cum[k + 1] < q {
            k += 1;
        }
        let (a, b, w) = pieces[k];
        let x = if cum[k + 1] == q {
            b // tie at a block end: leftmost admissible point
        } else {
            a + (q - cum[k]) * (b - a) / w
        };
        out.push(x);
    }
    out.push(pieces[pieces.len() - 1].1);
    ParticleConfig::new(out)
}

type DensityFn<'a> = dyn Fn(f64) -> Result<f64, ExprError> + 'a;

/// Quantiles of a general nonnegative density via its CDF: adaptive composite
/// Simpson (abs tol 1e-10) for the CDF table, bisection to 1e-12 for each
/// quantile. The density is normalized by its computed total mass.
fn quantiles_of_density(
    f: &DensityFn<'_>,
    support: (f64, f64),
    n: usize,
) -> Result<ParticleConfig, DensityError> {
    let table = CdfTable::build(f, support.0, support.1, 1e-10)?;
    let total = table.total();
    if !(total > 0.0) {
        return Err(DensityError::InvalidDatum(
            "density integrates to zero on its support".into(),
        ));
    }
    let mut out = Vec::with_capacity(n + 1);
    out.push(support.0);
    for i in 1..n {
        let target = total * i as f64 / n as f64;
        out.push(table.quantile(f, target)?);
    }
    out.push(support.1);
    ParticleConfig::new(out)
}

/// Cumulative panel table from one adaptive-Simpson pass.
struct CdfTable {
    xs: Vec<f64>,
    cum: Vec<f64>,
}

impl CdfTable {
    fn build(f: &DensityFn<'_>, a: f64, b: f64, tol: f64) -> Result<CdfTable, DensityError> {
        let eval = |x: f64| -> Result<f64, DensityError> {
            let v = f(x)?;
            if v < 0.0 {
                return Err(DensityError::InvalidDatum(format!(
                    "density is negative at x = {x}"
                )));
            }
            Ok(v)
        };
        let mut xs = vec![a];
        let mut cum = vec![0.0];
        let fa = eval(a)?;
        let fb = eval(b)?;
        let m = 0.5 * (a + b);
        let fm = eval(m)?;
        let whole = simpson(a, b, fa, fm, fb);
        adaptive(
            &eval, a, fa, m, fm, b, fb, whole, tol, 48, &mut xs, &mut cum,
        )?;
        Ok(CdfTable { xs, cum })
    }

    fn total(&self) -> f64 {
        self.cum[self.cum.len() - 1]
    }

    /// Leftmost x with CDF(x) >= target, bisected to 1e-12.
    fn quantile(&self, f: &DensityFn<'_>, target: f64) -> Result<f64, DensityError> {
        let k = self.cum.partition_point(|&c| c < target);
        let k = k.clamp(1, self.xs.len() - 1);
        let (mut lo, mut hi) = (self.xs[k - 1], self.xs[k]);
        let base = self.cum[k - 1];
        for _ in 0..80 {
            if hi - lo <= 1e-12 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let part = composite_simpson(f, self.xs[k - 1], mid, 32)?;
            if base + part >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    eval: &dyn Fn(f64) -> Result<f64, DensityError>,
    a: f64,
    fa: f64,
    m: f64,
    fm: f64,
    b: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
    xs: &mut Vec<f64>,
    cum: &mut Vec<f64>,
) -> Result<(), DensityError> {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = eval(lm)?;
    let frm = eval(rm)?;
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        let refined_left = left + (left + right - whole) / 15.0 * 0.5;
        let refined_right = right + (left + right - whole) / 15.0 * 0.5;
        cum.push(cum[cum.len() - 1] + refined_left);
        xs.push(m);
        cum.push(cum[cum.len() - 1] + refined_right);
        xs.push(b);
        return Ok(());
    }
    adaptive(eval, a, fa, lm, flm, m, fm, left, tol / 2.0, depth - 1, xs, cum)?;
    adaptive(eval, m, fm, rm, frm, b, fb, right, tol / 2.0, depth - 1, xs, cum)
}

fn composite_simpson(
    f: &DensityFn<'_>,
    a: f64,
    b: f64,
    intervals: usize,
) -> Result<f64, DensityError> {
    if b <= a {
        return Ok(0.0);
    }
    let n = intervals.max(2) & !1; // even
    let h = (b - a) / n as f64;
    let mut sum = f(a)? + f(b)?;
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + i as f64 * h)?;
    }
    Ok(sum * h / 3.0)
}
