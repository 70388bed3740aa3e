//! Adaptive embedded Runge–Kutta (Dormand–Prince 5(4)) time stepping for the
//! coupled particle systems, with cubic Hermite dense output at requested
//! snapshot times and a per-species ordering guard after every accepted step.

use thiserror::Error;

use crate::density::{quantile_init, DensityError, ParticleConfig};
use crate::dynamics::{evaluate_into, DynamicsError, VelocityField, Workspace};
use crate::scenario::{Scenario, Scheme};

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("maximum step count exceeded at t = {t}")]
    MaxSteps { t: f64 },
    #[error("step size underflow at t = {t} (dt = {dt:e})")]
    StepUnderflow { t: f64, dt: f64 },
    #[error(
        "particle ordering violated at t = {t}: species {species}, gap {gap:e} at index {index} \
         (rerun with --min-gap to clamp)"
    )]
    OrderingViolation {
        t: f64,
        species: usize,
        index: usize,
        gap: f64,
    },
    #[error(transparent)]
    Rhs(#[from] DynamicsError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("invalid settings: {0}")]
    BadSettings(String),
}

#[derive(Clone, Debug)]
pub struct IntegratorSettings {
    pub abstol: f64,
    pub reltol: f64,
    /// `None` selects the automatic starting step.
    pub initial_dt: Option<f64>,
    pub max_steps: usize,
    pub safety: f64,
    /// Step-scale clamps applied to safety * norm^(-1/5).
    pub min_factor: f64,
    pub max_factor: f64,
    /// Fixed-step mode (no error control); for order-verification tests.
    pub fixed_dt: Option<f64>,
    /// When set, adjacent particles are clamped to at least this gap instead
    /// of aborting on an ordering violation.
    pub min_gap: Option<f64>,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        IntegratorSettings {
            abstol: 1e-7,
            reltol: 1e-7,
            initial_dt: None,
            max_steps: 1_000_000,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 5.0,
            fixed_dt: None,
            min_gap: None,
        }
    }
}

impl IntegratorSettings {
    pub fn from_scenario(s: &Scenario) -> IntegratorSettings {
        IntegratorSettings {
            abstol: s.abstol,
            reltol: s.reltol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// Raw integration output over a flat state vector.
#[derive(Clone, Debug)]
pub struct RawTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Interpolant derivative at each snapshot time.
    pub derivs: Vec<Vec<f64>>,
    pub stats: Stats,
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
// B minus the embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

type Rhs<'a> = dyn FnMut(f64, &[f64], &mut [f64]) -> Result<(), IntegrateError> + 'a;
/// Post-acceptance hook; may repair the state in place, returning whether it
/// changed anything (which invalidates the FSAL derivative).
type PostAccept<'a> = dyn FnMut(f64, &mut [f64]) -> Result<bool, IntegrateError> + 'a;

/// Cubic Hermite interpolation of the state and its derivative at
/// `theta in [0, 1]` across one accepted step.
#[allow(clippy::too_many_arguments)]
pub fn hermite_interp(
    theta: f64,
    h: f64,
    y0: &[f64],
    f0: &[f64],
    y1: &[f64],
    f1: &[f64],
    y_out: &mut [f64],
    f_out: &mut [f64],
) {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let d00 = (6.0 * t2 - 6.0 * theta) / h;
    let d10 = 3.0 * t2 - 4.0 * theta + 1.0;
    let d01 = (-6.0 * t2 + 6.0 * theta) / h;
    let d11 = 3.0 * t2 - 2.0 * theta;
    for i in 0..y0.len() {
        y_out[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i];
        f_out[i] = d00 * y0[i] + d10 * f0[i] + d01 * y1[i] + d11 * f1[i];
    }
}

/// Advance `y' = rhs(t, y)` over `t_span`, emitting snapshots at
/// `output_times` (strictly increasing, inside the span).
pub fn integrate_raw(
    rhs: &mut Rhs<'_>,
    y0: &[f64],
    t_span: (f64, f64),
    output_times: &[f64],
    settings: &IntegratorSettings,
    post_accept: &mut PostAccept<'_>,
) -> Result<RawTrajectory, IntegrateError> {
    if !(settings.safety > 0.0 && settings.safety < 1.0) {
        return Err(IntegrateError::BadSettings(format!(
            "safety factor {} must lie in (0, 1)",
            settings.safety
        )));
    }
    if !(settings.abstol > 0.0 && settings.reltol > 0.0) {
        return Err(IntegrateError::BadSettings(
            "tolerances must be positive".into(),
        ));
    }
    let (t0, t1) = t_span;
    let span = t1 - t0;
    if !(span > 0.0) {
        return Err(IntegrateError::BadSettings("t0 < t1 required".into()));
    }
    let n = y0.len();
    let mut stats = Stats::default();
    let mut times = Vec::with_capacity(output_times.len());
    let mut states = Vec::with_capacity(output_times.len());
    let mut derivs = Vec::with_capacity(output_times.len());

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut y_stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut snap_y = vec![0.0; n];
    let mut snap_f = vec![0.0; n];

    stats.rhs_evals += 1;
    rhs(t, &y, &mut k[0])?;

    let mut out_idx = 0;
    while out_idx < output_times.len() && output_times[out_idx] <= t0 {
        times.push(output_times[out_idx]);
        states.push(y.clone());
        derivs.push(k[0].clone());
        out_idx += 1;
    }

    let scale = |yi: f64, yn: f64| settings.abstol + settings.reltol * yi.abs().max(yn.abs());
    let mut h = match (settings.fixed_dt, settings.initial_dt) {
        (Some(h), _) => h,
        (None, Some(h)) => h,
        (None, None) => {
            let mut d0 = 0.0;
            let mut d1 = 0.0;
            for i in 0..n {
                let s = scale(y[i], y[i]);
                d0 += (y[i] / s) * (y[i] / s);
                d1 += (k[0][i] / s) * (k[0][i] / s);
            }
            let d0 = (d0 / n as f64).sqrt();
            let d1 = (d1 / n as f64).sqrt();
            if d1 < 1e-12 {
                span
            } else {
                (0.01 * d0 / d1).clamp(1e-6 * span, span)
            }
        }
    };

    let mut steps = 0usize;
    while t < t1 {
        if steps >= settings.max_steps {
            return Err(IntegrateError::MaxSteps { t });
        }
        steps += 1;
        let mut last = false;
        if settings.fixed_dt.is_none() {
            if h < 1e-14 * span {
                return Err(IntegrateError::StepUnderflow { t, dt: h });
            }
            if t + h >= t1 {
                h = t1 - t;
                last = true;
            }
        } else {
            h = settings.fixed_dt.unwrap();
            if t + h >= t1 - 1e-14 * span {
                h = t1 - t;
                last = true;
            }
        }

        // stages 2..=6
        for s in 1..6 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    let a = A[s][j];
                    if a != 0.0 {
                        acc += a * kj[i];
                    }
                }
                y_stage[i] = y[i] + h * acc;
            }
            let (_, tail) = k.split_at_mut(s);
            stats.rhs_evals += 1;
            rhs(t + C[s] * h, &y_stage, &mut tail[0])?;
        }
        // 5th-order solution (row 7 of A equals B)
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..6 {
                if B[j] != 0.0 {
                    acc += B[j] * k[j][i];
                }
            }
            y_new[i] = y[i] + h * acc;
        }
        // FSAL stage
        {
            let (_, tail) = k.split_at_mut(6);
            stats.rhs_evals += 1;
            rhs(t + h, &y_new, &mut tail[0])?;
        }

        let accept;
        let mut factor = 1.0;
        if settings.fixed_dt.is_some() {
            accept = true;
        } else {
            let mut err_sq = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for j in 0..7 {
                    if E[j] != 0.0 {
                        e += E[j] * k[j][i];
                    }
                }
                let e = h * e / scale(y[i], y_new[i]);
                err_sq += e * e;
            }
            let norm = (err_sq / n as f64).sqrt();
            accept = norm <= 1.0;
            factor = if norm == 0.0 {
                settings.max_factor
            } else {
                (settings.safety * norm.powf(-0.2))
                    .clamp(settings.min_factor, settings.max_factor)
            };
            if !accept {
                factor = factor.min(1.0);
            }
        }

        if accept {
            stats.accepted += 1;
            let t_new = if last { t1 } else { t + h };
            while out_idx < output_times.len() && output_times[out_idx] <= t_new {
                let theta = ((output_times[out_idx] - t) / h).clamp(0.0, 1.0);
                hermite_interp(theta, h, &y, &k[0], &y_new, &k[6], &mut snap_y, &mut snap_f);
                times.push(output_times[out_idx]);
                states.push(snap_y.clone());
                derivs.push(snap_f.clone());
                out_idx += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6); // FSAL
            let changed = post_accept(t, &mut y)?;
            if changed {
                stats.rhs_evals += 1;
                rhs(t, &y, &mut k[0])?;
            }
        } else {
            stats.rejected += 1;
        }
        if settings.fixed_dt.is_none() {
            h *= factor;
        }
    }
    Ok(RawTrajectory {
        times,
        states,
        derivs,
        stats,
    })
}

/// Time-stamped particle states for all species, plus integrator statistics.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub scheme: Scheme,
    pub species_names: Vec<String>,
    /// Species `s` occupies `offsets[s]..offsets[s+1]` of each flat state.
    pub offsets: Vec<usize>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub stats: Stats,
    pub scenario_hash: Option<String>,
}

impl Trajectory {
    pub fn n_species(&self) -> usize {
        self.species_names.len()
    }

    pub fn n_snapshots(&self) -> usize {
        self.times.len()
    }

    pub fn species_positions(&self, snapshot: usize, species: usize) -> &[f64] {
        &self.states[snapshot][self.offsets[species]..self.offsets[species + 1]]
    }

    pub fn species_velocities(&self, snapshot: usize, species: usize) -> &[f64] {
        &self.velocities[snapshot][self.offsets[species]..self.offsets[species + 1]]
    }

    pub fn species_config(
        &self,
        snapshot: usize,
        species: usize,
    ) -> Result<ParticleConfig, DensityError> {
        ParticleConfig::new(self.species_positions(snapshot, species).to_vec())
    }

    /// Index of the snapshot at time `t` (within 1e-12 absolute).
    pub fn snapshot_at(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-12)
    }
}

/// Initial flat state from the scenario's initial data.
pub fn initial_state(scenario: &Scenario) -> Result<(Vec<f64>, Vec<usize>), IntegrateError> {
    let mut offsets = vec![0usize];
    let mut y0 = Vec::new();
    for sp in &scenario.species {
        let config = quantile_init(&sp.initial, sp.particle_count)?;
        y0.extend_from_slice(config.positions());
        offsets.push(y0.len());
    }
    Ok((y0, offsets))
}

/// Integrate the scenario with its own scheme.
pub fn integrate(
    scenario: &Scenario,
    settings: &IntegratorSettings,
) -> Result<Trajectory, IntegrateError> {
    integrate_scheme(scenario, scenario.scheme, settings)
}

/// Integrate the scenario under an explicit scheme choice.
pub fn integrate_scheme(
    scenario: &Scenario,
    scheme: Scheme,
    settings: &IntegratorSettings,
) -> Result<Trajectory, IntegrateError> {
    let field = VelocityField::from_scenario(scenario, scheme)?;
    let (y0, offsets) = initial_state(scenario)?;
    let s_count = scenario.species.len();
    let mut ws = Workspace::new(s_count);

    let offs = offsets.clone();
    let mut rhs = move |t: f64, y: &[f64], dy: &mut [f64]| -> Result<(), IntegrateError> {
        let slices: Vec<&[f64]> = (0..s_count).map(|s| &y[offs[s]..offs[s + 1]]).collect();
        evaluate_into(&field, &slices, t, &mut ws)?;
        for s in 0..s_count {
            dy[offs[s]..offs[s + 1]].copy_from_slice(&ws.total[s]);
        }
        Ok(())
    };

    let offs = offsets.clone();
    let min_gap = settings.min_gap;
    let mut guard = move |t: f64, y: &mut [f64]| -> Result<bool, IntegrateError> {
        let mut changed = false;
        for s in 0..s_count {
            let range = offs[s]..offs[s + 1];
            let hull = y[range.end - 1] - y[range.start];
            match min_gap {
                Some(g) => {
                    for i in range.start + 1..range.end {
                        if y[i] < y[i - 1] + g {
                            y[i] = y[i - 1] + g;
                            changed = true;
                        }
                    }
                }
                None => {
                    for i in range.start + 1..range.end {
                        let gap = y[i] - y[i - 1];
                        if gap < 1e-13 * hull {
                            return Err(IntegrateError::OrderingViolation {
                                t,
                                species: s,
                                index: i - range.start,
                                gap,
                            });
                        }
                    }
                }
            }
        }
        Ok(changed)
    };

    let output_times = scenario.snapshot_times();
    let raw = integrate_raw(
        &mut rhs,
        &y0,
        scenario.t_span,
        &output_times,
        settings,
        &mut guard,
    )?;

    // Ordering holds at every stored snapshot (interpolated states included).
    for (k, state) in raw.states.iter().enumerate() {
        for s in 0..s_count {
            let seg = &state[offsets[s]..offsets[s + 1]];
            for i in 1..seg.len() {
                if !(seg[i] > seg[i - 1]) {
                    return Err(IntegrateError::OrderingViolation {
                        t: raw.times[k],
                        species: s,
                        index: i,
                        gap: seg[i] - seg[i - 1],
                    });
                }
            }
        }
    }

    Ok(Trajectory {
        scheme,
        species_names: scenario.species.iter().map(|s| s.name.clone()).collect(),
        offsets,
        times: raw.times,
        states: raw.states,
        velocities: raw.derivs,
        stats: raw.stats,
        scenario_hash: None,
    })
}
