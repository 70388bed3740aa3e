//! Shared scenario fixtures for unit tests.

use crate::exprdsl::FieldExpr;
use crate::scenario::{
    Block, InitialDatum, Interaction, OutputSpec, Scenario, Scheme, SpeciesSpec,
};

pub fn expr(src: &str, vars: &[&str]) -> FieldExpr {
    FieldExpr::parse(src, vars).unwrap()
}

/// Two-species representation of the stationary two-block example
/// (V = 0, v = (1-rho)_+, W = log(|x|+1)|x|/(|x|+1), blocks at [-2,-3/2] and
/// [3/2,2]): one species per block, kernels halved, mobility evaluated at
/// (rho_1 + rho_2)/2. Exact equilibrium of both schemes at every N.
pub fn stationary_scenario(scheme: Scheme, n: usize) -> Scenario {
    let w = "0.5*log(abs(x) + 1)*abs(x)/(abs(x) + 1)";
    let wp = "0.5*sign(x)*(abs(x) + log(abs(x) + 1))/(abs(x) + 1)^2";
    let interaction = || Interaction {
        w: Some(expr(w, &["t", "x"])),
        w_prime: Some(expr(wp, &["t", "x"])),
        w_pp: None,
        w_atom: None,
    };
    let species = |name: &str, a: f64, b: f64| SpeciesSpec {
        name: name.into(),
        velocity: expr("0", &["t", "x"]),
        velocity_prime: None,
        interactions: vec![interaction(), interaction()],
        mobility: expr("pos(1 - 0.5*rho_1 - 0.5*rho_2)", &["rho_1", "rho_2"]),
        initial: InitialDatum::UniformBlocks(vec![Block {
            interval: (a, b),
            weight: 1.0,
        }]),
        particle_count: n,
    };
    Scenario {
        species: vec![
            species("left", -2.0, -1.5),
            species("right", 1.5, 2.0),
        ],
        scheme,
        t_span: (0.0, 3.0),
        abstol: 1e-7,
        reltol: 1e-7,
        output: OutputSpec::Stride(6),
    }
}

/// Attractive-collapse example: V = 0, W = 5 log(|x|+1), v = 1/(1+rho),
/// perturbed-uniform particles on [-1, 1].
pub fn attractive_scenario(scheme: Scheme, n: usize, t_end: f64) -> Scenario {
    Scenario {
        species: vec![SpeciesSpec {
            name: "a".into(),
            velocity: expr("0", &["t", "x"]),
            velocity_prime: Some(expr("0", &["t", "x"])),
            interactions: vec![Interaction {
                w: Some(expr("5*log(abs(x) + 1)", &["t", "x"])),
                w_prime: Some(expr("5*sign(x)/(abs(x) + 1)", &["t", "x"])),
                w_pp: Some(expr("-5/(abs(x) + 1)^2", &["t", "x"])),
                w_atom: Some(expr("10", &["t"])),
            }],
            mobility: expr("1/(1 + rho)", &["rho"]),
            initial: InitialDatum::PerturbedUniform {
                center: 0.0,
                halfwidth: 1.0,
                amplitude: 0.01,
                frequency: 20.0,
            },
            particle_count: n,
        }],
        scheme,
        t_span: (0.0, t_end),
        abstol: 1e-7,
        reltol: 1e-7,
        output: OutputSpec::Stride(8),
    }
}

/// Rigid transport: V = 1, no interaction, v = 1, a single unit block.
pub fn rigid_transport_scenario(n: usize, t_end: f64) -> Scenario {
    Scenario {
        species: vec![SpeciesSpec {
            name: "a".into(),
            velocity: expr("1", &["t", "x"]),
            velocity_prime: Some(expr("0", &["t", "x"])),
            interactions: vec![Interaction::default()],
            mobility: expr("1", &["rho"]),
            initial: InitialDatum::UniformBlocks(vec![Block {
                interval: (-0.5, 0.5),
                weight: 1.0,
            }]),
            particle_count: n,
        }],
        scheme: Scheme::Integrated,
        t_span: (0.0, t_end),
        abstol: 1e-7,
        reltol: 1e-7,
        output: OutputSpec::Stride(4),
    }
}
