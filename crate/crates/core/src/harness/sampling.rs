//! Uniform rejection sampling of parameter clouds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ConfigError;
use crate::models::{validate_box, ParamBox, ParamPoint};

/// Name of the generator, recorded in study metadata.
pub const PRNG_NAME: &str = "ChaCha8 (rand_chacha, seed_from_u64)";

const STARVATION_ATTEMPTS: u64 = 10_000_000;
const STARVATION_RATE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Cloud {
    pub points: Vec<ParamPoint>,
    pub attempts: u64,
    pub acceptance_rate: f64,
}

/// Draws `n` points uniformly per coordinate and keeps those the box admits
/// (model domain, common strip, implied-variance window).
pub fn sample_cloud(b: &ParamBox, n: usize, seed: u64) -> Result<Cloud, ConfigError> {
    let infeasible: Vec<String> = validate_box(b).into_iter().filter(|v| v.infeasible).map(|v| v.to_string()).collect();
    if !infeasible.is_empty() {
        return Err(ConfigError::InfeasibleBox(infeasible));
    }
    let intervals = b.intervals();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut attempts = 0u64;
    let mut coords = vec![0.0; intervals.len()];
    while points.len() < n {
        attempts += 1;
        for (c, iv) in coords.iter_mut().zip(&intervals) {
            let u: f64 = rng.random();
            *c = iv.lo + (iv.hi - iv.lo) * u;
        }
        let p = ParamPoint::from_slice(&coords).expect("box has spot, strike and maturity");
        if b.admits(&p).is_ok() {
            points.push(p);
        }
        if attempts >= STARVATION_ATTEMPTS && (points.len() as f64) < STARVATION_RATE * attempts as f64 {
            return Err(ConfigError::Starvation {
                attempts,
                accepted: points.len() as u64,
            });
        }
    }
    let acceptance_rate = if attempts == 0 { 1.0 } else { n as f64 / attempts as f64 };
    Ok(Cloud {
        points,
        attempts,
        acceptance_rate,
    })
}
