//! Seeded smooth random perturbations of states.

use crate::error::Result;
use crate::polytope::Grid;
use crate::system::PairState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    /// Sup norm of the added `phi`.
    pub phi_amplitude: f64,
    /// Sup norm of the added `m`.
    pub m_amplitude: f64,
    /// Highest trigonometric mode per axis.
    pub modes: usize,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation { phi_amplitude: 0.01, m_amplitude: 0.05, modes: 2 }
    }
}

/// Random trigonometric polynomial over the bounding box with sup norm
/// `amplitude`; coefficients decay like `1 / (1 + a^2 + b^2)`.
pub fn smooth_field<R: Rng>(g: &Grid, rng: &mut R, amplitude: f64, modes: usize) -> Vec<f64> {
    let ext = [g.cells[0] as f64 * g.spacing[0], g.cells[1] as f64 * g.spacing[1]];
    let mut terms = Vec::new();
    for a in 0..=modes {
        for b in 0..=modes {
            let c: f64 = rng.random_range(-1.0..1.0) / (1.0 + (a * a + b * b) as f64);
            let ph: [f64; 2] = [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)];
            terms.push((a as f64, b as f64, c, ph));
        }
    }
    let f: Vec<f64> = g
        .nodes
        .iter()
        .map(|nd| {
            let y = [(nd.x[0] - g.origin[0]) / ext[0], (nd.x[1] - g.origin[1]) / ext[1]];
            let pi = std::f64::consts::PI;
            terms.iter().map(|(a, b, c, ph)| c * (pi * a * y[0] + ph[0]).cos() * (pi * b * y[1] + ph[1]).cos()).sum()
        })
        .collect();
    let top = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return f;
    }
    f.into_iter().map(|v| v * amplitude / top).collect()
}

/// `base` plus seeded smooth fields.
pub fn perturbed(base: &PairState, seed: u64, p: &Perturbation) -> Result<PairState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = &base.model.grid;
    let dphi = smooth_field(g, &mut rng, p.phi_amplitude, p.modes);
    let dm = smooth_field(g, &mut rng, p.m_amplitude, p.modes);
    PairState::with_fields(
        &base.model,
        base.u.phi.iter().zip(dphi).map(|(a, b)| a + b).collect(),
        base.bp.m.iter().zip(dm).map(|(a, b)| a + b).collect(),
    )
}
