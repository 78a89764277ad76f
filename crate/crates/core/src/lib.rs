//! Torus-invariant coupled Kahler-Yang-Mills equations on toric surfaces.
//!
//! A state is a pair `(u, m)`: a symplectic potential `u = u_ref + phi` on a
//! Delzant polygon and a bundle potential `m` for a toric line bundle. The crate
//! evaluates the coupled residuals, topological constants, the Futaki character,
//! the Calabi-Yang-Mills functional and the K-energy, assembles the Jacobian of
//! the discrete residual map, and solves by damped Newton with continuation.

pub mod error;
pub mod gauge;
pub mod geodesics;
pub mod invariants;
mod jet;
pub mod linalg;
pub mod linearization;
pub mod perturb;
pub mod polytope;
pub mod solver;
pub mod state_io;
pub mod system;
pub mod toric;

pub use error::{KymError, Result};
pub use gauge::{BundleData, BundlePotential, Curvature};
pub use invariants::{cym_functional, futaki, k_energy_path, s_alpha_field, ToricVectorField};
pub use linalg::{Mat2, Sym2};
pub use polytope::{build_polytope, Facet, Grid, NamedModel, Polytope, PolytopeSpec};
pub use system::{
    class_constants, evaluate, identity_check, residual, topo_constants, Coupling, Evaluation, Model, PairState, Residual,
    ResidualNorms, TopoConstants,
};
pub use toric::{MetricFields, SymplecticPotential};
