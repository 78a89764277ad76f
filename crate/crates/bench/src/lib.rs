//! Fixtures shared by the benchmarks.

use kym::perturb::{perturbed, Perturbation};
use kym::{class_constants, Coupling, Model, PairState, TopoConstants};

/// Perturbed `O(1,2)` state on the unit square with `n` cells per side, its
/// coupling and class constants.
pub fn square_fixture(n: usize) -> (PairState, Coupling, TopoConstants) {
    let m = Model::named("square(1,1)", n, &[1, 2]).expect("square model");
    let st = perturbed(&PairState::reference(&m), 1, &Perturbation::default()).expect("perturbation");
    let a = Coupling::new(1.0, 0.5).expect("coupling");
    let tc = class_constants(&m, a).expect("constants");
    (st, a, tc)
}
