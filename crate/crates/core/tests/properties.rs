use kym::invariants::{futaki, toric_generators};
use kym::perturb::{perturbed, Perturbation};
use kym::state_io::{read_state_str, state_to_string};
use kym::{class_constants, residual, topo_constants, Coupling, Model, PairState};
use proptest::prelude::*;

fn product(n: usize, deg: &[i64]) -> PairState {
    PairState::reference(&Model::named("square(1,1)", n, deg).unwrap())
}

fn degrees() -> impl Strategy<Value = Vec<i64>> {
    prop_oneof![Just(vec![1, 0]), Just(vec![1, 1]), Just(vec![1, 2]), Just(vec![2, 1])]
}

fn perturbation() -> impl Strategy<Value = Perturbation> {
    (0.0..0.01f64, 0.0..0.1f64, 1..4usize).prop_map(|(p, m, k)| Perturbation { phi_amplitude: p, m_amplitude: m, modes: k })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constants_ignore_the_representative(deg in degrees(), seed in any::<u64>(), p in perturbation()) {
        let a = Coupling::new(1.0, 0.5).unwrap();
        let st = product(16, &deg);
        let t0 = topo_constants(&st, a).unwrap();
        let t1 = topo_constants(&perturbed(&st, seed, &p).unwrap(), a).unwrap();
        prop_assert!((t0.z - t1.z).abs() < 1e-10);
        prop_assert!((t0.c_hat - t1.c_hat).abs() < 1e-10);
        prop_assert!((t0.s_hat - t1.s_hat).abs() < 1e-10);
    }

    #[test]
    fn states_survive_a_round_trip(deg in degrees(), seed in any::<u64>(), p in perturbation()) {
        let st = perturbed(&product(8, &deg), seed, &p).unwrap();
        let back = read_state_str(&state_to_string(&st)).unwrap();
        prop_assert_eq!(back.to_vec(), st.to_vec());
    }

    #[test]
    fn affine_potentials_change_nothing(c in prop::array::uniform4(-2.0..2.0f64), seed in any::<u64>()) {
        let a = Coupling::new(1.0, 0.3).unwrap();
        let st = perturbed(&product(12, &[1, 2]), seed, &Perturbation::default()).unwrap();
        let g = &st.model.grid;
        let shifted = PairState::with_fields(
            &st.model,
            st.u.phi.iter().zip(&g.nodes).map(|(v, n)| v + c[0] + c[1] * n.x[0] + c[2] * n.x[1]).collect(),
            st.bp.m.iter().map(|v| v + c[3]).collect(),
        ).unwrap();
        let tc = class_constants(&st.model, a).unwrap();
        let r0 = residual(&st, a, &tc).unwrap().stacked();
        let r1 = residual(&shifted, a, &tc).unwrap().stacked();
        let scale = r0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in r0.iter().zip(&r1) {
            prop_assert!((x - y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn character_is_linear_in_the_coupling(a0 in 0.1..3.0f64, a1 in 0.1..3.0f64, b0 in 0.1..3.0f64, b1 in 0.1..3.0f64, seed in any::<u64>()) {
        let st = perturbed(&PairState::reference(&Model::named("trapezoid(1,2)", 16, &[1, 1]).unwrap()), seed, &Perturbation::default()).unwrap();
        let (a, b, ab) = (Coupling::new(a0, a1).unwrap(), Coupling::new(b0, b1).unwrap(), Coupling::new(a0 + b0, a1 + b1).unwrap());
        let f = |c: Coupling| {
            let tc = class_constants(&st.model, c).unwrap();
            toric_generators(&st.model).map(|z| futaki(&st, c, &tc, &z).unwrap())
        };
        let (fa, fb, fab) = (f(a), f(b), f(ab));
        for k in 0..2 {
            prop_assert!((fa[k] + fb[k] - fab[k]).abs() <= 1e-9 * (1.0 + fab[k].abs()));
        }
    }
}

#[test]
fn swapping_the_axes_swaps_the_character() {
    let a = Coupling::new(1.0, 0.4).unwrap();
    let n = 16;
    let m12 = Model::named("square(1,1)", n, &[1, 2]).unwrap();
    let m21 = Model::named("square(1,1)", n, &[2, 1]).unwrap();
    let g = &m12.grid;
    let phi = |x: [f64; 2]| 0.01 * (x[0] * x[0] * x[1] + (3.0 * x[1]).sin() * x[0]);
    let mm = |x: [f64; 2]| 0.05 * (2.0 * x[0]).cos() * x[1] * x[1];
    let s12 = PairState::with_fields(&m12, g.sample(phi), g.sample(mm)).unwrap();
    let s21 = PairState::with_fields(&m21, g.sample(|x| phi([x[1], x[0]])), g.sample(|x| mm([x[1], x[0]]))).unwrap();
    let (t12, t21) = (class_constants(&m12, a).unwrap(), class_constants(&m21, a).unwrap());
    let f12 = toric_generators(&m12).map(|z| futaki(&s12, a, &t12, &z).unwrap());
    let f21 = toric_generators(&m21).map(|z| futaki(&s21, a, &t21, &z).unwrap());
    assert!((f12[0] - f21[1]).abs() < 1e-10 && (f12[1] - f21[0]).abs() < 1e-10, "{f12:?} {f21:?}");
}
