use std::sync::{Arc, OnceLock};

use hjpatch::barrier::{load_field, measure_epsilon, save_field, synth_almost_barrier, PerturbationKind, PerturbationSign, PerturbationSpec};
use hjpatch::dynamics::{AxisBound, BoxConstraint, DoubleIntegrator};
use hjpatch::grid::{Grid, ScalarField};
use hjpatch::numerics::{DissipationMode, NumericsConfig};
use hjpatch::solver::{patch, solve_global, ConvergenceConfig, PatchConfig};
use proptest::prelude::*;

fn numerics() -> NumericsConfig {
    NumericsConfig { dissipation: DissipationMode::Local, ..Default::default() }
}

fn kernel() -> &'static ScalarField {
    static STAR: OnceLock<ScalarField> = OnceLock::new();
    STAR.get_or_init(|| {
        let grid = Arc::new(Grid::new(vec![-1.5, -2.5], vec![1.5, 2.5], vec![41, 41]).unwrap());
        let c = BoxConstraint::new(vec![AxisBound { axis: 0, lo: -1.0, hi: 1.0 }]);
        solve_global(&c.field(grid), &DoubleIntegrator::new(1.0), &numerics(), &ConvergenceConfig::default())
            .unwrap()
            .field
    })
}

fn bump_on_boundary(v: f64, radius: f64, amplitude: f64) -> ScalarField {
    let x = if v > 0.0 { 1.0 - v * v / 2.0 } else { -1.0 + v * v / 2.0 };
    let spec = PerturbationSpec {
        kind: PerturbationKind::RadialBump,
        center: vec![x, v],
        radius,
        amplitude,
        sign: PerturbationSign::Optimistic,
        seed: 0,
    };
    synth_almost_barrier(kernel(), &spec).unwrap()
}

#[test]
fn converged_kernel_has_zero_epsilon() {
    let conv = ConvergenceConfig::default();
    let r = measure_epsilon(kernel(), &DoubleIntegrator::new(1.0), 0.0, &numerics(), conv.tol).unwrap();
    assert!(!r.vacuous);
    assert_eq!(r.epsilon, 0.0);
}

#[test]
fn patching_lowers_epsilon_and_survives_a_file_round_trip() {
    let d = DoubleIntegrator::new(1.0);
    let conv = ConvergenceConfig::default();
    let h = bump_on_boundary(1.0, 0.3, 0.2);
    let before = measure_epsilon(&h, &d, 0.0, &numerics(), conv.tol).unwrap();
    assert!(before.epsilon > 0.0);

    let sol = patch(&h, None, &d, &numerics(), &PatchConfig::default(), &conv).unwrap();
    assert!(sol.certificate.certified());
    let after = measure_epsilon(&sol.field, &d, 0.0, &numerics(), conv.tol).unwrap();
    assert!(after.epsilon <= before.epsilon);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("patched.hjpf");
    save_field(&sol.field, &path).unwrap();
    let back = load_field(&path).unwrap();
    assert_eq!(back.values(), sol.field.values());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // Repair only lowers values and lands close to the kernel.
    #[test]
    fn patch_stays_between_kernel_and_input(
        speed in 0.3f64..1.6,
        upper in any::<bool>(),
        radius in 0.15f64..0.3,
        amplitude in 0.05f64..0.3,
    ) {
        let d = DoubleIntegrator::new(1.0);
        let conv = ConvergenceConfig::default();
        let h = bump_on_boundary(if upper { speed } else { -speed }, radius, amplitude);
        let sol = patch(&h, None, &d, &numerics(), &PatchConfig::default(), &conv).unwrap();
        prop_assert!(sol.certificate.certified());
        for ((p, b), s) in sol.field.values().iter().zip(h.values()).zip(kernel().values()) {
            prop_assert!(p <= b);
            prop_assert!(*p >= s - 0.05, "patched {p} far below kernel {s}");
        }
    }
}
