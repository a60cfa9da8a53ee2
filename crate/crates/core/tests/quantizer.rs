use proptest::prelude::*;

use stepq::numerics::Tensor;
use stepq::quant::{fake_quant, quantize_act, quantize_weight, Grid, QuantParams, Rounding};

/// Integer grid point and clip range straight from the formula, with the
/// standard library's half-away-from-zero rounding.
fn oracle(v: f64, p: &QuantParams, grid: Grid) -> (f64, f64, f64, f64) {
    let b = i32::from(p.bits);
    let (lo, hi) = match grid {
        Grid::Unsigned => (0.0, 2f64.powi(b) - 1.0),
        Grid::Signed => (-(2f64.powi(b - 1)), 2f64.powi(b - 1) - 1.0),
    };
    let z = p.zero_point.round();
    let raw = (v / p.scale).round() + z;
    (raw.clamp(lo, hi), z, lo, hi)
}

fn grid_strategy() -> impl Strategy<Value = Grid> {
    prop_oneof![Just(Grid::Unsigned), Just(Grid::Signed)]
}

fn params_strategy() -> impl Strategy<Value = QuantParams> {
    (1e-3f64..10.0, -20.0f64..40.0, 2u8..=8).prop_map(|(scale, zero_point, bits)| QuantParams { scale, zero_point, bits })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn output_matches_formula(v in -500.0f64..500.0, p in params_strategy(), grid in grid_strategy()) {
        let (q, z, _, _) = oracle(v, &p, grid);
        prop_assert_eq!(fake_quant(v, &p, grid, Rounding::Nearest), p.scale * (q - z));
    }

    #[test]
    fn grid_law(v in -500.0f64..500.0, p in params_strategy(), grid in grid_strategy()) {
        let out = fake_quant(v, &p, grid, Rounding::Nearest);
        let (_, z, lo, hi) = oracle(v, &p, grid);
        let q = out / p.scale + z;
        prop_assert!((q - q.round()).abs() <= 1e-9 * q.abs().max(1.0), "q = {q} is off-grid");
        prop_assert!(q.round() >= lo && q.round() <= hi);
    }

    #[test]
    fn bounded_error_inside_range(p in params_strategy(), grid in grid_strategy(), k in 0.0f64..1.0, u in -0.499f64..0.499) {
        let (_, z, lo, hi) = oracle(0.0, &p, grid);
        // Interior grid point q, then v within half a step of s·(q − z).
        let q = (lo + 1.0 + (k * (hi - lo - 1.0)).floor()).min(hi - 1.0);
        let v = p.scale * (q - z + u);
        let err = (v - fake_quant(v, &p, grid, Rounding::Nearest)).abs();
        prop_assert!(err <= p.scale / 2.0 * (1.0 + 1e-9), "error {err} exceeds s/2 = {}", p.scale / 2.0);
    }

    #[test]
    fn more_bits_never_hurt(v in -500.0f64..500.0, p in params_strategy(), grid in grid_strategy()) {
        let wider = QuantParams { bits: p.bits + 1, ..p };
        let e1 = (v - fake_quant(v, &p, grid, Rounding::Nearest)).abs();
        let e2 = (v - fake_quant(v, &wider, grid, Rounding::Nearest)).abs();
        prop_assert!(e2 <= e1 * (1.0 + 1e-12) + 1e-12, "{e2} > {e1}");
    }

    #[test]
    fn idempotent(v in -500.0f64..500.0, p in params_strategy(), grid in grid_strategy()) {
        let once = fake_quant(v, &p, grid, Rounding::Nearest);
        let twice = fake_quant(once, &p, grid, Rounding::Nearest);
        prop_assert!((once - twice).abs() <= 1e-9 * once.abs().max(p.scale));
    }

    #[test]
    fn relaxed_rounding_is_identity_inside_range(p in params_strategy(), grid in grid_strategy(), k in 0.001f64..0.999) {
        let p = QuantParams { zero_point: p.zero_point.round(), ..p };
        let (_, z, lo, hi) = oracle(0.0, &p, grid);
        let v = p.scale * (lo + k * (hi - lo) - z);
        prop_assert!((fake_quant(v, &p, grid, Rounding::Relaxed) - v).abs() <= 1e-9 * v.abs().max(p.scale));
    }
}

#[test]
fn tensor_wrappers_use_their_grids() {
    let p = QuantParams { scale: 1.0, zero_point: 0.0, bits: 3 };
    let t = Tensor::new(vec![4], vec![-5.0, -0.4, 2.6, 9.0]).unwrap();
    assert_eq!(quantize_act(&t, &p).data(), &[0.0, 0.0, 3.0, 7.0]);
    assert_eq!(quantize_weight(&t, &p).data(), &[-4.0, 0.0, 3.0, 3.0]);
}

#[test]
fn zero_point_shifts_the_unsigned_window() {
    let p = QuantParams { scale: 0.5, zero_point: 4.0, bits: 3 };
    // q ∈ [0, 7] with z = 4 covers s·[-4, 3] = [-2, 1.5].
    assert_eq!(fake_quant(-3.0, &p, Grid::Unsigned, Rounding::Nearest), -2.0);
    assert_eq!(fake_quant(3.0, &p, Grid::Unsigned, Rounding::Nearest), 1.5);
    assert_eq!(fake_quant(-0.74, &p, Grid::Unsigned, Rounding::Nearest), -0.5);
}

#[test]
fn fractional_zero_point_rounds_on_apply() {
    let a = QuantParams { scale: 1.0, zero_point: 2.4, bits: 4 };
    let b = QuantParams { zero_point: 2.0, ..a };
    for v in [-3.0, -1.2, 0.0, 5.5, 20.0] {
        assert_eq!(fake_quant(v, &a, Grid::Unsigned, Rounding::Nearest), fake_quant(v, &b, Grid::Unsigned, Rounding::Nearest));
    }
}
