//! End-to-end checks across modules: config -> engine, solver -> files -> verifier,
//! and sample-based invariants.

use proptest::prelude::*;
use qhedge_core::config::RunConfig;
use qhedge_core::engine::{MethodRegistry, RunContext};
use qhedge_core::market::{MarketModel, Payoff};
use qhedge_core::montecarlo::{dual_value, quantile_value, SampleSet};
use qhedge_core::oracles;
use qhedge_core::pde::{
    dual_to_primal, read_surface, solve_dual_pde, verify_supersolution, write_surface, GridSpec, PrimalOptions,
    SolveOptions, VerifyOptions,
};

#[test]
fn methods_agree_on_gbm() {
    let cfg = RunConfig::from_toml(
        r#"
        [model]
        kind = "gbm"
        parameters = { b = [0.1], s = [[0.2]] }
        [grid]
        n_x = [65]
        [run]
        n_paths = 200000
        seed = 4
        epsilon = 0.05
        "#,
    )
    .unwrap();
    let ctx = RunContext::new(cfg).unwrap();
    let registry = MethodRegistry::builtin();
    let ps = [0.2, 0.5, 0.8];
    let mc = registry.get("mc").unwrap().price_curve(&ctx, &ps).unwrap();
    let pde = registry.get("pde").unwrap().price_curve(&ctx, &ps).unwrap();
    for (j, &p) in ps.iter().enumerate() {
        let exact = oracles::gbm_quantile_value(1.0, p, 0.1, 0.2, 1.0).unwrap();
        let reg = oracles::gbm_quantile_value_regularized(1.0, p, 0.1, 0.2, 1.0, 0.05).unwrap();
        assert!((mc.points[j].value - exact).abs() <= 3.0 * mc.points[j].std_error + 1e-12, "mc p={p}");
        assert!((pde.points[j].value - reg).abs() < 3e-3, "pde p={p}: {} vs {reg}", pde.points[j].value);
    }
}

#[test]
fn surface_file_round_trip_keeps_verdict() {
    let model = MarketModel::gbm_scalar(0.1, 0.2).unwrap();
    let payoff = Payoff::identity(1);
    let grid = GridSpec::dual_1d(1.0, 17, (0.25, 4.0), 33, (0.0, 4.0), 65, 0.1);
    let (w, _) = solve_dual_pde(&model, &payoff, &grid, &SolveOptions::default()).unwrap();
    let u = dual_to_primal(&w, &payoff, &PrimalOptions { n_p: 41, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.qhs");
    write_surface(&mut std::fs::File::create(&path).unwrap(), &u).unwrap();
    let back = read_surface(&mut std::fs::File::open(&path).unwrap()).unwrap();
    let opts = VerifyOptions::default();
    let a = verify_supersolution(&u, &model, &payoff, &opts).unwrap();
    let b = verify_supersolution(&back, &model, &payoff, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn two_stock_pipeline_runs() {
    let model = MarketModel::gbm(vec![0.05, 0.08], vec![0.2, 0.0, 0.06, 0.25]).unwrap();
    let payoff = Payoff::linear(vec![0.5, 0.5]).unwrap();
    let grid = GridSpec {
        t0: 0.0,
        horizon: 0.5,
        n_t: 9,
        x_min: vec![0.4, 0.4],
        x_max: vec![2.5, 2.5],
        n_x: vec![13, 13],
        axis: qhedge_core::duality::Domain::Q,
        axis_min: 0.0,
        axis_max: 3.0,
        n_axis: 49,
        epsilon: 0.2,
    };
    let (w, _) = solve_dual_pde(&model, &payoff, &grid, &SolveOptions::default()).unwrap();
    let u = dual_to_primal(&w, &payoff, &PrimalOptions { n_p: 21, ..Default::default() }).unwrap();
    let v = u.interpolate(0.0, &[1.0, 1.0], 0.5);
    assert!(v > 0.0 && v < 0.5, "{v}");
}

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..5.0, 1..200)
}

proptest! {
    #[test]
    fn quantile_value_is_convex_increasing_and_below_chord(v in samples()) {
        let s = SampleSet::from_values(v).unwrap();
        let ps: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        let vals: Vec<f64> = ps.iter().map(|&p| quantile_value(&s, p).unwrap().value).collect();
        let top = vals[50];
        for i in 0..=50 {
            prop_assert!(vals[i] <= ps[i] * top + 1e-12);
            if i > 0 {
                prop_assert!(vals[i] >= vals[i - 1] - 1e-15);
            }
            if i > 0 && i < 50 {
                prop_assert!(vals[i + 1] - 2.0 * vals[i] + vals[i - 1] >= -1e-12);
            }
        }
    }

    #[test]
    fn dual_value_is_convex_and_one_lipschitz(v in samples(), q in 0.0f64..6.0, h in 0.001f64..1.0) {
        let s = SampleSet::from_values(v).unwrap();
        let (a, b, c) = (dual_value(&s, q).unwrap().value, dual_value(&s, q + h).unwrap().value, dual_value(&s, q + 2.0 * h).unwrap().value);
        prop_assert!(b - a >= -1e-12 && b - a <= h + 1e-12);
        prop_assert!(c - 2.0 * b + a >= -1e-12);
    }
}
