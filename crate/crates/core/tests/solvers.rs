#[path = "common/oracle.rs"]
mod oracle;

use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use xbar_core::circuit::{
    ideal_mvm, linear_transfer_matrix, solve_linear, solve_nonlinear, CrossbarConfig, CrossbarState,
};

#[test]
fn linear_solver_matches_dense_elimination() {
    let mut rng = oracle::rng(11);
    for rows in [1, 2, 4] {
        for cols in [1, 2, 4] {
            for _ in 0..20 {
                let cfg = oracle::random_config(&mut rng, rows, cols);
                let (g, v) = oracle::random_instance(&mut rng, &cfg);
                let got = solve_linear(&cfg, g.view(), &v).unwrap().i_out;
                let want = oracle::linear_currents(&cfg, g.view(), &v);
                assert!(
                    oracle::rel_err(&got, &want) <= 1e-9,
                    "{rows}x{cols}: {got:?} vs {want:?}"
                );
            }
        }
    }
}

#[test]
fn nonlinear_solver_matches_chord_iteration() {
    let mut rng = oracle::rng(12);
    for rows in [1, 2, 4] {
        for cols in [1, 2, 4] {
            for _ in 0..20 {
                let cfg = oracle::random_config(&mut rng, rows, cols);
                let (g, v) = oracle::random_instance(&mut rng, &cfg);
                let state = CrossbarState::program(&cfg, g.view()).unwrap();
                let got = solve_nonlinear(&cfg, &state, &v).unwrap().i_out;
                let want = oracle::nonlinear_currents(&cfg, state.gaps.view(), &v);
                assert!(
                    oracle::rel_err(&got, &want) <= 1e-6,
                    "{rows}x{cols}: {got:?} vs {want:?}"
                );
            }
        }
    }
}

#[test]
fn no_parasitics_is_ideal() {
    let mut rng = oracle::rng(13);
    let cfg = CrossbarConfig::square(64).without_parasitics();
    for _ in 0..3 {
        let (g, v) = oracle::random_instance(&mut rng, &cfg);
        let got = solve_linear(&cfg, g.view(), &v).unwrap().i_out;
        let want = ideal_mvm(&v, g.view()).unwrap();
        assert!(oracle::rel_err(&got, &want) <= 1e-10);
    }
}

#[test]
fn transfer_matrix_matches_solves_on_random_inputs() {
    let mut rng = oracle::rng(14);
    let cfg = oracle::random_config(&mut rng, 4, 3);
    let (g, _) = oracle::random_instance(&mut rng, &cfg);
    let m = linear_transfer_matrix(&cfg, g.view()).unwrap();
    for _ in 0..5 {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..cfg.v_supply)).collect();
        let via_m: Vec<f64> = (0..3).map(|j| (0..4).map(|i| m[[j, i]] * v[i]).sum()).collect();
        let direct = solve_linear(&cfg, g.view(), &v).unwrap().i_out;
        assert!(oracle::rel_err(&via_m, &direct) <= 1e-9);
    }
}

fn instance() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..=6, 1usize..=6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_superposition((seed, r, c) in instance()) {
        let mut rng = oracle::rng(seed);
        let cfg = oracle::random_config(&mut rng, r, c);
        let (g, v1) = oracle::random_instance(&mut rng, &cfg);
        let (_, v2) = oracle::random_instance(&mut rng, &cfg);
        let half = |v: &[f64]| v.iter().map(|x| x / 2.0).collect::<Vec<_>>();
        let (a, b) = (half(&v1), half(&v2));
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ia = solve_linear(&cfg, g.view(), &a).unwrap().i_out;
        let ib = solve_linear(&cfg, g.view(), &b).unwrap().i_out;
        let is = solve_linear(&cfg, g.view(), &sum).unwrap().i_out;
        let added: Vec<f64> = ia.iter().zip(&ib).map(|(x, y)| x + y).collect();
        prop_assert!(oracle::rel_err(&is, &added) <= 1e-9);
    }

    #[test]
    fn currents_are_nonnegative_and_bounded_by_ideal((seed, r, c) in instance()) {
        let mut rng = oracle::rng(seed);
        let cfg = oracle::random_config(&mut rng, r, c);
        let (g, v) = oracle::random_instance(&mut rng, &cfg);
        let ideal = ideal_mvm(&v, g.view()).unwrap();
        let lin = solve_linear(&cfg, g.view(), &v).unwrap().i_out;
        let state = CrossbarState::program(&cfg, g.view()).unwrap();
        let non = solve_nonlinear(&cfg, &state, &v).unwrap().i_out;
        for j in 0..c {
            prop_assert!(lin[j] >= -1e-18 && non[j] >= -1e-18);
            // Parasitic drops only remove current from a linear array.
            prop_assert!(lin[j] <= ideal[j] * (1.0 + 1e-12) + 1e-18);
        }
    }

    #[test]
    fn zero_input_gives_zero_current((seed, r, c) in instance()) {
        let mut rng = oracle::rng(seed);
        let cfg = oracle::random_config(&mut rng, r, c);
        let (g, _) = oracle::random_instance(&mut rng, &cfg);
        let state = CrossbarState::program(&cfg, g.view()).unwrap();
        let zero = vec![0.0; r];
        prop_assert!(solve_nonlinear(&cfg, &state, &zero).unwrap().i_out.iter().all(|&i| i.abs() < 1e-18));
        prop_assert!(solve_linear(&cfg, g.view(), &zero).unwrap().i_out.iter().all(|&i| i.abs() < 1e-18));
    }

    #[test]
    fn more_conductance_never_reduces_current((seed, r, c) in instance(), bump in 0.0f64..1.0) {
        let mut rng = oracle::rng(seed);
        let cfg = oracle::random_config(&mut rng, r, c);
        let (g, v) = oracle::random_instance(&mut rng, &cfg);
        let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
        let mut g2: Array2<f64> = g.clone();
        g2[[i, j]] += bump * (cfg.g_on() - g2[[i, j]]);
        let before = solve_linear(&cfg, g.view(), &v).unwrap().i_out;
        let after = solve_linear(&cfg, g2.view(), &v).unwrap().i_out;
        prop_assert!(after[j] >= before[j] * (1.0 - 1e-12));
    }
}
