mod common;

use mipprune::mip::{Sense, Tag, MipModel};
use mipprune::solver::lp::{self, LpStatus};
use mipprune::solver::{solve_mip, warm_start, SolverConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_lps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut feasible = 0;
    for case in 0..300 {
        let p = common::random_lp(&mut rng);
        let s = lp::solve(&p);
        match common::vertex_enumeration(&p) {
            Some(best) => {
                feasible += 1;
                assert_eq!(s.status, LpStatus::Optimal, "case {case}: {p:?}");
                assert!((s.objective - best).abs() <= 1e-7, "case {case}: {} vs {best}", s.objective);
                assert!(p.max_violation(&s.x) <= 1e-9);
            }
            None => assert_eq!(s.status, LpStatus::Infeasible, "case {case}: {p:?}"),
        }
    }
    assert!(feasible > 100);
}

#[test]
fn random_milps_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..50 {
        let mut m = common::random_milp(&mut rng);
        let oracle = common::enumerate_milp(&m).expect("generated models are feasible");
        let s = solve_mip(&mut m, &SolverConfig::default(), None).unwrap();
        assert!(s.is_optimal());
        assert!((s.objective - oracle).abs() <= 1e-6, "case {case}: {} vs {oracle}", s.objective);
        for e in &s.node_log {
            assert!(e.best_bound <= oracle + 1e-6, "case {case}: bound above optimum");
            if let Some(inc) = e.incumbent {
                assert!(inc >= oracle - 1e-6, "case {case}: incumbent below optimum");
            }
        }
        m.check_assignment(&s.values, 1e-6).unwrap();
    }
}

#[test]
fn search_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let m = common::random_milp(&mut rng);
        let a = solve_mip(&mut m.clone(), &SolverConfig::default(), None).unwrap();
        let b = solve_mip(&mut m.clone(), &SolverConfig::default(), None).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.node_log, b.node_log);
    }
}

#[test]
fn warm_start_is_never_beaten_by_a_worse_answer() {
    let mut m = MipModel::new();
    let x = m.add_var(0.0, 1.0, true);
    let y = m.add_var(0.0, 1.0, true);
    m.add_constraint(vec![(x, 1.0), (y, 1.0)], Sense::Le, 1.0, Tag::User)
        .unwrap();
    m.set_objective(vec![(x, -3.0), (y, -2.0)], 0.0).unwrap();
    let inc = warm_start(&m, &[0.0, 1.0]).unwrap();
    assert_eq!(inc.objective, -2.0);
    let s = solve_mip(&mut m, &SolverConfig::default(), Some(inc)).unwrap();
    assert!(s.objective <= -2.0);
    assert!((s.objective + 3.0).abs() < 1e-9);
}

#[test]
fn node_limit_reports_a_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = SolverConfig {
        node_limit: 1,
        ..SolverConfig::default()
    };
    for _ in 0..20 {
        let mut m = common::random_milp(&mut rng);
        if let Ok(s) = solve_mip(&mut m, &cfg, None) {
            assert!(s.gap >= 0.0);
            assert!(s.bound <= s.objective + 1e-12);
        }
    }
}
