mod common;

use common::*;
use dlr_core::exact::{exact_marginals, joint_table, region_marginal};
use dlr_core::inference::{
    bethe_embedding, factorized_neighborhood, fn_step, init_random_beliefs, run_to_convergence,
    Algorithm, Level, RunConfig,
};
use dlr_core::model::{
    local_conditional, neighborhood, torus_grid, PairwiseModel, Region, Topology,
};
use dlr_core::sampling::*;
use dlr_core::ExecMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(h: f64) -> f64 {
    1.0 / (1.0 + (-h).exp())
}

#[test]
fn isolated_fair_node_is_a_coin_flip() {
    let m = ising(1, vec![], vec![], vec![0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ones = 0;
    for start in [0, 1] {
        let c = Configuration::new(&m, vec![start]).unwrap();
        for _ in 0..10_000 {
            ones += gibbs_site_update(&m, &c, 0, rng.gen()).unwrap().states()[0];
        }
    }
    // 20000 fair draws: sd 70.7
    assert!((ones as f64 - 10_000.0).abs() < 300.0, "{ones}");
    let c = Configuration::zeros(&m);
    assert_eq!(gibbs_site_update(&m, &c, 0, 0.49).unwrap().states(), &[0]);
    assert_eq!(gibbs_site_update(&m, &c, 0, 0.51).unwrap().states(), &[1]);
}

#[test]
fn strong_ferromagnet_follows_its_neighbors() {
    let topo = torus_grid(3, 3).unwrap();
    let mut phi = vec![0.0; 9];
    phi[4] = -3.0;
    let m = ising(9, topo.edges().to_vec(), vec![10.0; 18], phi);
    let cond = local_conditional(&m, Region::Single(4), &[1, 1, 1, 1]).unwrap();
    assert!((cond[1] - sigmoid(37.0)).abs() < 1e-15);
    assert!((cond[0] - (-37.0f64).exp() / (1.0 + (-37.0f64).exp())).abs() < 1e-28);
    let c = Configuration::new(&m, vec![1; 9]).unwrap();
    assert_eq!(gibbs_site_update(&m, &c, 4, 0.999_999).unwrap().states()[4], 1);
}

#[test]
fn site_updates_leave_other_nodes_alone() {
    let m = easy(3, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut c = Configuration::new(&m, (0..9).map(|i| i % 2).collect()).unwrap();
    for _ in 0..10_000 {
        let site = rng.gen_range(0..9);
        let next = gibbs_site_update(&m, &c, site, rng.gen()).unwrap();
        for i in (0..9).filter(|&i| i != site) {
            assert_eq!(next.states()[i], c.states()[i]);
        }
        c = next;
    }
    assert!(Configuration::new(&m, vec![2; 9]).is_err());
}

#[test]
fn single_node_kernel_rows_equal_the_marginal() {
    let m = ising(1, vec![], vec![], vec![0.7]);
    let k = explicit_kernel(&m, 0).unwrap();
    assert_eq!(k.size, 2);
    for from in 0..2 {
        let row = k.dense_row(from);
        assert!((row[1] - sigmoid(0.7)).abs() < 1e-15);
        assert!((row[0] - (1.0 - sigmoid(0.7))).abs() < 1e-15);
    }
}

#[test]
fn edge_kernel_matches_hand_construction() {
    let (theta, phi0) = (0.8, -0.3);
    let m = ising(2, vec![(0, 1)], vec![theta], vec![phi0, 0.5]);
    let k = explicit_kernel(&m, 0).unwrap();
    // configuration index = 2·x0 + x1; site 0 moves within {x1 fixed}
    let p1 = |x1: f64| sigmoid(phi0 + theta * x1);
    let hand = [
        [1.0 - p1(0.0), 0.0, p1(0.0), 0.0],
        [0.0, 1.0 - p1(1.0), 0.0, p1(1.0)],
        [1.0 - p1(0.0), 0.0, p1(0.0), 0.0],
        [0.0, 1.0 - p1(1.0), 0.0, p1(1.0)],
    ];
    for (from, row) in hand.iter().enumerate() {
        for (to, want) in row.iter().enumerate() {
            assert!((k.entry(from, to) - want).abs() < 1e-15, "{from}->{to}");
        }
    }
    assert!(k.row_sum_error() < 1e-15);
}

#[test]
fn chain_kernel_preserves_the_joint() {
    let m = ising(3, vec![(0, 1), (1, 2)], vec![1.0, -2.0], vec![0.3, 0.0, -0.4]);
    for site in 0..3 {
        let k = explicit_kernel(&m, site).unwrap();
        assert!(stationarity_violation(&k, &m).unwrap() < 1e-12);
    }
}

#[test]
fn kernels_satisfy_detailed_balance_and_stationarity() {
    let models: Vec<PairwiseModel> = vec![
        torus(3, 4, 4.0, 0.5, 1),
        easy(3, 3, 5),
        random_tables_on(&Topology::new(6, vec![(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5), (5, 3)]).unwrap(), &[2, 3, 2, 3, 2, 2], 7),
    ];
    for m in &models {
        for site in 0..m.node_count() {
            let k = explicit_kernel(m, site).unwrap();
            assert!(k.row_sum_error() < 1e-12);
            assert!(detailed_balance_violation(&k, m).unwrap() < 1e-12);
            assert!(stationarity_violation(&k, m).unwrap() < 1e-12);
        }
        assert!(sweep_stationarity_violation(m).unwrap() < 1e-10);
    }
}

#[test]
fn corrupted_kernel_breaks_detailed_balance() {
    let m = easy(3, 3, 1);
    let joint = joint_table(&m).unwrap();
    let top = (0..joint.len()).max_by(|&a, &b| joint[a].total_cmp(&joint[b])).unwrap();
    let mut k = explicit_kernel(&m, 4).unwrap();
    let row = k.row_mut(top);
    row[0] += 0.5;
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    assert!(k.row_sum_error() < 1e-15);
    assert!(detailed_balance_violation(&k, &m).unwrap() > 1e-3);
}

#[test]
fn uniform_model_kernel_is_symmetric() {
    let topo = torus_grid(3, 3).unwrap();
    let m = ising(9, topo.edges().to_vec(), vec![0.0; 18], vec![0.0; 9]);
    let k = explicit_kernel(&m, 0).unwrap();
    assert!(detailed_balance_violation(&k, &m).unwrap() < 1e-15);
}

#[test]
fn explicit_kernels_are_limited_to_small_models() {
    let m = easy(4, 4, 0);
    assert!(matches!(explicit_kernel(&m, 0), Err(SamplingError::TooLarge { .. })));
    let small = easy(3, 3, 0);
    let k = explicit_kernel(&small, 0).unwrap();
    assert!(detailed_balance_violation(&k, &ising(1, vec![], vec![], vec![0.0])).is_err());
}

#[test]
fn ck_step_on_factorized_input_is_the_fn_update() {
    let m = easy(4, 4, 3);
    let b = init_random_beliefs(&m, Level::Singleton, 8);
    let fn_out = fn_step(&m, &b).unwrap();
    for i in 0..m.node_count() {
        let blanket = neighborhood(m.topology(), Region::Single(i)).unwrap();
        let mut table = Vec::new();
        factorized_neighborhood(&blanket, &b.singles, &mut table);
        let ck = ck_marginal_step(&m, Region::Single(i), &table).unwrap();
        assert_eq!(ck, fn_out.singles[i], "node {i}");
    }
}

#[test]
fn ck_step_on_exact_blanket_marginal_is_exact() {
    let m = torus(3, 3, 2.0, 0.5, 4);
    for region in [Region::Single(0), Region::Single(7), Region::Pair(0, 1), Region::Pair(4, 7)] {
        let blanket = neighborhood(m.topology(), region).unwrap();
        let mu = region_marginal(&m, &blanket).unwrap();
        let out = ck_marginal_step(&m, region, &mu).unwrap();
        let exact = region_marginal(&m, &region.nodes()).unwrap();
        assert!(max_diff(&[out], &[exact]) < 1e-12, "{region:?}");
    }
    assert!(ck_marginal_step(&m, Region::Single(0), &[1.0]).is_err());
    assert!(ck_marginal_step(&m, Region::Single(0), &[0.5; 16]).is_err());
}

#[test]
fn ck_step_on_bethe_marginals_returns_bp_fixed_point_beliefs() {
    let m = easy(4, 4, 5);
    let cfg = RunConfig {
        tolerance: 1e-12,
        ..Default::default()
    };
    let (b, rep) = run_to_convergence(Algorithm::Bp, &m, &cfg).unwrap();
    assert!(rep.converged);
    for i in [0, 9] {
        let emb = bethe_embedding(&m, &b, Region::Single(i), 1e-12).unwrap();
        let out = ck_marginal_step(&m, Region::Single(i), &emb.neighborhood_marginal()).unwrap();
        assert!(max_diff(&[out], &[b.singles[i].clone()]) < 1e-9);
    }
    for (e, &(a, c)) in m.topology().edges().iter().enumerate().take(4) {
        let emb = bethe_embedding(&m, &b, Region::Pair(a, c), 1e-12).unwrap();
        let out = ck_marginal_step(&m, Region::Pair(a, c), &emb.neighborhood_marginal()).unwrap();
        assert!(max_diff(&[out], &[b.pairs[e].clone()]) < 1e-9);
    }
}

#[test]
fn gibbs_recovers_unary_marginals_without_couplings() {
    let topo = torus_grid(3, 3).unwrap();
    let phi: Vec<f64> = (0..9).map(|i| 0.4 * i as f64 - 1.6).collect();
    let m = ising(9, topo.edges().to_vec(), vec![0.0; 18], phi.clone());
    let est = gibbs_estimate(&m, &ChainConfig::new(100_000, 8, 11)).unwrap();
    let truth: Vec<Vec<f64>> = phi.iter().map(|&p| vec![1.0 - sigmoid(p), sigmoid(p)]).collect();
    assert_eq!(est.coverage(&truth, 3.0), 1.0);
}

#[test]
fn gibbs_matches_the_oracle_on_an_easy_torus() {
    let m = easy(4, 4, 0);
    let exact = exact_marginals(&m).unwrap().singleton_marginals;
    let est = gibbs_estimate(&m, &ChainConfig::new(100_000, 8, 0)).unwrap();
    assert!(est.coverage(&exact, 3.0) >= 0.95, "{}", est.coverage(&exact, 3.0));
}

#[test]
fn random_sweep_order_also_targets_the_joint() {
    let m = easy(3, 3, 2);
    let exact = exact_marginals(&m).unwrap();
    let mut cfg = ChainConfig::new(40_000, 8, 5);
    cfg.sweep_order = SweepOrder::RandomPermutation;
    cfg.pairs = true;
    let est = gibbs_estimate(&m, &cfg).unwrap();
    assert_eq!(est.beliefs.level, Level::Full);
    assert!(max_diff(&est.beliefs.singles, &exact.singleton_marginals) < 0.01);
    assert!(max_diff(&est.beliefs.pairs, &exact.pairwise_marginals) < 0.01);
    assert!(est.beliefs.consistency_error(&m) < 1e-12);
}

#[test]
fn gibbs_is_deterministic_across_schedules() {
    let m = easy(3, 3, 6);
    let cfg = ChainConfig::new(2_000, 4, 42);
    let a = gibbs_estimate_with(&m, &cfg, ExecMode::Parallel).unwrap();
    let b = gibbs_estimate_with(&m, &cfg, ExecMode::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.chain_seeds, (0..4).map(|c| splitmix64(splitmix64(42) ^ c)).collect::<Vec<_>>());
    let other = gibbs_estimate(&m, &ChainConfig::new(2_000, 4, 43)).unwrap();
    assert_ne!(a.beliefs, other.beliefs);
    let back: GibbsEstimate = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn chain_config_validation() {
    let m = easy(3, 3, 0);
    let mut cfg = ChainConfig::new(100, 4, 0);
    assert_eq!(cfg.burn_in, 10);
    cfg.burn_in = 100;
    assert!(gibbs_estimate(&m, &cfg).is_err());
    assert!(gibbs_estimate(&m, &ChainConfig::new(100, 1, 0)).is_err());
}

#[test]
fn splitmix_reference_values() {
    // first outputs of the reference SplitMix64 stream seeded with 0
    assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
}
