mod common;

use dlr_core::exact::joint_probability;
use dlr_core::exec::ExecMode;
use dlr_core::inference::{
    beliefs_from_messages, bp_message_step, cp_step, fn2_step, fn_step, mf2_step, mf_step, Algorithm, BeliefSet,
    Level, MessageSet,
};
use dlr_core::model::{build_ising, torus_grid, PairwiseModel};
use dlr_core::phase::{
    critical_temperature, homogeneous_step, magnetization, phase_table, reference_temperature,
    spin_to_binary, spontaneous_magnetization, write_phase_csv, Aux, CriticalSearchConfig, HomogeneousState,
    PhaseError, PHASE_ALGORITHMS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Root of a decreasing-in-K stability function `g(K) = 1` by bisection over `t`.
fn solve_t(g: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (1.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(1.0 / mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Slope at `m = 0` of the FN2 map, by brute force over the 8 spins of an
/// edge plus its blanket.
fn fn2_slope(k: f64) -> f64 {
    let mut slope = 0.0;
    for blanket in 0..64u32 {
        let s: Vec<f64> = (0..6).map(|q| if blanket >> q & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let (mut z, mut mean) = (0.0, 0.0);
        for a in [-1.0, 1.0] {
            for b in [-1.0, 1.0] {
                let e = k * (a * b + a * (s[0] + s[1] + s[2]) + b * (s[3] + s[4] + s[5]));
                z += e.exp();
                mean += e.exp() * (a + b) / 2.0;
            }
        }
        slope += s.iter().sum::<f64>() * mean / z / 64.0;
    }
    slope
}

fn oracle(algorithm: Algorithm) -> f64 {
    match algorithm {
        Algorithm::Mf => 4.0,
        Algorithm::Bp | Algorithm::Cp => 1.0 / (1.0f64 / 3.0).atanh(),
        Algorithm::Fn => solve_t(|k| (4.0 * k).tanh() / 2.0 + (2.0 * k).tanh()),
        Algorithm::Mf2 => solve_t(|k| 3.0 * k * (1.0 + k.tanh())),
        Algorithm::Fn2 => solve_t(fn2_slope),
        Algorithm::BpDlr => unreachable!(),
    }
}

#[test]
fn critical_temperatures_match_linear_stability() {
    let cfg = CriticalSearchConfig::default();
    for alg in PHASE_ALGORITHMS {
        let t_c = critical_temperature(alg, &cfg).unwrap();
        let expected = oracle(alg);
        assert!((t_c - expected).abs() < 2e-3, "{alg}: {t_c} vs {expected}");
        if let Some(r) = reference_temperature(alg) {
            assert!((t_c - r).abs() < 5e-3, "{alg}: {t_c} vs published {r}");
        }
    }
}

#[test]
fn stability_oracles_reproduce_published_values() {
    assert!((oracle(Algorithm::Bp) - 2.8854).abs() < 1e-4);
    assert!((oracle(Algorithm::Fn) - 3.0898).abs() < 1e-4);
    assert!((oracle(Algorithm::Fn2) - 3.0250).abs() < 1e-3);
    assert!((oracle(Algorithm::Mf2) - 3.7764).abs() < 1e-3);
}

#[test]
fn mf_single_step() {
    let s = HomogeneousState::new(Algorithm::Mf, 0.9).unwrap();
    let next = homogeneous_step(Algorithm::Mf, 2.0, &s).unwrap();
    assert!((next.m - 1.8f64.tanh()).abs() < 1e-15);
}

#[test]
fn mf_magnetization_at_t3() {
    let (mut lo, mut hi) = (0.1f64, 1.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if (4.0 * mid / 3.0).tanh() > mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let m = spontaneous_magnetization(Algorithm::Mf, 3.0, &CriticalSearchConfig::default()).unwrap();
    assert!((m - lo).abs() < 1e-8, "{m} vs {lo}");
    assert!((m - 0.7755).abs() < 1e-4);
}

#[test]
fn bp_orders_around_transition() {
    let cfg = CriticalSearchConfig::default();
    assert!(spontaneous_magnetization(Algorithm::Bp, 2.5, &cfg).unwrap() > 0.5);
    assert!(spontaneous_magnetization(Algorithm::Bp, 3.0, &cfg).unwrap() < 1e-4);
}

#[test]
fn fn_hot_step_kills_magnetization() {
    let s = HomogeneousState::new(Algorithm::Fn, 0.9).unwrap();
    let next = homogeneous_step(Algorithm::Fn, 100.0, &s).unwrap();
    assert!(next.m.abs() < 0.05);
}

#[test]
fn magnetization_is_non_increasing_in_t() {
    let cfg = CriticalSearchConfig::default();
    for alg in PHASE_ALGORITHMS {
        let ms: Vec<f64> = (0..20)
            .map(|k| 1.5 + 3.5 * k as f64 / 19.0)
            .map(|t| spontaneous_magnetization(alg, t, &cfg).unwrap())
            .collect();
        for w in ms.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{alg}: {ms:?}");
        }
        assert!(ms[0] > 0.9 && ms[19] < 1e-4);
    }
}

#[test]
fn critical_ordering() {
    let rows = phase_table(&PHASE_ALGORITHMS, &CriticalSearchConfig::default(), ExecMode::Parallel).unwrap();
    let t = |a: Algorithm| rows.iter().find(|r| r.algorithm == a).unwrap().t_c;
    assert!(t(Algorithm::Bp) < t(Algorithm::Fn2));
    assert!(t(Algorithm::Fn2) < t(Algorithm::Fn));
    assert!(t(Algorithm::Fn) < t(Algorithm::Mf2));
    assert!(t(Algorithm::Mf2) < t(Algorithm::Mf));
    // CP shares BP's fixed points on a triangle-free lattice
    assert!((t(Algorithm::Cp) - t(Algorithm::Bp)).abs() < 2e-3);
}

#[test]
fn phase_csv_has_one_row_per_algorithm() {
    let rows = phase_table(
        &[Algorithm::Mf, Algorithm::Cp],
        &CriticalSearchConfig::default(),
        ExecMode::Sequential,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("phase.csv");
    write_phase_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "algorithm,t_c,reference,delta");
    assert!(lines[1].starts_with("mf,"));
    assert!(lines[2].starts_with("cp,") && lines[2].ends_with(",,"));
}

#[test]
fn bad_bracket_is_reported() {
    let cfg = CriticalSearchConfig {
        t_low: 4.5,
        t_high: 5.0,
        ..Default::default()
    };
    assert!(matches!(critical_temperature(Algorithm::Mf, &cfg), Err(PhaseError::BadBracket { .. })));
    assert!(matches!(
        critical_temperature(Algorithm::BpDlr, &CriticalSearchConfig::default()),
        Err(PhaseError::Unsupported { .. })
    ));
    assert!(matches!(
        homogeneous_step(Algorithm::Mf, -1.0, &HomogeneousState::new(Algorithm::Mf, 0.5).unwrap()),
        Err(PhaseError::InvalidTemperature(_))
    ));
}

#[test]
fn slow_relaxation_is_reported_as_nonconvergence() {
    let cfg = CriticalSearchConfig {
        max_fp_iterations: 50,
        ..Default::default()
    };
    let err = spontaneous_magnetization(Algorithm::Mf, 4.0, &cfg).unwrap_err();
    match err {
        PhaseError::NonConvergent { low, high, .. } => assert!(low <= high && high > 0.0),
        e => panic!("{e}"),
    }
}

fn homogeneous_torus(t: f64) -> PairwiseModel {
    let topo = torus_grid(4, 4).unwrap();
    let n = topo.node_count();
    let couplings = vec![1.0; topo.edge_count()];
    build_ising(&spin_to_binary(topo, &couplings, &vec![0.0; n], t)).unwrap()
}

fn spin_table(m: f64) -> Vec<f64> {
    vec![(1.0 - m) / 2.0, (1.0 + m) / 2.0]
}

fn singles_of(model: &PairwiseModel, m: f64) -> BeliefSet {
    BeliefSet {
        level: Level::Singleton,
        singles: vec![spin_table(m); model.node_count()],
        pairs: Vec::new(),
    }
}

#[test]
fn singleton_maps_match_generic_steps_on_a_torus() {
    let t = 3.3;
    let model = homogeneous_torus(t);
    for (alg, step) in [
        (Algorithm::Mf, mf_step as fn(&PairwiseModel, &BeliefSet) -> _),
        (Algorithm::Fn, fn_step),
        (Algorithm::Mf2, mf2_step),
    ] {
        for m in [0.7, -0.2, 0.05] {
            let generic = step(&model, &singles_of(&model, m)).unwrap();
            let h = homogeneous_step(alg, t, &HomogeneousState::new(alg, m).unwrap()).unwrap();
            for b in &generic.singles {
                assert!((magnetization(b) - h.m).abs() < 1e-12, "{alg} m={m}");
            }
        }
    }
}

#[test]
fn pair_maps_match_generic_steps_on_a_torus() {
    let t = 2.7;
    let model = homogeneous_torus(t);
    for (alg, step) in [
        (Algorithm::Fn2, fn2_step as fn(&PairwiseModel, &BeliefSet) -> _),
        (Algorithm::Cp, cp_step),
    ] {
        // a correlated symmetric table reached after a few homogeneous steps
        let mut state = HomogeneousState::new(alg, 0.6).unwrap();
        for _ in 0..3 {
            state = homogeneous_step(alg, t, &state).unwrap();
        }
        let Aux::Pair(p) = state.aux else { panic!() };
        let mut b = BeliefSet {
            level: Level::Edge,
            singles: vec![spin_table(state.m); model.node_count()],
            pairs: vec![p.to_vec(); model.topology().edge_count()],
        };
        b.refresh_derived(&model);
        let generic = step(&model, &b).unwrap();
        let next = homogeneous_step(alg, t, &state).unwrap();
        let Aux::Pair(q) = next.aux else { panic!() };
        for table in &generic.pairs {
            let d = table.iter().zip(&q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12, "{alg}: {table:?} vs {q:?}");
        }
        for s in &generic.singles {
            assert!((magnetization(s) - next.m).abs() < 1e-12);
        }
    }
}

#[test]
fn bp_map_matches_message_passing_on_a_torus() {
    let t = 2.7;
    let model = homogeneous_torus(t);
    let state = HomogeneousState::new(Algorithm::Bp, 0.4).unwrap();
    let Aux::Cavity(h) = state.aux else { panic!() };
    let u = ((1.0 / t).tanh() * h.tanh()).atanh();
    // a {0,1} message also carries this edge's share of the receiver's field shift
    let k = 1.0 / t;
    let raw = [(-u).exp(), (u + 2.0 * k).exp()];
    let msg = vec![raw[0] / (raw[0] + raw[1]), raw[1] / (raw[0] + raw[1])];
    let messages = MessageSet {
        messages: vec![msg; 2 * model.topology().edge_count()],
    };
    let beliefs = beliefs_from_messages(&model, &bp_message_step(&model, &messages));
    let next = homogeneous_step(Algorithm::Bp, t, &state).unwrap();
    for b in &beliefs.singles {
        assert!((magnetization(b) - next.m).abs() < 1e-12);
    }
}

#[test]
fn spin_mapping_preserves_the_distribution() {
    let topo = torus_grid(3, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let j: Vec<f64> = (0..topo.edge_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..topo.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = 1.7;
    let model = build_ising(&spin_to_binary(topo.clone(), &j, &h, t)).unwrap();
    let energy = |x: &[usize]| -> f64 {
        let s: Vec<f64> = x.iter().map(|&v| 2.0 * v as f64 - 1.0).collect();
        let pair: f64 = topo.edges().iter().zip(&j).map(|(&(a, b), w)| w * s[a] * s[b]).sum();
        let field: f64 = s.iter().zip(&h).map(|(v, f)| v * f).sum();
        (pair + field) / t
    };
    let configs: Vec<Vec<usize>> = (0..1usize << 9).map(|c| (0..9).map(|i| c >> i & 1).collect()).collect();
    let z: f64 = configs.iter().map(|x| energy(x).exp()).sum();
    for x in &configs {
        let p = joint_probability(&model, x).unwrap();
        assert!((p - energy(x).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn zero_magnetization_is_fixed_everywhere() {
    for alg in PHASE_ALGORITHMS {
        for t in [1.0, 2.885, 3.5, 10.0] {
            let next = homogeneous_step(alg, t, &HomogeneousState::new(alg, 0.0).unwrap()).unwrap();
            assert!(next.m.abs() < 1e-15, "{alg} t={t}");
            if let Aux::Pair(p) = next.aux {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                assert!((p[0] - p[3]).abs() < 1e-15 && (p[1] - p[2]).abs() < 1e-15);
            }
        }
    }
}
