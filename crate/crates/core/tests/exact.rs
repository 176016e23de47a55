mod common;

use common::*;
use dlr_core::exact::{exact_marginals, exact_marginals_with, joint_table, partition_function, region_marginal};
use dlr_core::model::{local_conditional, neighborhood, Region};
use dlr_core::ExecMode;

#[test]
fn exact_marginals_satisfy_the_full_dlr_equations() {
    let m = torus(3, 4, 4.0, 0.1, 8);
    let exact = exact_marginals(&m).unwrap();
    let topo = m.topology();
    let mut worst: f64 = 0.0;
    let regions = (0..12)
        .map(Region::Single)
        .chain(topo.edges().iter().map(|&(a, b)| Region::Pair(a, b)));
    for region in regions {
        let blanket = neighborhood(topo, region).unwrap();
        let nb = region_marginal(&m, &blanket).unwrap();
        let nodes = region.nodes();
        let mut rhs = vec![0.0; 1 << nodes.len()];
        for (b, p) in nb.iter().enumerate() {
            let boundary: Vec<usize> = (0..blanket.len()).map(|k| b >> (blanket.len() - 1 - k) & 1).collect();
            let cond = local_conditional(&m, region, &boundary).unwrap();
            for (r, c) in rhs.iter_mut().zip(&cond) {
                *r += c * p;
            }
        }
        let lhs = match region {
            Region::Single(i) => exact.singleton_marginals[i].clone(),
            Region::Pair(a, b) => exact.pairwise_marginals[topo.edge_between(a, b).unwrap()].clone(),
        };
        for (l, r) in lhs.iter().zip(&rhs) {
            worst = worst.max((l - r).abs());
        }
    }
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn marginals_are_normalized_and_consistent() {
    for (var, seed) in [(0.1, 0), (4.0, 3), (36.0, 5)] {
        let m = torus(4, 4, var, 0.1, seed);
        let e = exact_marginals(&m).unwrap();
        assert!(e.log_partition.is_finite());
        for s in &e.singleton_marginals {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (k, &(a, b)) in m.topology().edges().iter().enumerate() {
            let p = &e.pairwise_marginals[k];
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for x in 0..2 {
                assert!((p[2 * x] + p[2 * x + 1] - e.singleton_marginals[a][x]).abs() < 1e-12);
                assert!((p[x] + p[2 + x] - e.singleton_marginals[b][x]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn joint_sums_to_one_on_sixteen_nodes() {
    let m = torus(4, 4, 4.0, 0.1, 1);
    let total: f64 = joint_table(&m).unwrap().iter().sum();
    assert!((total - 1.0).abs() < 1e-10);
}

#[test]
fn log_partition_matches_plain_summation() {
    let m = torus(3, 3, 1.0, 1.0, 6);
    let p = m.ising().unwrap();
    let mut z = 0.0;
    for c in 0..512usize {
        let x = |i: usize| (c >> i & 1) as f64;
        let e: f64 = p.topology.edges().iter().zip(&p.theta).map(|(&(a, b), t)| t * x(a) * x(b)).sum::<f64>()
            + p.phi.iter().enumerate().map(|(i, f)| f * x(i)).sum::<f64>();
        z += e.exp();
    }
    assert!((partition_function(&m).unwrap() - z.ln()).abs() < 1e-10);
}

#[test]
fn worker_count_does_not_change_results() {
    let m = torus(4, 4, 4.0, 0.1, 2);
    let a = exact_marginals_with(&m, ExecMode::Sequential).unwrap();
    let b = exact_marginals_with(&m, ExecMode::Parallel).unwrap();
    assert_eq!(a, b);
}
