#![allow(dead_code)]

use std::collections::BTreeSet;

use dlr_core::model::{
    build_ising, random_ising_instance, InstanceConfig, IsingParams, PairwiseModel, Topology,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ising(n: usize, edges: Vec<(usize, usize)>, theta: Vec<f64>, phi: Vec<f64>) -> PairwiseModel {
    let topology = Topology::new(n, edges).unwrap();
    build_ising(&IsingParams {
        topology,
        theta,
        phi,
    })
    .unwrap()
}

pub fn torus(rows: usize, cols: usize, var_theta: f64, var_phi: f64, seed: u64) -> PairwiseModel {
    let params = random_ising_instance(&InstanceConfig {
        rows,
        cols,
        var_theta,
        var_phi,
        seed,
    })
    .unwrap();
    build_ising(&params).unwrap()
}

pub fn easy(rows: usize, cols: usize, seed: u64) -> PairwiseModel {
    torus(rows, cols, 0.1, 0.1, seed)
}

/// Ising model on `topology` with couplings and fields drawn uniformly.
pub fn random_ising_on(topology: &Topology, coupling: f64, field: f64, seed: u64) -> PairwiseModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = (0..topology.edge_count())
        .map(|_| rng.gen_range(-coupling..coupling))
        .collect();
    let phi = (0..topology.node_count())
        .map(|_| rng.gen_range(-field..field))
        .collect();
    build_ising(&IsingParams {
        topology: topology.clone(),
        theta,
        phi,
    })
    .unwrap()
}

/// Generic model with random positive tables and the given cardinalities.
pub fn random_tables_on(topology: &Topology, cards: &[usize], seed: u64) -> PairwiseModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unary = cards
        .iter()
        .map(|&c| (0..c).map(|_| rng.gen_range(0.2..2.0)).collect())
        .collect();
    let pairwise = topology
        .edges()
        .iter()
        .map(|&(a, b)| (0..cards[a] * cards[b]).map(|_| rng.gen_range(0.2..3.0)).collect())
        .collect();
    PairwiseModel::new(topology.clone(), cards.to_vec(), unary, pairwise).unwrap()
}

fn prufer_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &s in seq {
        let leaf = (0..n).find(|&v| degree[v] == 1).unwrap();
        edges.push((leaf.min(s), leaf.max(s)));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

fn rooted_code(adj: &[Vec<usize>], v: usize, parent: usize) -> String {
    let mut kids: Vec<String> = adj[v]
        .iter()
        .filter(|&&u| u != parent)
        .map(|&u| rooted_code(adj, u, v))
        .collect();
    kids.sort();
    format!("({})", kids.concat())
}

fn canonical(n: usize, edges: &[(usize, usize)]) -> String {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    (0..n).map(|r| rooted_code(&adj, r, usize::MAX)).min().unwrap()
}

/// One representative per isomorphism class of trees on `n` nodes.
pub fn unlabeled_trees(n: usize) -> Vec<Topology> {
    match n {
        0 => return Vec::new(),
        1 => return vec![Topology::new(1, Vec::new()).unwrap()],
        2 => return vec![Topology::new(2, vec![(0, 1)]).unwrap()],
        _ => {}
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut seq = vec![0usize; n - 2];
    loop {
        let edges = prufer_edges(&seq, n);
        if seen.insert(canonical(n, &edges)) {
            out.push(Topology::new(n, edges).unwrap());
        }
        let mut k = 0;
        while k < seq.len() {
            seq[k] += 1;
            if seq[k] < n {
                break;
            }
            seq[k] = 0;
            k += 1;
        }
        if k == seq.len() {
            break;
        }
    }
    out
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Verdict line in the acceptance format.
pub fn report(name: &str, pass: bool, detail: &str) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}
