#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use magnet_core::connectome::{ConnectivityMatrix, Modality, SubjectRecord, Target};
use magnet_core::hybrid_graph::{EdgeKind, HybridEdge, HybridGraph};

/// Random symmetric adjacency with the given edge density.
pub fn random_adjacency(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<Vec<bool>> {
    let mut a = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < density {
                a[i][j] = true;
                a[j][i] = true;
            }
        }
    }
    a
}

/// Random hybrid multigraph: each (pair, kind) present with probability `p`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> HybridGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            for kind in EdgeKind::ALL {
                if rng.gen::<f64>() < p {
                    let weight = match kind {
                        EdgeKind::CrossModal => rng.gen_range(-1.0..1.0),
                        k if k.is_detour() => rng.gen_range(0.0..2.5),
                        _ => rng.gen_range(-1.0..1.0),
                    };
                    edges.push(HybridEdge { i, j, kind, weight });
                }
            }
        }
    }
    let node_features = (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    HybridGraph {
        node_count: n,
        node_features,
        edges,
    }
}

pub fn random_fnc(rng: &mut ChaCha8Rng, n: usize) -> ConnectivityMatrix {
    ConnectivityMatrix::from_upper(n, Modality::Functional, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn random_record(rng: &mut ChaCha8Rng, id: &str, n: usize) -> SubjectRecord {
    let sbm: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let fnc = random_fnc(rng, n);
    let targets: BTreeMap<Target, f64> = Target::ALL.iter().map(|&t| (t, rng.gen_range(80.0..120.0))).collect();
    SubjectRecord::new(id, sbm, fnc, targets).unwrap()
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Counts simple paths of exactly `r` edges by enumerating every injective
/// sequence of intermediate nodes.
pub fn brute_force_detours(adj: &[Vec<bool>], from: usize, to: usize, r: usize) -> u64 {
    let n = adj.len();
    let inner: Vec<usize> = (0..n).filter(|&v| v != from && v != to).collect();
    let mut count = 0;
    let mut seq = Vec::with_capacity(r - 1);
    fn rec(adj: &[Vec<bool>], inner: &[usize], seq: &mut Vec<usize>, need: usize, from: usize, to: usize, count: &mut u64) {
        if seq.len() == need {
            let mut path = vec![from];
            path.extend(seq.iter().copied());
            path.push(to);
            if path.windows(2).all(|w| adj[w[0]][w[1]]) {
                *count += 1;
            }
            return;
        }
        for &v in inner {
            if !seq.contains(&v) {
                seq.push(v);
                rec(adj, inner, seq, need, from, to, count);
                seq.pop();
            }
        }
    }
    rec(adj, &inner, &mut seq, r - 1, from, to, &mut count);
    count
}
