//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ltvae::tree::DiagGaussian;
use ltvae::{LatentNode, LatentStructure, NodeId, PouchNode, TreeParameters};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub use ltvae::rng::{seeded, Rng};

/// A random valid structure with `1..=max_latents` latents of cardinality
/// `1..=max_card` over `n_vars` code dimensions.
pub fn random_structure(rng: &mut Rng, max_latents: usize, max_card: usize, n_vars: usize) -> LatentStructure {
    loop {
        let n_lat = rng.random_range(1..=max_latents.min(n_vars));
        let latents: Vec<LatentNode> = (0..n_lat)
            .map(|i| LatentNode {
                id: NodeId(i as u32),
                card: rng.random_range(1..=max_card),
                parent: (i > 0).then(|| NodeId(rng.random_range(0..i) as u32)),
            })
            .collect();
        let mut vars: Vec<usize> = (0..n_vars).collect();
        vars.shuffle(rng);
        // Split the shuffled variables into contiguous groups.
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for v in vars {
            if groups.is_empty() || rng.random_bool(0.5) {
                groups.push(vec![v]);
            } else {
                groups.last_mut().unwrap().push(v);
            }
        }
        // Leaves of the latent tree each need at least one pouch.
        let leaves: Vec<usize> = (0..n_lat)
            .filter(|&i| !latents.iter().any(|l| l.parent == Some(NodeId(i as u32))))
            .collect();
        if groups.len() < leaves.len() {
            continue;
        }
        let pouches = groups
            .into_iter()
            .enumerate()
            .map(|(k, mut vars)| {
                vars.sort_unstable();
                let parent = if k < leaves.len() {
                    leaves[k]
                } else {
                    rng.random_range(0..n_lat)
                };
                PouchNode {
                    id: NodeId((n_lat + k) as u32),
                    vars,
                    parent: NodeId(parent as u32),
                }
            })
            .collect();
        let s = LatentStructure { latents, pouches };
        if s.validate().is_ok() {
            return s;
        }
    }
}

fn random_simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let t: f64 = w.iter().sum();
    w.into_iter().map(|v| v / t).collect()
}

/// Random parameters: weights bounded away from zero, means in `[-2, 2]`,
/// variances in `[0.3, 2]`.
pub fn random_params(rng: &mut Rng, s: &LatentStructure) -> TreeParameters {
    let root_prior = random_simplex(rng, s.root().card);
    let mut cpts = BTreeMap::new();
    for l in &s.latents {
        if let Some(p) = l.parent {
            let pc = s.card(p).unwrap();
            cpts.insert(l.id, (0..pc).map(|_| random_simplex(rng, l.card)).collect());
        }
    }
    let mut gaussians = BTreeMap::new();
    for p in &s.pouches {
        let comps = (0..s.card(p.parent).unwrap())
            .map(|_| DiagGaussian {
                mean: p.vars.iter().map(|_| rng.random_range(-2.0..2.0)).collect(),
                var: p.vars.iter().map(|_| rng.random_range(0.3..2.0)).collect(),
            })
            .collect();
        gaussians.insert(p.id, comps);
    }
    TreeParameters {
        root_prior,
        cpts,
        gaussians,
    }
}

pub fn random_point(rng: &mut Rng, n_vars: usize) -> Vec<f64> {
    (0..n_vars).map(|_| rng.random_range(-3.0..3.0)).collect()
}

/// Result of summing the joint over every latent configuration.
pub struct Enumerated {
    pub loglik: f64,
    pub node: BTreeMap<NodeId, Vec<f64>>,
    /// `[parent state][child state]`, keyed by the child.
    pub edge: BTreeMap<NodeId, Vec<Vec<f64>>>,
}

/// Log of the joint density `p(y, z)` for one full configuration.
pub fn log_joint(s: &LatentStructure, p: &TreeParameters, y: &BTreeMap<NodeId, usize>, z: &[f64]) -> f64 {
    let mut lj = 0.0;
    for l in &s.latents {
        lj += match l.parent {
            None => p.root_prior[y[&l.id]].ln(),
            Some(par) => p.cpts[&l.id][y[&par]][y[&l.id]].ln(),
        };
    }
    for pouch in &s.pouches {
        let g = &p.gaussians[&pouch.id][y[&pouch.parent]];
        lj += g.log_density(pouch.vars.iter().map(|&v| z[v]));
    }
    lj
}

/// Brute-force marginal likelihood and posteriors by enumerating every
/// joint latent configuration.
pub fn enumerate(s: &LatentStructure, p: &TreeParameters, z: &[f64]) -> Enumerated {
    let cards: Vec<usize> = s.latents.iter().map(|l| l.card).collect();
    let total: usize = cards.iter().product();
    let mut configs = Vec::with_capacity(total);
    let mut logs = Vec::with_capacity(total);
    for mut code in 0..total {
        let mut y = BTreeMap::new();
        for (l, &c) in s.latents.iter().zip(&cards) {
            y.insert(l.id, code % c);
            code /= c;
        }
        logs.push(log_joint(s, p, &y, z));
        configs.push(y);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let loglik = max + sum.ln();
    let mut node: BTreeMap<NodeId, Vec<f64>> = s.latents.iter().map(|l| (l.id, vec![0.0; l.card])).collect();
    let mut edge: BTreeMap<NodeId, Vec<Vec<f64>>> = BTreeMap::new();
    for l in &s.latents {
        if let Some(par) = l.parent {
            edge.insert(l.id, vec![vec![0.0; l.card]; s.card(par).unwrap()]);
        }
    }
    for (y, lj) in configs.iter().zip(&logs) {
        let w = (lj - loglik).exp();
        for l in &s.latents {
            node.get_mut(&l.id).unwrap()[y[&l.id]] += w;
            if let Some(par) = l.parent {
                edge.get_mut(&l.id).unwrap()[y[&par]][y[&l.id]] += w;
            }
        }
    }
    Enumerated { loglik, node, edge }
}

/// Central finite difference of `f` along every coordinate of `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Mean and standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
