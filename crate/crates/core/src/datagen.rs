//! Synthetic two-facet benchmark and sampling from latent tree models.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::inference::CliqueTree;
use crate::model::LtvaeModel;
use crate::neural::sigmoid;
use crate::rng::{derive_seed, seeded, standard_normal, Rng};
use crate::tree::{LatentStructure, NodeId, TreeParameters};

/// Two facets with two clusters each, living in `z[0:2]` and `z[2:4]`,
/// pushed through `x = σ(U σ(W z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// `facet_means[f][c]` is the 2-D mean of cluster `c` of facet `f`.
    pub facet_means: [[[f64; 2]; 2]; 2],
    pub facet_variance: f64,
    pub hidden_dim: usize,
    pub x_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 5000,
            facet_means: [[[-3.0, -3.0], [3.0, 3.0]], [[-3.0, -3.0], [3.0, 3.0]]],
            facet_variance: 0.25,
            hidden_dim: 10,
            x_dim: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub const Z_DIM: usize = 4;

    /// Mixing matrices `W` (`hidden × 4`) and `U` (`x_dim × hidden`).
    pub fn mixing(&self) -> (Array2<f64>, Array2<f64>) {
        let mut rng = seeded(derive_seed(self.seed, 0x3A71));
        let w = Array2::from_shape_simple_fn((self.hidden_dim, Self::Z_DIM), || standard_normal(&mut rng));
        let u = Array2::from_shape_simple_fn((self.x_dim, self.hidden_dim), || standard_normal(&mut rng));
        (w, u)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub x: Array2<f64>,
    pub z: Array2<f64>,
    pub labels1: Vec<usize>,
    pub labels2: Vec<usize>,
}

/// `x = σ(U σ(W z))` row by row.
pub fn transform(z: &Array2<f64>, w: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
    let h = z.dot(&w.t()).mapv(sigmoid);
    h.dot(&u.t()).mapv(sigmoid)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> SyntheticData {
    let (w, u) = spec.mixing();
    let mut rng = seeded(derive_seed(spec.seed, 0x5A3F));
    let sd = spec.facet_variance.sqrt();
    let n = spec.n_samples;
    let mut z = Array2::zeros((n, SyntheticSpec::Z_DIM));
    let mut labels1 = Vec::with_capacity(n);
    let mut labels2 = Vec::with_capacity(n);
    for i in 0..n {
        for (f, labels) in [&mut labels1, &mut labels2].into_iter().enumerate() {
            let c = rng.random_range(0..2usize);
            labels.push(c);
            for k in 0..2 {
                z[[i, 2 * f + k]] = spec.facet_means[f][c][k] + sd * standard_normal(&mut rng);
            }
        }
    }
    let x = transform(&z, &w, &u);
    SyntheticData { x, z, labels1, labels2 }
}

/// A full latent configuration.
pub type Assignment = BTreeMap<NodeId, usize>;

fn draw_categorical(rng: &mut Rng, p: &[f64]) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &pk) in p.iter().enumerate() {
        if u < pk {
            return k;
        }
        u -= pk;
    }
    // Rounding left a sliver past the last positive entry.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Latents ordered so parents precede children.
fn topological(structure: &LatentStructure) -> Vec<NodeId> {
    let mut order = vec![structure.root().id];
    let mut k = 0;
    while k < order.len() {
        let mut kids: Vec<NodeId> = structure.child_latents(order[k]).map(|l| l.id).collect();
        kids.sort();
        order.extend(kids);
        k += 1;
    }
    order
}

fn sample_pouches(structure: &LatentStructure, params: &TreeParameters, y: &Assignment, rng: &mut Rng) -> Vec<f64> {
    let mut z = vec![0.0; structure.n_vars()];
    let mut pouches: Vec<_> = structure.pouches.iter().collect();
    pouches.sort_by_key(|p| p.id);
    for p in pouches {
        let g = &params.gaussians[&p.id][y[&p.parent]];
        for (k, &v) in p.vars.iter().enumerate() {
            z[v] = g.mean[k] + g.var[k].sqrt() * standard_normal(rng);
        }
    }
    z
}

/// Root-to-leaf sampling of `n` codes with their latent configurations.
pub fn ancestral_sample_tree(
    structure: &LatentStructure,
    params: &TreeParameters,
    n: usize,
    rng: &mut Rng,
) -> (Array2<f64>, Vec<Assignment>) {
    let order = topological(structure);
    let mut z = Array2::zeros((n, structure.n_vars()));
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let mut y = Assignment::new();
        for &id in &order {
            let state = match structure.latent(id).and_then(|l| l.parent) {
                None => draw_categorical(rng, &params.root_prior),
                Some(p) => draw_categorical(rng, &params.cpts[&id][y[&p]]),
            };
            y.insert(id, state);
        }
        let zi = sample_pouches(structure, params, &y, rng);
        z.row_mut(i).iter_mut().zip(&zi).for_each(|(a, b)| *a = *b);
        ys.push(y);
    }
    (z, ys)
}

/// Codes, decoded data and latent configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub z: Array2<f64>,
    /// Decoder outputs on the data scale (Bernoulli heads give probabilities).
    pub x: Array2<f64>,
    pub assignments: Vec<Assignment>,
}

pub fn ancestral_sample(model: &LtvaeModel, n: usize, rng: &mut Rng) -> Samples {
    let (z, assignments) = ancestral_sample_tree(&model.structure, &model.params, n, rng);
    let x = model.vae.decode_mean(z.view());
    Samples { z, x, assignments }
}

fn check_assignment(structure: &LatentStructure, y: &Assignment) -> Result<()> {
    for l in &structure.latents {
        match y.get(&l.id) {
            None => return Err(Error::InvalidArgument(format!("assignment misses latent {}", l.id))),
            Some(&s) if s >= l.card => {
                return Err(Error::InvalidArgument(format!(
                    "state {s} out of range for latent {} of cardinality {}",
                    l.id, l.card
                )))
            }
            _ => {}
        }
    }
    if let Some(id) = y.keys().find(|id| structure.latent(**id).is_none()) {
        return Err(Error::UnknownNode(id.0));
    }
    Ok(())
}

/// Codes drawn from the mixture component selected by `assignment`.
pub fn component_sample_tree(
    structure: &LatentStructure,
    params: &TreeParameters,
    assignment: &Assignment,
    n: usize,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    check_assignment(structure, assignment)?;
    let mut z = Array2::zeros((n, structure.n_vars()));
    for mut row in z.axis_iter_mut(Axis(0)) {
        let zi = sample_pouches(structure, params, assignment, rng);
        row.iter_mut().zip(&zi).for_each(|(a, b)| *a = *b);
    }
    Ok(z)
}

pub fn component_sample(model: &LtvaeModel, assignment: &Assignment, n: usize, rng: &mut Rng) -> Result<Samples> {
    let z = component_sample_tree(&model.structure, &model.params, assignment, n, rng)?;
    let x = model.vae.decode_mean(z.view());
    Ok(Samples {
        z,
        x,
        assignments: vec![assignment.clone(); n],
    })
}

/// Draws every latent not in `evidence` from its conditional given the
/// evidence states, by an upward pass of likelihood messages followed by
/// top-down sampling.
pub fn sample_latents_given(
    structure: &LatentStructure,
    params: &TreeParameters,
    evidence: &Assignment,
    rng: &mut Rng,
) -> Assignment {
    let order = topological(structure);
    let mut lambda: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for &id in order.iter().rev() {
        let card = structure.latent(id).expect("latent").card;
        let mut l: Vec<f64> = match evidence.get(&id) {
            Some(&s) => (0..card).map(|k| if k == s { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; card],
        };
        for c in structure.child_latents(id) {
            let lc = &lambda[&c.id];
            let cpt = &params.cpts[&c.id];
            for (y, ly) in l.iter_mut().enumerate() {
                *ly *= cpt[y].iter().zip(lc).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        // Rescale to keep products bounded on deep trees.
        let mx = l.iter().copied().fold(0.0, f64::max);
        if mx > 0.0 {
            l.iter_mut().for_each(|v| *v /= mx);
        }
        lambda.insert(id, l);
    }
    let mut y = Assignment::new();
    for &id in &order {
        let prior: &[f64] = match structure.latent(id).and_then(|l| l.parent) {
            None => &params.root_prior,
            Some(p) => &params.cpts[&id][y[&p]],
        };
        let w: Vec<f64> = prior.iter().zip(&lambda[&id]).map(|(a, b)| a * b).collect();
        y.insert(id, draw_categorical(rng, &w));
    }
    y
}

/// Keeps the facets of `x_input` outside `resample` at their MAP states and
/// redraws the `resample` facets from the tree given those states, then
/// samples codes and decodes. `fixed` must be disjoint from `resample`.
pub fn conditional_generate(
    model: &LtvaeModel,
    x_input: &[f64],
    fixed: &[NodeId],
    resample: &[NodeId],
    n: usize,
    rng: &mut Rng,
) -> Result<Samples> {
    let s = &model.structure;
    for id in fixed.iter().chain(resample) {
        if s.latent(*id).is_none() {
            return Err(Error::UnknownNode(id.0));
        }
    }
    if let Some(id) = fixed.iter().find(|id| resample.contains(id)) {
        return Err(Error::InvalidArgument(format!("latent {id} is both fixed and resampled")));
    }
    let x = Array2::from_shape_vec((1, x_input.len()), x_input.to_vec())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if x.ncols() != model.vae.x_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.vae.x_dim(),
            got: x.ncols(),
        });
    }
    let (mu, _) = model.vae.encode_params(x.view());
    let ct = CliqueTree::new(s);
    let post = ct.posterior(&model.params, &mu.row(0).to_vec())?;
    let evidence: Assignment = s
        .latents
        .iter()
        .filter(|l| !resample.contains(&l.id))
        .map(|l| (l.id, post.map_state(l.id).expect("latent in posterior")))
        .collect();
    let mut z = Array2::zeros((n, s.n_vars()));
    let mut assignments = Vec::with_capacity(n);
    for mut row in z.axis_iter_mut(Axis(0)) {
        let y = sample_latents_given(s, &model.params, &evidence, rng);
        let zi = sample_pouches(s, &model.params, &y, rng);
        row.iter_mut().zip(&zi).for_each(|(a, b)| *a = *b);
        assignments.push(y);
    }
    let x = model.vae.decode_mean(z.view());
    Ok(Samples { z, x, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::DiagGaussian;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let spec = SyntheticSpec {
            n_samples: 200,
            seed: 11,
            ..Default::default()
        };
        let a = generate_synthetic(&spec);
        let b = generate_synthetic(&spec);
        assert_eq!(a, b);
        assert_eq!(a.x.dim(), (200, 100));
        assert!(a.x.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(a.labels1.iter().chain(&a.labels2).all(|&l| l < 2));
    }

    #[test]
    fn card_one_chain_uses_single_component() {
        let s = LatentStructure::single_latent(1, vec![vec![0]]);
        let p = TreeParameters {
            root_prior: vec![1.0],
            cpts: BTreeMap::new(),
            gaussians: [(
                NodeId(1),
                vec![DiagGaussian {
                    mean: vec![2.0],
                    var: vec![1e-4],
                }],
            )]
            .into(),
        };
        let (z, ys) = ancestral_sample_tree(&s, &p, 50, &mut seeded(1));
        assert!(ys.iter().all(|y| y[&NodeId(0)] == 0));
        assert!(z.iter().all(|v| (v - 2.0).abs() < 0.1));
    }

    #[test]
    fn invalid_state_is_rejected() {
        let s = LatentStructure::single_latent(2, vec![vec![0]]);
        let data = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        let p = crate::tree::init_random(&s, data.view(), 0).unwrap();
        let y: Assignment = [(NodeId(0), 2)].into();
        assert!(component_sample_tree(&s, &p, &y, 1, &mut seeded(0)).is_err());
    }

    #[test]
    fn evidence_is_respected() {
        let s = LatentStructure {
            latents: vec![
                crate::tree::LatentNode { id: NodeId(0), card: 2, parent: None },
                crate::tree::LatentNode { id: NodeId(1), card: 3, parent: Some(NodeId(0)) },
            ],
            pouches: vec![
                crate::tree::PouchNode { id: NodeId(2), vars: vec![0], parent: NodeId(0) },
                crate::tree::PouchNode { id: NodeId(3), vars: vec![1], parent: NodeId(1) },
            ],
        };
        let data = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64);
        let p = crate::tree::init_random(&s, data.view(), 3).unwrap();
        let ev: Assignment = [(NodeId(1), 2)].into();
        let mut rng = seeded(5);
        for _ in 0..20 {
            let y = sample_latents_given(&s, &p, &ev, &mut rng);
            assert_eq!(y[&NodeId(1)], 2);
            assert!(y[&NodeId(0)] < 2);
        }
    }
}
