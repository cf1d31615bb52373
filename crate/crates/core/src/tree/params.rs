use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::seq::index;

use super::{LatentStructure, NodeId, Violation};
use crate::error::{Error, Result};
use crate::rng::{seeded, uniform_simplex};

/// Lower bound applied to every Gaussian variance.
pub const VARIANCE_FLOOR: f64 = 1e-4;

const NORMALIZATION_TOL: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian over the dimensions of one pouch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    /// `log N(x | mean, diag(var))` for `x` restricted to this pouch.
    #[inline]
    pub fn log_density<I>(&self, x: I) -> f64
    where
        I: IntoIterator<Item = f64>,
    {
        let mut acc = 0.0;
        for ((xi, &m), &v) in x.into_iter().zip(&self.mean).zip(&self.var) {
            let r = xi - m;
            acc += LN_2PI + v.ln() + r * r / v;
        }
        -0.5 * acc
    }
}

/// Parameters `Θ` of a latent tree: root prior, one CPT per non-root latent
/// (rows indexed by parent state) and, per pouch, one Gaussian per parent
/// state.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeParameters {
    pub root_prior: Vec<f64>,
    pub cpts: BTreeMap<NodeId, Vec<Vec<f64>>>,
    pub gaussians: BTreeMap<NodeId, Vec<DiagGaussian>>,
}

impl TreeParameters {
    pub fn validate(&self, structure: &LatentStructure) -> std::result::Result<(), Violation> {
        let root = structure.root();
        if self.root_prior.len() != root.card {
            return Err(Violation::root_shape(format!(
                "length {} but root cardinality {}",
                self.root_prior.len(),
                root.card
            )));
        }
        check_distribution(&self.root_prior).map_err(|e| {
            Violation::not_normalized(Some(root.id), format!("root prior of latent {}: {e}", root.id))
        })?;

        for l in &structure.latents {
            let Some(parent) = l.parent else { continue };
            let parent_card = structure.card(parent).unwrap_or(0);
            let Some(cpt) = self.cpts.get(&l.id) else {
                return Err(Violation::shape(l.id, "missing CPT"));
            };
            if cpt.len() != parent_card || cpt.iter().any(|r| r.len() != l.card) {
                return Err(Violation::shape(
                    l.id,
                    format!("CPT must be {parent_card}x{}", l.card),
                ));
            }
            for (r, row) in cpt.iter().enumerate() {
                check_distribution(row).map_err(|e| {
                    Violation::not_normalized(Some(l.id), format!("CPT row {r} of latent {}: {e}", l.id))
                })?;
            }
        }
        if let Some(extra) = self.cpts.keys().find(|id| {
            structure.latent(**id).map_or(true, |l| l.parent.is_none())
        }) {
            return Err(Violation::shape(*extra, "CPT for a node that is not a non-root latent"));
        }

        for p in &structure.pouches {
            let parent_card = structure.card(p.parent).unwrap_or(0);
            let Some(comps) = self.gaussians.get(&p.id) else {
                return Err(Violation::shape(p.id, "missing Gaussians"));
            };
            if comps.len() != parent_card {
                return Err(Violation::shape(
                    p.id,
                    format!("{} components but parent cardinality {parent_card}", comps.len()),
                ));
            }
            for (s, g) in comps.iter().enumerate() {
                if g.mean.len() != p.vars.len() || g.var.len() != p.vars.len() {
                    return Err(Violation::shape(
                        p.id,
                        format!("component {s} must have {} dims", p.vars.len()),
                    ));
                }
                if g.mean.iter().any(|m| !m.is_finite()) {
                    return Err(Violation::not_normalized(
                        Some(p.id),
                        format!("pouch {} component {s} has a non-finite mean", p.id),
                    ));
                }
                if g.var.iter().any(|&v| !(v >= VARIANCE_FLOOR) || !v.is_finite()) {
                    return Err(Violation::not_normalized(
                        Some(p.id),
                        format!("pouch {} component {s} variance below floor {VARIANCE_FLOOR}", p.id),
                    ));
                }
            }
        }
        if let Some(extra) = self.gaussians.keys().find(|id| structure.pouch(**id).is_none()) {
            return Err(Violation::shape(*extra, "Gaussians for an unknown pouch"));
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if let Some(x) = p.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(format!("entry {x} is negative or non-finite"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

pub(crate) fn column_variances(data: ArrayView2<f64>) -> Vec<f64> {
    let n = data.nrows() as f64;
    data.columns()
        .into_iter()
        .map(|c| {
            let m = c.sum() / n;
            let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            v.max(VARIANCE_FLOOR)
        })
        .collect()
}

/// Random parameters for `structure`: priors and CPT rows uniform on the
/// simplex, means at distinct random data rows (one row per latent state,
/// shared by all pouches of that latent), variances at the per-column data
/// variance. Needs at least as many rows as the largest cardinality.
pub fn init_random(structure: &LatentStructure, data: ArrayView2<f64>, seed: u64) -> Result<TreeParameters> {
    let n = data.nrows();
    let needed = structure.latents.iter().map(|l| l.card).max().unwrap_or(0);
    if n < needed || n == 0 {
        return Err(Error::NotEnoughData { needed: needed.max(1), got: n });
    }
    let j = structure.n_vars();
    if data.ncols() != j {
        return Err(Error::DimensionMismatch {
            expected: j,
            got: data.ncols(),
        });
    }
    let mut rng = seeded(seed);
    let variances = column_variances(data);

    // Fixed iteration order (latents as listed, then pouches) keeps the draw
    // sequence a pure function of the structure.
    let root = structure.root();
    let root_prior = uniform_simplex(&mut rng, root.card);
    let mut cpts = BTreeMap::new();
    let mut rows_for = BTreeMap::new();
    for l in &structure.latents {
        if let Some(p) = l.parent {
            let pc = structure.card(p).unwrap_or(0);
            let cpt = (0..pc).map(|_| uniform_simplex(&mut rng, l.card)).collect();
            cpts.insert(l.id, cpt);
        }
        rows_for.insert(l.id, index::sample(&mut rng, n, l.card).into_vec());
    }
    let mut gaussians = BTreeMap::new();
    for p in &structure.pouches {
        let rows = &rows_for[&p.parent];
        let comps = rows
            .iter()
            .map(|&r| DiagGaussian {
                mean: p.vars.iter().map(|&v| data[(r, v)]).collect(),
                var: p.vars.iter().map(|&v| variances[v]).collect(),
            })
            .collect();
        gaussians.insert(p.id, comps);
    }
    Ok(TreeParameters {
        root_prior,
        cpts,
        gaussians,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::validate;
    use ndarray::Array2;

    fn data() -> Array2<f64> {
        Array2::from_shape_fn((30, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 * 0.5 - j as f64)
    }

    #[test]
    fn init_is_deterministic_and_valid() {
        let s = LatentStructure::single_latent(3, vec![vec![0, 1], vec![2], vec![3]]);
        let a = init_random(&s, data().view(), 5).unwrap();
        let b = init_random(&s, data().view(), 5).unwrap();
        assert_eq!(a, b);
        validate(&s, &a).unwrap();
        assert_ne!(a, init_random(&s, data().view(), 6).unwrap());
    }

    #[test]
    fn variances_are_column_variances() {
        let d = data();
        let s = LatentStructure::single_latent(2, vec![vec![2, 0], vec![1, 3]]);
        let p = init_random(&s, d.view(), 1).unwrap();
        for pouch in &s.pouches {
            for comp in &p.gaussians[&pouch.id] {
                for (k, &v) in pouch.vars.iter().enumerate() {
                    let col: Vec<f64> = d.column(v).to_vec();
                    let mean = col.iter().sum::<f64>() / col.len() as f64;
                    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
                    assert!((comp.var[k] - var).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn card_one_prior_is_degenerate() {
        let s = LatentStructure::single_latent(1, vec![vec![0, 1, 2, 3]]);
        let p = init_random(&s, data().view(), 9).unwrap();
        assert_eq!(p.root_prior, vec![1.0]);
    }

    #[test]
    fn too_few_rows() {
        let s = LatentStructure::gmm(5, 4);
        let d = Array2::<f64>::zeros((3, 4));
        assert!(matches!(init_random(&s, d.view(), 0), Err(Error::NotEnoughData { .. })));
    }

    #[test]
    fn cpt_row_violation_names_latent() {
        let s = LatentStructure {
            latents: vec![
                crate::tree::LatentNode { id: NodeId(0), card: 2, parent: None },
                crate::tree::LatentNode { id: NodeId(4), card: 2, parent: Some(NodeId(0)) },
            ],
            pouches: vec![
                crate::tree::PouchNode { id: NodeId(1), vars: vec![0, 1], parent: NodeId(0) },
                crate::tree::PouchNode { id: NodeId(2), vars: vec![2, 3], parent: NodeId(4) },
            ],
        };
        let mut p = init_random(&s, data().view(), 2).unwrap();
        p.cpts.get_mut(&NodeId(4)).unwrap()[1] = vec![0.5, 0.4];
        let v = validate(&s, &p).unwrap_err();
        assert_eq!(v.node, Some(NodeId(4)));
        assert!(v.message.contains("latent 4"), "{v}");
    }

    #[test]
    fn gaussian_log_density() {
        let g = DiagGaussian { mean: vec![0.0], var: vec![1.0] };
        assert!((g.log_density([0.0]) + 0.918_938_533_204_672_7).abs() < 1e-15);
    }
}
