//! Clustering accuracy, inter-facet NMI, importance-sampled loglikelihood
//! and the per-facet report.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use pathfinding::prelude::{kuhn_munkres, Matrix};

use crate::error::{Error, Result};
use crate::inference::{argmax, CliqueTree, Messages};
use crate::model::LtvaeModel;
use crate::neural::{draw_eps, entropy_term, log_q, reparameterize};
use crate::rng::Rng;
use crate::tree::{LatentStructure, NodeId, TreeParameters};

/// Fraction of items labelled correctly under the best one-to-one mapping
/// of predicted clusters to true labels.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let k = pred.iter().chain(truth).copied().max().expect("non-empty") + 1;
    let mut counts = vec![0i64; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p * k + t] += 1;
    }
    let weights = Matrix::from_vec(k, k, counts).expect("square");
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / pred.len() as f64)
}

/// Hard and soft cluster memberships induced by one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FacetAssignment {
    pub latent: NodeId,
    pub hard: Vec<usize>,
    pub soft: Vec<Vec<f64>>,
}

/// One assignment per latent, in ascending id order.
pub fn facet_assignments(
    structure: &LatentStructure,
    params: &TreeParameters,
    z: ArrayView2<f64>,
) -> Result<Vec<FacetAssignment>> {
    let ct = CliqueTree::new(structure);
    let mut msgs = Messages::new(&ct);
    let mut ids: Vec<NodeId> = structure.latents.iter().map(|l| l.id).collect();
    ids.sort();
    let mut out: Vec<FacetAssignment> = ids
        .iter()
        .map(|&latent| FacetAssignment {
            latent,
            hard: Vec::with_capacity(z.nrows()),
            soft: Vec::with_capacity(z.nrows()),
        })
        .collect();
    for row in z.rows() {
        let zi = row.to_vec();
        let post = ct.posterior_with(params, &zi, &mut msgs)?;
        for f in &mut out {
            let p = post.node_marginal(f.latent).expect("latent").to_vec();
            f.hard.push(argmax(&p));
            f.soft.push(p);
        }
    }
    Ok(out)
}

/// `P(Y_a, Y_b) = 1/N Σ_i P(Y_a | d_i) P(Y_b | d_i)ᵀ`.
pub fn joint_table(post1: &[Vec<f64>], post2: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let ka = post1.first().map_or(0, |p| p.len());
    let kb = post2.first().map_or(0, |p| p.len());
    let mut joint = vec![vec![0.0; kb]; ka];
    for (a, b) in post1.iter().zip(post2) {
        for (row, &pa) in joint.iter_mut().zip(a) {
            for (j, &pb) in row.iter_mut().zip(b) {
                *j += pa * pb;
            }
        }
    }
    let n = post1.len().max(1) as f64;
    for row in &mut joint {
        row.iter_mut().for_each(|j| *j /= n);
    }
    joint
}

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// `I(Y_a; Y_b) / √(H(Y_a) H(Y_b))` on the joint from [`joint_table`];
/// zero when either entropy vanishes.
pub fn facet_nmi(post1: &[Vec<f64>], post2: &[Vec<f64>]) -> f64 {
    let joint = joint_table(post1, post2);
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let kb = joint.first().map_or(0, |r| r.len());
    let pb: Vec<f64> = (0..kb).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let ha = entropy(pa.iter().copied());
    let hb = entropy(pb.iter().copied());
    let denom = (ha * hb).sqrt();
    if denom <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (row, &a) in joint.iter().zip(&pa) {
        for (&j, &b) in row.iter().zip(&pb) {
            if j > 0.0 {
                mi += j * (j / (a * b)).ln();
            }
        }
    }
    (mi / denom).clamp(0.0, 1.0)
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + (v.iter().map(|x| (x - mx).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Per-row `L_k(x) = log 1/k Σ p(x, z⁽ⁱ⁾) / q(z⁽ⁱ⁾ | x)` with
/// `z⁽ⁱ⁾ ~ q(z | x)`.
pub fn importance_loglik(model: &LtvaeModel, x: ArrayView2<f64>, k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let vae = &model.vae;
    vae.head.check(x)?;
    let ct = CliqueTree::new(&model.structure);
    let mut msgs = Messages::new(&ct);
    let (mu, log_sigma) = vae.encode_params(x);
    let j = vae.z_dim();
    let mut out = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let mu_i = Array2::from_shape_fn((k, j), |(_, c)| mu[[i, c]]);
        let ls_i = Array2::from_shape_fn((k, j), |(_, c)| log_sigma[[i, c]]);
        let eps = draw_eps(rng, 1, k, j).pop().expect("one draw");
        let z = reparameterize(&mu_i, &ls_i, &eps);
        let xi = Array2::from_shape_fn((k, x.ncols()), |(_, c)| x[[i, c]]);
        let recon = vae.decode_loglik(z.view(), xi.view())?;
        let ls_row = log_sigma.row(i).to_vec();
        let mut logw = Vec::with_capacity(k);
        for s in 0..k {
            let zs = z.row(s).to_vec();
            let prior = ct.collect(&model.params, &zs, &mut msgs)?;
            logw.push(recon[s] + prior - log_q(&ls_row, &eps.row(s).to_vec()));
        }
        out.push(log_mean_exp(&logw));
    }
    Ok(out)
}

/// Per-row single-sample ELBO estimate `log p(x|z) + log p_S(z) + H[q]`.
pub fn elbo_estimate(model: &LtvaeModel, x: ArrayView2<f64>, rng: &mut Rng) -> Result<Vec<f64>> {
    let vae = &model.vae;
    vae.head.check(x)?;
    let ct = CliqueTree::new(&model.structure);
    let mut msgs = Messages::new(&ct);
    let (mu, log_sigma) = vae.encode_params(x);
    let eps = draw_eps(rng, 1, x.nrows(), vae.z_dim()).pop().expect("one draw");
    let z = reparameterize(&mu, &log_sigma, &eps);
    let recon = vae.decode_loglik(z.view(), x)?;
    let mut out = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let prior = ct.collect(&model.params, &z.row(i).to_vec(), &mut msgs)?;
        out.push(recon[i] + prior + entropy_term(&log_sigma.row(i).to_vec()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FacetSummary {
    pub latent: NodeId,
    pub card: usize,
    /// Code dimensions in the pouches directly below this latent.
    pub vars: Vec<usize>,
    /// Hard-assignment count per state.
    pub counts: Vec<usize>,
    /// ACC against each supplied ground-truth labelling.
    pub acc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FacetReport {
    pub facets: Vec<FacetSummary>,
    pub nmi: Vec<Vec<f64>>,
    /// `(a, b, P(Y_a, Y_b))` for every pair `a < b` of facet indices.
    pub joints: Vec<(usize, usize, Vec<Vec<f64>>)>,
    /// Per ground-truth labelling, the highest ACC over facets.
    pub best_acc: Vec<f64>,
}

impl FacetReport {
    /// Facet index achieving `best_acc[t]`.
    pub fn best_facet(&self, t: usize) -> Option<usize> {
        (0..self.facets.len()).max_by(|&a, &b| {
            self.facets[a].acc[t]
                .partial_cmp(&self.facets[b].acc[t])
                .expect("finite")
                .then(b.cmp(&a))
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for f in &self.facets {
            let vars: Vec<String> = f.vars.iter().map(|v| format!("z{v}")).collect();
            let _ = writeln!(s, "facet\t{}\tcard\t{}\tvars\t{}", f.latent, f.card, vars.join(","));
            let _ = writeln!(s, "state\tcount");
            for (k, c) in f.counts.iter().enumerate() {
                let _ = writeln!(s, "{k}\t{c}");
            }
            for (t, a) in f.acc.iter().enumerate() {
                let _ = writeln!(s, "acc_truth{}\t{a}", t + 1);
            }
            s.push('\n');
        }
        for (t, a) in self.best_acc.iter().enumerate() {
            let facet = self.best_facet(t).map(|i| self.facets[i].latent.to_string()).unwrap_or_default();
            let _ = writeln!(s, "best_facet_acc_truth{}\t{a}\tfacet\t{facet}", t + 1);
        }
        if !self.best_acc.is_empty() {
            s.push('\n');
        }
        let header: Vec<String> = self.facets.iter().map(|f| f.latent.to_string()).collect();
        let _ = writeln!(s, "nmi\t{}", header.join("\t"));
        for (f, row) in self.facets.iter().zip(&self.nmi) {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}\t{}", f.latent, vals.join("\t"));
        }
        for (a, b, joint) in &self.joints {
            let _ = writeln!(s, "\njoint\t{}\t{}", self.facets[*a].latent, self.facets[*b].latent);
            for row in joint {
                let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{}", vals.join("\t"));
            }
        }
        s
    }
}

/// Report on the facets of a tree evaluated at codes `z`.
pub fn facet_report_tree(
    structure: &LatentStructure,
    params: &TreeParameters,
    z: ArrayView2<f64>,
    truth: &[Vec<usize>],
) -> Result<FacetReport> {
    let assignments = facet_assignments(structure, params, z)?;
    let mut facets = Vec::with_capacity(assignments.len());
    for fa in &assignments {
        let card = structure.card(fa.latent).expect("latent");
        let mut counts = vec![0; card];
        fa.hard.iter().for_each(|&h| counts[h] += 1);
        let mut vars: Vec<usize> = structure.child_pouches(fa.latent).flat_map(|p| p.vars.iter().copied()).collect();
        vars.sort_unstable();
        let acc = truth
            .iter()
            .map(|t| clustering_accuracy(&fa.hard, t))
            .collect::<Result<Vec<_>>>()?;
        facets.push(FacetSummary {
            latent: fa.latent,
            card,
            vars,
            counts,
            acc,
        });
    }
    let n = assignments.len();
    let nmi = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if a == b {
                        1.0
                    } else {
                        facet_nmi(&assignments[a].soft, &assignments[b].soft)
                    }
                })
                .collect()
        })
        .collect();
    let mut joints = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            joints.push((a, b, joint_table(&assignments[a].soft, &assignments[b].soft)));
        }
    }
    let best_acc = (0..truth.len())
        .map(|t| facets.iter().map(|f| f.acc[t]).fold(0.0, f64::max))
        .collect();
    Ok(FacetReport {
        facets,
        nmi,
        joints,
        best_acc,
    })
}

/// Report on a trained model, with codes taken as encoder means of `x`.
pub fn facet_report(model: &LtvaeModel, x: ArrayView2<f64>, truth: &[Vec<usize>]) -> Result<FacetReport> {
    let (mu, _) = model.vae.encode_params(x);
    facet_report_tree(&model.structure, &model.params, mu.view(), truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(clustering_accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[2, 0, 1, 0], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(matches!(clustering_accuracy(&[], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn accuracy_with_unequal_cluster_counts() {
        // Three predicted clusters against two labels.
        assert_eq!(clustering_accuracy(&[0, 1, 2, 2], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn nmi_extremes() {
        let hard = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!((facet_nmi(&hard, &hard) - 1.0).abs() < 1e-12);
        let uniform = vec![vec![0.5, 0.5]; 3];
        assert!(facet_nmi(&hard, &uniform).abs() < 1e-12);
        assert_eq!(facet_nmi(&uniform, &uniform), 0.0);
    }

    #[test]
    fn joint_sums_to_one() {
        let a = vec![vec![0.2, 0.8], vec![0.6, 0.4]];
        let b = vec![vec![0.1, 0.3, 0.6], vec![1.0, 0.0, 0.0]];
        let total: f64 = joint_table(&a, &b).iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_facet_report() {
        let s = LatentStructure::gmm(2, 1);
        let data = Array2::from_shape_vec((4, 1), vec![-2.0, -1.9, 2.0, 2.1]).unwrap();
        let p = crate::tree::init_random(&s, data.view(), 1).unwrap();
        let r = facet_report_tree(&s, &p, data.view(), &[vec![0, 0, 1, 1]]).unwrap();
        assert_eq!(r.nmi, vec![vec![1.0]]);
        assert!(r.joints.is_empty());
        assert!(r.to_tsv().contains("nmi\t0"));
    }
}
