//! Exact inference on a latent tree by two-pass message passing.
//!
//! Each pouch together with its parent latent forms a clique, as does each
//! latent-latent edge. Pouch evidence is absorbed into the parent latent as a
//! log potential, messages are collected towards a pivot latent and then
//! distributed back, after which every node and edge marginal and the
//! marginal loglikelihood `log p(z)` are available.
//!
//! Messages are stored normalized to sum to one. Their magnitudes live in a
//! separate log-scale accumulator, so no product of densities is ever formed
//! outside log space.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tree::{LatentStructure, NodeId, TreeParameters};

/// One clique of the scaffold. Latent cliques hold a model edge
/// `(parent, child)`; pouch cliques hold a pouch and its parent latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Clique {
    Latent { parent: NodeId, child: NodeId },
    Pouch { pouch: NodeId, parent: NodeId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Link {
    /// Node is the model child of its pivot-side neighbour.
    ChildOfUp,
    /// Pivot-side neighbour is the model child of this node.
    ParentOfUp,
}

#[derive(Clone, Debug)]
pub(crate) struct PouchSlot {
    pub id: NodeId,
    pub vars: Vec<usize>,
}

/// Inference scaffold for one structure, oriented towards a pivot latent.
/// Immutable; per-query storage lives in [`Messages`].
#[derive(Clone, Debug)]
pub struct CliqueTree {
    ids: Vec<NodeId>,
    cards: Vec<usize>,
    up: Vec<Option<usize>>,
    link: Vec<Link>,
    children: Vec<Vec<usize>>,
    pouches: Vec<Vec<PouchSlot>>,
    model_root: usize,
    cliques: Vec<Clique>,
    n_vars: usize,
}

/// Caller-owned message storage for one query at a time.
#[derive(Clone, Debug)]
pub struct Messages {
    local: Vec<Vec<f64>>,
    up_log: Vec<Vec<f64>>,
    down_log: Vec<Vec<f64>>,
    msg_up: Vec<Vec<f64>>,
    msg_up_scale: Vec<f64>,
    msg_down: Vec<Vec<f64>>,
    msg_down_scale: Vec<f64>,
}

impl Messages {
    pub fn new(ct: &CliqueTree) -> Self {
        let n = ct.ids.len();
        let state_vecs = |i: usize| vec![0.0; ct.cards[i]];
        let up_vecs = |i: usize| ct.up[i].map_or(Vec::new(), |w| vec![0.0; ct.cards[w]]);
        Messages {
            local: (0..n).map(state_vecs).collect(),
            up_log: (0..n).map(state_vecs).collect(),
            down_log: (0..n).map(state_vecs).collect(),
            msg_up: (0..n).map(up_vecs).collect(),
            msg_up_scale: vec![0.0; n],
            msg_down: (0..n).map(state_vecs).collect(),
            msg_down_scale: vec![0.0; n],
        }
    }

    /// Upward (collect) messages as `(sender, normalized vector, log scale)`.
    /// The vector ranges over the receiver's states.
    pub fn upward<'a>(&'a self, ct: &'a CliqueTree) -> impl Iterator<Item = (NodeId, &'a [f64], f64)> + 'a {
        (0..ct.ids.len())
            .filter(|&i| ct.up[i].is_some())
            .map(move |i| (ct.ids[i], self.msg_up[i].as_slice(), self.msg_up_scale[i]))
    }

    /// Downward (distribute) messages as `(receiver, normalized vector, log scale)`.
    pub fn downward<'a>(&'a self, ct: &'a CliqueTree) -> impl Iterator<Item = (NodeId, &'a [f64], f64)> + 'a {
        (0..ct.ids.len())
            .filter(|&i| ct.up[i].is_some())
            .map(move |i| (ct.ids[i], self.msg_down[i].as_slice(), self.msg_down_scale[i]))
    }
}

/// Posterior over the latents given one evidence vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    ids: Vec<NodeId>,
    /// `P(y | z)` per latent, aligned with the clique tree's node order.
    pub node_marginals: Vec<Vec<f64>>,
    /// `P(y_parent, y_child | z)` per model edge, keyed by the child latent.
    pub edge_marginals: BTreeMap<NodeId, Vec<Vec<f64>>>,
    /// `log p(z)`.
    pub loglik: f64,
}

impl Posterior {
    pub fn node_marginal(&self, id: NodeId) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|&x| x == id)
            .map(|i| self.node_marginals[i].as_slice())
    }

    pub fn edge_marginal(&self, child: NodeId) -> Option<&Vec<Vec<f64>>> {
        self.edge_marginals.get(&child)
    }

    pub fn latent_ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Most probable state of a latent, ties to the lowest index.
    pub fn map_state(&self, id: NodeId) -> Option<usize> {
        self.node_marginal(id).map(argmax)
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl CliqueTree {
    /// Scaffold with the pivot at the model root.
    pub fn new(structure: &LatentStructure) -> Self {
        Self::with_pivot(structure, structure.root().id)
    }

    /// Scaffold with an arbitrary latent as pivot. Results do not depend on
    /// the pivot; this exists so that property is testable.
    pub fn with_pivot(structure: &LatentStructure, pivot: NodeId) -> Self {
        // Undirected adjacency over latents.
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for l in &structure.latents {
            adj.entry(l.id).or_default();
            if let Some(p) = l.parent {
                adj.entry(l.id).or_default().push(p);
                adj.entry(p).or_default().push(l.id);
            }
        }
        let mut ids = vec![pivot];
        let mut up = vec![None];
        let mut link = vec![Link::ChildOfUp];
        let mut head = 0;
        while head < ids.len() {
            let cur = ids[head];
            for &nb in &adj[&cur] {
                if up[head].map(|u: usize| ids[u]) == Some(nb) {
                    continue;
                }
                let nb_is_child = structure.latent(nb).and_then(|l| l.parent) == Some(cur);
                ids.push(nb);
                up.push(Some(head));
                link.push(if nb_is_child { Link::ChildOfUp } else { Link::ParentOfUp });
            }
            head += 1;
        }
        let index: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut children = vec![Vec::new(); ids.len()];
        for (i, u) in up.iter().enumerate() {
            if let Some(u) = u {
                children[*u].push(i);
            }
        }
        let cards = ids.iter().map(|&id| structure.card(id).unwrap_or(0)).collect();
        let mut pouches = vec![Vec::new(); ids.len()];
        for p in &structure.pouches {
            pouches[index[&p.parent]].push(PouchSlot {
                id: p.id,
                vars: p.vars.clone(),
            });
        }
        let mut cliques = Vec::new();
        for l in &structure.latents {
            if let Some(p) = l.parent {
                cliques.push(Clique::Latent { parent: p, child: l.id });
            }
        }
        for p in &structure.pouches {
            cliques.push(Clique::Pouch {
                pouch: p.id,
                parent: p.parent,
            });
        }
        CliqueTree {
            model_root: index[&structure.root().id],
            ids,
            cards,
            up,
            link,
            children,
            pouches,
            cliques,
            n_vars: structure.n_vars(),
        }
    }

    pub fn cliques(&self) -> &[Clique] {
        &self.cliques
    }

    pub fn pivot(&self) -> NodeId {
        self.ids[0]
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Root latent of the model (not necessarily the pivot).
    pub fn model_root(&self) -> NodeId {
        self.ids[self.model_root]
    }

    pub fn latent_ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// `(latent index, pouch)` pairs in scaffold order.
    pub(crate) fn pouch_slots(&self) -> impl Iterator<Item = (usize, &PouchSlot)> {
        self.pouches
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| ps.iter().map(move |p| (i, p)))
    }

    /// Pairwise factor between node `v` and its pivot-side neighbour, indexed
    /// `(y_up, y_v)`.
    #[inline]
    fn factor(&self, params: &TreeParameters, v: usize, y_up: usize, y_v: usize) -> f64 {
        let w = self.up[v].expect("non-pivot node");
        match self.link[v] {
            Link::ChildOfUp => params.cpts[&self.ids[v]][y_up][y_v],
            Link::ParentOfUp => params.cpts[&self.ids[w]][y_v][y_up],
        }
    }

    fn check_evidence(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.n_vars {
            return Err(Error::DimensionMismatch {
                expected: self.n_vars,
                got: z.len(),
            });
        }
        if let Some(d) = z.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteEvidence(d));
        }
        Ok(())
    }

    fn absorb_evidence(&self, params: &TreeParameters, z: &[f64], msgs: &mut Messages) {
        for u in 0..self.ids.len() {
            let local = &mut msgs.local[u];
            if u == self.model_root {
                for (l, p) in local.iter_mut().zip(&params.root_prior) {
                    *l = p.ln();
                }
            } else {
                local.iter_mut().for_each(|l| *l = 0.0);
            }
            for slot in &self.pouches[u] {
                let comps = &params.gaussians[&slot.id];
                for (l, g) in local.iter_mut().zip(comps) {
                    *l += g.log_density(slot.vars.iter().map(|&v| z[v]));
                }
            }
        }
    }

    /// Collect phase only; returns `log p(z)`.
    pub fn collect(&self, params: &TreeParameters, z: &[f64], msgs: &mut Messages) -> Result<f64> {
        self.check_evidence(z)?;
        self.absorb_evidence(params, z, msgs);
        for v in (0..self.ids.len()).rev() {
            let mut belief = msgs.local[v].clone();
            for &c in &self.children[v] {
                let scale = msgs.msg_up_scale[c];
                for (b, m) in belief.iter_mut().zip(&msgs.msg_up[c]) {
                    *b += m.ln() + scale;
                }
            }
            if let Some(w) = self.up[v] {
                let mx = belief.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut out = vec![0.0; self.cards[w]];
                for (yw, o) in out.iter_mut().enumerate() {
                    *o = (0..self.cards[v])
                        .map(|yv| self.factor(params, v, yw, yv) * (belief[yv] - mx).exp())
                        .sum();
                }
                let s: f64 = out.iter().sum();
                out.iter_mut().for_each(|o| *o /= s);
                msgs.msg_up[v] = out;
                msgs.msg_up_scale[v] = mx + s.ln();
            }
            msgs.up_log[v] = belief;
        }
        Ok(log_sum_exp(&msgs.up_log[0]))
    }

    /// Log potential at `u` from everything except the subtree of child `skip`.
    fn excluding(&self, u: usize, skip: usize, msgs: &Messages) -> Vec<f64> {
        let mut ex: Vec<f64> = msgs.local[u]
            .iter()
            .zip(&msgs.down_log[u])
            .map(|(a, b)| a + b)
            .collect();
        for &c in &self.children[u] {
            if c == skip {
                continue;
            }
            let scale = msgs.msg_up_scale[c];
            for (e, m) in ex.iter_mut().zip(&msgs.msg_up[c]) {
                *e += m.ln() + scale;
            }
        }
        ex
    }

    /// Full collect + distribute pass.
    pub fn posterior_with(&self, params: &TreeParameters, z: &[f64], msgs: &mut Messages) -> Result<Posterior> {
        let loglik = self.collect(params, z, msgs)?;
        let n = self.ids.len();
        msgs.down_log[0].iter_mut().for_each(|d| *d = 0.0);
        let mut edge_marginals = BTreeMap::new();
        for u in 0..n {
            for &c in &self.children[u] {
                let ex = self.excluding(u, c, msgs);
                let mx = ex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let wu: Vec<f64> = ex.iter().map(|e| (e - mx).exp()).collect();

                let mut down = vec![0.0; self.cards[c]];
                for (yc, d) in down.iter_mut().enumerate() {
                    *d = (0..self.cards[u])
                        .map(|yu| wu[yu] * self.factor(params, c, yu, yc))
                        .sum();
                }
                let s: f64 = down.iter().sum();
                down.iter_mut().for_each(|d| *d /= s);
                msgs.msg_down_scale[c] = mx + s.ln();
                for (dl, d) in msgs.down_log[c].iter_mut().zip(&down) {
                    *dl = d.ln() + msgs.msg_down_scale[c];
                }
                msgs.msg_down[c] = down;

                // Joint over the pair, in pivot orientation (y_u, y_c).
                let mc = msgs.up_log[c].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let wc: Vec<f64> = msgs.up_log[c].iter().map(|e| (e - mc).exp()).collect();
                let mut joint = vec![vec![0.0; self.cards[c]]; self.cards[u]];
                let mut total = 0.0;
                for (yu, row) in joint.iter_mut().enumerate() {
                    for (yc, j) in row.iter_mut().enumerate() {
                        *j = wu[yu] * self.factor(params, c, yu, yc) * wc[yc];
                        total += *j;
                    }
                }
                for row in &mut joint {
                    row.iter_mut().for_each(|j| *j /= total);
                }
                let (key, table) = match self.link[c] {
                    Link::ChildOfUp => (self.ids[c], joint),
                    Link::ParentOfUp => (self.ids[u], transpose(&joint)),
                };
                edge_marginals.insert(key, table);
            }
        }
        let node_marginals = (0..n)
            .map(|u| {
                let lb: Vec<f64> = msgs.up_log[u]
                    .iter()
                    .zip(&msgs.down_log[u])
                    .map(|(a, b)| a + b)
                    .collect();
                let lz = log_sum_exp(&lb);
                lb.iter().map(|x| (x - lz).exp()).collect()
            })
            .collect();
        Ok(Posterior {
            ids: self.ids.clone(),
            node_marginals,
            edge_marginals,
            loglik,
        })
    }

    pub fn posterior(&self, params: &TreeParameters, z: &[f64]) -> Result<Posterior> {
        let mut msgs = Messages::new(self);
        self.posterior_with(params, z, &mut msgs)
    }

    /// `log p(z)` only (collect phase).
    pub fn loglik(&self, params: &TreeParameters, z: &[f64]) -> Result<f64> {
        let mut msgs = Messages::new(self);
        self.collect(params, z, &mut msgs)
    }

    /// `∂ log p(z) / ∂z`: per pouch, the posterior-weighted sum of
    /// `Σ_y⁻¹ (μ_y − z_b)` over the parent's states.
    pub fn grad_z(&self, params: &TreeParameters, z: &[f64], posterior: &Posterior) -> Vec<f64> {
        let mut g = vec![0.0; self.n_vars];
        for (u, slot) in self.pouch_slots() {
            let post = &posterior.node_marginals[u];
            for (w, comp) in post.iter().zip(&params.gaussians[&slot.id]) {
                for (k, &v) in slot.vars.iter().enumerate() {
                    g[v] += w * (comp.mean[k] - z[v]) / comp.var[k];
                }
            }
        }
        g
    }
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = m.first().map_or(0, |r| r.len());
    (0..cols).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

/// Builds the scaffold for `structure` with the pivot at the root.
pub fn build_clique_tree(structure: &LatentStructure) -> CliqueTree {
    CliqueTree::new(structure)
}

/// Marginal loglikelihood and posteriors of `z`.
pub fn marginal_loglik(ct: &CliqueTree, params: &TreeParameters, z: &[f64]) -> Result<Posterior> {
    ct.posterior(params, z)
}

/// Gradient of `log p(z)` given the posterior for the same `z`.
pub fn grad_z(ct: &CliqueTree, params: &TreeParameters, z: &[f64], posterior: &Posterior) -> Vec<f64> {
    ct.grad_z(params, z, posterior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{DiagGaussian, LatentNode, PouchNode};

    fn single_gaussian() -> (LatentStructure, TreeParameters) {
        let s = LatentStructure::single_latent(1, vec![vec![0]]);
        let p = TreeParameters {
            root_prior: vec![1.0],
            cpts: BTreeMap::new(),
            gaussians: [(NodeId(1), vec![DiagGaussian { mean: vec![0.0], var: vec![1.0] }])].into(),
        };
        (s, p)
    }

    fn chain() -> (LatentStructure, TreeParameters) {
        let s = LatentStructure {
            latents: vec![
                LatentNode { id: NodeId(0), card: 2, parent: None },
                LatentNode { id: NodeId(1), card: 3, parent: Some(NodeId(0)) },
            ],
            pouches: vec![
                PouchNode { id: NodeId(2), vars: vec![0], parent: NodeId(0) },
                PouchNode { id: NodeId(3), vars: vec![1, 2], parent: NodeId(1) },
            ],
        };
        let g = |m: f64, v: f64, d: usize| DiagGaussian { mean: vec![m; d], var: vec![v; d] };
        let p = TreeParameters {
            root_prior: vec![0.3, 0.7],
            cpts: [(NodeId(1), vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]])].into(),
            gaussians: [
                (NodeId(2), vec![g(-1.0, 0.5, 1), g(1.5, 2.0, 1)]),
                (NodeId(3), vec![g(0.0, 1.0, 2), g(2.0, 0.3, 2), g(-2.0, 1.5, 2)]),
            ]
            .into(),
        };
        (s, p)
    }

    fn brute_force(s: &LatentStructure, p: &TreeParameters, z: &[f64]) -> (f64, Vec<f64>) {
        // Two latents: enumerate (y0, y1) directly.
        let mut terms = Vec::new();
        for y0 in 0..2 {
            for y1 in 0..3 {
                let mut lj = p.root_prior[y0].ln() + p.cpts[&NodeId(1)][y0][y1].ln();
                lj += p.gaussians[&NodeId(2)][y0].log_density([z[0]]);
                lj += p.gaussians[&NodeId(3)][y1].log_density([z[1], z[2]]);
                terms.push(lj);
            }
        }
        let ll = log_sum_exp(&terms);
        let _ = s;
        let mut m1 = vec![0.0; 3];
        for (k, t) in terms.iter().enumerate() {
            m1[k % 3] += (t - ll).exp();
        }
        (ll, m1)
    }

    #[test]
    fn clique_counts() {
        let (s, _) = single_gaussian();
        let ct = CliqueTree::new(&s);
        assert_eq!(ct.cliques().len(), 1);
        assert_eq!(ct.pivot(), NodeId(0));
        let (s, _) = chain();
        assert_eq!(CliqueTree::new(&s).cliques().len(), 3);
    }

    #[test]
    fn standard_normal_at_zero() {
        let (s, p) = single_gaussian();
        let post = marginal_loglik(&CliqueTree::new(&s), &p, &[0.0]).unwrap();
        assert!((post.loglik + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn symmetric_mixture() {
        let s = LatentStructure::single_latent(2, vec![vec![0]]);
        let p = TreeParameters {
            root_prior: vec![0.5, 0.5],
            cpts: BTreeMap::new(),
            gaussians: [(
                NodeId(1),
                vec![
                    DiagGaussian { mean: vec![-1.0], var: vec![1.0] },
                    DiagGaussian { mean: vec![1.0], var: vec![1.0] },
                ],
            )]
            .into(),
        };
        let post = CliqueTree::new(&s).posterior(&p, &[0.0]).unwrap();
        let expect = DiagGaussian { mean: vec![1.0], var: vec![1.0] }.log_density([0.0]);
        assert!((post.loglik - expect).abs() < 1e-14);
        for m in post.node_marginal(NodeId(0)).unwrap() {
            assert!((m - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn chain_matches_enumeration_for_each_pivot() {
        let (s, p) = chain();
        let z = [0.4, -1.2, 2.5];
        let (ll, m1) = brute_force(&s, &p, &z);
        for pivot in [NodeId(0), NodeId(1)] {
            let ct = CliqueTree::with_pivot(&s, pivot);
            let post = ct.posterior(&p, &z).unwrap();
            assert!((post.loglik - ll).abs() < 1e-12, "pivot {pivot}");
            for (a, b) in post.node_marginal(NodeId(1)).unwrap().iter().zip(&m1) {
                assert!((a - b).abs() < 1e-12);
            }
            let edge = post.edge_marginal(NodeId(1)).unwrap();
            let col: Vec<f64> = (0..3).map(|j| edge[0][j] + edge[1][j]).collect();
            for (a, b) in col.iter().zip(&m1) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_single_gaussian() {
        let (s, p) = single_gaussian();
        let ct = CliqueTree::new(&s);
        let post = ct.posterior(&p, &[2.0]).unwrap();
        assert_eq!(ct.grad_z(&p, &[2.0], &post), vec![-2.0]);
        let post = ct.posterior(&p, &[0.0]).unwrap();
        assert_eq!(ct.grad_z(&p, &[0.0], &post), vec![0.0]);
    }

    #[test]
    fn stored_messages_are_normalized() {
        let (s, p) = chain();
        let ct = CliqueTree::new(&s);
        let mut msgs = Messages::new(&ct);
        ct.posterior_with(&p, &[30.0, -40.0, 25.0], &mut msgs).unwrap();
        for (_, m, scale) in msgs.upward(&ct).chain(msgs.downward(&ct)) {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(scale.is_finite());
        }
    }

    #[test]
    fn rejects_bad_evidence() {
        let (s, p) = chain();
        let ct = CliqueTree::new(&s);
        assert!(matches!(ct.posterior(&p, &[0.0, f64::NAN, 0.0]), Err(Error::NonFiniteEvidence(1))));
        assert!(matches!(ct.posterior(&p, &[0.0]), Err(Error::DimensionMismatch { .. })));
    }
}
