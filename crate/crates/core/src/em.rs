//! Parameter learning for a fixed tree: expected sufficient statistics,
//! closed-form M-step, batch EM and stepwise (online) EM.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::Rng as _;

use crate::error::Result;
use crate::inference::{CliqueTree, Messages, Posterior};
use crate::rng::{seeded, Rng};
use crate::tree::column_variances;
use crate::tree::{DiagGaussian, LatentStructure, NodeId, TreeParameters, VARIANCE_FLOOR};

/// Components whose expected weight falls below this are re-seeded.
pub const MIN_COMPONENT_WEIGHT: f64 = 1e-10;

pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Posterior-weighted moments of one pouch under one parent state.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub weight: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Expected sufficient statistics, laid out like [`TreeParameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    pub root_counts: Vec<f64>,
    /// Expected `(parent state, child state)` counts keyed by child latent.
    pub edge_counts: BTreeMap<NodeId, Vec<Vec<f64>>>,
    pub pouch_moments: BTreeMap<NodeId, Vec<Moments>>,
    pub n_effective: f64,
}

impl SufficientStats {
    pub fn zeros(structure: &LatentStructure) -> Self {
        let root = structure.root();
        let mut edge_counts = BTreeMap::new();
        for l in &structure.latents {
            if let Some(p) = l.parent {
                let pc = structure.card(p).unwrap_or(0);
                edge_counts.insert(l.id, vec![vec![0.0; l.card]; pc]);
            }
        }
        let mut pouch_moments = BTreeMap::new();
        for p in &structure.pouches {
            let pc = structure.card(p.parent).unwrap_or(0);
            let zero = Moments {
                weight: 0.0,
                first: vec![0.0; p.vars.len()],
                second: vec![0.0; p.vars.len()],
            };
            pouch_moments.insert(p.id, vec![zero; pc]);
        }
        SufficientStats {
            root_counts: vec![0.0; root.card],
            edge_counts,
            pouch_moments,
            n_effective: 0.0,
        }
    }

    /// Adds one datum's expected statistics.
    pub fn add_posterior(&mut self, ct: &CliqueTree, root: NodeId, posterior: &Posterior, z: &[f64]) {
        if let Some(m) = posterior.node_marginal(root) {
            for (c, p) in self.root_counts.iter_mut().zip(m) {
                *c += p;
            }
        }
        for (child, joint) in &posterior.edge_marginals {
            let acc = self.edge_counts.get_mut(child).expect("edge in stats");
            for (ra, rj) in acc.iter_mut().zip(joint) {
                for (a, j) in ra.iter_mut().zip(rj) {
                    *a += j;
                }
            }
        }
        for (u, slot) in ct.pouch_slots() {
            let post = &posterior.node_marginals[u];
            let moments = self.pouch_moments.get_mut(&slot.id).expect("pouch in stats");
            for (m, &w) in moments.iter_mut().zip(post) {
                m.weight += w;
                for (k, &v) in slot.vars.iter().enumerate() {
                    let x = z[v];
                    m.first[k] += w * x;
                    m.second[k] += w * x * x;
                }
            }
        }
        self.n_effective += 1.0;
    }

    fn zip_apply(&mut self, other: &SufficientStats, f: impl Fn(&mut f64, f64)) {
        for (a, b) in self.root_counts.iter_mut().zip(&other.root_counts) {
            f(a, *b);
        }
        for (id, rows) in &mut self.edge_counts {
            for (ra, rb) in rows.iter_mut().zip(&other.edge_counts[id]) {
                for (a, b) in ra.iter_mut().zip(rb) {
                    f(a, *b);
                }
            }
        }
        for (id, ms) in &mut self.pouch_moments {
            for (ma, mb) in ms.iter_mut().zip(&other.pouch_moments[id]) {
                f(&mut ma.weight, mb.weight);
                for (a, b) in ma.first.iter_mut().zip(&mb.first) {
                    f(a, *b);
                }
                for (a, b) in ma.second.iter_mut().zip(&mb.second) {
                    f(a, *b);
                }
            }
        }
        f(&mut self.n_effective, other.n_effective);
    }

    fn map(&mut self, f: impl Fn(f64) -> f64) {
        let copy = self.clone();
        self.zip_apply(&copy, |a, _| *a = f(*a));
    }

    /// Elementwise sum; shapes must agree.
    pub fn merge(&mut self, other: &SufficientStats) {
        self.zip_apply(other, |a, b| *a += b);
    }

    pub fn scaled(&self, factor: f64) -> SufficientStats {
        let mut s = self.clone();
        s.map(|x| x * factor);
        s
    }

    /// Cauchy–Schwarz consistency of the accumulated moments.
    pub fn is_consistent(&self) -> bool {
        self.pouch_moments.values().flatten().all(|m| {
            m.weight >= 0.0
                && (m.weight <= 1e-12
                    || m.first
                        .iter()
                        .zip(&m.second)
                        .all(|(f, s)| *s >= f * f / m.weight - 1e-9))
        })
    }
}

/// Expected statistics of one evidence vector.
pub fn expected_stats(structure: &LatentStructure, params: &TreeParameters, z: &[f64]) -> Result<SufficientStats> {
    let ct = CliqueTree::new(structure);
    let post = ct.posterior(params, z)?;
    let mut stats = SufficientStats::zeros(structure);
    stats.add_posterior(&ct, structure.root().id, &post, z);
    Ok(stats)
}

/// Statistics summed over every row of `data`, in row order, together with
/// the total loglikelihood of `data`.
pub fn accumulate_stats(
    structure: &LatentStructure,
    params: &TreeParameters,
    data: ArrayView2<f64>,
) -> Result<(SufficientStats, f64)> {
    let ct = CliqueTree::new(structure);
    let root = structure.root().id;
    let mut msgs = Messages::new(&ct);
    let mut stats = SufficientStats::zeros(structure);
    let mut total = 0.0;
    let mut z = vec![0.0; data.ncols()];
    for row in data.rows() {
        z.iter_mut().zip(row).for_each(|(a, b)| *a = *b);
        let post = ct.posterior_with(params, &z, &mut msgs)?;
        total += post.loglik;
        stats.add_posterior(&ct, root, &post, &z);
    }
    Ok((stats, total))
}

/// Total loglikelihood of every row of `data`.
pub fn dataset_loglik(structure: &LatentStructure, params: &TreeParameters, data: ArrayView2<f64>) -> Result<f64> {
    let ct = CliqueTree::new(structure);
    let mut msgs = Messages::new(&ct);
    let mut total = 0.0;
    let mut z = vec![0.0; data.ncols()];
    for row in data.rows() {
        z.iter_mut().zip(row).for_each(|(a, b)| *a = *b);
        total += ct.collect(params, &z, &mut msgs)?;
    }
    Ok(total)
}

/// Why the M-step replaced part of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum RepairEvent {
    /// A pouch component had (near) zero weight and was re-seeded.
    Component { pouch: NodeId, state: usize },
    /// A CPT row had no mass and was reset to uniform.
    CptRow { latent: NodeId, row: usize },
}

/// Source of replacement means and variances for empty components.
pub struct RepairPool<'a> {
    data: ArrayView2<'a, f64>,
    variances: Vec<f64>,
    rng: Rng,
}

impl<'a> RepairPool<'a> {
    pub fn new(data: ArrayView2<'a, f64>, seed: u64) -> Self {
        RepairPool {
            variances: column_variances(data),
            data,
            rng: seeded(seed),
        }
    }

    fn reseed(&mut self, vars: &[usize]) -> DiagGaussian {
        let r = self.rng.random_range(0..self.data.nrows());
        DiagGaussian {
            mean: vars.iter().map(|&v| self.data[(r, v)]).collect(),
            var: vars.iter().map(|&v| self.variances[v]).collect(),
        }
    }
}

fn normalized(counts: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = counts.iter().sum();
    if !(s > MIN_COMPONENT_WEIGHT) {
        return None;
    }
    let mut p: Vec<f64> = counts.iter().map(|c| (c / s).max(0.0)).collect();
    // Renormalize after clamping so rows sum to one to rounding.
    let t: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= t);
    Some(p)
}

/// Closed-form maximizer of the expected complete-data loglikelihood.
/// Empty components are re-seeded from `pool` (or reset to a unit Gaussian at
/// the origin without one); each replacement is reported.
pub fn mstep(
    stats: &SufficientStats,
    structure: &LatentStructure,
    mut pool: Option<&mut RepairPool<'_>>,
) -> (TreeParameters, Vec<RepairEvent>) {
    let mut repairs = Vec::new();
    let root = structure.root();
    let root_prior = normalized(&stats.root_counts)
        .unwrap_or_else(|| vec![1.0 / root.card as f64; root.card]);

    let mut cpts = BTreeMap::new();
    for (id, rows) in &stats.edge_counts {
        let card = rows.first().map_or(0, |r| r.len());
        let table = rows
            .iter()
            .enumerate()
            .map(|(r, counts)| {
                normalized(counts).unwrap_or_else(|| {
                    repairs.push(RepairEvent::CptRow { latent: *id, row: r });
                    vec![1.0 / card as f64; card]
                })
            })
            .collect();
        cpts.insert(*id, table);
    }

    let mut gaussians = BTreeMap::new();
    for p in &structure.pouches {
        let moments = &stats.pouch_moments[&p.id];
        let comps = moments
            .iter()
            .enumerate()
            .map(|(state, m)| {
                if m.weight > MIN_COMPONENT_WEIGHT {
                    let mean: Vec<f64> = m.first.iter().map(|f| f / m.weight).collect();
                    let var = m
                        .second
                        .iter()
                        .zip(&mean)
                        .map(|(s, mu)| (s / m.weight - mu * mu).max(VARIANCE_FLOOR))
                        .collect();
                    DiagGaussian { mean, var }
                } else {
                    repairs.push(RepairEvent::Component { pouch: p.id, state });
                    match pool.as_deref_mut() {
                        Some(pool) => pool.reseed(&p.vars),
                        None => DiagGaussian {
                            mean: vec![0.0; p.vars.len()],
                            var: vec![1.0; p.vars.len()],
                        },
                    }
                }
            })
            .collect();
        gaussians.insert(p.id, comps);
    }
    (
        TreeParameters {
            root_prior,
            cpts,
            gaussians,
        },
        repairs,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Seed for component repairs.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmRun {
    pub params: TreeParameters,
    /// Loglikelihood of the data before the first M-step and after each one;
    /// the last entry belongs to `params`.
    pub trace: Vec<f64>,
    pub repairs: Vec<RepairEvent>,
}

impl EmRun {
    pub fn loglik(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Batch EM from `params0` until `max_iters` M-steps or an improvement below
/// `tol`.
pub fn batch_em(
    structure: &LatentStructure,
    params0: &TreeParameters,
    data: ArrayView2<f64>,
    config: &EmConfig,
) -> Result<EmRun> {
    let mut pool = RepairPool::new(data, config.seed);
    let mut params = params0.clone();
    let (mut stats, mut ll) = accumulate_stats(structure, &params, data)?;
    let mut trace = vec![ll];
    let mut repairs = Vec::new();
    for _ in 0..config.max_iters {
        let (next, fixes) = mstep(&stats, structure, Some(&mut pool));
        repairs.extend(fixes);
        let (next_stats, next_ll) = accumulate_stats(structure, &next, data)?;
        trace.push(next_ll);
        params = next;
        stats = next_stats;
        let improvement = next_ll - ll;
        ll = next_ll;
        if improvement < config.tol {
            break;
        }
    }
    Ok(EmRun { params, trace, repairs })
}

/// One stepwise-EM move: `acc ← acc + η (N · mean(batch) − acc)`, followed by
/// an M-step on the new accumulator. Keeping the accumulator at dataset
/// scale lets the same rate be used for any mini-batch size.
pub fn stepwise_update(
    accumulator: &SufficientStats,
    batch_stats: &SufficientStats,
    eta: f64,
    dataset_size: usize,
    structure: &LatentStructure,
    pool: Option<&mut RepairPool<'_>>,
) -> (SufficientStats, TreeParameters, Vec<RepairEvent>) {
    let target = if batch_stats.n_effective > 0.0 {
        batch_stats.scaled(dataset_size as f64 / batch_stats.n_effective)
    } else {
        accumulator.clone()
    };
    let mut acc = accumulator.clone();
    acc.zip_apply(&target, |a, t| *a = (1.0 - eta) * *a + eta * t);
    let (params, repairs) = mstep(&acc, structure, pool);
    (acc, params, repairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sym_model() -> (LatentStructure, TreeParameters) {
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
        (s, p)
    }

    #[test]
    fn card_one_stats_are_raw_moments() {
        let s = LatentStructure::single_latent(1, vec![vec![0, 1]]);
        let p = TreeParameters {
            root_prior: vec![1.0],
            cpts: BTreeMap::new(),
            gaussians: [(NodeId(1), vec![DiagGaussian { mean: vec![0.0, 0.0], var: vec![1.0, 1.0] }])].into(),
        };
        let st = expected_stats(&s, &p, &[1.5, -2.0]).unwrap();
        let m = &st.pouch_moments[&NodeId(1)][0];
        assert_eq!(m.weight, 1.0);
        assert_eq!(m.first, vec![1.5, -2.0]);
        assert_eq!(m.second, vec![2.25, 4.0]);
        assert_eq!(st.n_effective, 1.0);
    }

    #[test]
    fn symmetry_point_splits_weight() {
        let (s, p) = sym_model();
        let st = expected_stats(&s, &p, &[0.0]).unwrap();
        for m in &st.pouch_moments[&NodeId(1)] {
            assert!((m.weight - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn root_counts_normalize() {
        let (s, _) = sym_model();
        let mut st = SufficientStats::zeros(&s);
        st.root_counts = vec![3.0, 1.0];
        for m in st.pouch_moments.get_mut(&NodeId(1)).unwrap() {
            m.weight = 2.0;
            m.first = vec![1.0];
            m.second = vec![4.0];
        }
        let (p, repairs) = mstep(&st, &s, None);
        assert_eq!(p.root_prior, vec![0.75, 0.25]);
        assert!(repairs.is_empty());
        assert_eq!(p.gaussians[&NodeId(1)][0].mean, vec![0.5]);
        assert!((p.gaussians[&NodeId(1)][0].var[0] - 1.75).abs() < 1e-15);
    }

    #[test]
    fn single_gaussian_mle_with_floor() {
        let s = LatentStructure::single_latent(1, vec![vec![0, 1]]);
        let data = Array2::from_shape_vec((4, 2), vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 6.0, 5.0]).unwrap();
        let p0 = crate::tree::init_random(&s, data.view(), 0).unwrap();
        let (st, _) = accumulate_stats(&s, &p0, data.view()).unwrap();
        let (p, _) = mstep(&st, &s, None);
        let g = &p.gaussians[&NodeId(1)][0];
        assert!((g.mean[0] - 3.0).abs() < 1e-12);
        assert!((g.var[0] - 3.5).abs() < 1e-12);
        assert_eq!(g.mean[1], 5.0);
        assert_eq!(g.var[1], VARIANCE_FLOOR);
    }

    #[test]
    fn empty_component_is_reseeded() {
        let (s, _) = sym_model();
        let mut st = SufficientStats::zeros(&s);
        st.root_counts = vec![4.0, 0.0];
        let m = &mut st.pouch_moments.get_mut(&NodeId(1)).unwrap()[0];
        m.weight = 4.0;
        m.first = vec![4.0];
        m.second = vec![8.0];
        let data = Array2::from_shape_vec((3, 1), vec![7.0, 7.0, 7.0]).unwrap();
        let mut pool = RepairPool::new(data.view(), 1);
        let (p, repairs) = mstep(&st, &s, Some(&mut pool));
        assert_eq!(repairs, vec![RepairEvent::Component { pouch: NodeId(1), state: 1 }]);
        assert_eq!(p.gaussians[&NodeId(1)][1].mean, vec![7.0]);
        assert_eq!(p.gaussians[&NodeId(1)][1].var, vec![VARIANCE_FLOOR]);
        crate::tree::validate(&s, &p).unwrap();
    }

    #[test]
    fn stepwise_extremes() {
        let (s, p) = sym_model();
        let data = Array2::from_shape_vec((4, 1), vec![-1.2, -0.8, 0.9, 1.3]).unwrap();
        let (full, _) = accumulate_stats(&s, &p, data.view()).unwrap();
        let (batch, _) = accumulate_stats(&s, &p, data.slice(ndarray::s![0..2, ..])).unwrap();

        let (acc1, _, _) = stepwise_update(&full, &batch, 1.0, 4, &s, None);
        assert_eq!(acc1, batch.scaled(2.0));
        let (acc0, p0, _) = stepwise_update(&full, &batch, 0.0, 4, &s, None);
        assert_eq!(acc0, full);
        assert_eq!(p0, mstep(&full, &s, None).0);
    }

    #[test]
    fn converged_start_stops_quickly() {
        let (s, p) = sym_model();
        let data = Array2::from_shape_vec((6, 1), vec![-1.5, -1.0, -0.5, 0.5, 1.0, 1.5]).unwrap();
        let cfg = EmConfig { max_iters: 500, tol: 1e-10, seed: 0 };
        let run = batch_em(&s, &p, data.view(), &cfg).unwrap();
        let again = batch_em(&s, &run.params, data.view(), &EmConfig { tol: 1e-4, ..cfg }).unwrap();
        assert!(again.trace.len() <= 2);
        assert!((again.trace[1] - again.trace[0]).abs() < 1e-4);
    }
}
