//! BIC hill climbing over latent tree structures.
//!
//! Seven operators propose neighbouring structures: node introduction and
//! deletion, state introduction and deletion, node relocation, pouching and
//! unpouching. Search alternates three phases (expand with SI/NI/PO, adjust
//! with NR, simplify with UP/ND/SD), accepting the best candidate of a phase
//! while it improves BIC, and stops once a full pass brings no improvement.
//!
//! Candidates are screened with a few short EM runs; only the phase winner
//! gets the full restart budget before the acceptance test.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::em::{batch_em, dataset_loglik, EmConfig};
use crate::error::Result;
use crate::rng::derive_seed;
use crate::tree::{init_random, LatentNode, LatentStructure, NodeId, PouchNode, TreeParameters};

/// Search operators, declared in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Operator {
    NodeIntroduction,
    StateIntroduction,
    Pouching,
    NodeRelocation,
    Unpouching,
    NodeDeletion,
    StateDeletion,
}

impl Operator {
    pub const ALL: [Operator; 7] = [
        Operator::NodeIntroduction,
        Operator::StateIntroduction,
        Operator::Pouching,
        Operator::NodeRelocation,
        Operator::Unpouching,
        Operator::NodeDeletion,
        Operator::StateDeletion,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Operator::NodeIntroduction => "NI",
            Operator::StateIntroduction => "SI",
            Operator::Pouching => "PO",
            Operator::NodeRelocation => "NR",
            Operator::Unpouching => "UP",
            Operator::NodeDeletion => "ND",
            Operator::StateDeletion => "SD",
        }
    }

    pub fn from_code(code: &str) -> Option<Operator> {
        Operator::ALL.into_iter().find(|op| op.code() == code)
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Phases of one search pass.
pub const PHASES: [&[Operator]; 3] = [
    &[Operator::StateIntroduction, Operator::NodeIntroduction, Operator::Pouching],
    &[Operator::NodeRelocation],
    &[Operator::Unpouching, Operator::NodeDeletion, Operator::StateDeletion],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    /// `None` for the unchanged structure.
    pub op: Option<Operator>,
    pub targets: Vec<NodeId>,
}

impl Provenance {
    pub fn identity() -> Self {
        Provenance {
            op: None,
            targets: Vec::new(),
        }
    }

    pub fn targets_str(&self) -> String {
        let ids: Vec<String> = self.targets.iter().map(|t| t.to_string()).collect();
        ids.join(",")
    }
}

/// An unparameterized neighbouring structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub structure: LatentStructure,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limits {
    pub max_card: usize,
    pub max_latents: usize,
}

impl Limits {
    pub fn for_structure(structure: &LatentStructure) -> Self {
        Limits {
            max_card: 20,
            max_latents: structure.n_vars().max(1),
        }
    }
}

fn proposal(op: Operator, targets: Vec<NodeId>, structure: LatentStructure) -> Option<Proposal> {
    structure.validate().ok()?;
    Some(Proposal {
        structure,
        provenance: Provenance { op: Some(op), targets },
    })
}

/// Children of a latent (latents then pouches), ids ascending.
fn children_of(s: &LatentStructure, id: NodeId) -> Vec<NodeId> {
    let mut c: Vec<NodeId> = s.child_latents(id).map(|l| l.id).collect();
    c.extend(s.child_pouches(id).map(|p| p.id));
    c.sort();
    c
}

fn set_parent(s: &mut LatentStructure, node: NodeId, parent: NodeId) {
    if let Some(l) = s.latent_mut(node) {
        l.parent = Some(parent);
    } else if let Some(p) = s.pouches.iter_mut().find(|p| p.id == node) {
        p.parent = parent;
    }
}

/// All applications of `op` whose primary target is `target`. Inapplicable
/// combinations give an empty list.
pub fn apply_operator(op: Operator, structure: &LatentStructure, target: NodeId, limits: &Limits) -> Vec<Proposal> {
    let s = structure;
    let mut out = Vec::new();
    let is_latent = s.latent(target).is_some();
    match op {
        Operator::NodeIntroduction => {
            if !is_latent || s.latents.len() >= limits.max_latents {
                return out;
            }
            let kids = children_of(s, target);
            let new_id = s.next_id();
            for i in 0..kids.len() {
                for j in i + 1..kids.len() {
                    let mut t = s.clone();
                    t.latents.push(LatentNode {
                        id: new_id,
                        card: 2,
                        parent: Some(target),
                    });
                    set_parent(&mut t, kids[i], new_id);
                    set_parent(&mut t, kids[j], new_id);
                    out.extend(proposal(op, vec![target, kids[i], kids[j]], t));
                }
            }
        }
        Operator::NodeDeletion => {
            let Some(parent) = s.latent(target).and_then(|l| l.parent) else {
                return out;
            };
            let mut t = s.clone();
            for c in children_of(s, target) {
                set_parent(&mut t, c, parent);
            }
            t.latents.retain(|l| l.id != target);
            out.extend(proposal(op, vec![target], t));
        }
        Operator::StateIntroduction => {
            if let Some(l) = s.latent(target) {
                if l.card < limits.max_card {
                    let mut t = s.clone();
                    t.latent_mut(target).expect("latent").card += 1;
                    out.extend(proposal(op, vec![target], t));
                }
            }
        }
        Operator::StateDeletion => {
            if let Some(l) = s.latent(target) {
                if l.card > 2 {
                    let mut t = s.clone();
                    t.latent_mut(target).expect("latent").card -= 1;
                    out.extend(proposal(op, vec![target], t));
                }
            }
        }
        Operator::NodeRelocation => {
            let current_parent = match (s.latent(target), s.pouch(target)) {
                (Some(l), _) => match l.parent {
                    Some(p) => p,
                    None => return out,
                },
                (None, Some(p)) => p.parent,
                (None, None) => return out,
            };
            let mut hosts: Vec<NodeId> = s
                .latents
                .iter()
                .map(|l| l.id)
                .filter(|&h| h != current_parent && h != target)
                .filter(|&h| !is_latent || !s.is_descendant(h, target))
                .collect();
            hosts.sort();
            for h in hosts {
                let mut t = s.clone();
                set_parent(&mut t, target, h);
                out.extend(proposal(op, vec![target, h], t));
            }
        }
        Operator::Pouching => {
            let Some(p) = s.pouch(target) else { return out };
            let mut siblings: Vec<&PouchNode> = s
                .child_pouches(p.parent)
                .filter(|q| q.id > p.id)
                .collect();
            siblings.sort_by_key(|q| q.id);
            let new_id = s.next_id();
            for q in siblings {
                let mut vars: Vec<usize> = p.vars.iter().chain(&q.vars).copied().collect();
                vars.sort_unstable();
                let mut t = s.clone();
                t.pouches.retain(|x| x.id != p.id && x.id != q.id);
                t.pouches.push(PouchNode {
                    id: new_id,
                    vars,
                    parent: p.parent,
                });
                out.extend(proposal(op, vec![p.id, q.id], t));
            }
        }
        Operator::Unpouching => {
            let Some(p) = s.pouch(target) else { return out };
            if p.vars.len() < 2 {
                return out;
            }
            let new_id = s.next_id();
            let mut vars = p.vars.clone();
            vars.sort_unstable();
            for v in vars {
                let mut t = s.clone();
                let idx = t.pouches.iter().position(|x| x.id == p.id).expect("pouch");
                t.pouches[idx].vars.retain(|&x| x != v);
                t.pouches.push(PouchNode {
                    id: new_id,
                    vars: vec![v],
                    parent: p.parent,
                });
                out.extend(proposal(op, vec![p.id, new_id], t));
            }
        }
    }
    out
}

/// Every application of `op` to `structure`, ordered by targets.
pub fn enumerate(op: Operator, structure: &LatentStructure, limits: &Limits) -> Vec<Proposal> {
    let mut ids: Vec<NodeId> = match op {
        Operator::Pouching | Operator::Unpouching => structure.pouches.iter().map(|p| p.id).collect(),
        Operator::NodeRelocation => structure
            .latents
            .iter()
            .map(|l| l.id)
            .chain(structure.pouches.iter().map(|p| p.id))
            .collect(),
        _ => structure.latents.iter().map(|l| l.id).collect(),
    };
    ids.sort();
    let mut out: Vec<Proposal> = ids
        .into_iter()
        .flat_map(|id| apply_operator(op, structure, id, limits))
        .collect();
    out.sort_by(|a, b| a.provenance.targets.cmp(&b.provenance.targets));
    out
}

/// `log P(D | m, θ) − d(m)/2 · log N`.
pub fn bic_score(structure: &LatentStructure, params: &TreeParameters, data: ArrayView2<f64>) -> Result<f64> {
    let ll = dataset_loglik(structure, params, data)?;
    Ok(bic_from_loglik(ll, structure.count_parameters(), data.nrows()))
}

pub fn bic_from_loglik(loglik: f64, n_params: usize, n_rows: usize) -> f64 {
    loglik - n_params as f64 / 2.0 * (n_rows as f64).ln()
}

/// Copies parameters from `old` into `fresh` wherever they still mean the
/// same thing in `new`: same parent latent and, state by state, the same
/// parent state index. Pouch Gaussians are inherited per dimension, so
/// pouching and unpouching keep every mean and variance.
pub fn inherit_parameters(
    new: &LatentStructure,
    mut fresh: TreeParameters,
    old_structure: &LatentStructure,
    old: &TreeParameters,
) -> TreeParameters {
    let root = new.root();
    if old_structure.root().id == root.id {
        fresh.root_prior = blend_row(&old.root_prior, &fresh.root_prior);
    }
    for l in &new.latents {
        let Some(parent) = l.parent else { continue };
        let Some(ol) = old_structure.latent(l.id) else { continue };
        if ol.parent != Some(parent) {
            continue;
        }
        let (Some(old_table), Some(table)) = (old.cpts.get(&l.id), fresh.cpts.get_mut(&l.id)) else {
            continue;
        };
        for (row, old_row) in table.iter_mut().zip(old_table) {
            *row = blend_row(old_row, row);
        }
    }
    for p in &new.pouches {
        let comps = fresh.gaussians.get_mut(&p.id).expect("fresh pouch");
        for (k, &v) in p.vars.iter().enumerate() {
            let Some(op) = old_structure.pouches.iter().find(|q| q.vars.contains(&v)) else {
                continue;
            };
            if op.parent != p.parent {
                continue;
            }
            let ok = op.vars.iter().position(|&x| x == v).expect("var");
            for (comp, old_comp) in comps.iter_mut().zip(&old.gaussians[&op.id]) {
                comp.mean[k] = old_comp.mean[ok];
                comp.var[k] = old_comp.var[ok];
            }
        }
    }
    fresh
}

/// Old probabilities where the state still exists, fresh mass for new
/// states, renormalized.
fn blend_row(old: &[f64], fresh: &[f64]) -> Vec<f64> {
    if old.len() == fresh.len() {
        return old.to_vec();
    }
    let n = fresh.len();
    let mut row: Vec<f64> = (0..n)
        .map(|k| if k < old.len() { old[k] } else { fresh[k] / n as f64 })
        .collect();
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|x| *x /= s);
    } else {
        row = fresh.to_vec();
    }
    row
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub restarts: usize,
    pub em_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

/// A parameterized, scored structure.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub structure: LatentStructure,
    pub params: TreeParameters,
    pub loglik: f64,
    pub bic: f64,
    pub provenance: Provenance,
}

impl Candidate {
    pub fn n_params(&self) -> usize {
        self.structure.count_parameters()
    }
}

/// Fits `proposal` with `restarts` EM runs, each started from the inherited
/// parameters with freshly drawn values elsewhere, and keeps the best run.
/// `extra_start` adds one more run from given parameters.
pub fn evaluate_candidate(
    proposal: &Proposal,
    base_structure: &LatentStructure,
    base_params: &TreeParameters,
    data: ArrayView2<f64>,
    config: &EvalConfig,
    extra_start: Option<&TreeParameters>,
) -> Result<Candidate> {
    let structure = &proposal.structure;
    let mut starts = Vec::with_capacity(config.restarts + 1);
    if let Some(p) = extra_start {
        starts.push(p.clone());
    }
    for r in 0..config.restarts.max(1) {
        let fresh = init_random(structure, data, derive_seed(config.seed, r as u64))?;
        starts.push(inherit_parameters(structure, fresh, base_structure, base_params));
    }
    // Identical starts give identical runs; fit each distinct start once.
    starts.dedup();
    let em = EmConfig {
        max_iters: config.em_iters,
        tol: config.tol,
        seed: derive_seed(config.seed, 0xE11),
    };
    let runs: Vec<_> = starts
        .par_iter()
        .map(|p| batch_em(structure, p, data, &em))
        .collect::<Result<Vec<_>>>()?;
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.loglik() > a.loglik() { b } else { a })
        .expect("at least one run");
    let loglik = best.loglik();
    Ok(Candidate {
        bic: bic_from_loglik(loglik, structure.count_parameters(), data.nrows()),
        structure: structure.clone(),
        params: best.params,
        loglik,
        provenance: proposal.provenance.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub screen_restarts: usize,
    pub screen_iters: usize,
    pub final_restarts: usize,
    pub final_iters: usize,
    pub tol: f64,
    pub max_phase_steps: usize,
    pub max_passes: usize,
    pub max_card: usize,
    /// Defaults to the code dimension when `None`.
    pub max_latents: Option<usize>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            screen_restarts: 4,
            screen_iters: 50,
            final_restarts: 10,
            final_iters: 200,
            tol: 1e-4,
            max_phase_steps: 50,
            max_passes: 50,
            max_card: 20,
            max_latents: None,
            seed: 0,
        }
    }
}

impl SearchConfig {
    fn limits(&self, structure: &LatentStructure) -> Limits {
        Limits {
            max_card: self.max_card,
            max_latents: self.max_latents.unwrap_or_else(|| structure.n_vars().max(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchStep {
    pub step: usize,
    pub op: Operator,
    pub targets: Vec<NodeId>,
    pub bic_before: f64,
    pub bic_after: f64,
}

impl fmt::Display for SearchStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.targets.iter().map(|t| t.to_string()).collect();
        write!(
            f,
            "step={} op={} target={} bic_before={} bic_after={}",
            self.step,
            self.op,
            ids.join(","),
            self.bic_before,
            self.bic_after
        )
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub structure: LatentStructure,
    pub params: TreeParameters,
    pub bic: f64,
    /// BIC of the starting model as given.
    pub initial_bic: f64,
    pub log: Vec<SearchStep>,
}

impl SearchOutcome {
    /// The search log in its line-oriented text form.
    pub fn log_text(&self) -> String {
        self.log.iter().map(|s| format!("{s}\n")).collect()
    }
}

fn bic_tie(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Deterministic winner: highest BIC, then fewer parameters, then operator
/// order, then lowest targets.
fn better(a: &Candidate, b: &Candidate) -> Ordering {
    if !bic_tie(a.bic, b.bic) {
        return a.bic.partial_cmp(&b.bic).unwrap_or(Ordering::Equal);
    }
    b.n_params()
        .cmp(&a.n_params())
        .then_with(|| b.provenance.op.cmp(&a.provenance.op))
        .then_with(|| b.provenance.targets.cmp(&a.provenance.targets))
}

/// Hill climbing from `(structure0, params0)`.
///
/// The start model is first refitted with the full EM budget so that it is
/// compared with candidates on equal footing.
pub fn search(
    structure0: &LatentStructure,
    params0: &TreeParameters,
    data: ArrayView2<f64>,
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    let initial_bic = bic_score(structure0, params0, data)?;
    let screen = |seed| EvalConfig {
        restarts: config.screen_restarts,
        em_iters: config.screen_iters,
        tol: config.tol,
        seed,
    };
    let refine = |seed| EvalConfig {
        restarts: config.final_restarts,
        em_iters: config.final_iters,
        tol: config.tol,
        seed,
    };

    let identity = Proposal {
        structure: structure0.clone(),
        provenance: Provenance::identity(),
    };
    let mut current = evaluate_candidate(
        &identity,
        structure0,
        params0,
        data,
        &EvalConfig {
            restarts: 1,
            ..refine(derive_seed(config.seed, 1))
        },
        None,
    )?;
    if current.bic < initial_bic {
        current = Candidate {
            params: params0.clone(),
            loglik: dataset_loglik(structure0, params0, data)?,
            bic: initial_bic,
            ..current
        };
    }

    // Model families already held by the search. Pouching and unpouching
    // stay inside a family, so their BIC differences are EM noise; skipping
    // visited families also rules out cycles.
    let mut visited = BTreeSet::from([current.structure.family_form()]);
    let mut log = Vec::new();
    let mut round: u64 = 0;
    for _ in 0..config.max_passes {
        let pass_start = current.bic;
        for phase in PHASES {
            for _ in 0..config.max_phase_steps {
                round += 1;
                let limits = config.limits(&current.structure);
                let mut proposals: Vec<Proposal> = phase
                    .iter()
                    .flat_map(|&op| enumerate(op, &current.structure, &limits))
                    .filter(|p| !visited.contains(&p.structure.family_form()))
                    .collect();
                proposals.sort_by(|a, b| {
                    a.provenance
                        .op
                        .cmp(&b.provenance.op)
                        .then_with(|| a.provenance.targets.cmp(&b.provenance.targets))
                });
                if proposals.is_empty() {
                    break;
                }
                let round_seed = derive_seed(config.seed, round << 16);
                let screened: Vec<Candidate> = proposals
                    .par_iter()
                    .enumerate()
                    .map(|(i, p)| {
                        evaluate_candidate(
                            p,
                            &current.structure,
                            &current.params,
                            data,
                            &screen(derive_seed(round_seed, i as u64)),
                            None,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let winner = screened
                    .into_iter()
                    .reduce(|a, b| if better(&b, &a) == Ordering::Greater { b } else { a })
                    .expect("non-empty");
                let winner_proposal = Proposal {
                    structure: winner.structure.clone(),
                    provenance: winner.provenance.clone(),
                };
                let refined = evaluate_candidate(
                    &winner_proposal,
                    &current.structure,
                    &current.params,
                    data,
                    &refine(derive_seed(round_seed, 0xF1)),
                    Some(&winner.params),
                )?;
                if refined.bic > current.bic && !bic_tie(refined.bic, current.bic) {
                    log.push(SearchStep {
                        step: log.len() + 1,
                        op: refined.provenance.op.expect("operator candidate"),
                        targets: refined.provenance.targets.clone(),
                        bic_before: current.bic,
                        bic_after: refined.bic,
                    });
                    visited.insert(refined.structure.family_form());
                    current = refined;
                } else {
                    break;
                }
            }
        }
        if !(current.bic > pass_start) {
            break;
        }
    }
    Ok(SearchOutcome {
        structure: current.structure,
        params: current.params,
        bic: current.bic,
        initial_bic,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits() -> Limits {
        Limits {
            max_card: 20,
            max_latents: 10,
        }
    }

    #[test]
    fn state_deletion_blocked_at_two() {
        let s = LatentStructure::gmm(2, 3);
        assert!(apply_operator(Operator::StateDeletion, &s, NodeId(0), &limits()).is_empty());
        let s3 = LatentStructure::gmm(3, 3);
        let out = apply_operator(Operator::StateDeletion, &s3, NodeId(0), &limits());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].structure.latents[0].card, 2);
    }

    #[test]
    fn root_is_not_deletable() {
        let s = LatentStructure::gmm(2, 3);
        assert!(apply_operator(Operator::NodeDeletion, &s, NodeId(0), &limits()).is_empty());
    }

    #[test]
    fn node_introduction_then_deletion_restores() {
        let s = LatentStructure::gmm(2, 4);
        let out = apply_operator(Operator::NodeIntroduction, &s, NodeId(0), &limits());
        assert_eq!(out.len(), 6);
        for p in out {
            let new_id = p.structure.latents.last().unwrap().id;
            let back = apply_operator(Operator::NodeDeletion, &p.structure, new_id, &limits());
            assert_eq!(back.len(), 1);
            assert_eq!(back[0].structure.canonical_form(), s.canonical_form());
        }
    }

    #[test]
    fn pouching_and_unpouching_are_inverse() {
        let s = LatentStructure::single_latent(2, vec![vec![0, 1], vec![2]]);
        let merged = apply_operator(Operator::Pouching, &s, NodeId(1), &limits());
        assert_eq!(merged.len(), 1);
        let m = &merged[0].structure;
        assert_eq!(m.pouches.len(), 1);
        assert_eq!(m.pouches[0].vars, vec![0, 1, 2]);
        let split = apply_operator(Operator::Unpouching, m, m.pouches[0].id, &limits());
        assert_eq!(split.len(), 3);
        assert!(split.iter().any(|p| p.structure.canonical_form() == s.canonical_form()));
    }

    #[test]
    fn relocation_keeps_tree() {
        let s = LatentStructure::gmm(2, 4);
        let ni = &apply_operator(Operator::NodeIntroduction, &s, NodeId(0), &limits())[0].structure;
        for p in enumerate(Operator::NodeRelocation, ni, &limits()) {
            p.structure.validate().unwrap();
        }
        // A latent cannot move below itself.
        let child = ni.latents[1].id;
        for p in apply_operator(Operator::NodeRelocation, ni, child, &limits()) {
            assert_ne!(p.provenance.targets[1], child);
        }
    }

    #[test]
    fn latent_cap_blocks_introduction() {
        let s = LatentStructure::gmm(2, 4);
        let lim = Limits {
            max_card: 3,
            max_latents: 1,
        };
        assert!(apply_operator(Operator::NodeIntroduction, &s, NodeId(0), &lim).is_empty());
        let s3 = LatentStructure::gmm(3, 4);
        assert!(apply_operator(Operator::StateIntroduction, &s3, NodeId(0), &lim).is_empty());
    }

    #[test]
    fn search_log_line_format() {
        let step = SearchStep {
            step: 1,
            op: Operator::NodeIntroduction,
            targets: vec![NodeId(0), NodeId(3), NodeId(4)],
            bic_before: -10.5,
            bic_after: -9.25,
        };
        assert_eq!(step.to_string(), "step=1 op=NI target=0,3,4 bic_before=-10.5 bic_after=-9.25");
    }
}
