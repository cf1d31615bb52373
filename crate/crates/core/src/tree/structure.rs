use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Violation;

/// Identifier shared by latent and pouch nodes; unique within a structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentNode {
    pub id: NodeId,
    pub card: usize,
    /// `None` marks the root.
    pub parent: Option<NodeId>,
}

/// A leaf grouping one or more code dimensions under a latent parent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PouchNode {
    pub id: NodeId,
    pub vars: Vec<usize>,
    pub parent: NodeId,
}

/// Tree of discrete latents with pouch leaves. Node order inside the two
/// vectors carries no meaning; all links go through ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentStructure {
    pub latents: Vec<LatentNode>,
    pub pouches: Vec<PouchNode>,
}

impl LatentStructure {
    /// One latent of cardinality `card` over the given pouches. Latent id is
    /// 0; pouches get ids 1.. in order.
    pub fn single_latent(card: usize, pouch_vars: Vec<Vec<usize>>) -> Self {
        let root = NodeId(0);
        let pouches = pouch_vars
            .into_iter()
            .enumerate()
            .map(|(i, vars)| PouchNode {
                id: NodeId(i as u32 + 1),
                vars,
                parent: root,
            })
            .collect();
        LatentStructure {
            latents: vec![LatentNode {
                id: root,
                card,
                parent: None,
            }],
            pouches,
        }
    }

    /// The GMM-equivalent structure: one latent over `n_vars` singleton pouches.
    pub fn gmm(card: usize, n_vars: usize) -> Self {
        Self::single_latent(card, (0..n_vars).map(|v| vec![v]).collect())
    }

    /// The root latent. Panics on structures without a root; call
    /// [`validate`](Self::validate) first on untrusted input.
    pub fn root(&self) -> &LatentNode {
        self.latents
            .iter()
            .find(|l| l.parent.is_none())
            .expect("structure has no root latent")
    }

    pub fn latent(&self, id: NodeId) -> Option<&LatentNode> {
        self.latents.iter().find(|l| l.id == id)
    }

    pub fn latent_mut(&mut self, id: NodeId) -> Option<&mut LatentNode> {
        self.latents.iter_mut().find(|l| l.id == id)
    }

    pub fn pouch(&self, id: NodeId) -> Option<&PouchNode> {
        self.pouches.iter().find(|p| p.id == id)
    }

    pub fn card(&self, id: NodeId) -> Option<usize> {
        self.latent(id).map(|l| l.card)
    }

    pub fn child_latents(&self, id: NodeId) -> impl Iterator<Item = &LatentNode> {
        self.latents.iter().filter(move |l| l.parent == Some(id))
    }

    pub fn child_pouches(&self, id: NodeId) -> impl Iterator<Item = &PouchNode> {
        self.pouches.iter().filter(move |p| p.parent == id)
    }

    /// Number of code dimensions covered by the pouches.
    pub fn n_vars(&self) -> usize {
        self.pouches.iter().map(|p| p.vars.len()).sum()
    }

    /// Total number of (pouch, parent-state) Gaussian components.
    pub fn n_components(&self) -> usize {
        self.pouches
            .iter()
            .map(|p| self.card(p.parent).unwrap_or(0))
            .sum()
    }

    /// Smallest id not yet used by any node.
    pub fn next_id(&self) -> NodeId {
        let max = self
            .latents
            .iter()
            .map(|l| l.id.0)
            .chain(self.pouches.iter().map(|p| p.id.0))
            .max();
        NodeId(max.map_or(0, |m| m + 1))
    }

    /// True when `node` lies in the subtree rooted at latent `ancestor`
    /// (a node is its own descendant).
    pub fn is_descendant(&self, node: NodeId, ancestor: NodeId) -> bool {
        let mut cur = Some(node);
        let mut steps = 0;
        while let Some(id) = cur {
            if id == ancestor {
                return true;
            }
            cur = match self.latent(id) {
                Some(l) => l.parent,
                None => self.pouch(id).map(|p| p.parent),
            };
            steps += 1;
            if steps > self.latents.len() + 1 {
                return false;
            }
        }
        false
    }

    /// Structural invariants: single root, tree-shaped latent links, pouches
    /// attached to latents, pouches partition `0..J`, no orphan latents.
    pub fn validate(&self) -> Result<(), Violation> {
        let mut ids = BTreeSet::new();
        for id in self
            .latents
            .iter()
            .map(|l| l.id)
            .chain(self.pouches.iter().map(|p| p.id))
        {
            if !ids.insert(id) {
                return Err(Violation::duplicate_id(id));
            }
        }

        let roots: Vec<_> = self.latents.iter().filter(|l| l.parent.is_none()).collect();
        match roots.len() {
            0 => return Err(Violation::no_root()),
            1 => {}
            _ => return Err(Violation::multiple_roots(roots[1].id)),
        }

        let latent_ids: BTreeSet<NodeId> = self.latents.iter().map(|l| l.id).collect();
        for l in &self.latents {
            if l.card == 0 {
                return Err(Violation::zero_cardinality(l.id));
            }
            if let Some(p) = l.parent {
                if !latent_ids.contains(&p) {
                    return Err(Violation::unknown_parent(l.id, p));
                }
            }
        }

        // Every latent must reach the root without revisiting a node.
        let parent_of: BTreeMap<NodeId, Option<NodeId>> =
            self.latents.iter().map(|l| (l.id, l.parent)).collect();
        for l in &self.latents {
            let mut seen = BTreeSet::new();
            let mut cur = l.id;
            while let Some(Some(p)) = parent_of.get(&cur) {
                if !seen.insert(cur) {
                    return Err(Violation::cycle(l.id));
                }
                cur = *p;
            }
            if seen.contains(&cur) {
                return Err(Violation::cycle(l.id));
            }
        }

        let mut covered = BTreeSet::new();
        for p in &self.pouches {
            if p.vars.is_empty() {
                return Err(Violation::empty_pouch(p.id));
            }
            if !latent_ids.contains(&p.parent) {
                return Err(Violation::pouch_parent(p.id, p.parent));
            }
            for &v in &p.vars {
                if !covered.insert(v) {
                    return Err(Violation::variable_overlap(p.id, v));
                }
            }
        }
        if let Some(v) = (0..covered.len()).find(|v| !covered.contains(v)) {
            return Err(Violation::variable_gap(v));
        }

        for l in &self.latents {
            let has_neighbor = l.parent.is_some()
                || self.child_latents(l.id).next().is_some()
                || self.child_pouches(l.id).next().is_some();
            if !has_neighbor {
                return Err(Violation::orphan(l.id));
            }
        }
        Ok(())
    }

    /// Number of free parameters `d(m)`: root prior, CPT rows and per-state
    /// pouch means plus diagonal variances.
    pub fn count_parameters(&self) -> usize {
        let mut d = 0;
        for l in &self.latents {
            match l.parent {
                None => d += l.card - 1,
                Some(p) => d += self.card(p).unwrap_or(0) * (l.card - 1),
            }
        }
        for p in &self.pouches {
            d += self.card(p.parent).unwrap_or(0) * 2 * p.vars.len();
        }
        d
    }

    /// Canonical string form that ignores node ids and sibling order, used to
    /// test structures for isomorphism.
    pub fn canonical_form(&self) -> String {
        fn encode(s: &LatentStructure, id: NodeId) -> String {
            let l = s.latent(id).expect("latent");
            let mut parts: Vec<String> = s
                .child_pouches(id)
                .map(|p| {
                    let mut v = p.vars.clone();
                    v.sort_unstable();
                    format!("P{v:?}")
                })
                .collect();
            parts.extend(s.child_latents(id).map(|c| encode(s, c.id)));
            parts.sort();
            format!("L{}({})", l.card, parts.join(","))
        }
        encode(self, self.root().id)
    }

    /// Like [`canonical_form`](Self::canonical_form) but with all pouches of
    /// a latent merged. With diagonal pouch Gaussians, structures that agree
    /// here define the same family of distributions.
    pub fn family_form(&self) -> String {
        fn encode(s: &LatentStructure, id: NodeId) -> String {
            let l = s.latent(id).expect("latent");
            let mut vars: Vec<usize> = s.child_pouches(id).flat_map(|p| p.vars.iter().copied()).collect();
            vars.sort_unstable();
            let mut parts: Vec<String> = s.child_latents(id).map(|c| encode(s, c.id)).collect();
            parts.sort();
            format!("L{}{vars:?}({})", l.card, parts.join(","))
        }
        encode(self, self.root().id)
    }

    /// Facet summary used by logs, e.g. `0:2[1,2] 3:2[0,3]`: latent id,
    /// cardinality and the code dimensions of its pouches.
    pub fn describe(&self) -> String {
        let mut out = Vec::new();
        for l in &self.latents {
            let mut vars: Vec<usize> = self
                .child_pouches(l.id)
                .flat_map(|p| p.vars.iter().copied())
                .collect();
            vars.sort_unstable();
            let parent = l.parent.map_or("-".to_string(), |p| p.to_string());
            out.push(format!("{}:{}<{}>{:?}", l.id, l.card, parent, vars));
        }
        out.join(" ")
    }
}
