//! Histories: the sampled objects, their validation, statistics and uniform
//! random generation by the recursive method.
//!
//! A history is an ordered rooted unary-binary tree whose nodes carry an
//! event (`S`, `D`, `L`, `T` or `Extant`) and a mapping to a species node
//! (a [`TreeView`] id: original-tree ids for unranked models, sliced-tree
//! ids for ranked ones). Its size is the number of `Extant` leaves; loss
//! leaves are materialized but do not count.

use num_bigint::BigUint;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::counting::CountTable;
use crate::grammar::{Grammar, Model, NtId, NtKind, Symbol};
use crate::species_tree::{Children, NodeId, SpeciesTree, TimeSlicedTree, TreeView};

/// Event label of a history node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    Speciation,
    Duplication,
    Loss,
    Transfer,
    Extant,
}

impl Event {
    pub fn code(self) -> &'static str {
        match self {
            Event::Speciation => "S",
            Event::Duplication => "D",
            Event::Loss => "L",
            Event::Transfer => "T",
            Event::Extant => "Extant",
        }
    }
}

/// One node of a history; children indices point into the history arena.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryNode {
    pub event: Event,
    /// Species (view) node this gene lives in.
    pub species: NodeId,
    pub children: Children,
    pub parent: Option<usize>,
}

/// An event-labeled, species-mapped ordered unary-binary tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct History {
    nodes: Vec<HistoryNode>,
    root: usize,
}

impl History {
    /// Assemble a history from raw parts; indices must be in range and
    /// parent/child links consistent.
    pub fn from_parts(nodes: Vec<HistoryNode>, root: usize) -> History {
        assert!(root < nodes.len());
        History { nodes, root }
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &HistoryNode {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[HistoryNode] {
        &self.nodes
    }

    /// Number of extant leaves (the history size).
    pub fn size(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.event == Event::Extant)
            .count()
    }

    /// Pre-order traversal from the root.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            out.push(i);
            match self.nodes[i].children {
                Children::Leaf => {}
                Children::Unary(c) => stack.push(c),
                Children::Binary(l, r) => {
                    stack.push(r);
                    stack.push(l);
                }
            }
        }
        out
    }

    /// Canonical byte encoding of (shape, events, species); two histories
    /// are structurally identical iff their keys match.
    pub fn structural_key(&self) -> Vec<u8> {
        fn rec(h: &History, i: usize, out: &mut Vec<u8>) {
            let n = &h.nodes[i];
            out.push(match n.event {
                Event::Speciation => b'S',
                Event::Duplication => b'D',
                Event::Loss => b'L',
                Event::Transfer => b'T',
                Event::Extant => b'E',
            });
            out.extend_from_slice(&(n.species as u32).to_le_bytes());
            match n.children {
                Children::Leaf => out.push(b'.'),
                Children::Unary(c) => {
                    out.push(b'(');
                    rec(h, c, out);
                    out.push(b')');
                }
                Children::Binary(l, r) => {
                    out.push(b'(');
                    rec(h, l, out);
                    rec(h, r, out);
                    out.push(b')');
                }
            }
        }
        let mut out = Vec::with_capacity(self.nodes.len() * 6);
        rec(self, self.root, &mut out);
        out
    }

    /// Event-annotated Newick serialization:
    /// leaves render as `[Event:species]`, internal nodes as
    /// `(child,…)[Event:species]`, with a trailing semicolon.
    pub fn to_annotated_newick(&self, view: &TreeView) -> String {
        fn rec(h: &History, view: &TreeView, i: usize, out: &mut String) {
            let n = &h.nodes[i];
            match n.children {
                Children::Leaf => {}
                Children::Unary(c) => {
                    out.push('(');
                    rec(h, view, c, out);
                    out.push(')');
                }
                Children::Binary(l, r) => {
                    out.push('(');
                    rec(h, view, l, out);
                    out.push(',');
                    rec(h, view, r, out);
                    out.push(')');
                }
            }
            out.push('[');
            out.push_str(n.event.code());
            out.push(':');
            out.push_str(view.label(n.species));
            out.push(']');
        }
        let mut out = String::new();
        rec(self, view, self.root, &mut out);
        out.push(';');
        out
    }
}

/// Event census of a history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Statistics {
    pub n_s: usize,
    pub n_d: usize,
    pub n_l: usize,
    pub n_t: usize,
    pub n_extant: usize,
    /// Evolutionary score: duplications + losses + transfers.
    pub score: usize,
}

pub fn statistics(history: &History) -> Statistics {
    let mut s = Statistics {
        n_s: 0,
        n_d: 0,
        n_l: 0,
        n_t: 0,
        n_extant: 0,
        score: 0,
    };
    for node in &history.nodes {
        match node.event {
            Event::Speciation => s.n_s += 1,
            Event::Duplication => s.n_d += 1,
            Event::Loss => s.n_l += 1,
            Event::Transfer => s.n_t += 1,
            Event::Extant => s.n_extant += 1,
        }
    }
    s.score = s.n_d + s.n_l + s.n_t;
    s
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Leaf carries an internal event or vice versa.
    ArityEventMismatch,
    /// Extant leaf mapped to an internal species node.
    ExtantSpeciesNotLeaf,
    /// Speciation node mapped to a species leaf.
    SpeciationAtLeaf,
    /// Speciation arity does not match the species node arity.
    SpeciationArity,
    /// Speciation children mapped to the wrong species.
    SpeciationChildSpecies,
    /// Duplication children species mismatch.
    DuplicationChildSpecies,
    /// Transfer left child not in the donor species.
    TransferLeftSpecies,
    /// Transfer receiver not incomparable with the donor.
    TransferReceiver,
    /// Transfer event in a duplication-loss model.
    TransferForbidden,
    /// Loss leaf not directly under a binary speciation.
    LossPlacement,
    /// Both speciation branches lost.
    DoubleLoss,
    /// Binary speciation without a loss in a speciation-loss model.
    MissingLoss,
}

/// First Definition-style violation found, with the node's path from the
/// root (`root`, `root.0`, `root.0.1`, …).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} at node {node} ({path})")]
pub struct Violation {
    pub node: usize,
    pub path: String,
    pub kind: ViolationKind,
}

/// Check every history constraint for `model` over `view`: event/arity
/// compatibility, species mappings of speciation, duplication and transfer
/// children, receiver incomparability (within-slice for ranked models) and
/// loss placement. Violations are data, not errors.
pub fn validate(history: &History, view: &TreeView, model: Model) -> Result<(), Violation> {
    fn fail(node: usize, path: &str, kind: ViolationKind) -> Result<(), Violation> {
        Err(Violation {
            node,
            path: path.to_string(),
            kind,
        })
    }

    fn walk(
        h: &History,
        view: &TreeView,
        model: Model,
        i: usize,
        path: &str,
    ) -> Result<(), Violation> {
        let n = h.node(i);
        match (n.event, n.children) {
            (Event::Extant, Children::Leaf) => {
                if !view.is_leaf(n.species) {
                    return fail(i, path, ViolationKind::ExtantSpeciesNotLeaf);
                }
                Ok(())
            }
            (Event::Loss, Children::Leaf) => {
                // a loss is the dying branch of a binary speciation
                let under_binary_speciation = n.parent.is_some_and(|p| {
                    h.node(p).event == Event::Speciation
                        && matches!(h.node(p).children, Children::Binary(..))
                });
                if !under_binary_speciation {
                    return fail(i, path, ViolationKind::LossPlacement);
                }
                Ok(())
            }
            (Event::Speciation, Children::Unary(c)) => match view.children(n.species) {
                Children::Unary(uc) => {
                    if h.node(c).species != uc {
                        return fail(i, path, ViolationKind::SpeciationChildSpecies);
                    }
                    if h.node(c).event == Event::Loss {
                        return fail(c, &format!("{path}.0"), ViolationKind::LossPlacement);
                    }
                    walk(h, view, model, c, &format!("{path}.0"))
                }
                Children::Leaf => fail(i, path, ViolationKind::SpeciationAtLeaf),
                Children::Binary(..) => fail(i, path, ViolationKind::SpeciationArity),
            },
            (Event::Speciation, Children::Binary(l, r)) => {
                match view.children(n.species) {
                    Children::Binary(ul, ur) => {
                        if h.node(l).species != ul || h.node(r).species != ur {
                            return fail(i, path, ViolationKind::SpeciationChildSpecies);
                        }
                        let losses = [l, r]
                            .iter()
                            .filter(|&&c| h.node(c).event == Event::Loss)
                            .count();
                        if losses == 2 {
                            return fail(i, path, ViolationKind::DoubleLoss);
                        }
                        if model.forced_speciation_loss() && losses == 0 {
                            return fail(i, path, ViolationKind::MissingLoss);
                        }
                    }
                    Children::Leaf => return fail(i, path, ViolationKind::SpeciationAtLeaf),
                    Children::Unary(_) => return fail(i, path, ViolationKind::SpeciationArity),
                }
                walk(h, view, model, l, &format!("{path}.0"))?;
                walk(h, view, model, r, &format!("{path}.1"))
            }
            (Event::Duplication, Children::Binary(l, r)) => {
                if h.node(l).species != n.species || h.node(r).species != n.species {
                    return fail(i, path, ViolationKind::DuplicationChildSpecies);
                }
                for (c, leg) in [(l, "0"), (r, "1")] {
                    if h.node(c).event == Event::Loss {
                        return fail(c, &format!("{path}.{leg}"), ViolationKind::LossPlacement);
                    }
                }
                walk(h, view, model, l, &format!("{path}.0"))?;
                walk(h, view, model, r, &format!("{path}.1"))
            }
            (Event::Transfer, Children::Binary(l, r)) => {
                if !model.has_transfer() {
                    return fail(i, path, ViolationKind::TransferForbidden);
                }
                if h.node(l).species != n.species {
                    return fail(i, path, ViolationKind::TransferLeftSpecies);
                }
                if !view.is_incomparable(n.species, h.node(r).species) {
                    return fail(i, path, ViolationKind::TransferReceiver);
                }
                for (c, leg) in [(l, "0"), (r, "1")] {
                    if h.node(c).event == Event::Loss {
                        return fail(c, &format!("{path}.{leg}"), ViolationKind::LossPlacement);
                    }
                }
                walk(h, view, model, l, &format!("{path}.0"))?;
                walk(h, view, model, r, &format!("{path}.1"))
            }
            _ => fail(i, path, ViolationKind::ArityEventMismatch),
        }
    }

    walk(history, view, model, history.root(), "root")
}

/// Remap a ranked history's species to original species-tree ids (inserted
/// unary nodes map to the edge's lower endpoint). The returned history keeps
/// its unary-binary structure and is meant for time-consistency analysis,
/// not for re-validation against the unranked grammar.
pub fn project_to_species(history: &History, sliced: &TimeSlicedTree) -> History {
    let nodes = history
        .nodes
        .iter()
        .map(|n| HistoryNode {
            species: sliced.original_carrier(n.species),
            ..n.clone()
        })
        .collect();
    History {
        nodes,
        root: history.root,
    }
}

/// A history is time inconsistent iff some gene has an ancestor gene in
/// species `v` and a descendant gene in a species that is a strict ancestor
/// of `v`: the transfers would force travel back in time. Species ids must
/// be unranked tree ids.
pub fn is_time_consistent(history: &History, tree: &SpeciesTree) -> bool {
    fn rec(h: &History, tree: &SpeciesTree, i: usize, stack: &mut Vec<NodeId>) -> bool {
        let species = h.node(i).species;
        if stack
            .iter()
            .any(|&anc| tree.is_strict_ancestor(species, anc))
        {
            return false;
        }
        stack.push(species);
        let ok = match h.node(i).children {
            Children::Leaf => true,
            Children::Unary(c) => rec(h, tree, c, stack),
            Children::Binary(l, r) => rec(h, tree, l, stack) && rec(h, tree, r, stack),
        };
        stack.pop();
        ok
    }
    rec(history, tree, history.root(), &mut Vec::new())
}

// ---------------------------------------------------------------------------
// Uniform sampling (recursive method)
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("no history of size {n} exists (count is zero)")]
    ZeroCount { n: usize },
    #[error("count table covers sizes up to {max}, requested {n}")]
    TableTooSmall { n: usize, max: usize },
}

/// Probe counters for the complexity contract of one draw.
#[derive(Debug, Default, Clone, Copy)]
pub struct SampleTrace {
    /// Weights examined while scanning size splits in boustrophedon order
    /// and receivers within a slice.
    pub probes: u64,
}

/// Draw a uniform random history of size `n`. Deterministic for a fixed
/// `(grammar, table, n, seed)`.
pub fn sample(
    grammar: &Grammar,
    table: &CountTable,
    n: usize,
    seed: u64,
) -> Result<History, SampleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(grammar, table, n, &mut rng)
}

/// As [`sample`], reusing a caller-owned generator (for sample streams).
pub fn sample_with_rng<R: Rng + ?Sized>(
    grammar: &Grammar,
    table: &CountTable,
    n: usize,
    rng: &mut R,
) -> Result<History, SampleError> {
    sample_traced(grammar, table, n, rng).map(|(h, _)| h)
}

/// As [`sample_with_rng`], also returning probe counts.
pub fn sample_traced<R: Rng + ?Sized>(
    grammar: &Grammar,
    table: &CountTable,
    n: usize,
    rng: &mut R,
) -> Result<(History, SampleTrace), SampleError> {
    if n > table.max_size() {
        return Err(SampleError::TableTooSmall {
            n,
            max: table.max_size(),
        });
    }
    let total = table.nt_count(grammar.start(), n);
    if total.is_zero() {
        return Err(SampleError::ZeroCount { n });
    }
    debug_assert!(
        !grammar.model().has_transfer() || table.has_incomparable_sums(),
        "transfer sampling needs cached incomparable sums"
    );
    let mut ctx = Sampler {
        grammar,
        table,
        rng,
        nodes: Vec::new(),
        trace: SampleTrace::default(),
    };
    let r = ctx.uniform_below(total);
    let root = ctx.nonterminal(grammar.start(), n, r);
    ctx.nodes[root].parent = None;
    let history = History {
        nodes: ctx.nodes,
        root,
    };
    let trace = ctx.trace;
    Ok((history, trace))
}

struct Sampler<'a, R: Rng + ?Sized> {
    grammar: &'a Grammar,
    table: &'a CountTable,
    rng: &'a mut R,
    nodes: Vec<HistoryNode>,
    trace: SampleTrace,
}

impl<'a, R: Rng + ?Sized> Sampler<'a, R> {
    /// Uniform draw in `[0, bound)` by rejection on 32-bit chunks.
    fn uniform_below(&mut self, bound: &BigUint) -> BigUint {
        debug_assert!(!bound.is_zero());
        let bits = bound.bits();
        let chunks = bits.div_ceil(32) as usize;
        let top_bits = bits % 32;
        loop {
            let mut digits: Vec<u32> = (0..chunks).map(|_| self.rng.gen()).collect();
            if top_bits != 0 {
                digits[chunks - 1] &= (1u32 << top_bits) - 1;
            }
            let x = BigUint::new(digits);
            if &x < bound {
                return x;
            }
        }
    }

    fn push(&mut self, event: Event, species: NodeId, children: Children) -> usize {
        let id = self.nodes.len();
        self.nodes.push(HistoryNode {
            event,
            species,
            children,
            parent: None,
        });
        match children {
            Children::Leaf => {}
            Children::Unary(c) => self.nodes[c].parent = Some(id),
            Children::Binary(l, r) => {
                self.nodes[l].parent = Some(id);
                self.nodes[r].parent = Some(id);
            }
        }
        id
    }

    /// Expand nonterminal `nt` at size `n`; `r` is uniform on
    /// `[0, count(nt, n))` and residuals are reused down the recursion, so
    /// every choice is made with its exact counting weight and the overall
    /// draw stays uniform.
    fn nonterminal(&mut self, nt: NtId, n: usize, mut r: BigUint) -> usize {
        let def = self.grammar.nt(nt);
        match def.kind {
            NtKind::H => {
                for alt in &def.alts {
                    let w = match alt.as_slice() {
                        [Symbol::Extant] => {
                            if n == 1 {
                                BigUint::from(1u32)
                            } else {
                                BigUint::zero()
                            }
                        }
                        [Symbol::Nt(child)] => self.table.nt_count(*child, n).clone(),
                        _ => unreachable!("H alternatives are single symbols"),
                    };
                    if r < w {
                        return match alt.as_slice() {
                            [Symbol::Extant] => {
                                self.push(Event::Extant, def.species, Children::Leaf)
                            }
                            [Symbol::Nt(child)] => self.nonterminal(*child, n, r),
                            _ => unreachable!(),
                        };
                    }
                    r -= w;
                }
                unreachable!("residual exceeded the nonterminal count");
            }
            NtKind::S => self.speciation(nt, n, r),
            NtKind::D => {
                let species = def.species;
                let h = self.grammar.h_of(species);
                let (m, ra, rb) = self.split_product(h, h, n, r);
                let left = self.nonterminal(h, m, ra);
                let right = self.nonterminal(h, n - m, rb);
                self.push(Event::Duplication, species, Children::Binary(left, right))
            }
            NtKind::T => self.transfer(nt, n, r),
        }
    }

    /// Pick a speciation alternative with probability proportional to its
    /// count. The both-children alternative's weight is derived as the total
    /// minus the loss alternatives, avoiding a convolution rescan.
    fn speciation(&mut self, nt: NtId, n: usize, mut r: BigUint) -> usize {
        let def = self.grammar.nt(nt);
        let species = def.species;
        let total = self.table.nt_count(nt, n).clone();
        let mut weights: Vec<Option<BigUint>> = Vec::with_capacity(def.alts.len());
        let mut singles_sum = BigUint::zero();
        let mut product_at: Option<usize> = None;
        for (i, alt) in def.alts.iter().enumerate() {
            let nt_factors = alt
                .iter()
                .filter(|s| matches!(s, Symbol::Nt(_)))
                .count();
            if nt_factors == 2 {
                product_at = Some(i);
                weights.push(None);
            } else {
                let single = alt
                    .iter()
                    .find_map(|s| match s {
                        Symbol::Nt(id) => Some(self.table.nt_count(*id, n).clone()),
                        _ => None,
                    })
                    .expect("speciation alternatives reference a child history");
                singles_sum += &single;
                weights.push(Some(single));
            }
        }
        let weights: Vec<BigUint> = weights
            .into_iter()
            .enumerate()
            .map(|(i, w)| match w {
                Some(w) => w,
                None => {
                    debug_assert_eq!(Some(i), product_at);
                    &total - &singles_sum
                }
            })
            .collect();

        for (alt, w) in def.alts.iter().zip(&weights) {
            if &r < w {
                return self.speciation_alt(species, alt, n, r);
            }
            r -= w;
        }
        unreachable!("residual exceeded the speciation count");
    }

    fn speciation_alt(&mut self, species: NodeId, alt: &[Symbol], n: usize, r: BigUint) -> usize {
        match self.grammar.view().children(species) {
            Children::Unary(_) => {
                let child_nt = match alt {
                    [Symbol::Nt(id)] => *id,
                    _ => unreachable!("unary speciation has a single alternative"),
                };
                let child = self.nonterminal(child_nt, n, r);
                self.push(Event::Speciation, species, Children::Unary(child))
            }
            Children::Binary(ul, ur) => {
                let children = match *alt {
                    [Symbol::Nt(a), Symbol::Nt(b)] => {
                        let (m, ra, rb) = self.split_product(a, b, n, r);
                        let left = self.nonterminal(a, m, ra);
                        let right = self.nonterminal(b, n - m, rb);
                        Children::Binary(left, right)
                    }
                    [Symbol::Nt(a), Symbol::Loss] => {
                        let left = self.nonterminal(a, n, r);
                        let loss = self.push(Event::Loss, ur, Children::Leaf);
                        Children::Binary(left, loss)
                    }
                    [Symbol::Loss, Symbol::Nt(b)] => {
                        let loss = self.push(Event::Loss, ul, Children::Leaf);
                        let right = self.nonterminal(b, n, r);
                        Children::Binary(loss, right)
                    }
                    _ => unreachable!("unknown speciation alternative"),
                };
                self.push(Event::Speciation, species, children)
            }
            Children::Leaf => unreachable!("speciation at a species leaf"),
        }
    }

    /// Choose the split size `m` (boustrophedon, weighted by
    /// `H[u,m]·ΣH[v,n−m]`), then the receiver `v` proportional to
    /// `H[v,n−m]`; recurse into donor and receiver subtrees.
    fn transfer(&mut self, nt: NtId, n: usize, mut r: BigUint) -> usize {
        let species = self.grammar.nt(nt).species;
        let h = self.grammar.h_of(species);
        for m in boustrophedon(n) {
            self.trace.probes += 1;
            let cu = self.table.nt_count(h, m);
            let inc = self.table.incomparable_sum(species, n - m);
            if cu.is_zero() || inc.is_zero() {
                continue;
            }
            let w = cu * inc;
            if r < w {
                let cu = cu.clone();
                for &v in self.grammar.incomparable(species) {
                    self.trace.probes += 1;
                    let hv = self.grammar.h_of(v);
                    let cv = self.table.nt_count(hv, n - m).clone();
                    if cv.is_zero() {
                        continue;
                    }
                    let wv = &cu * &cv;
                    if r < wv {
                        let ra = &r / &cv;
                        let rb = &r % &cv;
                        let left = self.nonterminal(h, m, ra);
                        let right = self.nonterminal(hv, n - m, rb);
                        return self.push(
                            Event::Transfer,
                            species,
                            Children::Binary(left, right),
                        );
                    }
                    r -= wv;
                }
                unreachable!("receiver scan exhausted the slice weight");
            }
            r -= w;
        }
        unreachable!("residual exceeded the transfer count");
    }

    /// Choose `(m, n-m)` proportional to `count(a,m)·count(b,n-m)` probing
    /// sizes in boustrophedon order, and decompose the residual into
    /// independent uniforms for the two factors.
    fn split_product(
        &mut self,
        a: NtId,
        b: NtId,
        n: usize,
        mut r: BigUint,
    ) -> (usize, BigUint, BigUint) {
        for m in boustrophedon(n) {
            self.trace.probes += 1;
            let ca = self.table.nt_count(a, m);
            let cb = self.table.nt_count(b, n - m);
            if ca.is_zero() || cb.is_zero() {
                continue;
            }
            let w = ca * cb;
            if r < w {
                let ra = &r / cb;
                let rb = &r % cb;
                return (m, ra, rb);
            }
            r -= w;
        }
        unreachable!("residual exceeded the product weight");
    }
}

/// Split sizes `1, n-1, 2, n-2, …` so the cost of locating a split is
/// proportional to the smaller part.
fn boustrophedon(n: usize) -> impl Iterator<Item = usize> {
    (0..n.saturating_sub(1)).map(move |j| if j % 2 == 0 { 1 + j / 2 } else { n - 1 - j / 2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::count;
    use crate::grammar::compile;
    use crate::species_tree::{caterpillar, parse_newick, time_slice, Ranking};
    use std::collections::HashMap;

    fn setup(newick: &str, model: Model, n_max: usize) -> (Grammar, CountTable) {
        let tree = parse_newick(newick).unwrap();
        let grammar = compile(&tree.view(), model).unwrap();
        let table = count(&grammar, n_max);
        (grammar, table)
    }

    #[test]
    fn boustrophedon_order() {
        let seq: Vec<usize> = boustrophedon(6).collect();
        assert_eq!(seq, [1, 5, 2, 4, 3]);
        assert_eq!(boustrophedon(1).count(), 0);
    }

    #[test]
    fn sample_is_deterministic() {
        let (g, t) = setup("((A,B)X,C)R;", Model::Udlt, 8);
        let a = sample(&g, &t, 8, 1234).unwrap();
        let b = sample(&g, &t, 8, 1234).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn samples_have_requested_size_and_validate() {
        let (g, t) = setup("((A,B)X,(C,D)Y)R;", Model::Udlt, 10);
        for seed in 0..50 {
            let h = sample(&g, &t, 7, seed).unwrap();
            assert_eq!(h.size(), 7);
            validate(&h, g.view(), Model::Udlt).unwrap();
        }
    }

    #[test]
    fn ranked_samples_validate() {
        let tree = caterpillar(4).unwrap();
        let ranking = Ranking::unique(&tree).unwrap();
        let sliced = time_slice(&tree, &ranking);
        for model in [Model::Rdl, Model::Rdlt, Model::RdtSl] {
            let g = compile(sliced.view(), model).unwrap();
            let t = count(&g, 6);
            for seed in 0..30 {
                let h = sample(&g, &t, 5, seed).unwrap();
                assert_eq!(h.size(), 5);
                validate(&h, g.view(), model).unwrap();
            }
        }
    }

    #[test]
    fn single_leaf_size3_halves() {
        // two duplication-tree shapes of size 3, each with probability 1/2
        let (g, t) = setup("A;", Model::Udl, 3);
        let mut freq: HashMap<Vec<u8>, u32> = HashMap::new();
        for seed in 0..20_000 {
            let h = sample(&g, &t, 3, seed).unwrap();
            *freq.entry(h.structural_key()).or_default() += 1;
        }
        assert_eq!(freq.len(), 2);
        let expected = 10_000f64;
        let x2: f64 = freq
            .values()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // chi2.ppf(0.999, df=1)
        assert!(x2 < 10.828, "chi-square {x2}");
    }

    #[test]
    fn size_one_history_is_a_loss_chain() {
        let (g, t) = setup("((A,B)X,C)R;", Model::Udl, 1);
        for seed in 0..10 {
            let h = sample(&g, &t, 1, seed).unwrap();
            let stats = statistics(&h);
            assert_eq!(stats.n_extant, 1);
            assert_eq!(stats.n_d + stats.n_t, 0);
            assert_eq!(stats.n_s, stats.n_l, "each speciation loses one branch");
        }
    }

    #[test]
    fn statistics_examples() {
        let (g, t) = setup("(A,B)R;", Model::Udl, 1);
        let h = sample(&g, &t, 1, 0).unwrap();
        let s = statistics(&h);
        assert_eq!((s.n_s, s.n_d, s.n_l, s.n_t, s.n_extant), (1, 0, 1, 0, 1));
        assert_eq!(s.score, 1);

        // Catalan history of size n has n-1 duplications and nothing else
        let (g, t) = setup("A;", Model::Udl, 6);
        let h = sample(&g, &t, 6, 9).unwrap();
        let s = statistics(&h);
        assert_eq!(s.n_d, 5);
        assert_eq!(s.score, 5);
    }

    #[test]
    fn statistics_match_traversal_census() {
        let (g, t) = setup("((A,B)X,C)R;", Model::Udlt, 8);
        for seed in 0..20 {
            let h = sample(&g, &t, 6, seed).unwrap();
            let s = statistics(&h);
            let mut census = [0usize; 5];
            for i in h.preorder() {
                let slot = match h.node(i).event {
                    Event::Speciation => 0,
                    Event::Duplication => 1,
                    Event::Loss => 2,
                    Event::Transfer => 3,
                    Event::Extant => 4,
                };
                census[slot] += 1;
            }
            assert_eq!(
                [s.n_s, s.n_d, s.n_l, s.n_t, s.n_extant],
                census,
                "flat scan disagrees with the traversal census"
            );
            assert_eq!(s.score, census[1] + census[2] + census[3]);
        }
    }

    #[test]
    fn zero_count_is_reported() {
        let (g, t) = setup("(A,B)R;", Model::Udl, 4);
        assert_eq!(
            sample(&g, &t, 0, 1).unwrap_err(),
            SampleError::ZeroCount { n: 0 }
        );
        assert_eq!(
            sample(&g, &t, 9, 1).unwrap_err(),
            SampleError::TableTooSmall { n: 9, max: 4 }
        );
    }

    #[test]
    fn validate_flags_mutations() {
        let (g, t) = setup("(A,B)R;", Model::Udlt, 4);
        let h = sample(&g, &t, 4, 7).unwrap();
        validate(&h, g.view(), Model::Udlt).unwrap();
        // re-map a duplication child to a different species
        let mut broken = h.clone();
        if let Some(dup) = (0..broken.len()).find(|&i| broken.node(i).event == Event::Duplication)
        {
            let child = match broken.node(dup).children {
                Children::Binary(l, _) => l,
                _ => unreachable!(),
            };
            let other = (0..g.view().len())
                .find(|&s| s != broken.node(child).species)
                .unwrap();
            broken.nodes[child].species = other;
            let v = validate(&broken, g.view(), Model::Udlt).unwrap_err();
            assert!(matches!(
                v.kind,
                ViolationKind::DuplicationChildSpecies
                    | ViolationKind::SpeciationChildSpecies
                    | ViolationKind::ExtantSpeciesNotLeaf
                    | ViolationKind::TransferReceiver
                    | ViolationKind::TransferLeftSpecies
            ));
        }
    }

    #[test]
    fn rdlt_receiver_must_stay_in_slice() {
        let tree = caterpillar(3).unwrap();
        let ranking = Ranking::unique(&tree).unwrap();
        let sliced = time_slice(&tree, &ranking);
        let g = compile(sliced.view(), Model::Rdlt).unwrap();
        let t = count(&g, 6);
        let mut found = None;
        for seed in 0..400 {
            let h = sample(&g, &t, 4, seed).unwrap();
            if let Some(i) = (0..h.len()).find(|&i| h.node(i).event == Event::Transfer) {
                found = Some((h, i));
                break;
            }
        }
        let (h, i) = found.expect("a transfer within 400 draws");
        let mut broken = h.clone();
        let receiver = match broken.node(i).children {
            Children::Binary(_, r) => r,
            _ => unreachable!(),
        };
        let donor_slice = sliced.view().slice(broken.node(i).species).unwrap();
        let outside = (0..sliced.view().len())
            .find(|&u| sliced.view().slice(u) != Some(donor_slice))
            .unwrap();
        broken.nodes[receiver].species = outside;
        let v = validate(&broken, sliced.view(), Model::Rdlt).unwrap_err();
        // whichever check fires first, the history must be rejected
        assert!(matches!(
            v.kind,
            ViolationKind::TransferReceiver
                | ViolationKind::SpeciationChildSpecies
                | ViolationKind::DuplicationChildSpecies
                | ViolationKind::ExtantSpeciesNotLeaf
                | ViolationKind::SpeciationAtLeaf
                | ViolationKind::ArityEventMismatch
                | ViolationKind::SpeciationArity
        ));
    }

    #[test]
    fn udl_histories_are_time_consistent() {
        let tree = parse_newick("((A,B)X,(C,D)Y)R;").unwrap();
        let g = compile(&tree.view(), Model::Udl).unwrap();
        let t = count(&g, 8);
        for seed in 0..100 {
            let h = sample(&g, &t, 6, seed).unwrap();
            assert!(is_time_consistent(&h, &tree));
        }
    }

    #[test]
    fn hand_built_inconsistent_history_detected() {
        // transfer down into C, then back up into X (a strict ancestor of
        // the first donor A): the classic inconsistent pattern
        let tree = parse_newick("((A,B)X,C)R;").unwrap();
        let id = |l: &str| tree.node_by_label(l).unwrap();
        let (r, x, a, b, c) = (id("R"), id("X"), id("A"), id("B"), id("C"));
        let mut nodes = Vec::new();
        let mut push = |event, species, children| {
            nodes.push(HistoryNode {
                event,
                species,
                children,
                parent: None,
            });
            nodes.len() - 1
        };
        let ea = push(Event::Extant, a, Children::Leaf);
        let lb = push(Event::Loss, b, Children::Leaf);
        let xx = push(Event::Speciation, x, Children::Binary(ea, lb));
        let cc = push(Event::Extant, c, Children::Leaf);
        let tc = push(Event::Transfer, c, Children::Binary(cc, xx));
        let aa = push(Event::Extant, a, Children::Leaf);
        let ta = push(Event::Transfer, a, Children::Binary(aa, tc));
        let lb2 = push(Event::Loss, b, Children::Leaf);
        let sx = push(Event::Speciation, x, Children::Binary(ta, lb2));
        let lc = push(Event::Loss, c, Children::Leaf);
        let sr = push(Event::Speciation, r, Children::Binary(sx, lc));
        let mut h = History::from_parts(nodes, sr);
        // wire parents
        for i in 0..h.len() {
            match h.node(i).children {
                Children::Leaf => {}
                Children::Unary(c) => h.nodes[c].parent = Some(i),
                Children::Binary(l, r) => {
                    h.nodes[l].parent = Some(i);
                    h.nodes[r].parent = Some(i);
                }
            }
        }
        validate(&h, &tree.view(), Model::Udlt).unwrap();
        assert!(!is_time_consistent(&h, &tree));
    }

    #[test]
    fn annotated_newick_format() {
        let tree = parse_newick("(A,B)R;").unwrap();
        let g = compile(&tree.view(), Model::Udl).unwrap();
        let t = count(&g, 1);
        let h = sample(&g, &t, 1, 3).unwrap();
        let text = h.to_annotated_newick(g.view());
        assert!(text.ends_with(";"));
        assert!(text.starts_with("(["));
        assert!(text.contains("[S:R]"));
        assert!(text.contains("[L:") && text.contains("[Extant:"));
    }

    #[test]
    fn probe_counts_stay_near_n_log_n() {
        let (g, t) = setup("A;", Model::Udl, 512);
        let mean_probes = |n: usize| -> f64 {
            let mut total = 0u64;
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for _ in 0..40 {
                let (_, trace) = sample_traced(&g, &t, n, &mut rng).unwrap();
                total += trace.probes;
            }
            total as f64 / 40.0
        };
        let small = mean_probes(64);
        let big = mean_probes(512);
        let model_ratio = (512.0 * 512f64.log2()) / (64.0 * 64f64.log2());
        assert!(
            big / small < 2.0 * model_ratio,
            "probe growth {} exceeds twice the n·log n model {}",
            big / small,
            model_ratio
        );
    }
}
