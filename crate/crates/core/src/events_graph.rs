//! The events graph of a ranked species tree and the history-transport
//! bijection behind the tree-invariance of ranked duplication-transfer
//! counts with forced speciation-loss.
//!
//! Nodes are the time-sliced tree's nodes labeled with the set of leaf
//! numbers below them; per slice these sets partition `{1..k}`. Speciation
//! super-edges connect consecutive slices, every node carries a duplication
//! loop, and transfer edges form the complete digraph (minus loops) inside
//! each slice. A history maps to a pruned tree labeled by
//! `(slice, left-most extant leaf)` pairs; relabeling into another tree's
//! events graph and re-expanding losses transports the history.

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use thiserror::Error;

use crate::counting::{count, CountTable};
use crate::grammar::{compile, Grammar, Model};
use crate::sampling::{validate, Event, History, HistoryNode, Violation};
use crate::species_tree::{Children, NodeId, TimeSlicedTree};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("leaf counts differ: {from} vs {to}")]
    LeafCountMismatch { from: usize, to: usize },
    #[error("history is not valid under the RDT-SL model: {0}")]
    InvalidHistory(Violation),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrowError {
    #[error("step budget of {steps} exhausted before all leaves were extant")]
    StepsExhausted { steps: usize },
}

/// The events graph; owns a copy of the time-sliced tree it was built from.
#[derive(Debug, Clone)]
pub struct EventsGraph {
    sliced: TimeSlicedTree,
    /// Per sliced node, the set of reachable leaf numbers as a bitmask
    /// (bit `i-1` stands for leaf `i`).
    leafset: Vec<u64>,
    /// `node_at[t-1][i-1]`: the unique slice-`t` node whose set contains
    /// leaf `i`.
    node_at: Vec<Vec<NodeId>>,
    /// `leaf_by_number[i-1]`: the sliced leaf with depth-first number `i`.
    leaf_by_number: Vec<NodeId>,
}

/// Build the events graph of a time-sliced tree.
pub fn build(sliced: &TimeSlicedTree) -> EventsGraph {
    EventsGraph::build(sliced)
}

impl EventsGraph {
    pub fn build(sliced: &TimeSlicedTree) -> EventsGraph {
        let view = sliced.view();
        let k = view.leaf_count();
        assert!(k <= 64, "leaf sets are stored as 64-bit masks");
        let mut leafset = vec![0u64; view.len()];
        let mut leaf_by_number = vec![usize::MAX; k];
        for u in view.postorder() {
            leafset[u] = match view.children(u) {
                Children::Leaf => {
                    let no = view.leaf_number(u).expect("leaf");
                    leaf_by_number[no - 1] = u;
                    1u64 << (no - 1)
                }
                Children::Unary(c) => leafset[c],
                Children::Binary(l, r) => {
                    debug_assert_eq!(leafset[l] & leafset[r], 0);
                    leafset[l] | leafset[r]
                }
            };
            if let Some(p) = view.parent(u) {
                debug_assert_eq!(
                    view.slice(p).map(|t| t + 1),
                    view.slice(u),
                    "edges connect consecutive slices"
                );
            }
        }
        let mut node_at = vec![vec![usize::MAX; k]; k];
        for t in 1..=k {
            let mut union = 0u64;
            for &u in sliced.slice_members(t) {
                union |= leafset[u];
                for i in 1..=k {
                    if leafset[u] >> (i - 1) & 1 == 1 {
                        node_at[t - 1][i - 1] = u;
                    }
                }
            }
            debug_assert_eq!(
                union,
                if k == 64 { u64::MAX } else { (1u64 << k) - 1 },
                "slice labels partition the leaf set"
            );
        }
        EventsGraph {
            sliced: sliced.clone(),
            leafset,
            node_at,
            leaf_by_number,
        }
    }

    pub fn sliced(&self) -> &TimeSlicedTree {
        &self.sliced
    }

    pub fn leaf_count(&self) -> usize {
        self.sliced.view().leaf_count()
    }

    /// Leaf-number set of a sliced node, as a bitmask.
    pub fn leafset(&self, u: NodeId) -> u64 {
        self.leafset[u]
    }

    /// The unique node of slice `t` whose label set contains leaf `i`.
    pub fn node_at(&self, slice: usize, leaf_no: usize) -> NodeId {
        self.node_at[slice - 1][leaf_no - 1]
    }

    pub fn leaf_by_number(&self, leaf_no: usize) -> NodeId {
        self.leaf_by_number[leaf_no - 1]
    }

    /// Transfer edge targets of `u`: the other members of its slice.
    pub fn transfer_targets(&self, u: NodeId) -> Vec<NodeId> {
        let t = self.sliced.view().slice(u).expect("ranked");
        self.sliced
            .slice_members(t)
            .iter()
            .copied()
            .filter(|&v| v != u)
            .collect()
    }

    fn leafset_members(&self, u: NodeId) -> Vec<usize> {
        let k = self.leaf_count();
        (1..=k).filter(|i| self.leafset[u] >> (i - 1) & 1 == 1).collect()
    }

    /// Adjacency dump for golden tests: slices with labeled nodes, then per
    /// node its speciation super-edge, duplication loop and transfer edges.
    pub fn dump(&self) -> String {
        let view = self.sliced.view();
        let k = self.leaf_count();
        let set_text = |u: NodeId| {
            let members: Vec<String> =
                self.leafset_members(u).iter().map(|i| i.to_string()).collect();
            format!("{}{{{}}}", view.label(u), members.join(","))
        };
        let mut out = String::new();
        for t in 1..=k {
            let members: Vec<String> = self
                .sliced
                .slice_members(t)
                .iter()
                .map(|&u| set_text(u))
                .collect();
            out.push_str(&format!("slice {t}: {}\n", members.join(" ")));
        }
        for t in 1..=k {
            for &u in self.sliced.slice_members(t) {
                let speciation: Vec<String> = match view.children(u) {
                    Children::Leaf => Vec::new(),
                    Children::Unary(c) => vec![view.label(c).to_string()],
                    Children::Binary(l, r) => {
                        vec![view.label(l).to_string(), view.label(r).to_string()]
                    }
                };
                let transfers: Vec<String> = self
                    .transfer_targets(u)
                    .iter()
                    .map(|&v| view.label(v).to_string())
                    .collect();
                out.push_str(&format!(
                    "node {}: speciation -> {}; duplication -> {}; transfers -> {}\n",
                    view.label(u),
                    speciation.join(" "),
                    view.label(u),
                    transfers.join(" ")
                ));
            }
        }
        out
    }
}

/// Histories of size `n` in the RDT-SL model (the grammar DP on the sliced
/// tree with speciation restricted to speciation-loss).
pub fn count_rdtsl(sliced: &TimeSlicedTree, n: usize) -> BigUint {
    count_rdtsl_table(sliced, n).history_count(n).clone()
}

/// Full RDT-SL count table up to `n_max`.
pub fn count_rdtsl_table(sliced: &TimeSlicedTree, n_max: usize) -> CountTable {
    let grammar = rdtsl_grammar(sliced);
    count(&grammar, n_max)
}

pub fn rdtsl_grammar(sliced: &TimeSlicedTree) -> Grammar {
    compile(sliced.view(), Model::RdtSl).expect("sliced trees are ranked")
}

// ---------------------------------------------------------------------------
// Encoding, decoding and transport
// ---------------------------------------------------------------------------

/// A history node in events-graph coordinates: its time slice and the
/// depth-first number of its left-most extant leaf. Loss leaves are pruned;
/// speciation-loss nodes become unary.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Enc {
    slice: usize,
    leaf_no: usize,
    kids: Vec<Enc>,
}

fn encode(history: &History, sliced: &TimeSlicedTree, i: usize) -> Enc {
    let view = sliced.view();
    let n = history.node(i);
    match n.event {
        Event::Extant => Enc {
            slice: view.leaf_count(),
            leaf_no: view.leaf_number(n.species).expect("extant at a leaf"),
            kids: Vec::new(),
        },
        Event::Speciation => {
            let survivor = match n.children {
                Children::Unary(c) => c,
                Children::Binary(l, r) => {
                    if history.node(l).event == Event::Loss {
                        r
                    } else {
                        l
                    }
                }
                Children::Leaf => unreachable!("speciation is internal"),
            };
            let kid = encode(history, sliced, survivor);
            Enc {
                slice: view.slice(n.species).expect("ranked"),
                leaf_no: kid.leaf_no,
                kids: vec![kid],
            }
        }
        Event::Duplication | Event::Transfer => {
            let (l, r) = match n.children {
                Children::Binary(l, r) => (l, r),
                _ => unreachable!("duplication and transfer are binary"),
            };
            let kl = encode(history, sliced, l);
            let kr = encode(history, sliced, r);
            Enc {
                slice: view.slice(n.species).expect("ranked"),
                leaf_no: kl.leaf_no,
                kids: vec![kl, kr],
            }
        }
        Event::Loss => unreachable!("losses are pruned by the caller"),
    }
}

/// Rebuild a full history on `graph`'s tree from events-graph coordinates,
/// re-inserting the loss leaf of every binary speciation.
fn decode(enc: &Enc, graph: &EventsGraph, nodes: &mut Vec<HistoryNode>) -> usize {
    let view = graph.sliced().view();
    let k = graph.leaf_count();
    let push = |nodes: &mut Vec<HistoryNode>, event, species, children| {
        let id = nodes.len();
        nodes.push(HistoryNode {
            event,
            species,
            children,
            parent: None,
        });
        if let Children::Binary(l, r) = children {
            nodes[l].parent = Some(id);
            nodes[r].parent = Some(id);
        } else if let Children::Unary(c) = children {
            nodes[c].parent = Some(id);
        }
        id
    };
    match enc.kids.as_slice() {
        [] => {
            debug_assert_eq!(enc.slice, k, "childless nodes are extant leaves");
            let species = graph.leaf_by_number(enc.leaf_no);
            push(nodes, Event::Extant, species, Children::Leaf)
        }
        [kid] => {
            debug_assert_eq!(kid.slice, enc.slice + 1);
            debug_assert_eq!(kid.leaf_no, enc.leaf_no);
            let species = graph.node_at(enc.slice, enc.leaf_no);
            match view.children(species) {
                Children::Unary(_) => {
                    let child = decode(kid, graph, nodes);
                    push(nodes, Event::Speciation, species, Children::Unary(child))
                }
                Children::Binary(l, r) => {
                    let continues_left = graph.node_at(enc.slice + 1, kid.leaf_no) == l;
                    if continues_left {
                        let child = decode(kid, graph, nodes);
                        let loss = push(nodes, Event::Loss, r, Children::Leaf);
                        push(
                            nodes,
                            Event::Speciation,
                            species,
                            Children::Binary(child, loss),
                        )
                    } else {
                        let loss = push(nodes, Event::Loss, l, Children::Leaf);
                        let child = decode(kid, graph, nodes);
                        push(
                            nodes,
                            Event::Speciation,
                            species,
                            Children::Binary(loss, child),
                        )
                    }
                }
                Children::Leaf => unreachable!("speciation edges leave non-leaf slices"),
            }
        }
        [left, right] => {
            debug_assert_eq!(left.slice, enc.slice);
            debug_assert_eq!(right.slice, enc.slice);
            debug_assert_eq!(left.leaf_no, enc.leaf_no);
            let species = graph.node_at(enc.slice, enc.leaf_no);
            let receiver = graph.node_at(enc.slice, right.leaf_no);
            let l = decode(left, graph, nodes);
            let r = decode(right, graph, nodes);
            let event = if receiver == species {
                Event::Duplication
            } else {
                Event::Transfer
            };
            push(nodes, event, species, Children::Binary(l, r))
        }
        _ => unreachable!("encoded nodes have at most two children"),
    }
}

fn decode_history(enc: &Enc, graph: &EventsGraph) -> History {
    let mut nodes = Vec::new();
    let root = decode(enc, graph, &mut nodes);
    History::from_parts(nodes, root)
}

/// Transport a valid RDT-SL history from one ranked tree to another of the
/// same size. Same-slice edges re-decode as duplications when the two labels
/// fall into the same partition class of the target tree and as transfers
/// otherwise, so only the total count is preserved — which is the point.
/// `transport(to, from) ∘ transport(from, to)` is the identity.
pub fn transport(
    history: &History,
    from: &TimeSlicedTree,
    to: &TimeSlicedTree,
) -> Result<History, TransportError> {
    if from.view().leaf_count() != to.view().leaf_count() {
        return Err(TransportError::LeafCountMismatch {
            from: from.view().leaf_count(),
            to: to.view().leaf_count(),
        });
    }
    validate(history, from.view(), Model::RdtSl).map_err(TransportError::InvalidHistory)?;
    let enc = encode(history, from, history.root());
    let graph = EventsGraph::build(to);
    let out = decode_history(&enc, &graph);
    debug_assert!(validate(&out, to.view(), Model::RdtSl).is_ok());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Iterative growing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct GrowNode {
    slice: usize,
    leaf_no: usize,
    kids: Vec<usize>,
}

fn grow_arena_to_enc(arena: &[GrowNode], i: usize) -> Enc {
    Enc {
        slice: arena[i].slice,
        leaf_no: arena[i].leaf_no,
        kids: arena[i].kids.iter().map(|&c| grow_arena_to_enc(arena, c)).collect(),
    }
}

/// Grow a history by repeatedly expanding a pending leaf of the partial
/// history along one incident events-graph edge: a speciation edge moves it
/// to the next slice, a duplication loop or transfer edge branches it, and
/// at the leaf slice it may settle as extant. The walk makes no
/// distributional promise (pending leaves stop with probability 2/3, the
/// branching edge is uniform otherwise); `steps` bounds edge traversals.
pub fn grow_history(graph: &EventsGraph, steps: usize, seed: u64) -> Result<History, GrowError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = graph.leaf_count();
    let root_leaf = rng.gen_range(1..=k);
    let mut arena = vec![GrowNode {
        slice: 1,
        leaf_no: root_leaf,
        kids: Vec::new(),
    }];
    let mut active: Vec<usize> = vec![0];
    let mut used = 0;
    while !active.is_empty() {
        if used == steps {
            return Err(GrowError::StepsExhausted { steps });
        }
        used += 1;
        let pos = rng.gen_range(0..active.len());
        let node = active[pos];
        let (t, leaf_no) = (arena[node].slice, arena[node].leaf_no);
        let settle = rng.gen_ratio(2, 3);
        if t == k && settle {
            active.swap_remove(pos);
            continue;
        }
        if t < k && settle {
            let child = arena.len();
            arena.push(GrowNode {
                slice: t + 1,
                leaf_no,
                kids: Vec::new(),
            });
            arena[node].kids.push(child);
            active[pos] = child;
            continue;
        }
        // one duplication loop plus a transfer edge per slice mate
        let species = graph.node_at(t, leaf_no);
        let mut targets = vec![species];
        targets.extend(graph.transfer_targets(species));
        let target = targets[rng.gen_range(0..targets.len())];
        let members = graph.leafset_members(target);
        let right_leaf = members[rng.gen_range(0..members.len())];
        let left = arena.len();
        arena.push(GrowNode {
            slice: t,
            leaf_no,
            kids: Vec::new(),
        });
        let right = arena.len();
        arena.push(GrowNode {
            slice: t,
            leaf_no: right_leaf,
            kids: Vec::new(),
        });
        arena[node].kids = vec![left, right];
        active[pos] = left;
        active.push(right);
    }
    let enc = grow_arena_to_enc(&arena, 0);
    Ok(decode_history(&enc, graph))
}

/// Exhaustively drive the growing algorithm over every choice sequence whose
/// partial tree stays within `max_nodes` arena nodes, returning every
/// completed history exactly once. Diagnostic tool for tiny instances.
pub fn grow_all(graph: &EventsGraph, max_nodes: usize) -> Vec<History> {
    fn rec(
        graph: &EventsGraph,
        arena: &mut Vec<GrowNode>,
        active: &mut VecDeque<usize>,
        max_nodes: usize,
        out: &mut Vec<History>,
    ) {
        let Some(&node) = active.front() else {
            let enc = grow_arena_to_enc(arena, 0);
            out.push(decode_history(&enc, graph));
            return;
        };
        active.pop_front();
        let (t, leaf_no) = (arena[node].slice, arena[node].leaf_no);
        let k = graph.leaf_count();

        if t == k {
            // settle as extant
            rec(graph, arena, active, max_nodes, out);
        } else if arena.len() < max_nodes {
            // speciation edge
            let child = arena.len();
            arena.push(GrowNode {
                slice: t + 1,
                leaf_no,
                kids: Vec::new(),
            });
            arena[node].kids.push(child);
            active.push_back(child);
            rec(graph, arena, active, max_nodes, out);
            active.pop_back();
            arena[node].kids.clear();
            arena.pop();
        }

        if arena.len() + 2 <= max_nodes {
            let species = graph.node_at(t, leaf_no);
            let mut targets = vec![species];
            targets.extend(graph.transfer_targets(species));
            for target in targets {
                for right_leaf in graph.leafset_members(target) {
                    let left = arena.len();
                    arena.push(GrowNode {
                        slice: t,
                        leaf_no,
                        kids: Vec::new(),
                    });
                    let right = arena.len();
                    arena.push(GrowNode {
                        slice: t,
                        leaf_no: right_leaf,
                        kids: Vec::new(),
                    });
                    arena[node].kids = vec![left, right];
                    active.push_back(left);
                    active.push_back(right);
                    rec(graph, arena, active, max_nodes, out);
                    active.pop_back();
                    active.pop_back();
                    arena[node].kids.clear();
                    arena.pop();
                    arena.pop();
                }
            }
        }
        active.push_front(node);
    }

    let mut out = Vec::new();
    let k = graph.leaf_count();
    for root_leaf in 1..=k {
        let mut arena = vec![GrowNode {
            slice: 1,
            leaf_no: root_leaf,
            kids: Vec::new(),
        }];
        let mut active = VecDeque::from([0]);
        rec(graph, &mut arena, &mut active, max_nodes, &mut out);
    }
    out
}
