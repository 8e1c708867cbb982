//! Brute-force exhaustive generation of all histories of a given size.
//!
//! This is the independent oracle for the counting and sampling modules: it
//! expands the history definition case by case over the tree view, without
//! touching the grammar IR, so agreement with the DP counts is meaningful
//! evidence. Exponential — intended for tiny instances only.
//!
//! Fragments are shared (`Rc`), so the list for one size is a DAG; use
//! [`enumerate`] to materialize plain histories or [`enumerate_counts`] to
//! read off cardinalities without paying for materialization.

use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::grammar::Model;
use crate::sampling::{Event, History, HistoryNode};
use crate::species_tree::{Children, NodeId, TreeView};

/// Default cap on the number of fragment nodes materialized per call.
pub const DEFAULT_NODE_BUDGET: usize = 50_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnumError {
    #[error("enumeration node budget of {budget} exhausted")]
    BudgetExhausted { budget: usize },
}

#[derive(Debug)]
enum FragKids {
    None,
    One(Rc<Frag>),
    Two(Rc<Frag>, Rc<Frag>),
}

#[derive(Debug)]
struct Frag {
    event: Event,
    species: NodeId,
    kids: FragKids,
}

struct Enumerator<'a> {
    view: &'a TreeView,
    model: Model,
    incomparable: Vec<Vec<NodeId>>,
    memo: HashMap<(NodeId, usize), Rc<Vec<Rc<Frag>>>>,
    allocated: usize,
    budget: usize,
}

impl<'a> Enumerator<'a> {
    fn new(view: &'a TreeView, model: Model, budget: usize) -> Enumerator<'a> {
        assert_eq!(
            model.is_ranked(),
            view.ranked(),
            "model/view ranking mismatch"
        );
        Enumerator {
            view,
            model,
            incomparable: (0..view.len()).map(|u| view.incomparable(u)).collect(),
            memo: HashMap::new(),
            allocated: 0,
            budget,
        }
    }

    fn frag(
        &mut self,
        event: Event,
        species: NodeId,
        kids: FragKids,
    ) -> Result<Rc<Frag>, EnumError> {
        self.allocated += 1;
        if self.allocated > self.budget {
            return Err(EnumError::BudgetExhausted {
                budget: self.budget,
            });
        }
        Ok(Rc::new(Frag {
            event,
            species,
            kids,
        }))
    }

    /// All histories of exactly size `n` for a gene starting in species `u`.
    fn histories(&mut self, u: NodeId, n: usize) -> Result<Rc<Vec<Rc<Frag>>>, EnumError> {
        if let Some(cached) = self.memo.get(&(u, n)) {
            return Ok(Rc::clone(cached));
        }
        let mut out: Vec<Rc<Frag>> = Vec::new();
        if n >= 1 {
            // speciation (or an extant gene at a leaf)
            match self.view.children(u) {
                Children::Leaf => {
                    if n == 1 {
                        let f = self.frag(Event::Extant, u, FragKids::None)?;
                        out.push(f);
                    }
                }
                Children::Unary(c) => {
                    for kid in self.histories(c, n)?.iter() {
                        let f =
                            self.frag(Event::Speciation, u, FragKids::One(Rc::clone(kid)))?;
                        out.push(f);
                    }
                }
                Children::Binary(l, r) => {
                    if !self.model.forced_speciation_loss() {
                        for m in 1..n {
                            let ls = self.histories(l, m)?;
                            let rs = self.histories(r, n - m)?;
                            for a in ls.iter() {
                                for b in rs.iter() {
                                    let f = self.frag(
                                        Event::Speciation,
                                        u,
                                        FragKids::Two(Rc::clone(a), Rc::clone(b)),
                                    )?;
                                    out.push(f);
                                }
                            }
                        }
                    }
                    for a in self.histories(l, n)?.iter() {
                        let loss = self.frag(Event::Loss, r, FragKids::None)?;
                        let f = self.frag(
                            Event::Speciation,
                            u,
                            FragKids::Two(Rc::clone(a), loss),
                        )?;
                        out.push(f);
                    }
                    for b in self.histories(r, n)?.iter() {
                        let loss = self.frag(Event::Loss, l, FragKids::None)?;
                        let f = self.frag(
                            Event::Speciation,
                            u,
                            FragKids::Two(loss, Rc::clone(b)),
                        )?;
                        out.push(f);
                    }
                }
            }
            // duplication: ordered pair of histories in the same species
            for m in 1..n {
                let firsts = self.histories(u, m)?;
                let seconds = self.histories(u, n - m)?;
                for a in firsts.iter() {
                    for b in seconds.iter() {
                        let f = self.frag(
                            Event::Duplication,
                            u,
                            FragKids::Two(Rc::clone(a), Rc::clone(b)),
                        )?;
                        out.push(f);
                    }
                }
            }
            // transfer: the new copy lands in an incomparable species
            if self.model.has_transfer() {
                for vi in 0..self.incomparable[u].len() {
                    let v = self.incomparable[u][vi];
                    for m in 1..n {
                        let donors = self.histories(u, m)?;
                        let received = self.histories(v, n - m)?;
                        for a in donors.iter() {
                            for b in received.iter() {
                                let f = self.frag(
                                    Event::Transfer,
                                    u,
                                    FragKids::Two(Rc::clone(a), Rc::clone(b)),
                                )?;
                                out.push(f);
                            }
                        }
                    }
                }
            }
        }
        let rc = Rc::new(out);
        self.memo.insert((u, n), Rc::clone(&rc));
        Ok(rc)
    }
}

fn materialize(frag: &Frag) -> History {
    fn copy(frag: &Frag, nodes: &mut Vec<HistoryNode>) -> usize {
        let children = match &frag.kids {
            FragKids::None => Children::Leaf,
            FragKids::One(c) => Children::Unary(copy(c, nodes)),
            FragKids::Two(l, r) => {
                let li = copy(l, nodes);
                let ri = copy(r, nodes);
                Children::Binary(li, ri)
            }
        };
        let id = nodes.len();
        nodes.push(HistoryNode {
            event: frag.event,
            species: frag.species,
            children,
            parent: None,
        });
        match children {
            Children::Leaf => {}
            Children::Unary(c) => nodes[c].parent = Some(id),
            Children::Binary(l, r) => {
                nodes[l].parent = Some(id);
                nodes[r].parent = Some(id);
            }
        }
        id
    }
    let mut nodes = Vec::new();
    let root = copy(frag, &mut nodes);
    History::from_parts(nodes, root)
}

/// Enumerate the complete, duplicate-free list of histories of exactly size
/// `n` under `model`, with the default node budget.
pub fn enumerate(view: &TreeView, model: Model, n: usize) -> Result<Vec<History>, EnumError> {
    enumerate_with_budget(view, model, n, DEFAULT_NODE_BUDGET)
}

/// As [`enumerate`], with an explicit budget on fragment nodes.
pub fn enumerate_with_budget(
    view: &TreeView,
    model: Model,
    n: usize,
    budget: usize,
) -> Result<Vec<History>, EnumError> {
    let mut e = Enumerator::new(view, model, budget);
    let fragments = e.histories(view.root(), n)?;
    Ok(fragments.iter().map(|f| materialize(f)).collect())
}

/// Cardinalities `|histories of size n|` for every `n` in `1..=n_max`,
/// built by the same object-level expansion but without materializing each
/// history into its own arena.
pub fn enumerate_counts(
    view: &TreeView,
    model: Model,
    n_max: usize,
    budget: usize,
) -> Result<Vec<usize>, EnumError> {
    let mut e = Enumerator::new(view, model, budget);
    (1..=n_max)
        .map(|n| Ok(e.histories(view.root(), n)?.len()))
        .collect()
}
