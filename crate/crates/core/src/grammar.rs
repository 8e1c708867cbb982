//! Compile a (species tree, model) pair into a weighted rule system — the
//! shared intermediate representation for counting, sampling and asymptotics.
//!
//! Every node `u` of the (possibly time-sliced) tree contributes a history
//! nonterminal `H[u]`, internal nodes a speciation nonterminal `S[u]`, all
//! nodes a duplication nonterminal `D[u]`, and — in transfer models with a
//! nonempty incomparable set — a transfer nonterminal `T[u]`. Terminals are
//! species-agnostic: `Z` (an extant gene, size 1), `X` (a lost gene, size 0),
//! `Y` (a duplication, size 0) and `W[v]` (a transfer whose receiver is `v`,
//! size 0).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::species_tree::{Children, NodeId, TreeView};

/// Evolutionary model selecting which grammar rules are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Model {
    /// Duplication-loss, unranked species tree.
    Udl,
    /// Duplication-loss, ranked (time-sliced) species tree.
    Rdl,
    /// Duplication-loss-transfer, unranked species tree.
    Udlt,
    /// Duplication-loss-transfer, ranked species tree.
    Rdlt,
    /// Ranked duplication-transfer where every binary speciation is
    /// immediately followed by a loss on one branch.
    RdtSl,
}

impl Model {
    pub const ALL: [Model; 5] = [Model::Udl, Model::Rdl, Model::Udlt, Model::Rdlt, Model::RdtSl];

    /// Whether the model requires a ranking (a time-sliced tree).
    pub fn is_ranked(self) -> bool {
        matches!(self, Model::Rdl | Model::Rdlt | Model::RdtSl)
    }

    /// Whether horizontal gene transfer rules are emitted.
    pub fn has_transfer(self) -> bool {
        matches!(self, Model::Udlt | Model::Rdlt | Model::RdtSl)
    }

    /// Whether binary speciations must lose one branch.
    pub fn forced_speciation_loss(self) -> bool {
        matches!(self, Model::RdtSl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::Udl => "udl",
            Model::Rdl => "rdl",
            Model::Udlt => "udlt",
            Model::Rdlt => "rdlt",
            Model::RdtSl => "rdt-sl",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "udl" => Ok(Model::Udl),
            "rdl" => Ok(Model::Rdl),
            "udlt" => Ok(Model::Udlt),
            "rdlt" => Ok(Model::Rdlt),
            "rdt-sl" | "rdtsl" => Ok(Model::RdtSl),
            other => Err(format!(
                "unknown model \"{other}\" (expected udl, rdl, udlt, rdlt or rdt-sl)"
            )),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompileError {
    #[error("model {0} requires a ranked (time-sliced) tree")]
    NeedsRanking(Model),
    #[error("model {0} takes an unranked tree, not a time-sliced one")]
    ForbidsRanking(Model),
}

/// Identifier of a nonterminal within one grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NtId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NtKind {
    H,
    S,
    D,
    T,
}

impl fmt::Display for NtKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NtKind::H => "H",
            NtKind::S => "S",
            NtKind::D => "D",
            NtKind::T => "T",
        })
    }
}

/// A symbol in a production alternative. Terminal sizes: `Extant` is 1, the
/// rest are 0 (history size counts extant leaves only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Nt(NtId),
    /// `Z`: an extant gene.
    Extant,
    /// `X`: a gene lost right after a speciation.
    Loss,
    /// `Y`: a duplication event marker.
    Dup,
    /// `W[v]`: a transfer event marker carrying the receiver species.
    Transfer(NodeId),
}

#[derive(Debug, Clone)]
pub struct Nonterminal {
    pub kind: NtKind,
    /// The (view) node this nonterminal belongs to.
    pub species: NodeId,
    /// Ordered alternatives, each an ordered list of symbols.
    pub alts: Vec<Vec<Symbol>>,
}

/// A compiled grammar. Owns the tree view it was compiled from.
#[derive(Debug, Clone)]
pub struct Grammar {
    view: TreeView,
    model: Model,
    nts: Vec<Nonterminal>,
    start: NtId,
    h_of: Vec<NtId>,
    s_of: Vec<Option<NtId>>,
    d_of: Vec<NtId>,
    t_of: Vec<Option<NtId>>,
    /// Per-node incomparable sets, in node-id order.
    incomparable: Vec<Vec<NodeId>>,
    /// Counting class per nonterminal: nonterminals of structurally
    /// isomorphic subtrees share a class in duplication-loss models.
    class_of: Vec<usize>,
    n_classes: usize,
}

impl Grammar {
    pub fn view(&self) -> &TreeView {
        &self.view
    }

    pub fn model(&self) -> Model {
        self.model
    }

    pub fn start(&self) -> NtId {
        self.start
    }

    pub fn nts(&self) -> &[Nonterminal] {
        &self.nts
    }

    pub fn nt(&self, id: NtId) -> &Nonterminal {
        &self.nts[id.0]
    }

    pub fn h_of(&self, node: NodeId) -> NtId {
        self.h_of[node]
    }

    pub fn s_of(&self, node: NodeId) -> Option<NtId> {
        self.s_of[node]
    }

    pub fn d_of(&self, node: NodeId) -> NtId {
        self.d_of[node]
    }

    pub fn t_of(&self, node: NodeId) -> Option<NtId> {
        self.t_of[node]
    }

    pub fn incomparable(&self, node: NodeId) -> &[NodeId] {
        &self.incomparable[node]
    }

    pub fn class_of(&self, nt: NtId) -> usize {
        self.class_of[nt.0]
    }

    pub fn class_count(&self) -> usize {
        self.n_classes
    }

    pub(crate) fn class_table(&self) -> (Vec<usize>, usize) {
        (self.class_of.clone(), self.n_classes)
    }

    fn symbol_text(&self, sym: &Symbol) -> String {
        match sym {
            Symbol::Nt(id) => {
                let nt = self.nt(*id);
                format!("{}[{}]", nt.kind, self.view.label(nt.species))
            }
            Symbol::Extant => "Z".to_string(),
            Symbol::Loss => "X".to_string(),
            Symbol::Dup => "Y".to_string(),
            Symbol::Transfer(v) => format!("W[{}]", self.view.label(*v)),
        }
    }

    /// Plain-text dump, one nonterminal per line, alternatives separated by
    /// `|`. Intended for golden tests and debugging; no stability promised.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for nt in &self.nts {
            let lhs = format!("{}[{}]", nt.kind, self.view.label(nt.species));
            let rhs = nt
                .alts
                .iter()
                .map(|alt| {
                    alt.iter()
                        .map(|s| self.symbol_text(s))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect::<Vec<_>>()
                .join(" | ");
            out.push_str(&lhs);
            out.push_str(" -> ");
            out.push_str(&rhs);
            out.push('\n');
        }
        out
    }
}

/// Structural key of the subtree rooted at each node; nodes with equal keys
/// root isomorphic (unary-binary) subtrees.
fn shape_keys(view: &TreeView) -> Vec<String> {
    let mut keys = vec![String::new(); view.len()];
    for u in view.postorder() {
        keys[u] = match view.children(u) {
            Children::Leaf => "L".to_string(),
            Children::Unary(c) => format!("U({})", keys[c]),
            Children::Binary(l, r) => format!("B({},{})", keys[l], keys[r]),
        };
    }
    keys
}

/// Compile the grammar for `model` over `view`.
///
/// In duplication-loss models, nonterminals of isomorphic subtrees are mapped
/// to shared counting classes: the counting table shrinks while sampling
/// still walks per-node nonterminals and recovers concrete species. Transfer
/// models keep one class per nonterminal because the incomparable sets break
/// subtree locality.
pub fn compile(view: &TreeView, model: Model) -> Result<Grammar, CompileError> {
    if model.is_ranked() && !view.ranked() {
        return Err(CompileError::NeedsRanking(model));
    }
    if !model.is_ranked() && view.ranked() {
        return Err(CompileError::ForbidsRanking(model));
    }

    let n = view.len();
    let post = view.postorder();
    let incomparable: Vec<Vec<NodeId>> = (0..n).map(|u| view.incomparable(u)).collect();

    let mut nts: Vec<Nonterminal> = Vec::new();
    let mut h_of = vec![NtId(usize::MAX); n];
    let mut s_of = vec![None; n];
    let mut d_of = vec![NtId(usize::MAX); n];
    let mut t_of = vec![None; n];

    let push = |nts: &mut Vec<Nonterminal>, kind, species| {
        let id = NtId(nts.len());
        nts.push(Nonterminal {
            kind,
            species,
            alts: Vec::new(),
        });
        id
    };

    for &u in &post {
        d_of[u] = push(&mut nts, NtKind::D, u);
        if model.has_transfer() && !incomparable[u].is_empty() {
            t_of[u] = Some(push(&mut nts, NtKind::T, u));
        }
        if !view.is_leaf(u) {
            s_of[u] = Some(push(&mut nts, NtKind::S, u));
        }
        h_of[u] = push(&mut nts, NtKind::H, u);
    }

    for &u in &post {
        let h = h_of[u];
        let d = d_of[u];
        nts[d.0].alts = vec![vec![Symbol::Nt(h), Symbol::Nt(h), Symbol::Dup]];
        if let Some(t) = t_of[u] {
            nts[t.0].alts = incomparable[u]
                .iter()
                .map(|&v| vec![Symbol::Nt(h), Symbol::Nt(h_of[v]), Symbol::Transfer(v)])
                .collect();
        }
        if let Some(s) = s_of[u] {
            nts[s.0].alts = match view.children(u) {
                Children::Unary(c) => vec![vec![Symbol::Nt(h_of[c])]],
                Children::Binary(l, r) => {
                    let hl = Symbol::Nt(h_of[l]);
                    let hr = Symbol::Nt(h_of[r]);
                    if model.forced_speciation_loss() {
                        vec![vec![hl, Symbol::Loss], vec![Symbol::Loss, hr]]
                    } else {
                        vec![
                            vec![hl, hr],
                            vec![hl, Symbol::Loss],
                            vec![Symbol::Loss, hr],
                        ]
                    }
                }
                Children::Leaf => unreachable!("S only exists for internal nodes"),
            };
        }
        let mut h_alts = Vec::new();
        match s_of[u] {
            Some(s) => h_alts.push(vec![Symbol::Nt(s)]),
            None => h_alts.push(vec![Symbol::Extant]),
        }
        h_alts.push(vec![Symbol::Nt(d)]);
        if let Some(t) = t_of[u] {
            h_alts.push(vec![Symbol::Nt(t)]);
        }
        nts[h.0].alts = h_alts;
    }

    // counting classes: share rows between isomorphic subtrees in DL models
    let mut class_of = vec![usize::MAX; nts.len()];
    let mut n_classes = 0;
    if model.has_transfer() {
        for (i, c) in class_of.iter_mut().enumerate() {
            *c = i;
        }
        n_classes = nts.len();
    } else {
        let keys = shape_keys(view);
        let mut rep_of_key: HashMap<&str, NodeId> = HashMap::new();
        for &u in &post {
            let rep = *rep_of_key.entry(keys[u].as_str()).or_insert(u);
            let pairs: [(NtId, Option<NtId>); 3] = [
                (d_of[u], Some(d_of[rep])),
                (h_of[u], Some(h_of[rep])),
                (
                    s_of[u].unwrap_or(NtId(usize::MAX)),
                    s_of[rep],
                ),
            ];
            for (nt, rep_nt) in pairs {
                if nt.0 == usize::MAX {
                    continue;
                }
                let rep_nt = rep_nt.expect("isomorphic nodes have the same kinds");
                if nt == rep_nt {
                    class_of[nt.0] = n_classes;
                    n_classes += 1;
                } else {
                    class_of[nt.0] = class_of[rep_nt.0];
                }
            }
        }
    }

    Ok(Grammar {
        view: view.clone(),
        model,
        start: h_of[view.root()],
        nts,
        h_of,
        s_of,
        d_of,
        t_of,
        incomparable,
        class_of,
        n_classes,
    })
}
