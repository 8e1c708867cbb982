//! Species trees: Newick parsing, canonical builders, rankings, time slices
//! and incomparability queries.
//!
//! Trees are stored arena-style: nodes live in a flat `Vec` and are addressed
//! by [`NodeId`]. All types are immutable once constructed.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Index into a tree's node arena.
pub type NodeId = usize;

/// Largest `k` accepted by [`random_tree`]; the Catalan table is kept in `u128`.
pub const MAX_RANDOM_TREE_LEAVES: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NewickError {
    #[error("unexpected character '{found}' at offset {offset}, expected {expected}")]
    Unexpected {
        offset: usize,
        found: char,
        expected: &'static str,
    },
    #[error("unexpected end of input at offset {offset}, expected {expected}")]
    UnexpectedEnd { offset: usize, expected: &'static str },
    #[error("non-binary node at offset {offset}")]
    NonBinary { offset: usize },
    #[error("duplicate label \"{label}\" at offset {offset}")]
    DuplicateLabel { offset: usize, label: String },
    #[error("trailing input after ';' at offset {offset}")]
    Trailing { offset: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("caterpillar size must be at least 1")]
    EmptyCaterpillar,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RankingError {
    #[error("rank vector length {got} does not match tree size {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("leaf \"{label}\" must have rank {want}, got {got}")]
    BadLeafRank { label: String, want: usize, got: usize },
    #[error("internal node \"{label}\" has out-of-range rank {got}")]
    OutOfRange { label: String, got: usize },
    #[error("duplicate internal rank {rank}")]
    DuplicateRank { rank: usize },
    #[error("rank of \"{child}\" is not larger than rank of its ancestor \"{parent}\"")]
    OrderViolation { parent: String, child: String },
    #[error("no node labeled \"{label}\"")]
    UnknownLabel { label: String },
    #[error("label \"{label}\" is not an internal node")]
    NotInternal { label: String },
    #[error("missing rank for internal node \"{label}\"")]
    MissingRank { label: String },
    #[error("malformed ranking line {line}: expected `label<TAB>rank`")]
    MalformedLine { line: usize },
    #[error("tree has {extensions} rankings; `unique` requires exactly one")]
    NotUnique { extensions: usize },
}

#[derive(Debug, Clone)]
struct SpeciesNode {
    label: String,
    parent: Option<NodeId>,
    /// `None` for leaves, `(left, right)` for internal nodes.
    children: Option<(NodeId, NodeId)>,
}

/// A uniquely labeled rooted binary species tree.
///
/// Size is the number of leaves. Trees are ordered: the child order is
/// whatever the Newick input or the builder prescribed. Counting and
/// asymptotics only depend on the shape, so mirror trees behave identically.
#[derive(Debug, Clone)]
pub struct SpeciesTree {
    nodes: Vec<SpeciesNode>,
    root: NodeId,
    leaf_count: usize,
    /// Euler tour intervals for O(1) ancestry tests.
    tin: Vec<usize>,
    tout: Vec<usize>,
}

impl SpeciesTree {
    fn from_nodes(nodes: Vec<SpeciesNode>, root: NodeId) -> Self {
        let leaf_count = nodes.iter().filter(|n| n.children.is_none()).count();
        let mut tree = SpeciesTree {
            tin: vec![0; nodes.len()],
            tout: vec![0; nodes.len()],
            nodes,
            root,
            leaf_count,
        };
        let mut clock = 0;
        let mut stack = vec![(tree.root, false)];
        while let Some((u, done)) = stack.pop() {
            if done {
                tree.tout[u] = clock;
                clock += 1;
                continue;
            }
            tree.tin[u] = clock;
            clock += 1;
            stack.push((u, true));
            if let Some((l, r)) = tree.nodes[u].children {
                stack.push((r, false));
                stack.push((l, false));
            }
        }
        tree
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Number of leaves (the size of the tree).
    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn label(&self, u: NodeId) -> &str {
        &self.nodes[u].label
    }

    pub fn parent(&self, u: NodeId) -> Option<NodeId> {
        self.nodes[u].parent
    }

    /// `(left, right)` children, or `None` for a leaf.
    pub fn children(&self, u: NodeId) -> Option<(NodeId, NodeId)> {
        self.nodes[u].children
    }

    pub fn is_leaf(&self, u: NodeId) -> bool {
        self.nodes[u].children.is_none()
    }

    /// Node ids in depth-first (pre-order) sequence.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(u) = stack.pop() {
            order.push(u);
            if let Some((l, r)) = self.nodes[u].children {
                stack.push(r);
                stack.push(l);
            }
        }
        order
    }

    /// Node ids in post-order (children before parents).
    pub fn postorder(&self) -> Vec<NodeId> {
        let mut post = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, false)];
        while let Some((u, done)) = stack.pop() {
            if done {
                post.push(u);
                continue;
            }
            stack.push((u, true));
            if let Some((l, r)) = self.nodes[u].children {
                stack.push((r, false));
                stack.push((l, false));
            }
        }
        post
    }

    /// Leaves in depth-first order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.preorder().into_iter().filter(|&u| self.is_leaf(u)).collect()
    }

    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.preorder().into_iter().filter(|&u| !self.is_leaf(u)).collect()
    }

    pub fn node_by_label(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label)
    }

    /// True when `a` is a strict ancestor of `b`.
    pub fn is_strict_ancestor(&self, a: NodeId, b: NodeId) -> bool {
        a != b && self.tin[a] <= self.tin[b] && self.tout[b] <= self.tout[a]
    }

    /// Nodes that are neither ancestors nor descendants of `u` (and not `u`).
    pub fn incomparable(&self, u: NodeId) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&v| {
                v != u && !self.is_strict_ancestor(u, v) && !self.is_strict_ancestor(v, u)
            })
            .collect()
    }

    /// Serialize to Newick, internal labels included, trailing semicolon.
    pub fn to_newick(&self) -> String {
        fn rec(tree: &SpeciesTree, u: NodeId, out: &mut String) {
            if let Some((l, r)) = tree.nodes[u].children {
                out.push('(');
                rec(tree, l, out);
                out.push(',');
                rec(tree, r, out);
                out.push(')');
            }
            out.push_str(&tree.nodes[u].label);
        }
        let mut out = String::new();
        rec(self, self.root, &mut out);
        out.push(';');
        out
    }

    /// Read-only unified view used by the grammar, sampling and enumeration.
    pub fn view(&self) -> TreeView {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| ViewNode {
                label: n.label.clone(),
                parent: n.parent,
                children: match n.children {
                    None => Children::Leaf,
                    Some((l, r)) => Children::Binary(l, r),
                },
                slice: None,
                origin: Origin::Original(i),
            })
            .collect();
        TreeView::new(nodes, self.root, false)
    }
}

// ---------------------------------------------------------------------------
// Newick parsing
// ---------------------------------------------------------------------------

struct NewickParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn is_label_byte(b: u8) -> bool {
    !(b.is_ascii_whitespace() || matches!(b, b'(' | b')' | b',' | b';' | b':'))
}

impl<'a> NewickParser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn label(&mut self) -> Option<String> {
        let start = self.pos;
        while self.pos < self.bytes.len() && is_label_byte(self.bytes[self.pos]) {
            self.pos += 1;
        }
        if self.pos == start {
            None
        } else {
            Some(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
        }
    }

    fn subtree(
        &mut self,
        nodes: &mut Vec<SpeciesNode>,
        offsets: &mut Vec<usize>,
    ) -> Result<NodeId, NewickError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let first = self.subtree(nodes, offsets)?;
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => return Err(NewickError::NonBinary { offset: start }),
                    Some(c) => {
                        return Err(NewickError::Unexpected {
                            offset: self.pos,
                            found: c as char,
                            expected: "','",
                        })
                    }
                    None => {
                        return Err(NewickError::UnexpectedEnd {
                            offset: self.pos,
                            expected: "','",
                        })
                    }
                }
                let second = self.subtree(nodes, offsets)?;
                self.skip_ws();
                match self.peek() {
                    Some(b')') => self.pos += 1,
                    Some(b',') => return Err(NewickError::NonBinary { offset: start }),
                    Some(c) => {
                        return Err(NewickError::Unexpected {
                            offset: self.pos,
                            found: c as char,
                            expected: "')'",
                        })
                    }
                    None => {
                        return Err(NewickError::UnexpectedEnd {
                            offset: self.pos,
                            expected: "')'",
                        })
                    }
                }
                let label = self.label();
                let (l, r) = (first, second);
                let label = label.unwrap_or_else(|| {
                    // generated labels concatenate the child labels in
                    // sorted order, independent of the tree's child order
                    if nodes[l].label <= nodes[r].label {
                        format!("{}{}", nodes[l].label, nodes[r].label)
                    } else {
                        format!("{}{}", nodes[r].label, nodes[l].label)
                    }
                });
                let id = nodes.len();
                nodes.push(SpeciesNode {
                    label,
                    parent: None,
                    children: Some((l, r)),
                });
                offsets.push(start);
                nodes[l].parent = Some(id);
                nodes[r].parent = Some(id);
                Ok(id)
            }
            Some(c) if is_label_byte(c) => {
                let label = self.label().expect("label byte present");
                let id = nodes.len();
                nodes.push(SpeciesNode {
                    label,
                    parent: None,
                    children: None,
                });
                offsets.push(start);
                Ok(id)
            }
            Some(c) => Err(NewickError::Unexpected {
                offset: self.pos,
                found: c as char,
                expected: "'(' or a label",
            }),
            None => Err(NewickError::UnexpectedEnd {
                offset: self.pos,
                expected: "'(' or a label",
            }),
        }
    }
}

/// Parse a rooted binary Newick string (no branch lengths) into a
/// [`SpeciesTree`].
///
/// Newick is an ordered format and the child order is preserved as written.
/// Missing internal labels are generated as the concatenation of the sorted
/// child labels. Errors carry the byte offset of the offending input.
pub fn parse_newick(text: &str) -> Result<SpeciesTree, NewickError> {
    let mut parser = NewickParser {
        bytes: text.as_bytes(),
        pos: 0,
    };
    let mut nodes = Vec::new();
    let mut offsets = Vec::new();
    let root = parser.subtree(&mut nodes, &mut offsets)?;
    parser.skip_ws();
    match parser.peek() {
        Some(b';') => parser.pos += 1,
        Some(c) => {
            return Err(NewickError::Unexpected {
                offset: parser.pos,
                found: c as char,
                expected: "';'",
            })
        }
        None => {
            return Err(NewickError::UnexpectedEnd {
                offset: parser.pos,
                expected: "';'",
            })
        }
    }
    parser.skip_ws();
    if parser.pos < parser.bytes.len() {
        return Err(NewickError::Trailing { offset: parser.pos });
    }
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for (i, node) in nodes.iter().enumerate() {
        if seen.insert(node.label.as_str(), ()).is_some() {
            return Err(NewickError::DuplicateLabel {
                offset: offsets[i],
                label: node.label.clone(),
            });
        }
    }
    Ok(SpeciesTree::from_nodes(nodes, root))
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// Ordered binary tree shape; leaves are unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Shape {
    Leaf,
    Node(Box<Shape>, Box<Shape>),
}

/// Build a tree from a shape, labeling leaves `S1..Sk` in depth-first order
/// and internal nodes with the sorted concatenation of their child labels.
fn from_shape(shape: &Shape) -> SpeciesTree {
    fn rec(shape: &Shape, nodes: &mut Vec<SpeciesNode>, next_leaf: &mut usize) -> NodeId {
        match shape {
            Shape::Leaf => {
                let id = nodes.len();
                nodes.push(SpeciesNode {
                    label: format!("S{}", *next_leaf),
                    parent: None,
                    children: None,
                });
                *next_leaf += 1;
                id
            }
            Shape::Node(l, r) => {
                let li = rec(l, nodes, next_leaf);
                let ri = rec(r, nodes, next_leaf);
                let (a, b) = if nodes[li].label <= nodes[ri].label {
                    (&nodes[li].label, &nodes[ri].label)
                } else {
                    (&nodes[ri].label, &nodes[li].label)
                };
                let label = format!("{}{}", a, b);
                let id = nodes.len();
                nodes.push(SpeciesNode {
                    label,
                    parent: None,
                    children: Some((li, ri)),
                });
                nodes[li].parent = Some(id);
                nodes[ri].parent = Some(id);
                id
            }
        }
    }
    let mut nodes = Vec::new();
    let mut next_leaf = 1;
    let root = rec(shape, &mut nodes, &mut next_leaf);
    SpeciesTree::from_nodes(nodes, root)
}

fn caterpillar_shape(k: usize) -> Shape {
    let mut shape = Shape::Leaf;
    for _ in 1..k {
        shape = Shape::Node(Box::new(shape), Box::new(Shape::Leaf));
    }
    shape
}

/// The caterpillar tree with `k` leaves: a left subtree that is the
/// caterpillar with `k - 1` leaves and a right subtree that is a leaf.
pub fn caterpillar(k: usize) -> Result<SpeciesTree, TreeError> {
    if k == 0 {
        return Err(TreeError::EmptyCaterpillar);
    }
    Ok(from_shape(&caterpillar_shape(k)))
}

fn complete_shape(h: u32) -> Shape {
    if h == 0 {
        Shape::Leaf
    } else {
        let sub = complete_shape(h - 1);
        Shape::Node(Box::new(sub.clone()), Box::new(sub))
    }
}

/// The complete binary tree of height `h`, with `2^h` leaves.
pub fn complete(h: u32) -> SpeciesTree {
    assert!(h <= 26, "complete tree of height {h} would be enormous");
    from_shape(&complete_shape(h))
}

/// The balanced tree with `k` leaves: at every node the leaf counts of the
/// two subtrees differ by at most one (larger half on the left).
pub fn balanced(k: usize) -> Result<SpeciesTree, TreeError> {
    if k == 0 {
        return Err(TreeError::EmptyCaterpillar);
    }
    fn shape(k: usize) -> Shape {
        if k == 1 {
            Shape::Leaf
        } else {
            Shape::Node(Box::new(shape(k.div_ceil(2))), Box::new(shape(k / 2)))
        }
    }
    Ok(from_shape(&shape(k)))
}

/// True when every node splits its leaves as evenly as possible.
pub fn is_balanced(tree: &SpeciesTree) -> bool {
    fn rec(tree: &SpeciesTree, u: NodeId) -> Option<usize> {
        match tree.children(u) {
            None => Some(1),
            Some((l, r)) => {
                let nl = rec(tree, l)?;
                let nr = rec(tree, r)?;
                if nl.abs_diff(nr) <= 1 {
                    Some(nl + nr)
                } else {
                    None
                }
            }
        }
    }
    rec(tree, tree.root()).is_some()
}

fn catalan_table(k: usize) -> Vec<u128> {
    // t[i] = number of ordered binary tree shapes with i leaves
    let mut t = vec![0u128; k + 1];
    if k >= 1 {
        t[1] = 1;
    }
    for n in 2..=k {
        for i in 1..n {
            t[n] += t[i] * t[n - i];
        }
    }
    t
}

/// A species tree drawn uniformly at random among the ordered rooted binary
/// tree shapes with `k` leaves (leaves labeled `S1..Sk` depth-first).
///
/// The draw is the recursive method: the root split `(i, k - i)` is chosen
/// with probability proportional to the number of shape pairs, then both
/// subtrees are drawn recursively. Same seed, same tree.
pub fn random_tree(k: usize, seed: u64) -> SpeciesTree {
    assert!(k >= 1, "random_tree requires k >= 1");
    assert!(
        k <= MAX_RANDOM_TREE_LEAVES,
        "random_tree supports k <= {MAX_RANDOM_TREE_LEAVES}"
    );
    let table = catalan_table(k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn rec(k: usize, table: &[u128], rng: &mut ChaCha8Rng) -> Shape {
        if k == 1 {
            return Shape::Leaf;
        }
        let mut r = rng.gen_range(0..table[k]);
        for i in 1..k {
            let w = table[i] * table[k - i];
            if r < w {
                let l = rec(i, table, rng);
                let rgt = rec(k - i, table, rng);
                return Shape::Node(Box::new(l), Box::new(rgt));
            }
            r -= w;
        }
        unreachable!("split weights sum to the Catalan total");
    }
    from_shape(&rec(k, &table, &mut rng))
}

/// All ordered binary tree shapes with `k` leaves, as species trees labeled
/// `S1..Sk`. There are `Catalan(k - 1)` of them; keep `k` small.
pub fn all_shapes(k: usize) -> Vec<SpeciesTree> {
    fn shapes(k: usize) -> Vec<Shape> {
        if k == 1 {
            return vec![Shape::Leaf];
        }
        let mut out = Vec::new();
        for i in 1..k {
            for l in shapes(i) {
                for r in shapes(k - i) {
                    out.push(Shape::Node(Box::new(l.clone()), Box::new(r.clone())));
                }
            }
        }
        out
    }
    assert!(k >= 1);
    shapes(k).iter().map(from_shape).collect()
}

// ---------------------------------------------------------------------------
// Rankings
// ---------------------------------------------------------------------------

/// A total order on the internal nodes of a species tree: ranks `1..k-1`
/// assigned top-down (ancestors before descendants), every leaf at rank `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    ranks: Vec<usize>,
}

impl Ranking {
    /// Wrap a per-node rank vector (leaves must carry rank `k`).
    pub fn new(tree: &SpeciesTree, ranks: Vec<usize>) -> Result<Ranking, RankingError> {
        let k = tree.leaf_count();
        if ranks.len() != tree.len() {
            return Err(RankingError::LengthMismatch {
                got: ranks.len(),
                want: tree.len(),
            });
        }
        let mut seen = vec![false; k.max(1)];
        for (u, &r) in ranks.iter().enumerate() {
            if tree.is_leaf(u) {
                if r != k {
                    return Err(RankingError::BadLeafRank {
                        label: tree.label(u).to_string(),
                        want: k,
                        got: r,
                    });
                }
            } else {
                if r == 0 || r >= k {
                    return Err(RankingError::OutOfRange {
                        label: tree.label(u).to_string(),
                        got: r,
                    });
                }
                if seen[r] {
                    return Err(RankingError::DuplicateRank { rank: r });
                }
                seen[r] = true;
            }
        }
        for (u, &rank_u) in ranks.iter().enumerate() {
            if let Some(p) = tree.parent(u) {
                if ranks[p] >= rank_u {
                    return Err(RankingError::OrderViolation {
                        parent: tree.label(p).to_string(),
                        child: tree.label(u).to_string(),
                    });
                }
            }
        }
        Ok(Ranking { ranks })
    }

    /// Build from `(internal label, rank)` pairs.
    pub fn from_pairs(
        tree: &SpeciesTree,
        pairs: &[(String, usize)],
    ) -> Result<Ranking, RankingError> {
        let k = tree.leaf_count();
        let mut ranks = vec![usize::MAX; tree.len()];
        for u in tree.leaves() {
            ranks[u] = k;
        }
        for (label, rank) in pairs {
            let u = tree
                .node_by_label(label)
                .ok_or_else(|| RankingError::UnknownLabel {
                    label: label.clone(),
                })?;
            if tree.is_leaf(u) {
                return Err(RankingError::NotInternal {
                    label: label.clone(),
                });
            }
            ranks[u] = *rank;
        }
        for u in tree.internal_nodes() {
            if ranks[u] == usize::MAX {
                return Err(RankingError::MissingRank {
                    label: tree.label(u).to_string(),
                });
            }
        }
        Ranking::new(tree, ranks)
    }

    /// Parse the sidecar format: one `label<TAB>rank` line per internal node.
    pub fn from_sidecar(tree: &SpeciesTree, text: &str) -> Result<Ranking, RankingError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let (label, rank) = line
                .split_once('\t')
                .ok_or(RankingError::MalformedLine { line: i + 1 })?;
            let rank: usize = rank
                .trim()
                .parse()
                .map_err(|_| RankingError::MalformedLine { line: i + 1 })?;
            pairs.push((label.to_string(), rank));
        }
        Ranking::from_pairs(tree, &pairs)
    }

    /// The unique ranking of a tree whose internal nodes form a chain.
    /// Errors when more than one ranking exists.
    pub fn unique(tree: &SpeciesTree) -> Result<Ranking, RankingError> {
        // a tree has a unique ranking iff every internal node has at most
        // one internal child, so the internal nodes form a chain
        let chain = tree.internal_nodes().into_iter().all(|u| {
            let (l, r) = tree.children(u).expect("internal");
            tree.is_leaf(l) || tree.is_leaf(r)
        });
        if !chain {
            return Err(RankingError::NotUnique {
                extensions: all_rankings(tree).len(),
            });
        }
        let mut seq = Vec::new();
        let mut u = Some(tree.root());
        while let Some(x) = u {
            if tree.is_leaf(x) {
                break;
            }
            seq.push(x);
            let (l, r) = tree.children(x).expect("internal");
            u = Some(if tree.is_leaf(l) { r } else { l });
        }
        Ok(ranking_from_sequence(tree, &seq))
    }

    pub fn rank(&self, u: NodeId) -> usize {
        self.ranks[u]
    }

    /// `(label, rank)` pairs for internal nodes, sorted by rank.
    pub fn internal_pairs(&self, tree: &SpeciesTree) -> Vec<(String, usize)> {
        let mut pairs: Vec<(String, usize)> = tree
            .internal_nodes()
            .into_iter()
            .map(|u| (tree.label(u).to_string(), self.ranks[u]))
            .collect();
        pairs.sort_by_key(|p| p.1);
        pairs
    }
}

/// Internal nodes of `u`'s subtree in rank order, as a sequence.
fn extension_sequences(tree: &SpeciesTree, u: NodeId) -> Vec<Vec<NodeId>> {
    match tree.children(u) {
        None => vec![Vec::new()],
        Some((l, r)) => {
            let ls = extension_sequences(tree, l);
            let rs = extension_sequences(tree, r);
            let mut out = Vec::new();
            for a in &ls {
                for b in &rs {
                    for merged in merges(a, b) {
                        let mut seq = Vec::with_capacity(1 + merged.len());
                        seq.push(u);
                        seq.extend(merged);
                        out.push(seq);
                    }
                }
            }
            out
        }
    }
}

fn merges(a: &[NodeId], b: &[NodeId]) -> Vec<Vec<NodeId>> {
    if a.is_empty() {
        return vec![b.to_vec()];
    }
    if b.is_empty() {
        return vec![a.to_vec()];
    }
    let mut out = Vec::new();
    for mut m in merges(&a[1..], b) {
        m.insert(0, a[0]);
        out.push(m);
    }
    for mut m in merges(a, &b[1..]) {
        m.insert(0, b[0]);
        out.push(m);
    }
    out
}

fn ranking_from_sequence(tree: &SpeciesTree, seq: &[NodeId]) -> Ranking {
    let k = tree.leaf_count();
    let mut ranks = vec![k; tree.len()];
    for (i, &u) in seq.iter().enumerate() {
        ranks[u] = i + 1;
    }
    Ranking::new(tree, ranks).expect("sequence respects the tree order")
}

/// Every valid ranking of `tree` (one per linear extension of its internal
/// nodes). Exponential; intended for small trees.
pub fn all_rankings(tree: &SpeciesTree) -> Vec<Ranking> {
    extension_sequences(tree, tree.root())
        .iter()
        .map(|seq| ranking_from_sequence(tree, seq))
        .collect()
}

/// A ranking drawn uniformly among all valid rankings of `tree`.
///
/// Internal-node orders of the two subtrees are merged with the interleaving
/// probabilities `p / (p + q)`, which realizes the binomial-coefficient
/// weighting exactly; linear time per draw.
pub fn random_ranking(tree: &SpeciesTree, seed: u64) -> Ranking {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn rec(tree: &SpeciesTree, u: NodeId, rng: &mut ChaCha8Rng) -> Vec<NodeId> {
        match tree.children(u) {
            None => Vec::new(),
            Some((l, r)) => {
                let a = rec(tree, l, rng);
                let b = rec(tree, r, rng);
                let mut seq = Vec::with_capacity(1 + a.len() + b.len());
                seq.push(u);
                let (mut i, mut j) = (0, 0);
                while i < a.len() || j < b.len() {
                    let p = a.len() - i;
                    let q = b.len() - j;
                    if q == 0 || (p > 0 && rng.gen_range(0..p + q) < p) {
                        seq.push(a[i]);
                        i += 1;
                    } else {
                        seq.push(b[j]);
                        j += 1;
                    }
                }
                seq
            }
        }
    }
    let seq = rec(tree, tree.root(), &mut rng);
    ranking_from_sequence(tree, &seq)
}

// ---------------------------------------------------------------------------
// Time-sliced trees
// ---------------------------------------------------------------------------

/// Children of a node in a unary-binary tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Children {
    Leaf,
    Unary(NodeId),
    Binary(NodeId, NodeId),
}

/// Where a view node comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// An original species tree node (same id for unranked views).
    Original(NodeId),
    /// A unary node inserted on the edge above original node `below`.
    Inserted { below: NodeId },
}

#[derive(Debug, Clone)]
pub struct ViewNode {
    pub label: String,
    pub parent: Option<NodeId>,
    pub children: Children,
    /// Time slice in `1..=k` for ranked views, `None` otherwise.
    pub slice: Option<usize>,
    pub origin: Origin,
}

/// Unified read-only view of an unranked species tree or a time-sliced tree.
///
/// Histories, grammars and the enumeration oracle all address species
/// structure through this type, so node ids in a [`crate::History`] are view
/// ids: original tree ids for unranked models, sliced-tree ids for ranked
/// ones.
#[derive(Debug, Clone)]
pub struct TreeView {
    nodes: Vec<ViewNode>,
    root: NodeId,
    leaf_count: usize,
    ranked: bool,
    tin: Vec<usize>,
    tout: Vec<usize>,
    leaf_number: Vec<Option<usize>>,
}

impl TreeView {
    fn new(nodes: Vec<ViewNode>, root: NodeId, ranked: bool) -> TreeView {
        let n = nodes.len();
        let mut view = TreeView {
            nodes,
            root,
            leaf_count: 0,
            ranked,
            tin: vec![0; n],
            tout: vec![0; n],
            leaf_number: vec![None; n],
        };
        let mut clock = 0;
        let mut next_leaf = 1;
        let mut stack = vec![(root, false)];
        while let Some((u, done)) = stack.pop() {
            if done {
                view.tout[u] = clock;
                clock += 1;
                continue;
            }
            view.tin[u] = clock;
            clock += 1;
            stack.push((u, true));
            match view.nodes[u].children {
                Children::Leaf => {
                    view.leaf_number[u] = Some(next_leaf);
                    next_leaf += 1;
                }
                Children::Unary(c) => stack.push((c, false)),
                Children::Binary(l, r) => {
                    stack.push((r, false));
                    stack.push((l, false));
                }
            }
        }
        view.leaf_count = next_leaf - 1;
        view
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// True for views derived from a ranking (time-sliced trees).
    pub fn ranked(&self) -> bool {
        self.ranked
    }

    pub fn node(&self, u: NodeId) -> &ViewNode {
        &self.nodes[u]
    }

    pub fn label(&self, u: NodeId) -> &str {
        &self.nodes[u].label
    }

    pub fn children(&self, u: NodeId) -> Children {
        self.nodes[u].children
    }

    pub fn parent(&self, u: NodeId) -> Option<NodeId> {
        self.nodes[u].parent
    }

    pub fn is_leaf(&self, u: NodeId) -> bool {
        matches!(self.nodes[u].children, Children::Leaf)
    }

    pub fn slice(&self, u: NodeId) -> Option<usize> {
        self.nodes[u].slice
    }

    pub fn origin(&self, u: NodeId) -> Origin {
        self.nodes[u].origin
    }

    /// 1-based depth-first number of a leaf.
    pub fn leaf_number(&self, u: NodeId) -> Option<usize> {
        self.leaf_number[u]
    }

    pub fn is_strict_ancestor(&self, a: NodeId, b: NodeId) -> bool {
        a != b && self.tin[a] <= self.tin[b] && self.tout[b] <= self.tout[a]
    }

    /// Post-order traversal (children before parents).
    pub fn postorder(&self) -> Vec<NodeId> {
        let mut post = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, false)];
        while let Some((u, done)) = stack.pop() {
            if done {
                post.push(u);
                continue;
            }
            stack.push((u, true));
            match self.nodes[u].children {
                Children::Leaf => {}
                Children::Unary(c) => stack.push((c, false)),
                Children::Binary(l, r) => {
                    stack.push((r, false));
                    stack.push((l, false));
                }
            }
        }
        post
    }

    /// The set `C̄(u)`: same-slice nodes for ranked views, nodes neither
    /// ancestral nor descendant for unranked ones. Sorted by node id.
    pub fn incomparable(&self, u: NodeId) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&v| self.is_incomparable(u, v))
            .collect()
    }

    pub fn is_incomparable(&self, u: NodeId, v: NodeId) -> bool {
        if u == v {
            return false;
        }
        if self.ranked {
            self.nodes[u].slice == self.nodes[v].slice
        } else {
            !self.is_strict_ancestor(u, v) && !self.is_strict_ancestor(v, u)
        }
    }
}

/// The unary-binary tree obtained by subdividing species tree edges at every
/// time slice of a ranking.
///
/// Slice `t` (for `t < k`) holds exactly one binary node (the internal node
/// of rank `t`) plus one inserted unary node per edge spanning that time;
/// slice `k` holds the `k` leaves. Inserted nodes are labeled
/// `<childLabel>@<slice>`.
#[derive(Debug, Clone)]
pub struct TimeSlicedTree {
    view: TreeView,
    slices: Vec<Vec<NodeId>>,
    sliced_of_original: Vec<NodeId>,
}

impl TimeSlicedTree {
    pub fn view(&self) -> &TreeView {
        &self.view
    }

    /// Number of slices (equals the leaf count).
    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }

    /// Members of slice `t` (1-based), in depth-first order.
    pub fn slice_members(&self, t: usize) -> &[NodeId] {
        &self.slices[t - 1]
    }

    /// Sliced-tree id of an original node.
    pub fn sliced_id(&self, original: NodeId) -> NodeId {
        self.sliced_of_original[original]
    }

    /// Original species node carrying a sliced node: the node itself, or the
    /// edge's lower endpoint for inserted unary nodes.
    pub fn original_carrier(&self, u: NodeId) -> NodeId {
        match self.view.origin(u) {
            Origin::Original(orig) => orig,
            Origin::Inserted { below } => below,
        }
    }
}

/// Subdivide `tree` according to `ranking`, producing the time-sliced tree.
pub fn time_slice(tree: &SpeciesTree, ranking: &Ranking) -> TimeSlicedTree {
    let k = tree.leaf_count();
    let mut nodes: Vec<ViewNode> = Vec::new();
    let mut sliced_of_original = vec![usize::MAX; tree.len()];

    fn build(
        tree: &SpeciesTree,
        ranking: &Ranking,
        u: NodeId,
        attach: Option<NodeId>,
        nodes: &mut Vec<ViewNode>,
        sliced_of_original: &mut Vec<NodeId>,
    ) -> NodeId {
        // chain of inserted unary nodes covering slices strictly between
        // the parent's rank and u's rank; the caller wires the chain top
        // into its own children
        let lo = tree.parent(u).map_or(ranking.rank(u), |p| ranking.rank(p) + 1);
        let hi = ranking.rank(u);
        let mut prev: Option<NodeId> = None;
        let mut top = None;
        for t in lo..hi {
            let id = nodes.len();
            nodes.push(ViewNode {
                label: format!("{}@{}", tree.label(u), t),
                parent: prev.or(attach),
                children: Children::Leaf, // linked just below
                slice: Some(t),
                origin: Origin::Inserted { below: u },
            });
            if let Some(p) = prev {
                nodes[p].children = Children::Unary(id);
            }
            if top.is_none() {
                top = Some(id);
            }
            prev = Some(id);
        }
        let id = nodes.len();
        nodes.push(ViewNode {
            label: tree.label(u).to_string(),
            parent: prev.or(attach),
            children: Children::Leaf,
            slice: Some(hi),
            origin: Origin::Original(u),
        });
        sliced_of_original[u] = id;
        if let Some(p) = prev {
            nodes[p].children = Children::Unary(id);
        }
        if let Some((l, r)) = tree.children(u) {
            let li = build(tree, ranking, l, Some(id), nodes, sliced_of_original);
            let ri = build(tree, ranking, r, Some(id), nodes, sliced_of_original);
            nodes[id].children = Children::Binary(li, ri);
        }
        top.unwrap_or(id)
    }

    let root = build(
        tree,
        ranking,
        tree.root(),
        None,
        &mut nodes,
        &mut sliced_of_original,
    );
    let view = TreeView::new(nodes, root, true);
    let mut slices = vec![Vec::new(); k];
    let mut order: Vec<NodeId> = (0..view.len()).collect();
    order.sort_by_key(|&u| view.tin[u]);
    for u in order {
        let t = view.slice(u).expect("ranked view");
        slices[t - 1].push(u);
    }
    TimeSlicedTree {
        view,
        slices,
        sliced_of_original,
    }
}

impl fmt::Display for SpeciesTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_newick())
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_smallest() {
        let t = parse_newick("(A,B)R;").unwrap();
        assert_eq!(t.leaf_count(), 2);
        assert_eq!(t.label(t.root()), "R");
        assert_eq!(t.to_newick(), "(A,B)R;");
    }

    #[test]
    fn parse_preserves_child_order() {
        let t = parse_newick("(B,A)R;").unwrap();
        assert_eq!(t.to_newick(), "(B,A)R;");
        let auto = parse_newick("(B,A);").unwrap();
        assert_eq!(auto.label(auto.root()), "AB");
    }

    #[test]
    fn parse_caterpillar3() {
        let t = parse_newick("((A,B)X,C)R;").unwrap();
        assert_eq!(t.leaf_count(), 3);
        let (l, r) = t.children(t.root()).unwrap();
        assert_eq!(t.label(l), "X");
        assert_eq!(t.label(r), "C");
    }

    #[test]
    fn parse_complete_height2() {
        let t = parse_newick("((A,B)X,(C,D)Y)R;").unwrap();
        assert_eq!(t.leaf_count(), 4);
        let (l, r) = t.children(t.root()).unwrap();
        assert!(!t.is_leaf(l) && !t.is_leaf(r));
    }

    #[test]
    fn parse_autolabels() {
        let t = parse_newick("((A,B),C);").unwrap();
        let (l, _) = t.children(t.root()).unwrap();
        assert_eq!(t.label(l), "AB");
        assert_eq!(t.label(t.root()), "ABC");
    }

    #[test]
    fn parse_errors_carry_offsets() {
        match parse_newick("(A,B,C)R;") {
            Err(NewickError::NonBinary { offset: 0 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
        match parse_newick("((A,B)X,A)R;") {
            Err(NewickError::DuplicateLabel { label, .. }) => assert_eq!(label, "A"),
            other => panic!("unexpected: {other:?}"),
        }
        assert!(matches!(
            parse_newick("(A,B)R"),
            Err(NewickError::UnexpectedEnd { .. })
        ));
        assert!(matches!(
            parse_newick("(A,B)R; x"),
            Err(NewickError::Trailing { .. })
        ));
        assert!(matches!(
            parse_newick("(A:1,B)R;"),
            Err(NewickError::Unexpected { .. })
        ));
        assert!(matches!(
            parse_newick("(A)R;"),
            Err(NewickError::NonBinary { .. })
        ));
    }

    #[test]
    fn roundtrip_canonical_inputs() {
        for text in ["(A,B)R;", "((A,B)X,C)R;", "((A,B)X,(C,D)Y)R;"] {
            let t = parse_newick(text).unwrap();
            assert_eq!(t.to_newick(), text);
            let again = parse_newick(&t.to_newick()).unwrap();
            assert_eq!(again.to_newick(), text);
        }
    }

    #[test]
    fn caterpillar_builder() {
        assert_eq!(caterpillar(0).unwrap_err(), TreeError::EmptyCaterpillar);
        let t1 = caterpillar(1).unwrap();
        assert_eq!(t1.leaf_count(), 1);
        assert!(t1.is_leaf(t1.root()));
        let t2 = caterpillar(2).unwrap();
        assert_eq!(t2.leaf_count(), 2);
        let t5 = caterpillar(5).unwrap();
        assert_eq!(t5.leaf_count(), 5);
        // left spine of depth 4, right children always leaves
        let mut u = t5.root();
        let mut depth = 0;
        while let Some((l, r)) = t5.children(u) {
            assert!(t5.is_leaf(r));
            u = l;
            depth += 1;
        }
        assert_eq!(depth, 4);
        let leaves: Vec<_> = t5.leaves().iter().map(|&u| t5.label(u).to_string()).collect();
        assert_eq!(leaves, ["S1", "S2", "S3", "S4", "S5"]);
    }

    #[test]
    fn complete_builder() {
        let t0 = complete(0);
        assert_eq!(t0.leaf_count(), 1);
        let t1 = complete(1);
        assert_eq!(t1.to_newick(), caterpillar(2).unwrap().to_newick());
        let t2 = complete(2);
        assert_eq!(t2.leaf_count(), 4);
        let (l, r) = t2.children(t2.root()).unwrap();
        for side in [l, r] {
            let (a, b) = t2.children(side).unwrap();
            assert!(t2.is_leaf(a) && t2.is_leaf(b));
        }
    }

    #[test]
    fn incomparable_unranked_examples() {
        let t = parse_newick("((A,B)X,(C,D)Y)R;").unwrap();
        assert!(t.incomparable(t.root()).is_empty());
        let x = t.node_by_label("X").unwrap();
        let inc: Vec<_> = t
            .incomparable(x)
            .into_iter()
            .map(|u| t.label(u).to_string())
            .collect();
        let mut sorted = inc.clone();
        sorted.sort();
        assert_eq!(sorted, ["C", "D", "Y"]);

        let cherry = parse_newick("(A,B)R;").unwrap();
        let a = cherry.node_by_label("A").unwrap();
        let b = cherry.node_by_label("B").unwrap();
        assert_eq!(cherry.incomparable(a), vec![b]);
    }

    #[test]
    fn incomparability_is_symmetric() {
        let t = random_tree(9, 7);
        for u in 0..t.len() {
            for v in 0..t.len() {
                let uv = t.incomparable(u).contains(&v);
                let vu = t.incomparable(v).contains(&u);
                assert_eq!(uv, vu);
            }
        }
    }

    #[test]
    fn ranking_validation() {
        let t = parse_newick("((A,B)X,C)R;").unwrap();
        let r = t.node_by_label("R").unwrap();
        let x = t.node_by_label("X").unwrap();
        let mut ranks = vec![3; t.len()];
        ranks[r] = 1;
        ranks[x] = 2;
        assert!(Ranking::new(&t, ranks.clone()).is_ok());
        ranks[r] = 2;
        ranks[x] = 1;
        assert!(matches!(
            Ranking::new(&t, ranks.clone()),
            Err(RankingError::OrderViolation { .. })
        ));
        ranks[r] = 1;
        ranks[x] = 1;
        assert!(matches!(
            Ranking::new(&t, ranks),
            Err(RankingError::DuplicateRank { rank: 1 })
        ));
    }

    #[test]
    fn sidecar_roundtrip() {
        let t = parse_newick("((A,B)X,C)R;").unwrap();
        let r = Ranking::from_sidecar(&t, "R\t1\nX\t2\n").unwrap();
        assert_eq!(r.rank(t.node_by_label("R").unwrap()), 1);
        assert_eq!(r.rank(t.node_by_label("X").unwrap()), 2);
        assert_eq!(r.rank(t.node_by_label("A").unwrap()), 3);
        assert!(matches!(
            Ranking::from_sidecar(&t, "R 1\n"),
            Err(RankingError::MalformedLine { line: 1 })
        ));
    }

    #[test]
    fn time_slices_match_rank_construction() {
        // complete tree of height 2 with the ranking A=1, B=2, C=3
        let t = parse_newick("((D,E)B,(F,G)C)A;").unwrap();
        let ranking = Ranking::from_pairs(
            &t,
            &[
                ("A".to_string(), 1),
                ("B".to_string(), 2),
                ("C".to_string(), 3),
            ],
        )
        .unwrap();
        let sliced = time_slice(&t, &ranking);
        let slice_labels = |t: usize| -> Vec<String> {
            sliced
                .slice_members(t)
                .iter()
                .map(|&u| sliced.view().label(u).to_string())
                .collect()
        };
        assert_eq!(slice_labels(1), ["A"]);
        assert_eq!(slice_labels(2), ["B", "C@2"]);
        assert_eq!(slice_labels(3), ["D@3", "E@3", "C"]);
        assert_eq!(slice_labels(4), ["D", "E", "F", "G"]);
        // exactly one binary node per slice below the leaves
        for t in 1..=3 {
            let binary = sliced
                .slice_members(t)
                .iter()
                .filter(|&&u| matches!(sliced.view().children(u), Children::Binary(..)))
                .count();
            assert_eq!(binary, 1);
            assert_eq!(sliced.slice_members(t).len(), t);
        }
    }

    #[test]
    fn cherry_slicing_inserts_nothing() {
        let t = parse_newick("(A,B)R;").unwrap();
        let ranking = Ranking::unique(&t).unwrap();
        let sliced = time_slice(&t, &ranking);
        assert_eq!(sliced.view().len(), t.len());
        assert_eq!(sliced.slice_members(1).len(), 1);
        assert_eq!(sliced.slice_members(2).len(), 2);
    }

    #[test]
    fn caterpillar3_slicing_inserts_one_unary() {
        let t = caterpillar(3).unwrap();
        let ranking = Ranking::unique(&t).unwrap();
        let sliced = time_slice(&t, &ranking);
        let inserted: Vec<_> = (0..sliced.view().len())
            .filter(|&u| matches!(sliced.view().origin(u), Origin::Inserted { .. }))
            .collect();
        assert_eq!(inserted.len(), 1);
        let u = inserted[0];
        assert_eq!(sliced.view().label(u), "S3@2");
        assert_eq!(sliced.view().slice(u), Some(2));
    }

    #[test]
    fn slice_sizes_partition_all_nodes() {
        let t = random_tree(6, 3);
        let ranking = random_ranking(&t, 11);
        let sliced = time_slice(&t, &ranking);
        let k = t.leaf_count();
        let mut total = 0;
        for s in 1..=k {
            let members = sliced.slice_members(s);
            if s < k {
                assert_eq!(members.len(), s);
            } else {
                assert_eq!(members.len(), k);
            }
            total += members.len();
        }
        assert_eq!(total, sliced.view().len());
        for u in 0..sliced.view().len() {
            let inc = sliced.view().incomparable(u);
            let t_u = sliced.view().slice(u).unwrap();
            assert_eq!(inc.len(), sliced.slice_members(t_u).len() - 1);
        }
    }

    #[test]
    fn random_tree_determinism_and_small_cases() {
        assert!(random_tree(1, 0).is_leaf(random_tree(1, 0).root()));
        assert_eq!(random_tree(2, 5).leaf_count(), 2);
        let a = random_tree(7, 42).to_newick();
        let b = random_tree(7, 42).to_newick();
        assert_eq!(a, b);
        let c = random_tree(7, 43).to_newick();
        assert_ne!(a, c, "different seeds should virtually always differ");
    }

    #[test]
    fn random_tree_uniform_over_shapes() {
        // k = 5 has Catalan(4) = 14 ordered shapes; chi-square at alpha = 0.001
        let shapes = all_shapes(5);
        assert_eq!(shapes.len(), 14);
        let index: HashMap<String, usize> = shapes
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_newick(), i))
            .collect();
        let draws = 14_000usize;
        let mut obs = vec![0f64; shapes.len()];
        for seed in 0..draws {
            let t = random_tree(5, seed as u64);
            obs[index[&t.to_newick()]] += 1.0;
        }
        let expected = draws as f64 / shapes.len() as f64;
        let x2: f64 = obs.iter().map(|o| (o - expected).powi(2) / expected).sum();
        // chi2.ppf(0.999, df=13)
        assert!(x2 < 34.528, "chi-square {x2} too large");
    }

    #[test]
    fn random_ranking_unique_cases() {
        let cat = caterpillar(6).unwrap();
        let unique = Ranking::unique(&cat).unwrap();
        for seed in 0..20 {
            assert_eq!(random_ranking(&cat, seed), unique);
        }
        let cherry = parse_newick("(A,B)R;").unwrap();
        assert_eq!(all_rankings(&cherry).len(), 1);
    }

    #[test]
    fn random_ranking_uniform_on_complete2() {
        let t = complete(2);
        let rankings = all_rankings(&t);
        assert_eq!(rankings.len(), 2);
        let mut counts = [0f64; 2];
        let draws = 10_000;
        for seed in 0..draws {
            let r = random_ranking(&t, seed);
            let i = rankings.iter().position(|x| *x == r).unwrap();
            counts[i] += 1.0;
        }
        let expected = draws as f64 / 2.0;
        let x2: f64 = counts.iter().map(|o| (o - expected).powi(2) / expected).sum();
        // chi2.ppf(0.999, df=1)
        assert!(x2 < 10.828, "chi-square {x2} too large");
    }

    #[test]
    fn all_shapes_counts_are_catalan() {
        for (k, want) in [(1, 1), (2, 1), (3, 2), (4, 5), (5, 14), (6, 42)] {
            assert_eq!(all_shapes(k).len(), want);
        }
    }

    #[test]
    fn balanced_predicate() {
        assert!(is_balanced(&balanced(7).unwrap()));
        assert!(is_balanced(&complete(3)));
        assert!(!is_balanced(&caterpillar(4).unwrap()));
    }
}
