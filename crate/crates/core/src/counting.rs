//! Size-indexed dynamic programming over a compiled grammar, producing exact
//! history counts as unbounded integers.
//!
//! For each nonterminal `A` and size `n`, `counts[A][n]` is the number of
//! histories of size `n` derivable from `A`. Union alternatives sum; product
//! alternatives convolve over strictly positive size splits; the leaf rule
//! contributes an indicator at size 1. Sizes are evaluated in ascending
//! order, nodes leaves-to-root, and within a node duplication and transfer
//! rows (which only read smaller sizes) before speciation and history rows.

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

use crate::grammar::{compile, CompileError, Grammar, Model, NtId, NtKind, Symbol};
use crate::species_tree::{time_slice, NodeId, Ranking, SpeciesTree};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CountError {
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("model {0} requires a ranking")]
    MissingRanking(Model),
    #[error("model {0} does not take a ranking")]
    UnexpectedRanking(Model),
}

/// The DP result: per counting class, counts for every size `0..=n_max`.
#[derive(Debug, Clone)]
pub struct CountTable {
    rows: Vec<Vec<BigUint>>,
    /// Cached per-node sums over the incomparable set:
    /// `inc[u][s] = Σ_{v ∈ C̄(u)} H[v][s]` (transfer models only).
    inc: Vec<Vec<BigUint>>,
    class_of: Vec<usize>,
    start: NtId,
    n_max: usize,
    multiplications: u64,
}

impl CountTable {
    /// Count for nonterminal `nt` at size `n`.
    pub fn nt_count(&self, nt: NtId, n: usize) -> &BigUint {
        &self.rows[self.class_of[nt.0]][n]
    }

    /// Number of histories of size `n` (the start symbol's count).
    pub fn history_count(&self, n: usize) -> &BigUint {
        self.nt_count(self.start, n)
    }

    /// Largest size covered by the table.
    pub fn max_size(&self) -> usize {
        self.n_max
    }

    /// Cached `Σ_{v ∈ C̄(u)} H[v][s]`; zero for models without transfer.
    pub fn incomparable_sum(&self, node: NodeId, s: usize) -> &BigUint {
        &self.inc[node][s]
    }

    pub(crate) fn has_incomparable_sums(&self) -> bool {
        !self.inc.is_empty()
    }

    /// Total big-integer multiplications spent building the table.
    pub fn multiplications(&self) -> u64 {
        self.multiplications
    }
}

fn convolve(a: &[BigUint], b: &[BigUint], n: usize, mults: &mut u64) -> BigUint {
    let mut acc = BigUint::zero();
    for m in 1..n {
        if !a[m].is_zero() && !b[n - m].is_zero() {
            acc += &a[m] * &b[n - m];
            *mults += 1;
        }
    }
    acc
}

fn convolve_square(a: &[BigUint], n: usize, mults: &mut u64) -> BigUint {
    let mut acc = BigUint::zero();
    for m in 1..=(n - 1) / 2 {
        if !a[m].is_zero() && !a[n - m].is_zero() {
            acc += &a[m] * &a[n - m];
            *mults += 1;
        }
    }
    acc *= 2u32;
    if n.is_multiple_of(2) && !a[n / 2].is_zero() {
        acc += &a[n / 2] * &a[n / 2];
        *mults += 1;
    }
    acc
}

/// Count of one alternative at size `n`, straight from its symbols.
fn alternative_count(
    grammar: &Grammar,
    rows: &[Vec<BigUint>],
    alt: &[Symbol],
    n: usize,
    mults: &mut u64,
) -> BigUint {
    let mut factors: Vec<usize> = Vec::with_capacity(2);
    let mut extants = 0usize;
    for sym in alt {
        match sym {
            Symbol::Nt(id) => factors.push(grammar.class_of(*id)),
            Symbol::Extant => extants += 1,
            Symbol::Loss | Symbol::Dup | Symbol::Transfer(_) => {}
        }
    }
    if n < extants {
        return BigUint::zero();
    }
    let n = n - extants;
    match factors.as_slice() {
        [] => {
            if n == 0 {
                BigUint::from(1u32)
            } else {
                BigUint::zero()
            }
        }
        [a] => rows[*a][n].clone(),
        [a, b] if a == b => convolve_square(&rows[*a], n, mults),
        [a, b] => convolve(&rows[*a], &rows[*b], n, mults),
        _ => unreachable!("alternatives have at most two nonterminal factors"),
    }
}

/// Evaluate the counting DP for all sizes `1..=n_max`.
pub fn count(grammar: &Grammar, n_max: usize) -> CountTable {
    let view = grammar.view();
    let (class_of, n_classes) = grammar.class_table();
    let mut rows: Vec<Vec<BigUint>> = vec![vec![BigUint::zero(); n_max + 1]; n_classes];
    let transfer = grammar.model().has_transfer();
    let mut inc: Vec<Vec<BigUint>> = if transfer {
        vec![vec![BigUint::zero(); n_max + 1]; view.len()]
    } else {
        Vec::new()
    };
    let mut mults = 0u64;

    // class representatives, grouped by evaluation phase
    let post = view.postorder();
    let mut seen = vec![false; n_classes];
    let mut phase_dt: Vec<NtId> = Vec::new();
    let mut phase_sh: Vec<NtId> = Vec::new();
    for &u in &post {
        let mut take = |nt: NtId, out: &mut Vec<NtId>| {
            let c = class_of[nt.0];
            if !seen[c] {
                seen[c] = true;
                out.push(nt);
            }
        };
        take(grammar.d_of(u), &mut phase_dt);
        if let Some(t) = grammar.t_of(u) {
            take(t, &mut phase_dt);
        }
        if let Some(s) = grammar.s_of(u) {
            take(s, &mut phase_sh);
        }
        take(grammar.h_of(u), &mut phase_sh);
    }

    for n in 1..=n_max {
        for &nt in &phase_dt {
            let spec = grammar.nt(nt).species;
            let value = match grammar.nt(nt).kind {
                NtKind::D => {
                    let h = class_of[grammar.h_of(spec).0];
                    convolve_square(&rows[h], n, &mut mults)
                }
                NtKind::T => {
                    // Σ_m H[u,m] · Σ_{v∈C̄(u)} H[v,n−m], inner sum cached
                    let h = class_of[grammar.h_of(spec).0];
                    convolve(&rows[h], &inc[spec], n, &mut mults)
                }
                _ => unreachable!(),
            };
            rows[class_of[nt.0]][n] = value;
        }
        for &nt in &phase_sh {
            let mut acc = BigUint::zero();
            for alt in &grammar.nt(nt).alts {
                acc += alternative_count(grammar, &rows, alt, n, &mut mults);
            }
            rows[class_of[nt.0]][n] = acc;
        }
        if transfer {
            for (u, row) in inc.iter_mut().enumerate() {
                let mut acc = BigUint::zero();
                for &v in grammar.incomparable(u) {
                    acc += &rows[class_of[grammar.h_of(v).0]][n];
                }
                row[n] = acc;
            }
        }
    }

    CountTable {
        rows,
        inc,
        class_of,
        start: grammar.start(),
        n_max,
        multiplications: mults,
    }
}

/// Convenience wrapper: compile, count and return the number of histories of
/// size `n` for `(tree, ranking?, model)`.
pub fn count_single(
    tree: &SpeciesTree,
    ranking: Option<&Ranking>,
    model: Model,
    n: usize,
) -> Result<BigUint, CountError> {
    let table = count_tree(tree, ranking, model, n)?;
    Ok(table.history_count(n).clone())
}

/// Compile and count for `(tree, ranking?, model)` up to `n_max`.
pub fn count_tree(
    tree: &SpeciesTree,
    ranking: Option<&Ranking>,
    model: Model,
    n_max: usize,
) -> Result<CountTable, CountError> {
    let grammar = compile_tree(tree, ranking, model)?;
    Ok(count(&grammar, n_max))
}

/// Compile the grammar for `(tree, ranking?, model)`, slicing when ranked.
pub fn compile_tree(
    tree: &SpeciesTree,
    ranking: Option<&Ranking>,
    model: Model,
) -> Result<Grammar, CountError> {
    match (model.is_ranked(), ranking) {
        (true, Some(r)) => {
            let sliced = time_slice(tree, r);
            Ok(compile(sliced.view(), model)?)
        }
        (true, None) => Err(CountError::MissingRanking(model)),
        (false, None) => Ok(compile(&tree.view(), model)?),
        (false, Some(_)) => Err(CountError::UnexpectedRanking(model)),
    }
}

/// Natural logarithm of a big integer, accurate to ~1 ulp of the mantissa.
pub fn big_ln(x: &BigUint) -> f64 {
    if x.is_zero() {
        return f64::NEG_INFINITY;
    }
    let bits = x.bits();
    if bits <= 64 {
        return (x.to_u64().expect("fits") as f64).ln();
    }
    let top = (x >> (bits - 64)).to_u64().expect("64 bits");
    (top as f64).ln() + (bits - 64) as f64 * std::f64::consts::LN_2
}

/// `a / b` as a float, computed by 64-bit scaled integer division.
pub fn big_ratio(a: &BigUint, b: &BigUint) -> f64 {
    assert!(!b.is_zero(), "division by zero");
    let q = (a << 64u32) / b;
    q.to_f64().unwrap_or(f64::INFINITY) / 2f64.powi(64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::species_tree::{all_rankings, caterpillar, complete, parse_newick};

    fn counts_for(tree: &SpeciesTree, model: Model, n_max: usize) -> Vec<BigUint> {
        let table = count_tree(tree, None, model, n_max).unwrap();
        (1..=n_max).map(|n| table.history_count(n).clone()).collect()
    }

    fn as_u128(v: &[BigUint]) -> Vec<u128> {
        v.iter().map(|x| x.to_u128().unwrap()).collect()
    }

    #[test]
    fn single_leaf_is_catalan() {
        let tree = parse_newick("A;").unwrap();
        let got = as_u128(&counts_for(&tree, Model::Udl, 7));
        assert_eq!(got, [1, 1, 2, 5, 14, 42, 132]);
    }

    #[test]
    fn cherry_udl_first_terms() {
        let tree = parse_newick("(A,B)R;").unwrap();
        let got = as_u128(&counts_for(&tree, Model::Udl, 10));
        assert_eq!(
            got,
            [2, 7, 34, 200, 1318, 9354, 69864, 541323, 4310950, 35066384]
        );
    }

    #[test]
    fn complete2_udl_first_terms() {
        let got = as_u128(&counts_for(&complete(2), Model::Udl, 4));
        assert_eq!(got, [4, 34, 368, 4685]);
    }

    #[test]
    fn count_single_examples() {
        let ct3 = caterpillar(3).unwrap();
        assert_eq!(
            count_single(&ct3, None, Model::Udl, 2).unwrap(),
            BigUint::from(19u32)
        );
        let ct5 = caterpillar(5).unwrap();
        assert_eq!(
            count_single(&ct5, None, Model::Udl, 3).unwrap(),
            BigUint::from(1230u32)
        );
        assert_eq!(
            count_single(&complete(3), None, Model::Udl, 1).unwrap(),
            BigUint::from(8u32)
        );
    }

    #[test]
    fn size_one_counts_equal_leaf_count() {
        for k in 1..=6 {
            let tree = crate::species_tree::random_tree(k, k as u64);
            assert_eq!(
                count_single(&tree, None, Model::Udl, 1).unwrap(),
                BigUint::from(k),
            );
        }
    }

    #[test]
    fn size_zero_is_empty() {
        let tree = parse_newick("(A,B)R;").unwrap();
        let table = count_tree(&tree, None, Model::Udlt, 4).unwrap();
        assert!(table.history_count(0).is_zero());
    }

    #[test]
    fn transfer_to_loss_ratio_at_scale() {
        // the transfer-model count dwarfs the loss-only one well before the
        // desk-scale ceiling
        for seed in [0u64, 1] {
            let tree = crate::species_tree::random_tree(10, seed);
            let dl = count_tree(&tree, None, Model::Udl, 50).unwrap();
            let dlt = count_tree(&tree, None, Model::Udlt, 50).unwrap();
            assert!(dlt.history_count(50) > dl.history_count(50));
            let ratio = big_ratio(dlt.history_count(50), dl.history_count(50));
            assert!(ratio >= 1.0, "ratio {ratio}");
        }
    }

    #[test]
    fn udlt_strictly_exceeds_udl() {
        for k in 2..=5 {
            let tree = crate::species_tree::random_tree(k, 100 + k as u64);
            for n in 2..=5 {
                let dl = count_single(&tree, None, Model::Udl, n).unwrap();
                let dlt = count_single(&tree, None, Model::Udlt, n).unwrap();
                assert!(dlt > dl, "k={k} n={n}: {dlt} <= {dl}");
            }
        }
    }

    #[test]
    fn counts_invariant_under_mirroring() {
        let shapes = crate::species_tree::all_shapes(4);
        for t in &shapes {
            let key = mirror_key(t, t.root());
            let mirrored = shapes
                .iter()
                .find(|s| shape_key(s, s.root()) == key)
                .expect("mirror shape exists");
            for model in [Model::Udl, Model::Udlt] {
                assert_eq!(
                    counts_for(t, model, 5),
                    counts_for(mirrored, model, 5),
                    "mirror symmetry broken"
                );
            }
        }
    }

    fn shape_key(t: &SpeciesTree, u: usize) -> String {
        match t.children(u) {
            None => "L".into(),
            Some((l, r)) => format!("({},{})", shape_key(t, l), shape_key(t, r)),
        }
    }

    fn mirror_key(t: &SpeciesTree, u: usize) -> String {
        match t.children(u) {
            None => "L".into(),
            Some((l, r)) => format!("({},{})", mirror_key(t, r), mirror_key(t, l)),
        }
    }

    #[test]
    fn cherry_equals_complete1_in_every_model() {
        let cherry = caterpillar(2).unwrap();
        let comp = complete(1);
        for model in Model::ALL {
            let counts = |tree: &SpeciesTree| -> Vec<BigUint> {
                if model.is_ranked() {
                    let rankings = all_rankings(tree);
                    assert_eq!(rankings.len(), 1);
                    let table = count_tree(tree, Some(&rankings[0]), model, 6).unwrap();
                    (1..=6).map(|n| table.history_count(n).clone()).collect()
                } else {
                    counts_for(tree, model, 6)
                }
            };
            assert_eq!(counts(&cherry), counts(&comp), "model {model}");
        }
    }

    #[test]
    fn transfer_row_matches_naive_alternative_sum() {
        let tree = caterpillar(3).unwrap();
        let ranking = all_rankings(&tree).pop().unwrap();
        let sliced = time_slice(&tree, &ranking);
        let grammar = compile(sliced.view(), Model::Rdlt).unwrap();
        let table = count(&grammar, 6);
        for u in 0..sliced.view().len() {
            let Some(t) = grammar.t_of(u) else { continue };
            for n in 1..=6 {
                let mut naive = BigUint::zero();
                for alt in &grammar.nt(t).alts {
                    let mut factors = alt.iter().filter_map(|s| match s {
                        Symbol::Nt(id) => Some(*id),
                        _ => None,
                    });
                    let a = factors.next().unwrap();
                    let b = factors.next().unwrap();
                    for m in 1..n {
                        naive += table.nt_count(a, m) * table.nt_count(b, n - m);
                    }
                }
                assert_eq!(&naive, table.nt_count(t, n));
            }
        }
    }

    #[test]
    fn quadratic_multiplication_scaling() {
        let tree = caterpillar(3).unwrap();
        let g = compile(&tree.view(), Model::Udl).unwrap();
        let small = count(&g, 100).multiplications();
        let large = count(&g, 200).multiplications();
        let ratio = large as f64 / small as f64;
        assert!(
            (3.0..5.0).contains(&ratio),
            "expected ~4x multiplications when doubling n, got {ratio}"
        );
    }

    #[test]
    fn ranking_argument_is_checked() {
        let tree = parse_newick("(A,B)R;").unwrap();
        let ranking = all_rankings(&tree).pop().unwrap();
        assert!(matches!(
            count_single(&tree, None, Model::Rdl, 3),
            Err(CountError::MissingRanking(Model::Rdl))
        ));
        assert!(matches!(
            count_single(&tree, Some(&ranking), Model::Udl, 3),
            Err(CountError::UnexpectedRanking(Model::Udl))
        ));
    }

    #[test]
    fn big_helpers() {
        let a = BigUint::from(123456789u64);
        assert!((big_ln(&a) - (123456789f64).ln()).abs() < 1e-12);
        let big = BigUint::from(10u32).pow(300);
        assert!((big_ln(&big) - 300.0 * 10f64.ln()).abs() < 1e-9);
        let ratio = big_ratio(&(&big * 7u32), &big);
        assert!((ratio - 7.0).abs() < 1e-12);
    }
}
