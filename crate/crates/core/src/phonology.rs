//! Phoneme inventory, lexicon lookup, phoneme-level edit distance, and
//! deterministic top-K similarity retrieval.
//!
//! All operations here are pure functions over immutable inputs and are
//! safe to call from any number of parallel workers.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// Reserved phoneme symbol of the `<no-bias>` pseudo-entity.
pub const NO_BIAS_PHONEME: &str = "<nb>";

/// Ordered, unique phoneme symbols. `<nb>` is always present at index 0.
#[derive(Debug, Clone)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    pub fn new() -> Self {
        let mut inv = PhonemeInventory {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        inv.intern(NO_BIAS_PHONEME);
        inv
    }

    /// Index of the reserved `<nb>` symbol.
    pub fn nb_index(&self) -> usize {
        0
    }

    /// Returns the index of `symbol`, adding it if absent.
    pub fn intern(&mut self, symbol: &str) -> usize {
        if let Some(&i) = self.index.get(symbol) {
            return i;
        }
        let i = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), i);
        i
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

impl Default for PhonemeInventory {
    fn default() -> Self {
        PhonemeInventory::new()
    }
}

/// A sequence of inventory indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PhonemeSequence(Vec<usize>);

impl PhonemeSequence {
    pub fn new(indices: Vec<usize>) -> Self {
        PhonemeSequence(indices)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_symbols(&self, inv: &PhonemeInventory) -> Vec<String> {
        self.0.iter().map(|&i| inv.symbol(i).to_string()).collect()
    }
}

/// Surface token → phoneme sequence. Stands in for external
/// grapheme-to-phoneme tooling; entries come from a bundled file.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: Vec<(String, PhonemeSequence)>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new() -> Self {
        Lexicon::default()
    }

    pub fn insert(&mut self, surface: &str, seq: PhonemeSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::contract(format!(
                "lexicon entry `{surface}` has an empty phoneme sequence"
            )));
        }
        if self.index.contains_key(surface) {
            return Err(Error::contract(format!(
                "lexicon entry `{surface}` defined twice"
            )));
        }
        self.index.insert(surface.to_string(), self.entries.len());
        self.entries.push((surface.to_string(), seq));
        Ok(())
    }

    pub fn get(&self, surface: &str) -> Option<&PhonemeSequence> {
        self.index.get(surface).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in file/insertion order; the vocabulary derives from this.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &PhonemeSequence)> {
        self.entries.iter().map(|(s, p)| (s.as_str(), p))
    }

    /// Reads the tab-separated lexicon format: `surface<TAB>ph ph ...`,
    /// UTF-8, `#` lines are comments. New symbols are interned into `inv`.
    pub fn load(path: &Path, inv: &mut PhonemeInventory) -> Result<Lexicon> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path)?;
        let mut lex = Lexicon::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, phones) = line.split_once('\t').ok_or_else(|| {
                Error::malformed(&display, format!("line {}: missing tab", lineno + 1))
            })?;
            let seq: Vec<usize> = phones
                .split_whitespace()
                .map(|p| inv.intern(p))
                .collect();
            if surface.is_empty() || seq.is_empty() {
                return Err(Error::malformed(
                    &display,
                    format!("line {}: empty surface or phoneme list", lineno + 1),
                ));
            }
            lex.insert(surface, PhonemeSequence::new(seq))?;
        }
        Ok(lex)
    }

    pub fn save(&self, path: &Path, inv: &PhonemeInventory) -> Result<()> {
        let mut out = String::new();
        for (surface, seq) in self.iter() {
            let phones = seq.to_symbols(inv).join(" ");
            writeln!(out, "{surface}\t{phones}").expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Concatenation of per-token phoneme sequences, in order. A token absent
/// from the lexicon is a hard error; there is no silent fallback.
pub fn phonemize(tokens: &[String], lex: &Lexicon) -> Result<PhonemeSequence> {
    let mut out = Vec::new();
    for token in tokens {
        let seq = lex
            .get(token)
            .ok_or_else(|| Error::UnknownToken(token.clone()))?;
        out.extend_from_slice(seq.as_slice());
    }
    Ok(PhonemeSequence::new(out))
}

/// Levenshtein distance with unit insert/delete/substitute costs.
pub fn edit_distance(a: &PhonemeSequence, b: &PhonemeSequence) -> usize {
    edit_distance_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn edit_distance_slices(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let cost = usize::from(ai != bj);
            curr[j + 1] = (prev[j + 1] + 1).min(curr[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Banded variant: returns `None` as soon as the distance provably
/// exceeds `limit`. Used by retrieval to skip hopeless pool entries.
pub fn edit_distance_within(a: &[usize], b: &[usize], limit: usize) -> Option<usize> {
    if a.len().abs_diff(b.len()) > limit {
        return None;
    }
    if a.is_empty() || b.is_empty() {
        let d = a.len().max(b.len());
        return (d <= limit).then_some(d);
    }
    const INF: usize = usize::MAX / 2;
    let mut prev = vec![INF; b.len() + 1];
    let mut curr = vec![INF; b.len() + 1];
    for (j, p) in prev.iter_mut().enumerate().take(limit.min(b.len()) + 1) {
        *p = j;
    }
    for i in 1..=a.len() {
        let lo = i.saturating_sub(limit).max(1);
        let hi = (i + limit).min(b.len());
        if lo > hi {
            return None;
        }
        curr[lo - 1] = if lo == 1 { i } else { INF };
        let mut row_min = curr[lo - 1];
        for j in lo..=hi {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            curr[j] = (prev[j].saturating_add(1))
                .min(curr[j - 1].saturating_add(1))
                .min(prev[j - 1].saturating_add(cost));
            row_min = row_min.min(curr[j]);
        }
        if hi < b.len() {
            curr[hi + 1] = INF;
        }
        if row_min > limit {
            return None;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    let d = prev[b.len()];
    (d <= limit).then_some(d)
}

/// Ids of the `k` pool entries with smallest edit distance to `query`,
/// ordered by (distance ascending, id ascending). A pool smaller than `k`
/// returns everything; an empty pool returns an empty list.
pub fn top_k_similar(
    query: &PhonemeSequence,
    pool: &[(usize, &PhonemeSequence)],
    k: usize,
) -> Vec<usize> {
    assert!(k >= 1, "top_k_similar needs k >= 1");
    // Sorted (distance, id) of at most k winners; the last entry bounds the
    // banded distance computation for the remaining scan.
    let mut best: Vec<(usize, usize)> = Vec::with_capacity(k + 1);
    for &(id, seq) in pool {
        let limit = if best.len() == k {
            best[k - 1].0
        } else {
            query.len().max(seq.len())
        };
        let Some(dist) = edit_distance_within(query.as_slice(), seq.as_slice(), limit) else {
            continue;
        };
        let key = (dist, id);
        if best.len() == k && key >= best[k - 1] {
            continue;
        }
        let pos = best.partition_point(|&e| e < key);
        best.insert(pos, key);
        best.truncate(k);
    }
    best.into_iter().map(|(_, id)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(v: &[usize]) -> PhonemeSequence {
        PhonemeSequence::new(v.to_vec())
    }

    /// Exponential-time reference: tries every edit at every position.
    fn edit_distance_recursive(a: &[usize], b: &[usize]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = edit_distance_recursive(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = edit_distance_recursive(&a[1..], b) + 1;
        let ins = edit_distance_recursive(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn identity_distance_is_zero() {
        let x = seq(&[1, 2, 3]);
        assert_eq!(edit_distance(&x, &x), 0);
    }

    #[test]
    fn distance_to_empty_is_length() {
        let x = seq(&[4, 5, 6, 7]);
        assert_eq!(edit_distance(&x, &seq(&[])), 4);
        assert_eq!(edit_distance(&seq(&[]), &x), 4);
    }

    #[test]
    fn matches_exhaustive_recursion_on_short_pairs() {
        let mut rng_state = 0x2545F4914F6CDD1Du64;
        let mut next = move |m: usize| {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state as usize) % m
        };
        for _ in 0..200 {
            let la = next(7);
            let lb = next(7);
            let a: Vec<usize> = (0..la).map(|_| next(4)).collect();
            let b: Vec<usize> = (0..lb).map(|_| next(4)).collect();
            assert_eq!(
                edit_distance_slices(&a, &b),
                edit_distance_recursive(&a, &b),
                "a={a:?} b={b:?}"
            );
        }
    }

    #[test]
    fn banded_agrees_with_full_or_exceeds_limit() {
        let a = [1usize, 2, 3, 4, 5];
        let b = [1usize, 9, 3, 9, 5, 6];
        let full = edit_distance_slices(&a, &b);
        for limit in 0..8 {
            match edit_distance_within(&a, &b, limit) {
                Some(d) => {
                    assert_eq!(d, full);
                    assert!(d <= limit);
                }
                None => assert!(full > limit),
            }
        }
    }

    #[test]
    fn phonemize_empty_and_single_and_pair() {
        let mut inv = PhonemeInventory::new();
        let p1 = inv.intern("aa");
        let p2 = inv.intern("bb");
        let p3 = inv.intern("cc");
        let mut lex = Lexicon::new();
        lex.insert("x", seq(&[p1, p2])).unwrap();
        lex.insert("y", seq(&[p3])).unwrap();

        assert_eq!(phonemize(&[], &lex).unwrap().len(), 0);
        assert_eq!(
            phonemize(&["x".into()], &lex).unwrap().as_slice(),
            &[p1, p2]
        );
        assert_eq!(
            phonemize(&["x".into(), "y".into()], &lex).unwrap().as_slice(),
            &[p1, p2, p3]
        );
    }

    #[test]
    fn phonemize_names_missing_token() {
        let lex = Lexicon::new();
        let err = phonemize(&["ghost".into()], &lex).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn top_k_self_retrieval_and_forced_ordering() {
        let q = seq(&[1, 2, 3]);
        let e0 = seq(&[1, 2, 3]);
        let e1 = seq(&[1, 2, 9]);
        let e2 = seq(&[9, 9, 9]);
        let pool = vec![(10, &e1), (11, &e0), (12, &e2)];
        assert_eq!(top_k_similar(&q, &pool, 1), vec![11]);
        assert_eq!(top_k_similar(&q, &pool, 2), vec![11, 10]);
        assert_eq!(top_k_similar(&q, &pool, 5), vec![11, 10, 12]);
    }

    #[test]
    fn top_k_empty_pool_is_empty() {
        let q = seq(&[1]);
        assert!(top_k_similar(&q, &[], 3).is_empty());
    }

    #[test]
    fn top_k_matches_brute_force_on_random_pools() {
        let mut rng_state = 0x9E3779B97F4A7C15u64;
        let mut next = move |m: usize| {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state as usize) % m
        };
        let query_raw: Vec<usize> = (0..5).map(|_| next(6)).collect();
        let query = PhonemeSequence::new(query_raw);
        let seqs: Vec<PhonemeSequence> = (0..500)
            .map(|_| {
                let l = 1 + next(7);
                PhonemeSequence::new((0..l).map(|_| next(6)).collect())
            })
            .collect();
        let pool: Vec<(usize, &PhonemeSequence)> =
            seqs.iter().enumerate().map(|(i, s)| (i, s)).collect();

        let mut brute: Vec<(usize, usize)> = pool
            .iter()
            .map(|&(id, s)| (edit_distance(&query, s), id))
            .collect();
        brute.sort();
        let expect: Vec<usize> = brute.iter().take(20).map(|&(_, id)| id).collect();
        assert_eq!(top_k_similar(&query, &pool, 20), expect);
    }

    #[test]
    fn lexicon_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lexicon.tsv");
        std::fs::write(&path, "# comment line\nfoo\tf uw1\nbar\tb aa2 r\n").unwrap();
        let mut inv = PhonemeInventory::new();
        let lex = Lexicon::load(&path, &mut inv).unwrap();
        assert_eq!(lex.len(), 2);
        assert_eq!(
            lex.get("bar").unwrap().to_symbols(&inv),
            vec!["b", "aa2", "r"]
        );

        let out = dir.path().join("copy.tsv");
        lex.save(&out, &inv).unwrap();
        let mut inv2 = PhonemeInventory::new();
        let lex2 = Lexicon::load(&out, &mut inv2).unwrap();
        assert_eq!(lex2.len(), lex.len());
        assert_eq!(
            lex2.get("foo").unwrap().to_symbols(&inv2),
            lex.get("foo").unwrap().to_symbols(&inv)
        );
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in proptest::collection::vec(0usize..5, 0..8),
            b in proptest::collection::vec(0usize..5, 0..8),
            c in proptest::collection::vec(0usize..5, 0..8),
        ) {
            let (pa, pb, pc) = (seq(&a), seq(&b), seq(&c));
            let dab = edit_distance(&pa, &pb);
            let dba = edit_distance(&pb, &pa);
            prop_assert_eq!(dab, dba);
            prop_assert_eq!(dab == 0, a == b);
            let dac = edit_distance(&pa, &pc);
            let dcb = edit_distance(&pc, &pb);
            prop_assert!(dab <= dac + dcb);
        }

        #[test]
        fn top_k_stable_under_pool_permutation(
            lens in proptest::collection::vec(1usize..5, 3..30),
            k in 1usize..6,
        ) {
            let seqs: Vec<PhonemeSequence> = lens
                .iter()
                .enumerate()
                .map(|(i, &l)| PhonemeSequence::new((0..l).map(|j| (i + j) % 4).collect()))
                .collect();
            let query = seq(&[0, 1, 2]);
            let pool: Vec<(usize, &PhonemeSequence)> =
                seqs.iter().enumerate().map(|(i, s)| (i, s)).collect();
            let mut reversed = pool.clone();
            reversed.reverse();
            prop_assert_eq!(
                top_k_similar(&query, &pool, k),
                top_k_similar(&query, &reversed, k)
            );
        }

        #[test]
        fn phonemize_distributes_over_concatenation(
            na in 0usize..4,
            nb in 0usize..4,
        ) {
            let mut inv = PhonemeInventory::new();
            let mut lex = Lexicon::new();
            for t in 0..8 {
                let p = inv.intern(&format!("p{t}"));
                let q = inv.intern(&format!("q{t}"));
                lex.insert(&format!("tok{t}"), PhonemeSequence::new(vec![p, q])).unwrap();
            }
            let a: Vec<String> = (0..na).map(|i| format!("tok{i}")).collect();
            let b: Vec<String> = (0..nb).map(|i| format!("tok{}", i + 4)).collect();
            let mut joined = a.clone();
            joined.extend(b.clone());

            let pa = phonemize(&a, &lex).unwrap();
            let pb = phonemize(&b, &lex).unwrap();
            let pj = phonemize(&joined, &lex).unwrap();
            let mut concat = pa.as_slice().to_vec();
            concat.extend_from_slice(pb.as_slice());
            prop_assert_eq!(pj.as_slice(), &concat[..]);
        }
    }
}
