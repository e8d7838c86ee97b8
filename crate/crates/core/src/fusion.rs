//! Exhaustive subset search over fused similarity matrices.
//!
//! Subsets are visited in reflected Gray-code order so each step adds or
//! removes a single matrix. Fused scores are accumulated in 64-bit fixed point
//! with one shared scale per search: integer addition is exact and
//! associative, so the incremental path, a from-scratch summation and any
//! partition of the work across threads produce identical scores and hits.
//!
//! Work is split into tasks of [`ROW_BLOCK`] query rows by [`CHUNK_LEN`]
//! consecutive Gray positions. Each task seeds its accumulator with a full
//! summation, so no accumulator ever carries more than `CHUNK_LEN` updates.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::similarity::{fusion_term, NormStats, SimilarityMatrix};

/// Largest supported representation count.
pub const MAX_REPRS: usize = 24;
/// Gray positions handled by one accumulator before it is re-seeded.
pub const CHUNK_LEN: usize = 64;
/// Query rows per task; one hit word per Gray position.
pub const ROW_BLOCK: usize = 64;

/// Bit `m` is set iff representation `m` takes part in the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubsetMask(u32);

impl SubsetMask {
    pub const fn from_bits(bits: u32) -> Self {
        Self(bits)
    }

    pub const fn single(m: usize) -> Self {
        Self(1 << m)
    }

    /// The mask selecting all of `0..m`.
    pub fn full(m: usize) -> Self {
        Self(((1u64 << m) - 1) as u32)
    }

    pub fn from_members(members: impl IntoIterator<Item = usize>) -> Self {
        Self(members.into_iter().fold(0, |acc, m| acc | (1 << m)))
    }

    pub const fn bits(self) -> u32 {
        self.0
    }

    pub const fn size(self) -> usize {
        self.0.count_ones() as usize
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub const fn contains(self, m: usize) -> bool {
        m < 32 && self.0 & (1 << m) != 0
    }

    pub const fn without(self, m: usize) -> Self {
        Self(self.0 & !(1 << m))
    }

    /// Member indices in ascending order.
    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&m| self.0 & (1 << m) != 0)
    }

    /// Member names joined by `+`, e.g. `conv+ret`.
    pub fn label(self, names: &[String]) -> String {
        self.members()
            .map(|m| names.get(m).map_or_else(|| m.to_string(), Clone::clone))
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, m) in self.members().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{m}")?;
        }
        write!(f, "}}")
    }
}

/// Reflected Gray code of `position`.
#[inline]
pub const fn gray(position: u32) -> u32 {
    position ^ (position >> 1)
}

fn check_reprs(m: usize) -> Result<()> {
    if m == 0 || m > MAX_REPRS {
        return Err(Error::Invalid(format!(
            "representation count {m} outside 1..={MAX_REPRS}"
        )));
    }
    Ok(())
}

/// Every non-empty subset of `m` representations, consecutive masks differing
/// in exactly one bit.
pub fn enumerate_subsets(m: usize) -> Result<Vec<SubsetMask>> {
    check_reprs(m)?;
    Ok((1..1u32 << m).map(|p| SubsetMask(gray(p))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Plain sum of similarity matrices.
    Raw,
    /// Sum of per-matrix z-scores.
    Normalized,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Raw => "raw",
            FusionMode::Normalized => "normalized",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Recall of every non-empty subset for one fusion mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchResults {
    mode: FusionMode,
    k: usize,
    n_queries: usize,
    representations: Vec<String>,
    /// Indexed by mask bits; slot 0 is unused.
    recalls: Vec<u32>,
}

impl SearchResults {
    /// Rebuilds results from `(mask, recall)` pairs, which must cover every
    /// non-empty mask over `representations` exactly once.
    pub fn from_entries(
        mode: FusionMode,
        k: usize,
        n_queries: usize,
        representations: Vec<String>,
        entries: impl IntoIterator<Item = (SubsetMask, u32)>,
    ) -> Result<Self> {
        let m = representations.len();
        check_reprs(m)?;
        let total = 1usize << m;
        let mut recalls = vec![0u32; total];
        let mut seen = vec![false; total];
        seen[0] = true;
        for (mask, recall) in entries {
            let bits = mask.bits() as usize;
            if bits == 0 || bits >= total {
                return Err(Error::Invalid(format!("mask {mask} invalid for {m} representations")));
            }
            if std::mem::replace(&mut seen[bits], true) {
                return Err(Error::Invalid(format!("mask {mask} listed twice")));
            }
            recalls[bits] = recall;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!(
                "mask {} missing from results",
                SubsetMask(missing as u32)
            )));
        }
        Ok(Self {
            mode,
            k,
            n_queries,
            representations,
            recalls,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_reprs(&self) -> usize {
        self.representations.len()
    }

    pub fn representations(&self) -> &[String] {
        &self.representations
    }

    pub fn recall(&self, mask: SubsetMask) -> Option<u32> {
        match mask.bits() as usize {
            0 => None,
            b => self.recalls.get(b).copied(),
        }
    }

    /// `(mask, recall)` in ascending mask order.
    pub fn entries(&self) -> impl Iterator<Item = (SubsetMask, u32)> + '_ {
        self.recalls
            .iter()
            .enumerate()
            .skip(1)
            .map(|(b, &r)| (SubsetMask(b as u32), r))
    }

    pub fn len(&self) -> usize {
        self.recalls.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Highest recall overall; lowest mask wins ties.
    pub fn best(&self) -> (SubsetMask, u32) {
        let mut best = (SubsetMask(1), self.recalls[1]);
        for (mask, r) in self.entries() {
            if r > best.1 {
                best = (mask, r);
            }
        }
        best
    }
}

/// Per-query hit vectors for every subset, as packed 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetHits {
    n_queries: usize,
    words: Vec<Vec<u64>>,
}

impl SubsetHits {
    pub fn hits(&self, mask: SubsetMask) -> Vec<bool> {
        let words = &self.words[mask.bits() as usize];
        (0..self.n_queries)
            .map(|q| words[q / 64] >> (q % 64) & 1 == 1)
            .collect()
    }

    pub fn count(&self, mask: SubsetMask) -> usize {
        self.words[mask.bits() as usize]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }
}

struct Plan<'a> {
    stack: &'a [SimilarityMatrix],
    stats: Option<&'a [NormStats]>,
    n: usize,
    k: usize,
    scale: f64,
}

impl<'a> Plan<'a> {
    fn new(
        stack: &'a [SimilarityMatrix],
        mode: FusionMode,
        stats: Option<&'a [NormStats]>,
        k: usize,
    ) -> Result<Self> {
        let Some(first) = stack.first() else {
            return Err(Error::Invalid("empty matrix stack".into()));
        };
        check_reprs(stack.len())?;
        let n = crate::similarity::ScoreMatrix::n(first);
        if let Some(bad) = stack.iter().find(|m| m.values().len() != n * n) {
            return Err(Error::SizeMismatch(format!(
                "matrix {:?} does not match the {n}x{n} stack",
                bad.repr_name()
            )));
        }
        if k == 0 || k > n {
            return Err(Error::OutOfRange { index: k, len: n });
        }
        let stats = match mode {
            FusionMode::Raw => None,
            FusionMode::Normalized => {
                let stats = stats.ok_or_else(|| {
                    Error::Invalid("normalized search needs per-matrix statistics".into())
                })?;
                if stats.len() != stack.len() {
                    return Err(Error::SizeMismatch(format!(
                        "{} stats for {} matrices",
                        stats.len(),
                        stack.len()
                    )));
                }
                Some(stats)
            }
        };
        let max_term = stack
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let s = stats.map(|s| &s[k]);
                m.values()
                    .iter()
                    .map(|&v| fusion_term(v, s).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        // Keep |sum of stack.len() terms| below 2^61.
        let bound = max_term * stack.len() as f64;
        let scale = if bound > 0.0 {
            let e = (bound.log2().ceil() as i32).clamp(-900, 900);
            2f64.powi(61 - e)
        } else {
            1.0
        };
        Ok(Self {
            stack,
            stats,
            n,
            k,
            scale,
        })
    }

    #[inline]
    fn term(&self, matrix: usize, idx: usize) -> i64 {
        let s = self.stats.map(|s| &s[matrix]);
        (fusion_term(self.stack[matrix].values()[idx], s) * self.scale).round() as i64
    }

    fn add_matrix(&self, acc: &mut [i64], rows: std::ops::Range<usize>, matrix: usize, sign: i64) {
        let base = rows.start * self.n;
        for (off, slot) in acc.iter_mut().enumerate() {
            *slot += sign * self.term(matrix, base + off);
        }
    }

    fn hit_word(&self, acc: &[i64], rows: std::ops::Range<usize>) -> u64 {
        let n = self.n;
        let mut word = 0u64;
        for (r, q) in rows.enumerate() {
            let row = &acc[r * n..(r + 1) * n];
            let target = row[q];
            let mut ahead = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > target || (v == target && j < q) {
                    ahead += 1;
                    if ahead >= self.k {
                        break;
                    }
                }
            }
            if ahead < self.k {
                word |= 1 << r;
            }
        }
        word
    }

    /// Hit words for rows `block` across Gray positions `positions`.
    fn run_task(&self, block: usize, positions: std::ops::Range<u32>) -> Vec<u64> {
        let rows = block * ROW_BLOCK..((block + 1) * ROW_BLOCK).min(self.n);
        let mut acc = vec![0i64; rows.len() * self.n];
        let mut out = Vec::with_capacity(positions.len());
        let first = SubsetMask(gray(positions.start));
        for matrix in first.members() {
            self.add_matrix(&mut acc, rows.clone(), matrix, 1);
        }
        out.push(self.hit_word(&acc, rows.clone()));
        for p in positions.start + 1..positions.end {
            let bit = p.trailing_zeros() as usize;
            let sign = if gray(p) & (1 << bit) != 0 { 1 } else { -1 };
            self.add_matrix(&mut acc, rows.clone(), bit, sign);
            out.push(self.hit_word(&acc, rows.clone()));
        }
        out
    }

    /// Runs every task; `sink(mask, block, word)` receives each hit word.
    fn run(&self, mut sink: impl FnMut(SubsetMask, usize, u64)) {
        let total = 1u32 << self.stack.len();
        let n_blocks = self.n.div_ceil(ROW_BLOCK);
        let n_chunks = ((total - 1) as usize).div_ceil(CHUNK_LEN);
        let chunk_results = par::map_range(n_chunks, |c| {
            let start = 1 + (c * CHUNK_LEN) as u32;
            let end = (start + CHUNK_LEN as u32).min(total);
            par::map_range(n_blocks, |b| self.run_task(b, start..end))
        });
        for (c, blocks) in chunk_results.into_iter().enumerate() {
            let start = 1 + (c * CHUNK_LEN) as u32;
            for (b, words) in blocks.into_iter().enumerate() {
                for (off, word) in words.into_iter().enumerate() {
                    sink(SubsetMask(gray(start + off as u32)), b, word);
                }
            }
        }
    }
}

fn names_of(stack: &[SimilarityMatrix]) -> Vec<String> {
    stack.iter().map(|m| m.repr_name().to_string()).collect()
}

/// Recall@1 of every non-empty subset of `stack`.
///
/// `stats` must be supplied (one per matrix) for [`FusionMode::Normalized`]
/// and is ignored for [`FusionMode::Raw`].
pub fn search_all(
    stack: &[SimilarityMatrix],
    mode: FusionMode,
    stats: Option<&[NormStats]>,
) -> Result<SearchResults> {
    search_all_at_k(stack, mode, stats, 1)
}

pub fn search_all_at_k(
    stack: &[SimilarityMatrix],
    mode: FusionMode,
    stats: Option<&[NormStats]>,
    k: usize,
) -> Result<SearchResults> {
    let plan = Plan::new(stack, mode, stats, k)?;
    let mut recalls = vec![0u32; 1 << stack.len()];
    plan.run(|mask, _, word| recalls[mask.bits() as usize] += word.count_ones());
    Ok(SearchResults {
        mode,
        k,
        n_queries: plan.n,
        representations: names_of(stack),
        recalls,
    })
}

/// Like [`search_all_at_k`] but keeps the hit vector of every subset.
pub fn search_all_hits(
    stack: &[SimilarityMatrix],
    mode: FusionMode,
    stats: Option<&[NormStats]>,
    k: usize,
) -> Result<(SearchResults, SubsetHits)> {
    let plan = Plan::new(stack, mode, stats, k)?;
    let n_blocks = plan.n.div_ceil(ROW_BLOCK);
    let mut words = vec![vec![0u64; n_blocks]; 1 << stack.len()];
    plan.run(|mask, b, word| words[mask.bits() as usize][b] = word);
    let recalls = words
        .iter()
        .map(|w| w.iter().map(|x| x.count_ones()).sum())
        .collect();
    Ok((
        SearchResults {
            mode,
            k,
            n_queries: plan.n,
            representations: names_of(stack),
            recalls,
        },
        SubsetHits {
            n_queries: plan.n,
            words,
        },
    ))
}

/// Hit vector of one subset computed by a single from-scratch fixed-point
/// summation, with no Gray-code updates.
pub fn direct_subset_hits(
    stack: &[SimilarityMatrix],
    mode: FusionMode,
    stats: Option<&[NormStats]>,
    mask: SubsetMask,
    k: usize,
) -> Result<Vec<bool>> {
    if mask.is_empty() {
        return Err(Error::EmptySubset);
    }
    let plan = Plan::new(stack, mode, stats, k)?;
    let n = plan.n;
    let mut hits = Vec::with_capacity(n);
    for block in 0..n.div_ceil(ROW_BLOCK) {
        let rows = block * ROW_BLOCK..((block + 1) * ROW_BLOCK).min(n);
        let mut acc = vec![0i64; rows.len() * n];
        for matrix in mask.members() {
            plan.add_matrix(&mut acc, rows.clone(), matrix, 1);
        }
        let word = plan.hit_word(&acc, rows.clone());
        hits.extend((0..rows.len()).map(|r| word >> r & 1 == 1));
    }
    Ok(hits)
}

/// Walks the Gray sequence over all rows with one incremental accumulator,
/// re-seeding every [`CHUNK_LEN`] positions, and hands each fused matrix
/// (converted back from fixed point) to `visit`. Meant for verification; the
/// search itself never materializes full matrices.
pub fn walk_gray_fused(
    stack: &[SimilarityMatrix],
    mode: FusionMode,
    stats: Option<&[NormStats]>,
    mut visit: impl FnMut(SubsetMask, &[f64]),
) -> Result<()> {
    let plan = Plan::new(stack, mode, stats, 1)?;
    let rows = 0..plan.n;
    let total = 1u32 << stack.len();
    let mut acc = vec![0i64; plan.n * plan.n];
    let mut fused = vec![0f64; plan.n * plan.n];
    for p in 1..total {
        if (p as usize - 1).is_multiple_of(CHUNK_LEN) {
            acc.fill(0);
            for matrix in SubsetMask(gray(p)).members() {
                plan.add_matrix(&mut acc, rows.clone(), matrix, 1);
            }
        } else {
            let bit = p.trailing_zeros() as usize;
            let sign = if gray(p) & (1 << bit) != 0 { 1 } else { -1 };
            plan.add_matrix(&mut acc, rows.clone(), bit, sign);
        }
        for (f, &a) in fused.iter_mut().zip(&acc) {
            *f = a as f64 / plan.scale;
        }
        visit(SubsetMask(gray(p)), &fused);
    }
    Ok(())
}

/// Best recall for one subset size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SizeBest {
    pub size: usize,
    pub recall: u32,
    pub mask: SubsetMask,
}

/// Best recall per subset size `1..=M`; lowest mask wins ties.
pub fn best_per_size(results: &SearchResults) -> Vec<SizeBest> {
    let m = results.n_reprs();
    let mut best: Vec<Option<SizeBest>> = vec![None; m + 1];
    for (mask, recall) in results.entries() {
        let slot = &mut best[mask.size()];
        if slot.is_none_or(|b| recall > b.recall) {
            *slot = Some(SizeBest {
                size: mask.size(),
                recall,
                mask,
            });
        }
    }
    best.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{combine_raw, matrix_stats, recall_at_k};

    fn mat(name: &str, n: usize, v: Vec<f32>) -> SimilarityMatrix {
        SimilarityMatrix::from_values(name, n, v).unwrap()
    }

    #[test]
    fn gray_enumeration_small() {
        assert_eq!(enumerate_subsets(1).unwrap(), vec![SubsetMask(1)]);
        let two = enumerate_subsets(2).unwrap();
        assert_eq!(two.len(), 3);
        for w in two.windows(2) {
            assert_eq!((w[0].bits() ^ w[1].bits()).count_ones(), 1);
        }
        assert!(enumerate_subsets(0).is_err());
        assert!(enumerate_subsets(25).is_err());
    }

    #[test]
    fn mask_helpers() {
        let m = SubsetMask::from_members([0, 3]);
        assert_eq!(m.bits(), 0b1001);
        assert_eq!(m.size(), 2);
        assert_eq!(m.to_string(), "{0,3}");
        assert_eq!(m.without(3), SubsetMask::single(0));
        let names = vec!["a".to_string(), "b".into(), "c".into(), "d".into()];
        assert_eq!(m.label(&names), "a+d");
        assert_eq!(SubsetMask::full(24).size(), 24);
    }

    #[test]
    fn single_matrix_search() {
        let a = mat("a", 3, vec![0.9, 0.1, 0.3, 0.2, 0.1, 0.7, 0.5, 0.6, 0.4]);
        let r = search_all(std::slice::from_ref(&a), FusionMode::Raw, None).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.recall(SubsetMask(1)).unwrap() as usize, recall_at_k(&a, 1).unwrap().count);
    }

    #[test]
    fn duplicated_raw_stack_is_flat() {
        let v: Vec<f32> = (0..25).map(|i| ((i * 7 % 11) as f32) / 11.0).collect();
        let stack = vec![mat("a", 5, v.clone()), mat("b", 5, v)];
        let r = search_all(&stack, FusionMode::Raw, None).unwrap();
        let first = r.recall(SubsetMask(1)).unwrap();
        assert!(r.entries().all(|(_, x)| x == first));
        let curve = best_per_size(&r);
        assert!(curve.iter().all(|p| p.recall == first));
    }

    #[test]
    fn normalized_needs_stats() {
        let a = mat("a", 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(search_all(std::slice::from_ref(&a), FusionMode::Normalized, None).is_err());
        let stats = [matrix_stats(&a)];
        let r = search_all(std::slice::from_ref(&a), FusionMode::Normalized, Some(&stats)).unwrap();
        assert_eq!(r.recall(SubsetMask(1)), Some(2));
        assert!(search_all(&[], FusionMode::Raw, None).is_err());
    }

    #[test]
    fn constant_stack_ties_break_low() {
        let stack = vec![mat("a", 4, vec![0.5; 16]), mat("b", 4, vec![-0.25; 16])];
        let r = search_all(&stack, FusionMode::Raw, None).unwrap();
        assert!(r.entries().all(|(_, x)| x == 1));
        let stats: Vec<_> = stack.iter().map(matrix_stats).collect();
        let r = search_all(&stack, FusionMode::Normalized, Some(&stats)).unwrap();
        assert!(r.entries().all(|(_, x)| x == 1));
    }

    #[test]
    fn incremental_matches_float_fusion_on_long_sequence() {
        // 7 matrices -> 127 positions, crossing a chunk boundary.
        let n = 70;
        let stack: Vec<_> = (0..7)
            .map(|k| {
                let v = (0..n * n)
                    .map(|i| (((i * 2654435761usize + k * 97) % 1000) as f32 / 500.0) - 1.0)
                    .collect();
                mat(&format!("m{k}"), n, v)
            })
            .collect();
        let (res, hits) = search_all_hits(&stack, FusionMode::Raw, None, 1).unwrap();
        for (mask, recall) in res.entries() {
            let fused = combine_raw(&stack, mask).unwrap();
            let direct = recall_at_k(&fused, 1).unwrap();
            assert_eq!(hits.hits(mask), direct.hits, "mask {mask}");
            assert_eq!(recall as usize, direct.count);
            assert_eq!(hits.count(mask), direct.count);
        }
    }

    #[test]
    fn from_entries_rejects_gaps() {
        let names = vec!["a".to_string(), "b".to_string()];
        let ok = SearchResults::from_entries(
            FusionMode::Raw,
            1,
            5,
            names.clone(),
            [(SubsetMask(1), 1), (SubsetMask(2), 2), (SubsetMask(3), 3)],
        )
        .unwrap();
        assert_eq!(ok.best(), (SubsetMask(3), 3));
        assert!(SearchResults::from_entries(FusionMode::Raw, 1, 5, names.clone(), [(SubsetMask(1), 1)]).is_err());
        assert!(SearchResults::from_entries(
            FusionMode::Raw,
            1,
            5,
            names,
            [(SubsetMask(1), 1), (SubsetMask(1), 1), (SubsetMask(2), 2), (SubsetMask(3), 3)]
        )
        .is_err());
    }

    #[test]
    fn best_per_size_prefers_low_mask() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = SearchResults::from_entries(
            FusionMode::Raw,
            1,
            10,
            names,
            (1..8u32).map(|b| (SubsetMask(b), if b.count_ones() == 2 { 7 } else { b })),
        )
        .unwrap();
        let curve = best_per_size(&r);
        assert_eq!(curve.len(), 3);
        assert_eq!(curve[0].mask, SubsetMask(4));
        assert_eq!((curve[1].mask, curve[1].recall), (SubsetMask(3), 7));
        assert_eq!(curve[2].recall, 7);
        let global = r.entries().map(|e| e.1).max().unwrap();
        assert_eq!(curve.iter().map(|p| p.recall).max().unwrap(), global);
    }
}
