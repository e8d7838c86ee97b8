//! Post-search analyses: participation in leading combinations, ablation,
//! oracle recall, exclusive contributions and failure cases.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{SearchResults, SubsetMask};
use crate::similarity::{ground_truth_rank, rank_row, recall_at_k, ScoreMatrix, SimilarityMatrix};

pub const DEFAULT_SIZE_FILTER: usize = 4;
pub const DEFAULT_Q_MAX: usize = 15;

/// Appearance counts of each representation among the top-`q` subsets of
/// one size, for every `q` in `1..=q_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipationReport {
    pub size_filter: usize,
    pub q_max: usize,
    pub representations: Vec<String>,
    /// Leading subsets in rank order (length `q_max`).
    pub leading: Vec<(SubsetMask, u32)>,
    /// `counts[q - 1][m]`.
    pub counts: Vec<Vec<usize>>,
}

impl ParticipationReport {
    pub fn count(&self, m: usize, q: usize) -> usize {
        self.counts[q - 1][m]
    }

    pub fn ratio(&self, m: usize, q: usize) -> f64 {
        self.count(m, q) as f64 / q as f64
    }
}

pub fn participation_ratio(r: &SearchResults, size_filter: usize, q_max: usize) -> Result<ParticipationReport> {
    let m = r.n_reprs();
    if size_filter == 0 || size_filter > m {
        return Err(Error::Invalid(format!(
            "size filter {size_filter} outside 1..={m}"
        )));
    }
    let mut ranked: Vec<(SubsetMask, u32)> =
        r.entries().filter(|(mask, _)| mask.size() == size_filter).collect();
    if q_max == 0 || ranked.len() < q_max {
        return Err(Error::Invalid(format!(
            "q_max {q_max} needs at least that many subsets of size {size_filter}; {} exist",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(q_max);

    let mut counts = Vec::with_capacity(q_max);
    let mut running = vec![0usize; m];
    for (mask, _) in &ranked {
        for f in mask.members() {
            running[f] += 1;
        }
        counts.push(running.clone());
    }
    Ok(ParticipationReport {
        size_filter,
        q_max,
        representations: r.representations().to_vec(),
        leading: ranked,
        counts,
    })
}

/// Which subsets may stand in for the base combination once a feature is
/// removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationScope {
    /// Any subset size.
    #[default]
    AllSizes,
    /// Only subsets with as many members as the base mask.
    SameSize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub removed: usize,
    pub removed_name: String,
    /// Best subset without the removed feature, if any exists.
    pub best_mask: Option<SubsetMask>,
    pub best_recall: u32,
    /// `base_recall - best_recall`; negative when the base was not optimal.
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub base_mask: SubsetMask,
    pub base_recall: u32,
    pub scope: AblationScope,
    pub rows: Vec<AblationRow>,
}

pub fn ablate(r: &SearchResults, base_mask: SubsetMask) -> Result<AblationReport> {
    ablate_with(r, base_mask, AblationScope::AllSizes)
}

pub fn ablate_with(r: &SearchResults, base_mask: SubsetMask, scope: AblationScope) -> Result<AblationReport> {
    let base_recall = r
        .recall(base_mask)
        .ok_or_else(|| Error::Invalid(format!("base mask {base_mask} is not among the results")))?;
    let rows = base_mask
        .members()
        .map(|f| {
            let mut best: Option<(SubsetMask, u32)> = None;
            for (mask, recall) in r.entries() {
                if mask.contains(f) || (scope == AblationScope::SameSize && mask.size() != base_mask.size()) {
                    continue;
                }
                if best.is_none_or(|b| recall > b.1) {
                    best = Some((mask, recall));
                }
            }
            let best_recall = best.map_or(0, |b| b.1);
            AblationRow {
                removed: f,
                removed_name: r.representations()[f].clone(),
                best_mask: best.map(|b| b.0),
                best_recall,
                delta: i64::from(base_recall) - i64::from(best_recall),
            }
        })
        .collect();
    Ok(AblationReport {
        base_mask,
        base_recall,
        scope,
        rows,
    })
}

/// Recall@1 hit vectors of each representation on its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HitSets {
    pub representations: Vec<String>,
    pub hits: Vec<Vec<bool>>,
}

impl HitSets {
    pub fn new(representations: Vec<String>, hits: Vec<Vec<bool>>) -> Result<Self> {
        if representations.len() != hits.len() {
            return Err(Error::SizeMismatch(format!(
                "{} names for {} hit vectors",
                representations.len(),
                hits.len()
            )));
        }
        if let Some(first) = hits.first() {
            if hits.iter().any(|h| h.len() != first.len()) {
                return Err(Error::SizeMismatch("hit vectors differ in length".into()));
            }
        }
        Ok(Self { representations, hits })
    }

    pub fn from_matrices(stack: &[SimilarityMatrix]) -> Result<Self> {
        let hits = stack
            .iter()
            .map(|m| recall_at_k(m, 1).map(|r| r.hits))
            .collect::<Result<Vec<_>>>()?;
        Self::new(stack.iter().map(|m| m.repr_name().to_string()).collect(), hits)
    }

    pub fn n_queries(&self) -> usize {
        self.hits.first().map_or(0, Vec::len)
    }

    fn hit_count(&self, q: usize) -> usize {
        self.hits.iter().filter(|h| h[q]).count()
    }
}

/// Queries retrieved by at least one representation on its own.
pub fn oracle_recall(h: &HitSets) -> usize {
    (0..h.n_queries()).filter(|&q| h.hit_count(q) > 0).count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExclusiveReport {
    pub representations: Vec<String>,
    pub per_repr: Vec<usize>,
    pub total_exclusive: usize,
    pub union_count: usize,
}

/// Queries retrieved by exactly one representation, attributed to it.
pub fn exclusive_contributions(h: &HitSets) -> ExclusiveReport {
    let mut per_repr = vec![0usize; h.hits.len()];
    for q in 0..h.n_queries() {
        if h.hit_count(q) == 1 {
            if let Some(m) = h.hits.iter().position(|v| v[q]) {
                per_repr[m] += 1;
            }
        }
    }
    ExclusiveReport {
        representations: h.representations.clone(),
        total_exclusive: per_repr.iter().sum(),
        per_repr,
        union_count: oracle_recall(h),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FailureCase {
    pub query: usize,
    pub top: Vec<usize>,
    pub ground_truth_rank: usize,
}

/// Every query whose ground truth is not ranked first, with its `top_n`
/// retrieved items.
pub fn failure_cases<M: ScoreMatrix + ?Sized>(m: &M, top_n: usize) -> Result<Vec<FailureCase>> {
    let n = m.n();
    if top_n == 0 || top_n > n {
        return Err(Error::OutOfRange { index: top_n, len: n });
    }
    let mut out = Vec::new();
    for q in 0..n {
        if ground_truth_rank(m, q) == 0 {
            continue;
        }
        let ranking = rank_row(m, q)?;
        let gt = ranking.position(q).unwrap_or(n);
        out.push(FailureCase {
            query: q,
            top: ranking.order[..top_n].to_vec(),
            ground_truth_rank: gt,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;

    fn names(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("f{i}")).collect()
    }

    fn results(m: usize, recall: impl Fn(u32) -> u32) -> SearchResults {
        SearchResults::from_entries(
            FusionMode::Normalized,
            1,
            100,
            names(m),
            (1..1u32 << m).map(|b| (SubsetMask::from_bits(b), recall(b))),
        )
        .unwrap()
    }

    #[test]
    fn participation_q1_is_best_mask_indicator() {
        let r = results(5, |b| b * 3 % 17);
        let rep = participation_ratio(&r, 2, 10).unwrap();
        let best = rep.leading[0].0;
        for m in 0..5 {
            assert_eq!(rep.count(m, 1), usize::from(best.contains(m)));
        }
        let total: usize = rep.counts[9].iter().sum();
        assert_eq!(total, 2 * 10);
        assert!(participation_ratio(&r, 2, 11).is_err());
        assert!(participation_ratio(&r, 6, 1).is_err());
    }

    #[test]
    fn participation_hand_tally() {
        // Size-2 subsets of 5 features; recall favours masks containing f0,
        // then those containing f1.
        let r = results(5, |b| {
            if b.count_ones() != 2 {
                return 0;
            }
            let mut s = 0;
            if b & 1 != 0 {
                s += 10;
            }
            if b & 2 != 0 {
                s += 5;
            }
            s + b.trailing_zeros()
        });
        // Ranked: {0,1}=15, then {0,2},{0,3},{0,4} tie at 10 and are
        // ordered by mask value (5, 9, 17).
        let rep = participation_ratio(&r, 2, 4).unwrap();
        let masks: Vec<u32> = rep.leading.iter().map(|x| x.0.bits()).collect();
        assert_eq!(masks, vec![0b00011, 0b00101, 0b01001, 0b10001]);
        assert_eq!(rep.counts[3], vec![4, 1, 1, 1, 1]);
        assert_eq!(rep.ratio(0, 4), 1.0);
    }

    #[test]
    fn ablation_singleton_base_searches_complement() {
        let r = results(3, |b| b);
        let rep = ablate(&r, SubsetMask::single(2)).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.rows[0].best_mask, Some(SubsetMask::from_bits(3)));
        assert_eq!(rep.rows[0].best_recall, 3);
        assert_eq!(rep.rows[0].delta, 4 - 3);
    }

    #[test]
    fn ablation_same_size_scope() {
        let r = results(3, |b| if b == 1 { 50 } else { b });
        let all = ablate(&r, SubsetMask::from_bits(0b110)).unwrap();
        let same = ablate_with(&r, SubsetMask::from_bits(0b110), AblationScope::SameSize).unwrap();
        // removing f1: all-sizes best without f1 is {0} = 50; same-size best is {0,2} = 5.
        assert_eq!(all.rows[0].best_recall, 50);
        assert_eq!(all.rows[0].delta, 6 - 50);
        assert_eq!(same.rows[0].best_recall, 5);
        assert!(ablate(&r, SubsetMask::from_bits(0)).is_err());
    }

    #[test]
    fn ablation_without_alternatives() {
        let r = results(1, |_| 7);
        let rep = ablate(&r, SubsetMask::single(0)).unwrap();
        assert_eq!(rep.rows[0].best_mask, None);
        assert_eq!(rep.rows[0].delta, 7);
    }

    fn hits(sets: &[&[usize]], n: usize) -> HitSets {
        let v = sets
            .iter()
            .map(|s| (0..n).map(|q| s.contains(&q)).collect())
            .collect();
        HitSets::new(names(sets.len()), v).unwrap()
    }

    #[test]
    fn oracle_and_exclusive_examples() {
        let h = hits(&[&[1, 2], &[2, 3]], 4);
        assert_eq!(oracle_recall(&h), 3);
        let ex = exclusive_contributions(&h);
        assert_eq!(ex.per_repr, vec![1, 1]);
        assert_eq!(ex.total_exclusive, 2);
        assert_eq!(ex.union_count, 3);

        let single = hits(&[&[0, 4]], 6);
        assert_eq!(oracle_recall(&single), 2);
        assert_eq!(exclusive_contributions(&single).total_exclusive, 2);

        let disjoint = hits(&[&[0], &[1, 2], &[5]], 6);
        let ex = exclusive_contributions(&disjoint);
        assert_eq!(ex.total_exclusive, ex.union_count);

        let same = hits(&[&[0, 3], &[0, 3]], 6);
        assert_eq!(exclusive_contributions(&same).total_exclusive, 0);
    }

    #[test]
    fn failure_examples() {
        let n = 4;
        let mut eye = vec![0f32; n * n];
        (0..n).for_each(|i| eye[i * n + i] = 1.0);
        let eye = SimilarityMatrix::from_values("e", n, eye).unwrap();
        assert!(failure_cases(&eye, 2).unwrap().is_empty());

        let flat = SimilarityMatrix::from_values("c", n, vec![0.1; n * n]).unwrap();
        let f = failure_cases(&flat, 2).unwrap();
        assert_eq!(f.len(), n - 1);
        assert_eq!(f[0].query, 1);
        assert_eq!(f[0].top, vec![0, 1]);
        assert_eq!(f[2].ground_truth_rank, 3);
        assert!(failure_cases(&flat, 0).is_err());
    }
}
