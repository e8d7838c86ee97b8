//! Cosine similarity matrices, fusion, rankings and recall.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{self, FeatureSet, PairedGallery};
use crate::fusion::SubsetMask;
use crate::par;

/// Standard deviations below this make a normalized term identically zero.
pub const SIGMA_GUARD: f64 = 1e-9;

/// Read access to a square score matrix, whatever its storage precision.
pub trait ScoreMatrix: Sync {
    fn n(&self) -> usize;
    fn get(&self, i: usize, j: usize) -> f64;
}

/// `values[i * n + j]` is the similarity of left item `i` to right item `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    repr_name: String,
    n: usize,
    values: Vec<f32>,
}

impl SimilarityMatrix {
    /// Wraps row-major values. Only finiteness is checked: matrices built by
    /// [`cosine_similarity_matrix`] stay within `[-1, 1]` up to rounding, but
    /// arbitrary score matrices are legal input to fusion.
    pub fn from_values(repr_name: impl Into<String>, n: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::SizeMismatch(format!(
                "{} values do not form a {n}x{n} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / n.max(1),
                col: pos % n.max(1),
            });
        }
        Ok(Self {
            repr_name: repr_name.into(),
            n,
            values,
        })
    }

    pub fn repr_name(&self) -> &str {
        &self.repr_name
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Applies `v -> a * v + b` entrywise.
    pub fn affine(&self, a: f32, b: f32) -> Self {
        Self {
            repr_name: self.repr_name.clone(),
            n: self.n,
            values: self.values.iter().map(|&v| a * v + b).collect(),
        }
    }
}

impl ScoreMatrix for SimilarityMatrix {
    fn n(&self) -> usize {
        self.n
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        f64::from(self.values[i * self.n + j])
    }
}

/// Output of fusing several similarity matrices, kept at double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMatrix {
    n: usize,
    values: Vec<f64>,
}

impl FusedMatrix {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl ScoreMatrix for FusedMatrix {
    fn n(&self) -> usize {
        self.n
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Computes `left.row(i) . right.row(j)` for every pair, accumulating in `f64`.
///
/// Rows are expected to be unit norm already (see
/// [`feature_store::validate_feature_set`]), so the dot product is the cosine.
pub fn cosine_similarity_matrix(left: &FeatureSet, right: &FeatureSet) -> Result<SimilarityMatrix> {
    if left.dim() != right.dim() {
        return Err(Error::DimMismatch(format!(
            "left dim {} vs right dim {}",
            left.dim(),
            right.dim()
        )));
    }
    if left.n_items() != right.n_items() {
        return Err(Error::SizeMismatch(format!(
            "left has {} items, right has {}",
            left.n_items(),
            right.n_items()
        )));
    }
    let n = left.n_items();
    let mut values = vec![0f32; n * n];
    par::for_each_row_mut(&mut values, n, |i, out| {
        let a = left.row(i);
        for (j, slot) in out.iter_mut().enumerate() {
            let dot: f64 = a
                .iter()
                .zip(right.row(j))
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum();
            *slot = dot as f32;
        }
    });
    Ok(SimilarityMatrix {
        repr_name: left.repr_name().to_string(),
        n,
        values,
    })
}

/// Builds one similarity matrix per representation of `gallery`.
///
/// With a cache directory, matrices are looked up by a key derived from both
/// feature payloads and written back on a miss.
pub fn similarity_stack(gallery: &PairedGallery, cache_dir: Option<&Path>) -> Result<Vec<SimilarityMatrix>> {
    (0..gallery.n_reprs())
        .map(|m| {
            let (left, right) = (gallery.left(m), gallery.right(m));
            match cache_dir {
                None => cosine_similarity_matrix(left, right),
                Some(dir) => cached_similarity(dir, left, right),
            }
        })
        .collect()
}

fn cache_key(left: &FeatureSet, right: &FeatureSet) -> String {
    let mut bytes = feature_store::encode_f32(left.as_slice());
    bytes.extend(feature_store::encode_f32(right.as_slice()));
    bytes.extend_from_slice(&(left.dim() as u64).to_le_bytes());
    let sum = feature_store::checksum(&bytes);
    sum.rsplit(':').next().unwrap_or_default().to_string()
}

fn cached_similarity(dir: &Path, left: &FeatureSet, right: &FeatureSet) -> Result<SimilarityMatrix> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}-{}.json", left.repr_name(), cache_key(left, right)));
    if path.exists() {
        if let Ok(m) = read_similarity_cache(&path) {
            if m.n == left.n_items() {
                return Ok(SimilarityMatrix {
                    repr_name: left.repr_name().to_string(),
                    ..m
                });
            }
        }
    }
    let m = cosine_similarity_matrix(left, right)?;
    write_similarity_cache(&path, &m)?;
    Ok(m)
}

/// Writes a matrix in the feature-set format with shape `n x n`.
pub fn write_similarity_cache(path: &Path, m: &SimilarityMatrix) -> Result<()> {
    let fs = FeatureSet::with_index_ids(m.repr_name.clone(), m.n, m.values.clone())?;
    feature_store::write_feature_set(path, &fs)?;
    Ok(())
}

pub fn read_similarity_cache(path: &Path) -> Result<SimilarityMatrix> {
    let fs = feature_store::read_feature_set(path)?;
    if fs.n_items() != fs.dim() {
        return Err(Error::SizeMismatch(format!(
            "{} is {}x{}, not square",
            path.display(),
            fs.n_items(),
            fs.dim()
        )));
    }
    SimilarityMatrix::from_values(fs.repr_name(), fs.dim(), fs.as_slice().to_vec())
}

/// Mean and population standard deviation of a similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Which entries feed [`matrix_stats_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsScope {
    #[default]
    Full,
    OffDiagonal,
}

/// Statistics over all `N^2` entries.
pub fn matrix_stats(m: &SimilarityMatrix) -> NormStats {
    matrix_stats_with(m, StatsScope::Full)
}

pub fn matrix_stats_with(m: &SimilarityMatrix, scope: StatsScope) -> NormStats {
    let n = m.n;
    let keep = |i: usize, j: usize| scope == StatsScope::Full || i != j;
    let count = match scope {
        StatsScope::Full => n * n,
        StatsScope::OffDiagonal => n * n - n,
    };
    if count == 0 {
        return NormStats { mean: 0.0, std: 0.0 };
    }
    // Two passes, row partials reduced in row order so the result does not
    // depend on the worker count.
    let sums = par::map_range(n, |i| {
        m.row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| keep(i, j))
            .map(|(_, &v)| f64::from(v))
            .sum::<f64>()
    });
    let mean = sums.iter().sum::<f64>() / count as f64;
    let sq = par::map_range(n, |i| {
        m.row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| keep(i, j))
            .map(|(_, &v)| {
                let d = f64::from(v) - mean;
                d * d
            })
            .sum::<f64>()
    });
    let var = sq.iter().sum::<f64>() / count as f64;
    NormStats {
        mean,
        std: var.sqrt(),
    }
}

/// Contribution of one matrix entry to a fused score.
#[inline]
pub(crate) fn fusion_term(value: f32, stats: Option<&NormStats>) -> f64 {
    match stats {
        None => f64::from(value),
        Some(s) if s.std < SIGMA_GUARD => 0.0,
        Some(s) => (f64::from(value) - s.mean) / s.std,
    }
}

fn check_stack(stack: &[SimilarityMatrix], mask: SubsetMask) -> Result<usize> {
    if mask.is_empty() {
        return Err(Error::EmptySubset);
    }
    let Some(first) = stack.first() else {
        return Err(Error::Invalid("empty matrix stack".into()));
    };
    if let Some(top) = mask.members().last() {
        if top >= stack.len() {
            return Err(Error::OutOfRange {
                index: top,
                len: stack.len(),
            });
        }
    }
    if let Some(bad) = stack.iter().find(|m| m.n != first.n) {
        return Err(Error::SizeMismatch(format!(
            "matrix {:?} is {}x{}, expected {}x{}",
            bad.repr_name, bad.n, bad.n, first.n, first.n
        )));
    }
    Ok(first.n)
}

fn combine(stack: &[SimilarityMatrix], stats: Option<&[NormStats]>, mask: SubsetMask) -> Result<FusedMatrix> {
    let n = check_stack(stack, mask)?;
    let members: Vec<usize> = mask.members().collect();
    let mut values = vec![0f64; n * n];
    par::for_each_row_mut(&mut values, n, |i, out| {
        for &k in &members {
            let s = stats.map(|s| &s[k]);
            for (slot, &v) in out.iter_mut().zip(stack[k].row(i)) {
                *slot += fusion_term(v, s);
            }
        }
    });
    Ok(FusedMatrix { n, values })
}

/// Elementwise sum of the selected matrices.
pub fn combine_raw(stack: &[SimilarityMatrix], mask: SubsetMask) -> Result<FusedMatrix> {
    combine(stack, None, mask)
}

/// Elementwise sum of z-scored matrices, `(phi_k - mean_k) / std_k`.
/// Matrices with `std_k` below [`SIGMA_GUARD`] contribute nothing.
pub fn combine_normalized(
    stack: &[SimilarityMatrix],
    stats: &[NormStats],
    mask: SubsetMask,
) -> Result<FusedMatrix> {
    if stats.len() != stack.len() {
        return Err(Error::SizeMismatch(format!(
            "{} stats for {} matrices",
            stats.len(),
            stack.len()
        )));
    }
    combine(stack, Some(stats), mask)
}

/// Gallery order for one query: descending score, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    pub query: usize,
    pub order: Vec<usize>,
}

impl Ranking {
    /// Position of gallery item `j` in this ranking.
    pub fn position(&self, j: usize) -> Option<usize> {
        self.order.iter().position(|&x| x == j)
    }
}

pub fn rank_row<M: ScoreMatrix + ?Sized>(m: &M, i: usize) -> Result<Ranking> {
    let n = m.n();
    if i >= n {
        return Err(Error::OutOfRange { index: i, len: n });
    }
    let row: Vec<f64> = (0..n).map(|j| m.get(i, j)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Entries are finite; partial_cmp keeps -0.0 == 0.0 as a tie.
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    Ok(Ranking { query: i, order })
}

/// Rank of the ground-truth item `i` in row `i`, without sorting.
pub(crate) fn ground_truth_rank<M: ScoreMatrix + ?Sized>(m: &M, i: usize) -> usize {
    let target = m.get(i, i);
    (0..m.n())
        .filter(|&j| {
            let v = m.get(i, j);
            v > target || (v == target && j < i)
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecallResult {
    pub k: usize,
    pub count: usize,
    pub hits: Vec<bool>,
}

/// Counts queries whose ground truth lands within the first `k` ranks.
pub fn recall_at_k<M: ScoreMatrix + ?Sized>(m: &M, k: usize) -> Result<RecallResult> {
    let n = m.n();
    if k == 0 || k > n {
        return Err(Error::OutOfRange { index: k, len: n });
    }
    let hits = par::map_range(n, |i| ground_truth_rank(m, i) < k);
    let count = hits.iter().filter(|&&h| h).count();
    Ok(RecallResult { k, count, hits })
}
