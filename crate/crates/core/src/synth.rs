//! Seeded synthetic galleries and 2AFC items, plus a brute-force recall
//! oracle that shares no code path with the search engine.
//!
//! All randomness comes from xoshiro256++ seeded through SplitMix64
//! (`Xoshiro256PlusPlus::seed_from_u64`). Uniform doubles take the top 53 bits
//! of each output; normals use the Box-Muller cosine branch with one fresh
//! pair of uniforms per sample. The draw order is fixed per item so that any
//! implementation of the same algorithms reproduces the files bit for bit.

use std::path::{Path, PathBuf};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{self, FeatureSet, PairedGallery};
use crate::fusion::{FusionMode, SubsetMask};
use crate::patch_metric::{ActivationStack, Layer, LayerShape, Triple2AFC};

/// Largest gallery [`brute_force_recall`] accepts.
pub const ORACLE_MAX_PAIRS: usize = 256;

/// Portable seeded stream of uniforms and normals.
pub struct SynthRng(Xoshiro256PlusPlus);

impl SynthRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn normal_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.normal()).collect()
    }

    /// Uniform direction on the unit sphere.
    fn unit_vec(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vec(dim);
            if let Some(u) = normalized(&v) {
                return u;
            }
        }
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm >= 1e-12).then(|| v.iter().map(|x| x / norm).collect())
}

/// Pairs for which a representation carries the true match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalSet {
    All,
    None,
    /// Half-open `[start, end)`.
    Range([usize; 2]),
    Indices(Vec<usize>),
}

impl SignalSet {
    fn to_mask(&self, n: usize) -> Result<Vec<bool>> {
        let mut mask = vec![false; n];
        match self {
            SignalSet::All => mask.fill(true),
            SignalSet::None => {}
            SignalSet::Range([start, end]) => {
                if start > end || *end > n {
                    return Err(Error::Invalid(format!("signal range {start}..{end} outside 0..{n}")));
                }
                mask[*start..*end].fill(true);
            }
            SignalSet::Indices(idx) => {
                for &i in idx {
                    if i >= n {
                        return Err(Error::OutOfRange { index: i, len: n });
                    }
                    mask[i] = true;
                }
            }
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_pairs: usize,
    pub n_reprs: usize,
    pub dim: usize,
    /// One entry per representation.
    pub signal: Vec<SignalSet>,
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
    /// Redraw non-signal right features until none of them is retrieved by
    /// chance, so each representation's recall@1 is exactly its signal count
    /// when `noise_sigma` is zero.
    #[serde(default)]
    pub suppress_chance_hits: bool,
    /// Defaults to `r00`, `r01`, ...
    #[serde(default)]
    pub repr_names: Option<Vec<String>>,
}

impl SynthSpec {
    /// Two representations, each carrying the match for one half of the pairs.
    pub fn disjoint_halves(n_pairs: usize, dim: usize, seed: u64) -> Self {
        Self {
            n_pairs,
            n_reprs: 2,
            dim,
            signal: vec![
                SignalSet::Range([0, n_pairs / 2]),
                SignalSet::Range([n_pairs / 2, n_pairs]),
            ],
            noise_sigma: 0.0,
            seed,
            suppress_chance_hits: true,
            repr_names: None,
        }
    }

    pub fn names(&self) -> Vec<String> {
        match &self.repr_names {
            Some(names) => names.clone(),
            None => {
                let width = self.n_reprs.saturating_sub(1).to_string().len().max(2);
                (0..self.n_reprs).map(|m| format!("r{m:0width$}")).collect()
            }
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        feature_store::read_json(path)
    }

    fn check(&self) -> Result<()> {
        if self.n_pairs == 0 || self.n_reprs == 0 || self.dim == 0 {
            return Err(Error::Invalid("synthetic spec needs n_pairs, n_reprs and dim >= 1".into()));
        }
        if self.signal.len() != self.n_reprs {
            return Err(Error::Invalid(format!(
                "{} signal sets for {} representations",
                self.signal.len(),
                self.n_reprs
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if self.names().len() != self.n_reprs {
            return Err(Error::Invalid("repr_names length differs from n_reprs".into()));
        }
        Ok(())
    }
}

fn to_f32(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|&x| x as f32)
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Non-signal queries whose own right feature currently ranks first.
fn chance_hits(left: &[f32], right: &[f32], dim: usize, signal: &[bool]) -> Vec<usize> {
    let n = signal.len();
    (0..n)
        .filter(|&i| !signal[i])
        .filter(|&i| {
            let l = &left[i * dim..(i + 1) * dim];
            let own = dot64(l, &right[i * dim..(i + 1) * dim]) as f32;
            (0..n).all(|j| {
                let v = dot64(l, &right[j * dim..(j + 1) * dim]) as f32;
                v < own || (v == own && j >= i)
            })
        })
        .collect()
}

/// Builds the gallery described by `spec`.
///
/// For each representation in order and each pair `i`: draw `L_i` on the unit
/// sphere, then draw a noise vector. Signal pairs get `R_i = normalize(L_i +
/// sigma * noise)` (exactly `L_i` when sigma is zero); the rest get a fresh
/// unit vector.
pub fn generate_gallery(spec: &SynthSpec) -> Result<PairedGallery> {
    spec.check()?;
    let (n, d) = (spec.n_pairs, spec.dim);
    let names = spec.names();
    let ids: Vec<String> = (0..n).map(|i| format!("p{i:05}")).collect();
    let mut rng = SynthRng::new(spec.seed);
    let mut sides = Vec::with_capacity(spec.n_reprs);
    for (m, name) in names.iter().enumerate() {
        let signal = spec.signal[m].to_mask(n)?;
        let mut left = Vec::with_capacity(n * d);
        let mut right = Vec::with_capacity(n * d);
        for &is_signal in &signal {
            let l = rng.unit_vec(d);
            let noise = rng.normal_vec(d);
            left.extend(to_f32(&l));
            if is_signal && spec.noise_sigma == 0.0 {
                right.extend(to_f32(&l));
            } else if is_signal {
                let moved: Vec<f64> = l.iter().zip(&noise).map(|(a, z)| a + spec.noise_sigma * z).collect();
                let r = normalized(&moved).unwrap_or(l);
                right.extend(to_f32(&r));
            } else {
                right.extend(to_f32(&rng.unit_vec(d)));
            }
        }
        if spec.suppress_chance_hits {
            loop {
                let offenders = chance_hits(&left, &right, d, &signal);
                if offenders.is_empty() {
                    break;
                }
                for i in offenders {
                    let r = rng.unit_vec(d);
                    for (slot, v) in right[i * d..(i + 1) * d].iter_mut().zip(to_f32(&r)) {
                        *slot = v;
                    }
                }
            }
        }
        sides.push((
            FeatureSet::new(name.clone(), d, left, ids.clone())?,
            FeatureSet::new(name.clone(), d, right, ids.clone())?,
        ));
    }
    PairedGallery::new(sides)
}

/// Generates the gallery and writes it under `dir`; returns the manifest path.
pub fn write_synthetic_gallery(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let gallery = generate_gallery(spec)?;
    feature_store::write_gallery(dir, &gallery)
}

/// Recall@1 of `subset` recomputed from raw feature rows with plain loops.
///
/// Cosines are rounded to `f32` exactly as similarity matrices store them;
/// everything else is independent of the engine (no cached matrices, no
/// incremental updates, no fixed point). Test use only.
pub fn brute_force_recall(gallery: &PairedGallery, subset: SubsetMask, mode: FusionMode) -> Result<usize> {
    let n = gallery.n_pairs();
    if n > ORACLE_MAX_PAIRS {
        return Err(Error::Invalid(format!("oracle limited to {ORACLE_MAX_PAIRS} pairs, got {n}")));
    }
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut fused = vec![vec![0f64; n]; n];
    for m in subset.members() {
        if m >= gallery.n_reprs() {
            return Err(Error::OutOfRange { index: m, len: gallery.n_reprs() });
        }
        let (l, r) = (gallery.left(m), gallery.right(m));
        let mut cos = vec![vec![0f64; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0f64;
                for c in 0..l.dim() {
                    acc += f64::from(l.row(i)[c]) * f64::from(r.row(j)[c]);
                }
                cos[i][j] = f64::from(acc as f32);
            }
        }
        let (mean, std) = match mode {
            FusionMode::Raw => (0.0, 1.0),
            FusionMode::Normalized => {
                let count = (n * n) as f64;
                let mut total = 0.0;
                for row in &cos {
                    for v in row {
                        total += v;
                    }
                }
                let mean = total / count;
                let mut sq = 0.0;
                for row in &cos {
                    for v in row {
                        sq += (v - mean) * (v - mean);
                    }
                }
                (mean, (sq / count).sqrt())
            }
        };
        if mode == FusionMode::Normalized && std < crate::similarity::SIGMA_GUARD {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                fused[i][j] += (cos[i][j] - mean) / std;
            }
        }
    }
    let mut hits = 0;
    for i in 0..n {
        let target = fused[i][i];
        let mut first = true;
        for j in 0..n {
            if fused[i][j] > target || (fused[i][j] == target && j < i) {
                first = false;
                break;
            }
        }
        if first {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Noise scale on the layer that tracks the human judgement.
const CLOSE_NOISE: f64 = 0.1;
/// Noise scale on the far alternative.
const FAR_NOISE: f64 = 1.0;
/// Annotator agreement with the truly closer patch.
pub const PLANTED_AGREEMENT: f64 = 0.9;

/// Builds `n_items` triples in which only layer `planted` orders the two
/// alternatives the way annotators do; every other layer is reversed.
///
/// Per item: one coin flip decides whether `p1` is the closer patch, then for
/// each layer the reference, the close patch noise and the far patch noise
/// are drawn in that order.
pub fn generate_2afc_items(
    n_items: usize,
    shapes: &[LayerShape],
    planted: usize,
    seed: u64,
) -> Result<Vec<Triple2AFC>> {
    if n_items == 0 {
        return Err(Error::Invalid("need at least one item".into()));
    }
    if shapes.is_empty() {
        return Err(Error::Invalid("need at least one layer".into()));
    }
    if planted >= shapes.len() {
        return Err(Error::OutOfRange { index: planted, len: shapes.len() });
    }
    let mut rng = SynthRng::new(seed);
    let mut items = Vec::with_capacity(n_items);
    for item in 0..n_items {
        let p1_closer = rng.uniform() < 0.5;
        let (mut reference, mut close, mut far) = (Vec::new(), Vec::new(), Vec::new());
        for (l, &shape) in shapes.iter().enumerate() {
            let base = rng.normal_vec(shape.len());
            let noise_close = rng.normal_vec(shape.len());
            let noise_far = rng.normal_vec(shape.len());
            let (sc, sf) = if l == planted {
                (CLOSE_NOISE, FAR_NOISE)
            } else {
                (FAR_NOISE, CLOSE_NOISE)
            };
            let shift = |scale: f64, noise: &[f64]| -> Vec<f32> {
                base.iter().zip(noise).map(|(b, z)| (b + scale * z) as f32).collect()
            };
            close.push(Layer::new(shape, shift(sc, &noise_close))?);
            far.push(Layer::new(shape, shift(sf, &noise_far))?);
            reference.push(Layer::new(shape, to_f32(&base).collect())?);
        }
        let (reference, close, far) = (
            ActivationStack::new(reference)?,
            ActivationStack::new(close)?,
            ActivationStack::new(far)?,
        );
        let (p0, p1, pref) = if p1_closer {
            (far, close, PLANTED_AGREEMENT)
        } else {
            (close, far, 1.0 - PLANTED_AGREEMENT)
        };
        items.push(Triple2AFC::new(format!("item{item:05}"), "synthetic", reference, p0, p1, pref)?);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{cosine_similarity_matrix, recall_at_k};

    fn spec(n: usize, signal: Vec<SignalSet>, sigma: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n_pairs: n,
            n_reprs: signal.len(),
            dim: 8,
            signal,
            noise_sigma: sigma,
            seed,
            suppress_chance_hits: false,
            repr_names: None,
        }
    }

    #[test]
    fn rng_is_reproducible_and_sane() {
        let mut a = SynthRng::new(7);
        let mut b = SynthRng::new(7);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut r = SynthRng::new(1);
        let xs: Vec<f64> = (0..20000).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn full_signal_copies_give_perfect_recall() {
        let g = generate_gallery(&spec(40, vec![SignalSet::All], 0.0, 3)).unwrap();
        let m = cosine_similarity_matrix(g.left(0), g.right(0)).unwrap();
        assert_eq!(recall_at_k(&m, 1).unwrap().count, 40);
        assert_eq!(brute_force_recall(&g, SubsetMask::single(0), FusionMode::Raw).unwrap(), 40);
    }

    #[test]
    fn rows_are_unit_norm() {
        let g = generate_gallery(&spec(30, vec![SignalSet::Range([0, 10]), SignalSet::None], 0.3, 9)).unwrap();
        for m in 0..2 {
            for fs in [g.left(m), g.right(m)] {
                assert!(feature_store::validate_feature_set(fs).unwrap().is_clean());
            }
        }
    }

    #[test]
    fn suppression_removes_chance_hits() {
        let mut s = spec(60, vec![SignalSet::Range([0, 20])], 0.0, 11);
        s.suppress_chance_hits = true;
        let g = generate_gallery(&s).unwrap();
        let m = cosine_similarity_matrix(g.left(0), g.right(0)).unwrap();
        let r = recall_at_k(&m, 1).unwrap();
        assert_eq!(r.count, 20);
        assert!(r.hits[..20].iter().all(|&h| h));
    }

    #[test]
    fn bad_specs() {
        assert!(generate_gallery(&spec(0, vec![SignalSet::All], 0.0, 1)).is_err());
        let mut s = spec(4, vec![SignalSet::All], 0.0, 1);
        s.dim = 0;
        assert!(generate_gallery(&s).is_err());
        assert!(generate_gallery(&spec(4, vec![SignalSet::Indices(vec![4])], 0.0, 1)).is_err());
        assert!(generate_gallery(&spec(4, vec![SignalSet::Range([3, 9])], 0.0, 1)).is_err());
        let mut s = spec(4, vec![SignalSet::All], 0.0, 1);
        s.n_reprs = 2;
        assert!(generate_gallery(&s).is_err());
    }

    #[test]
    fn oracle_limits() {
        let g = generate_gallery(&spec(300, vec![SignalSet::None], 0.0, 1)).unwrap();
        assert!(brute_force_recall(&g, SubsetMask::single(0), FusionMode::Raw).is_err());
        let g = generate_gallery(&spec(3, vec![SignalSet::None], 0.0, 1)).unwrap();
        assert!(brute_force_recall(&g, SubsetMask::from_bits(0), FusionMode::Raw).is_err());
    }

    #[test]
    fn spec_json_forms() {
        let text = r#"{"n_pairs": 10, "n_reprs": 4, "dim": 3, "seed": 5,
            "signal": ["all", "none", {"range": [0, 5]}, {"indices": [1, 2]}]}"#;
        let s: SynthSpec = serde_json::from_str(text).unwrap();
        assert_eq!(s.signal[2], SignalSet::Range([0, 5]));
        assert_eq!(s.noise_sigma, 0.0);
        assert_eq!(s.names(), vec!["r00", "r01", "r02", "r03"]);
    }

    #[test]
    fn item_generation_errors_and_determinism() {
        let shapes = [LayerShape { h: 2, w: 2, c: 3 }, LayerShape { h: 1, w: 1, c: 4 }];
        assert!(generate_2afc_items(0, &shapes, 0, 1).is_err());
        assert!(generate_2afc_items(3, &shapes, 2, 1).is_err());
        let a = generate_2afc_items(5, &shapes, 1, 42).unwrap();
        let b = generate_2afc_items(5, &shapes, 1, 42).unwrap();
        assert_eq!(a, b);
    }
}
