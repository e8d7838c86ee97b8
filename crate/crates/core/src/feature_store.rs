//! On-disk feature sets and paired galleries.
//!
//! A feature set is a JSON manifest plus a raw payload of little-endian `f32`
//! values in row-major order. The manifest carries an xxh3-64 checksum of the
//! payload bytes so that a truncated or corrupted payload is caught at load.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows whose norm deviates from one by more than this are reported.
pub const UNIT_NORM_TOL: f64 = 1e-4;
/// Rows below this norm cannot be normalized.
pub const ZERO_NORM_EPS: f64 = 1e-8;

const CHECKSUM_PREFIX: &str = "xxh3-64:";

/// JSON manifest describing one payload file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub repr_name: String,
    pub n_items: usize,
    pub dim: usize,
    pub item_ids: Vec<String>,
    pub checksum: String,
    pub payload_file: String,
}

/// `n_items` feature rows of width `dim` for a single representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    repr_name: String,
    dim: usize,
    rows: Vec<f32>,
    item_ids: Vec<String>,
}

impl FeatureSet {
    /// Builds a feature set from row-major data. Rejects non-finite values,
    /// ragged data and duplicate item ids.
    pub fn new(
        repr_name: impl Into<String>,
        dim: usize,
        rows: Vec<f32>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("feature dimension must be at least 1".into()));
        }
        if item_ids.is_empty() {
            return Err(Error::Invalid("feature set must hold at least one item".into()));
        }
        if rows.len() != item_ids.len() * dim {
            return Err(Error::SizeMismatch(format!(
                "{} values cannot form {} rows of width {}",
                rows.len(),
                item_ids.len(),
                dim
            )));
        }
        if let Some(pos) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut seen = HashSet::with_capacity(item_ids.len());
        for id in &item_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!("duplicate item id {id:?}")));
            }
        }
        Ok(Self {
            repr_name: repr_name.into(),
            dim,
            rows,
            item_ids,
        })
    }

    /// Same as [`FeatureSet::new`] with ids `"0"`, `"1"`, ...
    pub fn with_index_ids(repr_name: impl Into<String>, dim: usize, rows: Vec<f32>) -> Result<Self> {
        let n = rows.len().checked_div(dim).unwrap_or(0);
        let ids = (0..n).map(|i| i.to_string()).collect();
        Self::new(repr_name, dim, rows, ids)
    }

    pub fn repr_name(&self) -> &str {
        &self.repr_name
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.rows.chunks_exact(self.dim)
    }

    pub(crate) fn rename(mut self, name: impl Into<String>) -> Self {
        self.repr_name = name.into();
        self
    }
}

/// Rows of a feature set whose norm is off unit by more than [`UNIT_NORM_TOL`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub repr_name: String,
    pub n_items: usize,
    pub dim: usize,
    /// `(row, norm)` pairs.
    pub deviations: Vec<(usize, f64)>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.deviations.is_empty()
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Checks every row for unit norm. Zero-norm rows are an error.
pub fn validate_feature_set(fs: &FeatureSet) -> Result<ValidationReport> {
    let mut deviations = Vec::new();
    for (i, row) in fs.rows().enumerate() {
        let norm = row_norm(row);
        if norm < ZERO_NORM_EPS {
            return Err(Error::ZeroNorm { row: i, norm });
        }
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            deviations.push((i, norm));
        }
    }
    Ok(ValidationReport {
        repr_name: fs.repr_name.clone(),
        n_items: fs.n_items(),
        dim: fs.dim,
        deviations,
    })
}

/// Divides every row by its L2 norm.
///
/// Rows already within `f32` rounding of unit norm are left untouched, which
/// makes the operation idempotent.
pub fn renormalize(fs: &FeatureSet) -> Result<FeatureSet> {
    let settled = 2.0 * f64::from(f32::EPSILON);
    let mut rows = fs.rows.clone();
    for (i, row) in rows.chunks_exact_mut(fs.dim).enumerate() {
        let norm = row_norm(row);
        if norm < ZERO_NORM_EPS {
            return Err(Error::ZeroNorm { row: i, norm });
        }
        if (norm - 1.0).abs() <= settled {
            continue;
        }
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    Ok(FeatureSet {
        rows,
        ..fs.clone()
    })
}

pub(crate) fn checksum(bytes: &[u8]) -> String {
    format!("{CHECKSUM_PREFIX}{:016x}", xxhash_rust::xxh3::xxh3_64(bytes))
}

pub(crate) fn encode_f32(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `values` to `path` and returns the payload checksum.
pub(crate) fn write_payload(path: &Path, values: &[f32]) -> Result<String> {
    let bytes = encode_f32(values);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(checksum(&bytes))
}

/// Reads exactly `expected_len` floats from `path` and verifies the checksum.
pub(crate) fn read_payload(path: &Path, expected_len: usize, expected_sum: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::SizeMismatch(format!(
            "{} holds {} bytes, manifest implies {}",
            path.display(),
            bytes.len(),
            expected_len * 4
        )));
    }
    let actual = checksum(&bytes);
    if actual != expected_sum {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: expected_sum.to_string(),
            actual,
        });
    }
    Ok(decode_f32(&bytes))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sibling(manifest: &Path, file: &str) -> PathBuf {
    match manifest.parent() {
        Some(dir) => dir.join(file),
        None => PathBuf::from(file),
    }
}

/// Payload file name paired with a manifest path: `foo.json` -> `foo.f32`.
fn payload_name(manifest: &Path) -> String {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "payload".to_string());
    format!("{stem}.f32")
}

/// Writes `fs` as `manifest_path` plus a sibling `.f32` payload.
pub fn write_feature_set(manifest_path: &Path, fs: &FeatureSet) -> Result<FeatureManifest> {
    let payload_file = payload_name(manifest_path);
    let sum = write_payload(&sibling(manifest_path, &payload_file), &fs.rows)?;
    let manifest = FeatureManifest {
        repr_name: fs.repr_name.clone(),
        n_items: fs.n_items(),
        dim: fs.dim,
        item_ids: fs.item_ids.clone(),
        checksum: sum,
        payload_file,
    };
    write_json(manifest_path, &manifest)?;
    Ok(manifest)
}

/// Reads a feature set written by [`write_feature_set`].
pub fn read_feature_set(manifest_path: &Path) -> Result<FeatureSet> {
    let manifest: FeatureManifest = read_json(manifest_path)?;
    if manifest.item_ids.len() != manifest.n_items {
        return Err(Error::SizeMismatch(format!(
            "{}: n_items is {} but {} item ids are listed",
            manifest_path.display(),
            manifest.n_items,
            manifest.item_ids.len()
        )));
    }
    let payload = sibling(manifest_path, &manifest.payload_file);
    let rows = read_payload(&payload, manifest.n_items * manifest.dim, &manifest.checksum)?;
    FeatureSet::new(manifest.repr_name, manifest.dim, rows, manifest.item_ids)
}

/// One representation entry of a gallery manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub name: String,
    pub left_file: String,
    pub right_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryManifest {
    pub n_pairs: usize,
    pub representations: Vec<GalleryEntry>,
}

/// `N` left/right pairs described under `M` representations, in lexicographic
/// representation order. Pair `i` is `left[m].row(i)` against `right[m].row(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedGallery {
    n_pairs: usize,
    left: Vec<FeatureSet>,
    right: Vec<FeatureSet>,
}

impl PairedGallery {
    /// Assembles a gallery from `(left, right)` pairs, sorting by name.
    pub fn new(sides: Vec<(FeatureSet, FeatureSet)>) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::Invalid("gallery needs at least one representation".into()));
        }
        let mut sides = sides;
        sides.sort_by(|a, b| a.0.repr_name.cmp(&b.0.repr_name));
        for w in sides.windows(2) {
            if w[0].0.repr_name == w[1].0.repr_name {
                return Err(Error::Invalid(format!(
                    "duplicate representation {:?}",
                    w[0].0.repr_name
                )));
            }
        }
        let n = sides[0].0.n_items();
        for (l, r) in &sides {
            if l.repr_name != r.repr_name {
                return Err(Error::Invalid(format!(
                    "left/right representation names differ: {:?} vs {:?}",
                    l.repr_name, r.repr_name
                )));
            }
            if l.n_items() != n || r.n_items() != n {
                return Err(Error::SizeMismatch(format!(
                    "representation {:?}: left has {} items, right has {}, expected {}",
                    l.repr_name,
                    l.n_items(),
                    r.n_items(),
                    n
                )));
            }
            if l.dim != r.dim {
                return Err(Error::DimMismatch(format!(
                    "representation {:?}: left dim {} vs right dim {}",
                    l.repr_name, l.dim, r.dim
                )));
            }
            if l.item_ids != sides[0].0.item_ids || r.item_ids != sides[0].1.item_ids {
                return Err(Error::Invalid(format!(
                    "representation {:?}: item ids disagree with {:?}",
                    l.repr_name, sides[0].0.repr_name
                )));
            }
        }
        let (left, right) = sides.into_iter().unzip();
        Ok(Self {
            n_pairs: n,
            left,
            right,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn n_reprs(&self) -> usize {
        self.left.len()
    }

    pub fn representations(&self) -> Vec<String> {
        self.left.iter().map(|f| f.repr_name.clone()).collect()
    }

    pub fn left(&self, m: usize) -> &FeatureSet {
        &self.left[m]
    }

    pub fn right(&self, m: usize) -> &FeatureSet {
        &self.right[m]
    }
}

/// Loads a gallery manifest and every feature file it references.
pub fn load_gallery(manifest_path: &Path) -> Result<PairedGallery> {
    let manifest: GalleryManifest = read_json(manifest_path)?;
    let mut names = HashSet::new();
    for entry in &manifest.representations {
        if !names.insert(entry.name.as_str()) {
            return Err(Error::Invalid(format!(
                "duplicate representation {:?} in {}",
                entry.name,
                manifest_path.display()
            )));
        }
    }
    let mut sides = Vec::with_capacity(manifest.representations.len());
    for entry in &manifest.representations {
        let left = read_feature_set(&sibling(manifest_path, &entry.left_file))?;
        let right = read_feature_set(&sibling(manifest_path, &entry.right_file))?;
        for fs in [&left, &right] {
            if fs.n_items() != manifest.n_pairs {
                return Err(Error::SizeMismatch(format!(
                    "representation {:?} has {} items, gallery declares {}",
                    entry.name,
                    fs.n_items(),
                    manifest.n_pairs
                )));
            }
        }
        sides.push((left.rename(&entry.name), right.rename(&entry.name)));
    }
    PairedGallery::new(sides)
}

/// Writes every feature set of `gallery` into `dir` plus `gallery.json`.
pub fn write_gallery(dir: &Path, gallery: &PairedGallery) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut representations = Vec::with_capacity(gallery.n_reprs());
    for m in 0..gallery.n_reprs() {
        let name = gallery.left[m].repr_name.clone();
        let left_file = format!("{name}.left.json");
        let right_file = format!("{name}.right.json");
        write_feature_set(&dir.join(&left_file), &gallery.left[m])?;
        write_feature_set(&dir.join(&right_file), &gallery.right[m])?;
        representations.push(GalleryEntry {
            name,
            left_file,
            right_file,
        });
    }
    let manifest = GalleryManifest {
        n_pairs: gallery.n_pairs,
        representations,
    };
    let path = dir.join("gallery.json");
    write_json(&path, &manifest)?;
    Ok(path)
}
