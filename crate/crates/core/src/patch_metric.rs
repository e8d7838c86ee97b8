//! Layer-weighted perceptual distance on activation stacks and 2AFC scoring.
//!
//! A distance between two stacks sums, over layers, the spatial mean of the
//! squared channel-weighted difference between unit-normalized channel
//! vectors. Scoring credits a method with the fraction of human annotators
//! that agreed with its choice.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{read_json, read_payload, write_json, write_payload};
use crate::fusion::{SubsetMask, MAX_REPRS};
use crate::par;

/// Channel vectors with a smaller norm normalize to zero.
pub const CHANNEL_NORM_EPS: f64 = 1e-10;
/// Distance differences at or below this count as a tie.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One layer of activations, stored position-major (`[h][w][c]`), so each
/// spatial position's channel vector is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    shape: LayerShape,
    data: Vec<f32>,
}

impl Layer {
    pub fn new(shape: LayerShape, data: Vec<f32>) -> Result<Self> {
        if shape.h == 0 || shape.w == 0 || shape.c == 0 {
            return Err(Error::Invalid(format!("layer shape {shape:?} has a zero dimension")));
        }
        if data.len() != shape.len() {
            return Err(Error::SizeMismatch(format!(
                "{} values for layer shape {:?}",
                data.len(),
                shape
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / shape.c,
                col: pos % shape.c,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> LayerShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel vectors, one per spatial position.
    pub fn positions(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.shape.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    layers: Vec<Layer>,
}

impl ActivationStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("activation stack has no layers".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(Layer::shape).collect()
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shapes() != other.shapes() {
            return Err(Error::DimMismatch(format!(
                "activation shapes differ: {:?} vs {:?}",
                self.shapes(),
                other.shapes()
            )));
        }
        Ok(())
    }
}

/// Scales every channel vector to unit L2 norm; near-zero vectors become zero.
pub fn channel_normalize(s: &ActivationStack) -> ActivationStack {
    let layers = s
        .layers
        .iter()
        .map(|layer| {
            let mut data = layer.data.clone();
            for v in data.chunks_exact_mut(layer.shape.c) {
                let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
                if norm < CHANNEL_NORM_EPS {
                    v.fill(0.0);
                } else {
                    v.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
                }
            }
            Layer {
                shape: layer.shape,
                data,
            }
        })
        .collect();
    ActivationStack { layers }
}

/// Per-layer, per-channel non-negative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub layers: Vec<Vec<f64>>,
}

impl LayerWeights {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        for (l, w) in layers.iter().enumerate() {
            if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Invalid(format!("layer {l} has invalid weight {bad}")));
            }
        }
        Ok(Self { layers })
    }

    /// All-ones weights for the given layer shapes.
    pub fn uniform(shapes: &[LayerShape]) -> Self {
        Self {
            layers: shapes.iter().map(|s| vec![1.0; s.c]).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_against(&self, shapes: &[LayerShape]) -> Result<()> {
        let ok = self.layers.len() == shapes.len()
            && self.layers.iter().zip(shapes).all(|(w, s)| w.len() == s.c);
        if !ok {
            return Err(Error::DimMismatch(format!(
                "weights with lengths {:?} do not fit layer shapes {:?}",
                self.layers.iter().map(Vec::len).collect::<Vec<_>>(),
                shapes
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let w: LayerWeights = read_json(path)?;
        Self::new(w.layers)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Keeps only layer `l`, with unit weight on every channel.
pub fn single_layer_selector(w: &LayerWeights, l: usize) -> Result<LayerWeights> {
    if l >= w.layers.len() {
        return Err(Error::OutOfRange {
            index: l,
            len: w.layers.len(),
        });
    }
    let layers = w
        .layers
        .iter()
        .enumerate()
        .map(|(j, v)| vec![if j == l { 1.0 } else { 0.0 }; v.len()])
        .collect();
    Ok(LayerWeights { layers })
}

/// Weighted layer distance between two channel-normalized stacks.
pub fn weighted_layer_distance(x: &ActivationStack, x0: &ActivationStack, w: &LayerWeights) -> Result<f64> {
    x.check_same_shape(x0)?;
    w.check_against(&x.shapes())?;
    let mut total = 0.0;
    for ((a, b), weights) in x.layers.iter().zip(&x0.layers).zip(&w.layers) {
        if weights.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut layer_sum = 0.0;
        for (pa, pb) in a.positions().zip(b.positions()) {
            for ((&ya, &yb), &wc) in pa.iter().zip(pb).zip(weights) {
                let d = wc * (f64::from(ya) - f64::from(yb));
                layer_sum += d * d;
            }
        }
        total += layer_sum / (a.shape.h * a.shape.w) as f64;
    }
    Ok(total)
}

/// Channel-normalizes both stacks, then measures [`weighted_layer_distance`].
pub fn perceptual_distance(x: &ActivationStack, x0: &ActivationStack, w: &LayerWeights) -> Result<f64> {
    weighted_layer_distance(&channel_normalize(x), &channel_normalize(x0), w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triple2AFC {
    pub item_id: String,
    pub distortion: String,
    pub reference: ActivationStack,
    pub p0: ActivationStack,
    pub p1: ActivationStack,
    /// Fraction of annotators who picked `p1` as closer to the reference.
    pub human_pref: f64,
}

impl Triple2AFC {
    pub fn new(
        item_id: impl Into<String>,
        distortion: impl Into<String>,
        reference: ActivationStack,
        p0: ActivationStack,
        p1: ActivationStack,
        human_pref: f64,
    ) -> Result<Self> {
        reference.check_same_shape(&p0)?;
        reference.check_same_shape(&p1)?;
        if !(0.0..=1.0).contains(&human_pref) {
            return Err(Error::Invalid(format!("human preference {human_pref} outside [0, 1]")));
        }
        Ok(Self {
            item_id: item_id.into(),
            distortion: distortion.into(),
            reference,
            p0,
            p1,
            human_pref,
        })
    }

    fn normalized(&self) -> Self {
        Self {
            item_id: self.item_id.clone(),
            distortion: self.distortion.clone(),
            reference: channel_normalize(&self.reference),
            p0: channel_normalize(&self.p0),
            p1: channel_normalize(&self.p1),
            human_pref: self.human_pref,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    P0,
    P1,
    Tie,
}

impl Choice {
    /// Picks the alternative with the smaller distance to the reference.
    pub fn from_distances(d0: f64, d1: f64) -> Self {
        let diff = d0 - d1;
        if diff.abs() <= TIE_TOL {
            Choice::Tie
        } else if diff < 0.0 {
            Choice::P0
        } else {
            Choice::P1
        }
    }

    /// Agreement with annotators given the fraction that preferred `p1`.
    pub fn credit(self, human_pref: f64) -> f64 {
        match self {
            Choice::P0 => 1.0 - human_pref,
            Choice::P1 => human_pref,
            Choice::Tie => 0.5,
        }
    }
}

fn judge_prepared(t: &Triple2AFC, w: &LayerWeights) -> Result<Choice> {
    let d0 = weighted_layer_distance(&t.p0, &t.reference, w)?;
    let d1 = weighted_layer_distance(&t.p1, &t.reference, w)?;
    Ok(Choice::from_distances(d0, d1))
}

pub fn judge_2afc(t: &Triple2AFC, w: &LayerWeights) -> Result<Choice> {
    judge_prepared(&t.normalized(), w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoAFCScore {
    pub distortion: String,
    pub score: f64,
    pub n_items: usize,
}

fn mean_credit(credits: &[f64]) -> f64 {
    credits.iter().sum::<f64>() / credits.len() as f64
}

fn distortion_label(items: &[Triple2AFC]) -> String {
    let first = &items[0].distortion;
    if items.iter().all(|t| &t.distortion == first) {
        first.clone()
    } else {
        "mixed".to_string()
    }
}

fn score_prepared(items: &[Triple2AFC], w: &LayerWeights) -> Result<TwoAFCScore> {
    if items.is_empty() {
        return Err(Error::Invalid("cannot score an empty item list".into()));
    }
    let credits = par::map_slice(items, |t| judge_prepared(t, w).map(|c| c.credit(t.human_pref)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(TwoAFCScore {
        distortion: distortion_label(items),
        score: mean_credit(&credits),
        n_items: items.len(),
    })
}

/// Mean annotator agreement of the metric defined by `w` over `items`.
pub fn score_2afc(items: &[Triple2AFC], w: &LayerWeights) -> Result<TwoAFCScore> {
    if items.is_empty() {
        return Err(Error::Invalid("cannot score an empty item list".into()));
    }
    let prepared = par::map_slice(items, Triple2AFC::normalized);
    score_prepared(&prepared, w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleLayerResult {
    pub layer: usize,
    pub score: f64,
    pub per_layer: Vec<f64>,
}

/// Scores every single-layer metric and returns the best (lowest index on ties).
pub fn best_single_layer(items: &[Triple2AFC], n_layers: usize) -> Result<SingleLayerResult> {
    if n_layers == 0 {
        return Err(Error::Invalid("need at least one layer".into()));
    }
    let Some(first) = items.first() else {
        return Err(Error::Invalid("cannot score an empty item list".into()));
    };
    let shapes = first.reference.shapes();
    if shapes.len() != n_layers {
        return Err(Error::DimMismatch(format!(
            "items have {} layers, expected {n_layers}",
            shapes.len()
        )));
    }
    let base = LayerWeights::uniform(&shapes);
    let prepared = par::map_slice(items, Triple2AFC::normalized);
    let per_layer = (0..n_layers)
        .map(|l| {
            let w = single_layer_selector(&base, l)?;
            score_prepared(&prepared, &w).map(|s| s.score)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut layer = 0;
    for (l, &s) in per_layer.iter().enumerate() {
        if s > per_layer[layer] {
            layer = l;
        }
    }
    Ok(SingleLayerResult {
        layer,
        score: per_layer[layer],
        per_layer,
    })
}

/// Precomputed `(d(p0, ref), d(p1, ref))` per metric and item.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    pub metrics: Vec<String>,
    pub items: Vec<String>,
    pub human_pref: Vec<f64>,
    /// `distances[metric][item]`.
    pub distances: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct DistanceRow {
    item_id: String,
    metric: String,
    d0: f64,
    d1: f64,
    human_pref: f64,
}

impl DistanceTable {
    pub fn new(
        metrics: Vec<String>,
        items: Vec<String>,
        human_pref: Vec<f64>,
        distances: Vec<Vec<(f64, f64)>>,
    ) -> Result<Self> {
        if metrics.is_empty() || items.is_empty() {
            return Err(Error::Invalid("distance table needs metrics and items".into()));
        }
        if metrics.len() > MAX_REPRS {
            return Err(Error::Invalid(format!("at most {MAX_REPRS} metrics are supported")));
        }
        if human_pref.len() != items.len()
            || distances.len() != metrics.len()
            || distances.iter().any(|d| d.len() != items.len())
        {
            return Err(Error::SizeMismatch("distance table is not aligned on items".into()));
        }
        if let Some(p) = human_pref.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Invalid(format!("human preference {p} outside [0, 1]")));
        }
        if distances.iter().flatten().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::Invalid("non-finite distance".into()));
        }
        Ok(Self {
            metrics,
            items,
            human_pref,
            distances,
        })
    }

    /// Reads the long CSV form `item_id,metric,d0,d1,human_pref`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut metrics: Vec<String> = Vec::new();
        let mut items: Vec<String> = Vec::new();
        let mut metric_idx = HashMap::new();
        let mut item_idx = HashMap::new();
        let mut cells: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
        let mut prefs: Vec<f64> = Vec::new();
        for row in reader.deserialize() {
            let row: DistanceRow = row.map_err(|e| Error::csv(path, e))?;
            let m = *metric_idx.entry(row.metric.clone()).or_insert_with(|| {
                metrics.push(row.metric.clone());
                metrics.len() - 1
            });
            let i = *item_idx.entry(row.item_id.clone()).or_insert_with(|| {
                items.push(row.item_id.clone());
                prefs.push(row.human_pref);
                items.len() - 1
            });
            if (prefs[i] - row.human_pref).abs() > 1e-12 {
                return Err(Error::Invalid(format!(
                    "item {:?} has conflicting human preferences",
                    row.item_id
                )));
            }
            if cells.insert((m, i), (row.d0, row.d1)).is_some() {
                return Err(Error::Invalid(format!(
                    "item {:?} listed twice for metric {:?}",
                    row.item_id, row.metric
                )));
            }
        }
        let mut distances = Vec::with_capacity(metrics.len());
        for (m, name) in metrics.iter().enumerate() {
            let mut col = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let cell = cells.get(&(m, i)).ok_or_else(|| {
                    Error::SizeMismatch(format!("metric {name:?} has no distances for item {item:?}"))
                })?;
                col.push(*cell);
            }
            distances.push(col);
        }
        Self::new(metrics, items, prefs, distances)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for (i, item) in self.items.iter().enumerate() {
            for (m, metric) in self.metrics.iter().enumerate() {
                let (d0, d1) = self.distances[m][i];
                w.serialize(DistanceRow {
                    item_id: item.clone(),
                    metric: metric.clone(),
                    d0,
                    d1,
                    human_pref: self.human_pref[i],
                })
                .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Mean agreement of a single metric.
    pub fn metric_score(&self, m: usize) -> f64 {
        let credits: Vec<f64> = self.distances[m]
            .iter()
            .zip(&self.human_pref)
            .map(|(&(d0, d1), &h)| Choice::from_distances(d0, d1).credit(h))
            .collect();
        mean_credit(&credits)
    }
}

/// How distances of several metrics are merged before judging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinationRule {
    Summed,
    /// Each metric z-scored over all of its recorded distances first.
    ZNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CombinationSearch {
    pub rule: CombinationRule,
    /// `(subset, score)` in ascending mask order.
    pub entries: Vec<(SubsetMask, f64)>,
    pub best_mask: SubsetMask,
    pub best_score: f64,
}

fn metric_affine(table: &DistanceTable, m: usize, rule: CombinationRule) -> (f64, f64) {
    match rule {
        CombinationRule::Summed => (0.0, 1.0),
        CombinationRule::ZNormalized => {
            let values: Vec<f64> = table.distances[m].iter().flat_map(|&(a, b)| [a, b]).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
            let std = var.sqrt();
            if std < crate::similarity::SIGMA_GUARD {
                (mean, 0.0)
            } else {
                (mean, 1.0 / std)
            }
        }
    }
}

/// Scores every non-empty metric subset under `rule`; lowest mask wins ties.
pub fn search_metric_combinations(table: &DistanceTable, rule: CombinationRule) -> Result<CombinationSearch> {
    let m = table.metrics.len();
    let affine: Vec<(f64, f64)> = (0..m).map(|k| metric_affine(table, k, rule)).collect();
    let masks: Vec<u32> = (1..1u32 << m).collect();
    let scores = par::map_slice(&masks, |&bits| {
        let mask = SubsetMask::from_bits(bits);
        let credits: Vec<f64> = (0..table.items.len())
            .map(|i| {
                let (mut d0, mut d1) = (0.0, 0.0);
                for k in mask.members() {
                    let (mean, inv) = affine[k];
                    let (a, b) = table.distances[k][i];
                    d0 += (a - mean) * inv;
                    d1 += (b - mean) * inv;
                }
                Choice::from_distances(d0, d1).credit(table.human_pref[i])
            })
            .collect();
        mean_credit(&credits)
    });
    let entries: Vec<(SubsetMask, f64)> = masks
        .iter()
        .zip(scores)
        .map(|(&b, s)| (SubsetMask::from_bits(b), s))
        .collect();
    let mut best = entries[0];
    for &e in &entries {
        if e.1 > best.1 {
            best = e;
        }
    }
    Ok(CombinationSearch {
        rule,
        entries,
        best_mask: best.0,
        best_score: best.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StackManifest {
    layers: Vec<LayerShape>,
    checksum: String,
    payload_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleEntry {
    pub item_id: String,
    pub distortion: String,
    pub human_pref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TripleSetManifest {
    layers: Vec<LayerShape>,
    items: Vec<TripleEntry>,
    checksum: String,
    payload_file: String,
}

fn payload_path(manifest: &Path, file: &str) -> std::path::PathBuf {
    manifest.parent().map_or_else(|| file.into(), |d| d.join(file))
}

fn payload_file_name(manifest: &Path) -> String {
    let stem = manifest.file_stem().map_or_else(|| "stack".into(), |s| s.to_string_lossy().into_owned());
    format!("{stem}.f32")
}

fn flatten(stacks: &[&ActivationStack]) -> Vec<f32> {
    stacks
        .iter()
        .flat_map(|s| s.layers.iter().flat_map(|l| l.data.iter().copied()))
        .collect()
}

fn split_stack(values: &[f32], shapes: &[LayerShape]) -> Result<ActivationStack> {
    let mut offset = 0;
    let mut layers = Vec::with_capacity(shapes.len());
    for &shape in shapes {
        layers.push(Layer::new(shape, values[offset..offset + shape.len()].to_vec())?);
        offset += shape.len();
    }
    ActivationStack::new(layers)
}

/// Writes one stack as a manifest of layer shapes plus an `f32` payload.
pub fn write_activation_stack(manifest_path: &Path, s: &ActivationStack) -> Result<()> {
    let payload_file = payload_file_name(manifest_path);
    let checksum = write_payload(&payload_path(manifest_path, &payload_file), &flatten(&[s]))?;
    write_json(
        manifest_path,
        &StackManifest {
            layers: s.shapes(),
            checksum,
            payload_file,
        },
    )
}

pub fn read_activation_stack(manifest_path: &Path) -> Result<ActivationStack> {
    let manifest: StackManifest = read_json(manifest_path)?;
    let len = manifest.layers.iter().map(LayerShape::len).sum();
    let values = read_payload(
        &payload_path(manifest_path, &manifest.payload_file),
        len,
        &manifest.checksum,
    )?;
    split_stack(&values, &manifest.layers)
}

/// Writes a list of triples sharing one set of layer shapes. The payload
/// holds, per item, the reference, `p0` and `p1` stacks back to back.
pub fn write_triples(manifest_path: &Path, items: &[Triple2AFC]) -> Result<()> {
    let Some(first) = items.first() else {
        return Err(Error::Invalid("no items to write".into()));
    };
    let layers = first.reference.shapes();
    if let Some(bad) = items.iter().find(|t| t.reference.shapes() != layers) {
        return Err(Error::DimMismatch(format!(
            "item {:?} has different layer shapes",
            bad.item_id
        )));
    }
    let stacks: Vec<&ActivationStack> = items
        .iter()
        .flat_map(|t| [&t.reference, &t.p0, &t.p1])
        .collect();
    let payload_file = payload_file_name(manifest_path);
    let checksum = write_payload(&payload_path(manifest_path, &payload_file), &flatten(&stacks))?;
    let entries = items
        .iter()
        .map(|t| TripleEntry {
            item_id: t.item_id.clone(),
            distortion: t.distortion.clone(),
            human_pref: t.human_pref,
        })
        .collect();
    write_json(
        manifest_path,
        &TripleSetManifest {
            layers,
            items: entries,
            checksum,
            payload_file,
        },
    )
}

pub fn read_triples(manifest_path: &Path) -> Result<Vec<Triple2AFC>> {
    let manifest: TripleSetManifest = read_json(manifest_path)?;
    let stack_len: usize = manifest.layers.iter().map(LayerShape::len).sum();
    if stack_len == 0 {
        return Err(Error::Invalid(format!("{} declares no activations", manifest_path.display())));
    }
    let values = read_payload(
        &payload_path(manifest_path, &manifest.payload_file),
        stack_len * 3 * manifest.items.len(),
        &manifest.checksum,
    )?;
    manifest
        .items
        .into_iter()
        .zip(values.chunks_exact(stack_len * 3))
        .map(|(entry, chunk)| {
            Triple2AFC::new(
                entry.item_id,
                entry.distortion,
                split_stack(&chunk[..stack_len], &manifest.layers)?,
                split_stack(&chunk[stack_len..2 * stack_len], &manifest.layers)?,
                split_stack(&chunk[2 * stack_len..], &manifest.layers)?,
                entry.human_pref,
            )
        })
        .collect()
}
