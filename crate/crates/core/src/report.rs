//! End-to-end runs behind the command-line subcommands, and the files they
//! write. Every output is a pure function of the inputs and options; nothing
//! depends on timing or on the worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, AblationReport, AblationScope, ExclusiveReport, FailureCase, HitSets, ParticipationReport};
use crate::error::{Error, Result};
use crate::feature_store::{self, read_json, write_json, FeatureSet, ValidationReport};
use crate::fusion::{self, FusionMode, SearchResults, SizeBest, SubsetMask, MAX_REPRS};
use crate::par;
use crate::patch_metric::{self, CombinationRule, DistanceTable, LayerShape, LayerWeights, Triple2AFC};
use crate::similarity::{self, NormStats, StatsScope};
use crate::synth::{self, SynthSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the similarity-matrix cache directory.
pub const CACHE_DIR_ENV: &str = "SIMFUSE_CACHE_DIR";

pub const SUMMARY_FILE: &str = "summary.json";
pub const HITS_FILE: &str = "hits.csv";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const BAPPS_FILE: &str = "bapps_report.json";

pub fn search_file(mode: FusionMode) -> String {
    format!("search_{mode}.csv")
}

pub fn best_per_size_file(mode: FusionMode) -> String {
    format!("best_per_size_{mode}.csv")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- ingest

/// Options for [`run_ingest`].
#[derive(Debug, Clone, Default)]
pub struct IngestConfig {
    /// Feature-set manifests, gallery manifests or headerless CSV files
    /// (`item_id,v1,...,vD`).
    pub inputs: Vec<PathBuf>,
    /// Representation name for CSV inputs (defaults to the file stem).
    pub repr_name: Option<String>,
    pub renormalize: bool,
    /// Where corrected or converted files go.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestOutcome {
    pub reports: Vec<ValidationReport>,
    pub written: Vec<PathBuf>,
}

impl IngestOutcome {
    pub fn violations(&self) -> usize {
        self.reports.iter().map(|r| r.deviations.len()).sum()
    }
}

fn read_feature_csv(path: &Path, name: &str) -> Result<FeatureSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let (mut ids, mut rows, mut dim) = (Vec::new(), Vec::new(), None);
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let mut fields = record.iter();
        let id = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Invalid(format!("{} line {}: {e}", path.display(), line + 1)))?;
        if *dim.get_or_insert(values.len()) != values.len() {
            return Err(Error::DimMismatch(format!(
                "{} line {} has {} values, expected {}",
                path.display(),
                line + 1,
                values.len(),
                dim.unwrap_or(0)
            )));
        }
        ids.push(id);
        rows.extend(values);
    }
    FeatureSet::new(name, dim.unwrap_or(0), rows, ids)
}

fn is_gallery_manifest(path: &Path) -> Result<bool> {
    let value: serde_json::Value = read_json(path)?;
    Ok(value.get("representations").is_some())
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| "features.json".into(), |s| s.to_string_lossy().into_owned())
}

/// Validates feature files; with `renormalize`, writes corrected copies.
pub fn run_ingest(cfg: &IngestConfig) -> Result<IngestOutcome> {
    if cfg.inputs.is_empty() {
        return Err(Error::Invalid("no inputs given".into()));
    }
    let mut outcome = IngestOutcome::default();
    for input in &cfg.inputs {
        let is_csv = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if !is_csv && is_gallery_manifest(input)? {
            let gallery = feature_store::load_gallery(input)?;
            let mut sides = Vec::new();
            for m in 0..gallery.n_reprs() {
                for fs in [gallery.left(m), gallery.right(m)] {
                    outcome.reports.push(feature_store::validate_feature_set(fs)?);
                }
                if cfg.renormalize {
                    sides.push((
                        feature_store::renormalize(gallery.left(m))?,
                        feature_store::renormalize(gallery.right(m))?,
                    ));
                }
            }
            if cfg.renormalize {
                let dir = cfg.out_dir.as_deref().ok_or_else(|| {
                    Error::Invalid("--renormalize needs an output directory".into())
                })?;
                let fixed = crate::PairedGallery::new(sides)?;
                outcome.written.push(feature_store::write_gallery(dir, &fixed)?);
            }
            continue;
        }
        let fs = if is_csv {
            let stem = input.file_stem().map_or_else(|| "features".into(), |s| s.to_string_lossy().into_owned());
            read_feature_csv(input, cfg.repr_name.as_deref().unwrap_or(&stem))?
        } else {
            feature_store::read_feature_set(input)?
        };
        outcome.reports.push(feature_store::validate_feature_set(&fs)?);
        if cfg.renormalize || is_csv {
            let Some(dir) = cfg.out_dir.as_deref() else {
                return Err(Error::Invalid(
                    "an output directory is needed to write converted or corrected features".into(),
                ));
            };
            create_dir(dir)?;
            let fixed = if cfg.renormalize { feature_store::renormalize(&fs)? } else { fs };
            let name = if is_csv { format!("{}.json", fixed.repr_name()) } else { file_name(input) };
            let path = dir.join(name);
            feature_store::write_feature_set(&path, &fixed)?;
            outcome.written.push(path);
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------- synth

/// Request for [`generate_2afc_items`](synth::generate_2afc_items) in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemsSpec {
    pub n_items: usize,
    pub layers: Vec<LayerShape>,
    pub planted_layer: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthRequest {
    Gallery(SynthSpec),
    Items(ItemsSpec),
}

impl SynthRequest {
    /// Parses either spec form; syntax errors carry line and column.
    pub fn read(path: &Path) -> Result<Self> {
        let value: serde_json::Value = read_json(path)?;
        if value.get("n_items").is_some() {
            serde_json::from_value(value).map(SynthRequest::Items)
        } else {
            serde_json::from_value(value).map(SynthRequest::Gallery)
        }
        .map_err(|e| Error::json(path, e))
    }
}

/// Writes a synthetic gallery (`gallery.json` + feature files) or a 2AFC item
/// bundle (`items.json` + payload) into `out_dir`.
pub fn run_synth(request: &SynthRequest, out_dir: &Path) -> Result<PathBuf> {
    create_dir(out_dir)?;
    match request {
        SynthRequest::Gallery(spec) => synth::write_synthetic_gallery(spec, out_dir),
        SynthRequest::Items(spec) => {
            let items = synth::generate_2afc_items(spec.n_items, &spec.layers, spec.planted_layer, spec.seed)?;
            let path = out_dir.join("items.json");
            patch_metric::write_triples(&path, &items)?;
            Ok(path)
        }
    }
}

// ---------------------------------------------------------------- search

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub gallery: PathBuf,
    pub modes: Vec<FusionMode>,
    pub k: usize,
    pub stats_scope: StatsScope,
    pub out_dir: PathBuf,
    /// `0` uses every available core.
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
}

impl SearchConfig {
    pub fn new(gallery: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            gallery: gallery.into(),
            modes: vec![FusionMode::Raw, FusionMode::Normalized],
            k: 1,
            stats_scope: StatsScope::Full,
            out_dir: out_dir.into(),
            workers: 0,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: FusionMode,
    pub n_subsets: usize,
    pub best_mask: u32,
    pub best_representations: Vec<String>,
    pub best_recall: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub schema_version: u32,
    pub n_pairs: usize,
    pub k: usize,
    pub stats_scope: StatsScope,
    pub representations: Vec<String>,
    pub single_recall: Vec<usize>,
    pub stats: Vec<NormStats>,
    pub modes: Vec<ModeSummary>,
}

fn check_gallery(gallery: &crate::PairedGallery) -> Result<()> {
    if gallery.n_reprs() > MAX_REPRS {
        return Err(Error::Invalid(format!(
            "{} representations exceed the search limit of {MAX_REPRS}",
            gallery.n_reprs()
        )));
    }
    for m in 0..gallery.n_reprs() {
        for fs in [gallery.left(m), gallery.right(m)] {
            let report = feature_store::validate_feature_set(fs)?;
            if let Some(&(row, norm)) = report.deviations.first() {
                return Err(Error::Invalid(format!(
                    "representation {:?}: row {row} has norm {norm}; run ingest --renormalize first",
                    fs.repr_name()
                )));
            }
        }
    }
    Ok(())
}

fn write_search_csv(path: &Path, r: &SearchResults) -> Result<()> {
    let names = r.representations();
    write_rows(
        path,
        &["mask", "representations", "n_r", "recall"],
        r.entries().map(|(mask, recall)| {
            [mask.bits().to_string(), mask.label(names), mask.size().to_string(), recall.to_string()]
        }),
    )
}

fn write_curve_rows(curves: &[(FusionMode, Vec<SizeBest>)], names: &[String], path: &Path) -> Result<()> {
    write_rows(
        path,
        &["mode", "n_r", "best_recall", "mask", "representations"],
        curves.iter().flat_map(|(mode, curve)| {
            curve.iter().map(move |p| {
                [
                    mode.to_string(),
                    p.size.to_string(),
                    p.recall.to_string(),
                    p.mask.bits().to_string(),
                    p.mask.label(names),
                ]
            })
        }),
    )
}

/// Searches every subset for each requested mode and writes:
/// `search_<mode>.csv`, `best_per_size_<mode>.csv`, `fig5a_singles.csv`,
/// `fig5b_curves.csv`, `hits.csv` and `summary.json`.
pub fn run_search(cfg: &SearchConfig) -> Result<SearchSummary> {
    if cfg.k == 0 {
        return Err(Error::Invalid("recall cutoff k must be at least 1".into()));
    }
    if cfg.modes.is_empty() {
        return Err(Error::Invalid("no fusion mode selected".into()));
    }
    let gallery = feature_store::load_gallery(&cfg.gallery)?;
    check_gallery(&gallery)?;
    create_dir(&cfg.out_dir)?;
    let names = gallery.representations();

    let (stack, stats, results) = par::with_workers(cfg.workers, || -> Result<_> {
        let stack = similarity::similarity_stack(&gallery, cfg.cache_dir.as_deref())?;
        let stats: Vec<NormStats> = stack
            .iter()
            .map(|m| similarity::matrix_stats_with(m, cfg.stats_scope))
            .collect();
        let results = cfg
            .modes
            .iter()
            .map(|&mode| fusion::search_all_at_k(&stack, mode, Some(&stats), cfg.k))
            .collect::<Result<Vec<_>>>()?;
        Ok((stack, stats, results))
    })?;

    let singles = HitSets::from_matrices(&stack)?;
    let single_recall: Vec<usize> = singles.hits.iter().map(|h| h.iter().filter(|&&x| x).count()).collect();
    let ids = gallery.left(0).item_ids();
    let mut header = vec!["query".to_string(), "item_id".to_string()];
    header.extend(names.iter().cloned());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(
        &cfg.out_dir.join(HITS_FILE),
        &header_refs,
        (0..gallery.n_pairs()).map(|q| {
            let mut row = vec![q.to_string(), ids[q].clone()];
            row.extend(singles.hits.iter().map(|h| u8::from(h[q]).to_string()));
            row
        }),
    )?;
    write_rows(
        &cfg.out_dir.join("fig5a_singles.csv"),
        &["representation", "recall"],
        names.iter().zip(&single_recall).map(|(n, r)| [n.clone(), r.to_string()]),
    )?;
    write_rows(
        &cfg.out_dir.join("stats.csv"),
        &["representation", "mean", "std"],
        names.iter().zip(&stats).map(|(n, s)| [n.clone(), s.mean.to_string(), s.std.to_string()]),
    )?;

    let mut modes = Vec::new();
    let mut curves = Vec::new();
    for r in &results {
        write_search_csv(&cfg.out_dir.join(search_file(r.mode())), r)?;
        let curve = fusion::best_per_size(r);
        write_curve_rows(&[(r.mode(), curve.clone())], &names, &cfg.out_dir.join(best_per_size_file(r.mode())))?;
        curves.push((r.mode(), curve));
        let (best_mask, best_recall) = r.best();
        modes.push(ModeSummary {
            mode: r.mode(),
            n_subsets: r.len(),
            best_mask: best_mask.bits(),
            best_representations: best_mask.members().map(|m| names[m].clone()).collect(),
            best_recall,
        });
    }
    write_curve_rows(&curves, &names, &cfg.out_dir.join("fig5b_curves.csv"))?;

    let summary = SearchSummary {
        schema_version: SCHEMA_VERSION,
        n_pairs: gallery.n_pairs(),
        k: cfg.k,
        stats_scope: cfg.stats_scope,
        representations: names,
        single_recall,
        stats,
        modes,
    };
    write_json(&cfg.out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Deserialize)]
struct SearchRow {
    mask: u32,
    #[allow(dead_code)]
    representations: String,
    n_r: usize,
    recall: u32,
}

/// Reads `search_<mode>.csv` from a search output directory.
pub fn read_search_results(dir: &Path, mode: FusionMode) -> Result<SearchResults> {
    let summary_path = dir.join(SUMMARY_FILE);
    if !summary_path.exists() {
        return Err(Error::Invalid(format!(
            "no search output in {}; run search first",
            dir.display()
        )));
    }
    let summary: SearchSummary = read_json(&summary_path)?;
    let path = dir.join(search_file(mode));
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "missing search output {}; run search with mode {mode} first",
            path.display()
        )));
    }
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    let mut entries = Vec::new();
    for row in reader.deserialize() {
        let row: SearchRow = row.map_err(|e| Error::csv(&path, e))?;
        let mask = SubsetMask::from_bits(row.mask);
        if mask.size() != row.n_r {
            return Err(Error::Invalid(format!("mask {} disagrees with n_r {}", row.mask, row.n_r)));
        }
        entries.push((mask, row.recall));
    }
    SearchResults::from_entries(mode, summary.k, summary.n_pairs, summary.representations, entries)
}

/// Reads the per-representation hit vectors written by [`run_search`].
pub fn read_hit_sets(dir: &Path) -> Result<HitSets> {
    let path = dir.join(HITS_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(&path, e))?.clone();
    let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut hits = vec![Vec::new(); names.len()];
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(&path, e))?;
        for (m, field) in record.iter().skip(2).enumerate() {
            let flag = match field {
                "0" => false,
                "1" => true,
                other => return Err(Error::Invalid(format!("{}: bad hit flag {other:?}", path.display()))),
            };
            hits.get_mut(m)
                .ok_or_else(|| Error::Invalid(format!("{}: ragged row", path.display())))?
                .push(flag);
        }
    }
    HitSets::new(names, hits)
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone)]
pub struct AnalyzeConfig {
    pub search_dir: PathBuf,
    pub mode: FusionMode,
    /// Defaults to `min(4, M)`.
    pub size_filter: Option<usize>,
    /// Defaults to `min(15, C(M, size_filter))`.
    pub q_max: Option<usize>,
    /// Representation names; defaults to the globally best subset.
    pub ablation_base: Option<Vec<String>>,
    pub ablation_scope: AblationScope,
    /// Needed for failure cases; skipped without it.
    pub gallery: Option<PathBuf>,
    pub top_n: usize,
    pub out_dir: PathBuf,
}

impl AnalyzeConfig {
    pub fn new(search_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            search_dir: search_dir.into(),
            mode: FusionMode::Normalized,
            size_filter: None,
            q_max: None,
            ablation_base: None,
            ablation_scope: AblationScope::AllSizes,
            gallery: None,
            top_n: 5,
            out_dir: out_dir.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub oracle_recall: usize,
    pub best_single_recall: usize,
    pub best_combination_recall: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureReport {
    pub mask: u32,
    pub representations: Vec<String>,
    pub top_n: usize,
    pub cases: Vec<FailureCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisBundle {
    pub schema_version: u32,
    pub mode: FusionMode,
    pub representations: Vec<String>,
    pub participation: ParticipationReport,
    pub ablation: AblationReport,
    pub oracle: OracleReport,
    pub exclusive: ExclusiveReport,
    pub failures: Option<FailureReport>,
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn names_to_mask(names: &[String], wanted: &[String]) -> Result<SubsetMask> {
    let mut members = Vec::with_capacity(wanted.len());
    for w in wanted {
        let m = names
            .iter()
            .position(|n| n == w)
            .ok_or_else(|| Error::Invalid(format!("unknown representation {w:?}")))?;
        members.push(m);
    }
    let mask = SubsetMask::from_members(members);
    if mask.is_empty() {
        return Err(Error::EmptySubset);
    }
    Ok(mask)
}

/// Runs every post-search analysis and writes `analysis.json`,
/// `fig6a_participation.csv` and `fig6c_exclusive.csv`.
pub fn run_analyze(cfg: &AnalyzeConfig) -> Result<AnalysisBundle> {
    let results = read_search_results(&cfg.search_dir, cfg.mode)?;
    let hits = read_hit_sets(&cfg.search_dir)?;
    let names = results.representations().to_vec();
    if hits.representations != names {
        return Err(Error::Invalid("hit sets and search results list different representations".into()));
    }
    let m = names.len();
    let size_filter = cfg.size_filter.unwrap_or(analysis::DEFAULT_SIZE_FILTER.min(m));
    let q_max = cfg
        .q_max
        .unwrap_or_else(|| analysis::DEFAULT_Q_MAX.min(binomial(m, size_filter.min(m))));
    let participation = analysis::participation_ratio(&results, size_filter, q_max)?;

    let base = match &cfg.ablation_base {
        Some(wanted) => names_to_mask(&names, wanted)?,
        None => results.best().0,
    };
    let ablation = analysis::ablate_with(&results, base, cfg.ablation_scope)?;
    let exclusive = analysis::exclusive_contributions(&hits);
    let single_best = hits.hits.iter().map(|h| h.iter().filter(|&&x| x).count()).max().unwrap_or(0);
    let oracle = OracleReport {
        oracle_recall: analysis::oracle_recall(&hits),
        best_single_recall: single_best,
        best_combination_recall: results.best().1,
    };

    let failures = match &cfg.gallery {
        None => None,
        Some(path) => {
            let summary: SearchSummary = read_json(&cfg.search_dir.join(SUMMARY_FILE))?;
            let gallery = feature_store::load_gallery(path)?;
            if gallery.representations() != names {
                return Err(Error::Invalid("gallery does not match the search outputs".into()));
            }
            let stack = similarity::similarity_stack(&gallery, None)?;
            let fused = match cfg.mode {
                FusionMode::Raw => similarity::combine_raw(&stack, base)?,
                FusionMode::Normalized => {
                    let stats: Vec<NormStats> = stack
                        .iter()
                        .map(|s| similarity::matrix_stats_with(s, summary.stats_scope))
                        .collect();
                    similarity::combine_normalized(&stack, &stats, base)?
                }
            };
            Some(FailureReport {
                mask: base.bits(),
                representations: base.members().map(|i| names[i].clone()).collect(),
                top_n: cfg.top_n,
                cases: analysis::failure_cases(&fused, cfg.top_n)?,
            })
        }
    };

    create_dir(&cfg.out_dir)?;
    write_rows(
        &cfg.out_dir.join("fig6a_participation.csv"),
        &["q", "representation", "count", "ratio"],
        (1..=participation.q_max).flat_map(|q| {
            let p = &participation;
            names.iter().enumerate().map(move |(f, n)| {
                [q.to_string(), n.clone(), p.count(f, q).to_string(), p.ratio(f, q).to_string()]
            })
        }),
    )?;
    write_rows(
        &cfg.out_dir.join("fig6c_exclusive.csv"),
        &["representation", "exclusive"],
        names.iter().zip(&exclusive.per_repr).map(|(n, c)| [n.clone(), c.to_string()]),
    )?;

    let bundle = AnalysisBundle {
        schema_version: SCHEMA_VERSION,
        mode: cfg.mode,
        representations: names,
        participation,
        ablation,
        oracle,
        exclusive,
        failures,
    };
    write_json(&cfg.out_dir.join(ANALYSIS_FILE), &bundle)?;
    Ok(bundle)
}

// ---------------------------------------------------------------- bapps

#[derive(Debug, Clone, Default)]
pub struct BappsConfig {
    /// Distance tables, one per distortion (named by file stem).
    pub tables: Vec<PathBuf>,
    /// Triple bundle written by `write_triples`.
    pub items: Option<PathBuf>,
    /// Layer weights for the full metric; all ones when absent.
    pub weights: Option<PathBuf>,
    /// JSON object mapping distortion name to a calibrated baseline score.
    pub baseline: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleLayerRow {
    pub distortion: String,
    pub layer: usize,
    pub score: f64,
    pub per_layer: Vec<f64>,
    pub baseline: Option<f64>,
    /// `baseline - score`; negative when the single layer wins.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricScore {
    pub metric: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CombinationBest {
    pub rule: CombinationRule,
    pub metrics: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableReport {
    pub distortion: String,
    pub n_items: usize,
    pub metrics: Vec<MetricScore>,
    pub combinations: Vec<CombinationBest>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BappsReport {
    pub schema_version: u32,
    pub scores: Vec<patch_metric::TwoAFCScore>,
    pub single_layer: Vec<SingleLayerRow>,
    pub tables: Vec<TableReport>,
}

fn table_report(path: &Path) -> Result<TableReport> {
    let table = DistanceTable::read_csv(path)?;
    let distortion = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let metrics = (0..table.metrics.len())
        .map(|m| MetricScore {
            metric: table.metrics[m].clone(),
            score: table.metric_score(m),
        })
        .collect();
    let combinations = [CombinationRule::Summed, CombinationRule::ZNormalized]
        .into_iter()
        .map(|rule| {
            let r = patch_metric::search_metric_combinations(&table, rule)?;
            Ok(CombinationBest {
                rule,
                metrics: r.best_mask.members().map(|k| table.metrics[k].clone()).collect(),
                score: r.best_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TableReport {
        distortion,
        n_items: table.items.len(),
        metrics,
        combinations,
    })
}

/// Scores distance tables and/or activation triples, writing
/// `bapps_report.json` and, for triples, `single_layer.csv`.
pub fn run_bapps(cfg: &BappsConfig) -> Result<BappsReport> {
    if cfg.tables.is_empty() && cfg.items.is_none() {
        return Err(Error::Invalid("give distance tables or an item bundle".into()));
    }
    let baseline: BTreeMap<String, f64> = match &cfg.baseline {
        Some(path) => read_json(path)?,
        None => BTreeMap::new(),
    };
    let tables = cfg.tables.iter().map(|p| table_report(p)).collect::<Result<Vec<_>>>()?;

    let (scores, single_layer) = match &cfg.items {
        None => (Vec::new(), Vec::new()),
        Some(path) => {
            let items = patch_metric::read_triples(path)?;
            if items.is_empty() {
                return Err(Error::Invalid(format!("{} holds no items", path.display())));
            }
            let shapes = items[0].reference.shapes();
            let weights = match &cfg.weights {
                Some(p) => LayerWeights::read(p)?,
                None => LayerWeights::uniform(&shapes),
            };
            let mut groups: BTreeMap<String, Vec<Triple2AFC>> = BTreeMap::new();
            for t in items {
                groups.entry(t.distortion.clone()).or_default().push(t);
            }
            par::with_workers(cfg.workers, || -> Result<_> {
                let mut scores = Vec::new();
                let mut rows = Vec::new();
                for (distortion, group) in &groups {
                    scores.push(patch_metric::score_2afc(group, &weights)?);
                    let best = patch_metric::best_single_layer(group, shapes.len())?;
                    let base = baseline.get(distortion).copied();
                    rows.push(SingleLayerRow {
                        distortion: distortion.clone(),
                        layer: best.layer,
                        score: best.score,
                        delta: base.map(|b| b - best.score),
                        baseline: base,
                        per_layer: best.per_layer,
                    });
                }
                Ok((scores, rows))
            })?
        }
    };

    create_dir(&cfg.out_dir)?;
    if !single_layer.is_empty() {
        let n_layers = single_layer[0].per_layer.len();
        let mut header = vec!["distortion".to_string(), "L_s".into(), "score".into(), "baseline".into(), "delta".into()];
        header.extend((0..n_layers).map(|l| format!("layer{l}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        write_rows(
            &cfg.out_dir.join("single_layer.csv"),
            &header_refs,
            single_layer.iter().map(|r| {
                let mut row = vec![
                    r.distortion.clone(),
                    r.layer.to_string(),
                    r.score.to_string(),
                    opt(r.baseline),
                    opt(r.delta),
                ];
                row.extend(r.per_layer.iter().map(f64::to_string));
                row
            }),
        )?;
    }
    let report = BappsReport {
        schema_version: SCHEMA_VERSION,
        scores,
        single_layer,
        tables,
    };
    write_json(&cfg.out_dir.join(BAPPS_FILE), &report)?;
    Ok(report)
}
