//! `simfuse` command-line interface.
//!
//! Exit codes: 0 on success, 1 on validation or data errors, 2 on usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use simfuse::analysis::AblationScope;
use simfuse::fusion::FusionMode;
use simfuse::report::{self, AnalyzeConfig, BappsConfig, IngestConfig, SearchConfig, SynthRequest};
use simfuse::similarity::StatsScope;

#[derive(Parser)]
#[command(name = "simfuse", version, about = "Similarity fusion search and perceptual 2AFC scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate feature files, convert CSV rows, or renormalize rows.
    Ingest(IngestArgs),
    /// Generate a synthetic gallery or 2AFC item bundle from a JSON spec.
    Synth(SynthArgs),
    /// Search every representation subset for the best recall.
    Search(SearchArgs),
    /// Participation, ablation, oracle, exclusive and failure analyses.
    Analyze(AnalyzeArgs),
    /// Score 2AFC distance tables or activation triples.
    Bapps(BappsArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Feature manifests, gallery manifests or CSV files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Representation name for CSV inputs.
    #[arg(long)]
    repr: Option<String>,
    /// Divide every row by its norm and write corrected files.
    #[arg(long)]
    renormalize: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    spec: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Raw,
    Normalized,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<FusionMode> {
        match self {
            ModeArg::Raw => vec![FusionMode::Raw],
            ModeArg::Normalized => vec![FusionMode::Normalized],
            ModeArg::Both => vec![FusionMode::Raw, FusionMode::Normalized],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SingleModeArg {
    Raw,
    Normalized,
}

impl From<SingleModeArg> for FusionMode {
    fn from(m: SingleModeArg) -> Self {
        match m {
            SingleModeArg::Raw => FusionMode::Raw,
            SingleModeArg::Normalized => FusionMode::Normalized,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Full,
    OffDiagonal,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, short)]
    gallery: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Recall cutoff.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Entries used for normalization statistics.
    #[arg(long, value_enum, default_value = "full")]
    stats_scope: ScopeArg,
    #[arg(long, short)]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Cache similarity matrices between runs.
    #[arg(long)]
    cache: bool,
    #[arg(long, env = report::CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Output directory of a previous `search` run.
    #[arg(long)]
    search: PathBuf,
    #[arg(long, value_enum, default_value = "normalized")]
    mode: SingleModeArg,
    #[arg(long)]
    size_filter: Option<usize>,
    #[arg(long)]
    q_max: Option<usize>,
    /// Comma-separated representation names; defaults to the best subset.
    #[arg(long, value_delimiter = ',')]
    ablation_base: Option<Vec<String>>,
    /// Restrict ablation replacements to subsets of the base size.
    #[arg(long)]
    same_size: bool,
    /// Gallery manifest, needed for failure cases.
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top_n: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct BappsArgs {
    /// Distance-table CSVs (item_id,metric,d0,d1,human_pref), one per distortion.
    #[arg(long = "table")]
    tables: Vec<PathBuf>,
    /// Triple bundle manifest.
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// JSON map of distortion name to calibrated baseline score.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

fn ingest(args: IngestArgs) -> simfuse::Result<ExitCode> {
    let outcome = report::run_ingest(&IngestConfig {
        inputs: args.inputs,
        repr_name: args.repr,
        renormalize: args.renormalize,
        out_dir: args.out,
    })?;
    for r in &outcome.reports {
        println!(
            "{}: {} items x {} dims, {} rows off unit norm",
            r.repr_name,
            r.n_items,
            r.dim,
            r.deviations.len()
        );
        for (row, norm) in r.deviations.iter().take(10) {
            println!("  row {row}: norm {norm}");
        }
    }
    for p in &outcome.written {
        println!("wrote {}", p.display());
    }
    if outcome.violations() > 0 && !args.renormalize {
        eprintln!("error: {} rows are not unit norm; rerun with --renormalize", outcome.violations());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> simfuse::Result<ExitCode> {
    match cli.command {
        Command::Ingest(args) => ingest(args),
        Command::Synth(args) => {
            let request = SynthRequest::read(&args.spec)?;
            let path = report::run_synth(&request, &args.out)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Search(args) => {
            let cache_dir = args
                .cache
                .then(|| args.cache_dir.clone().unwrap_or_else(|| args.out.join("cache")));
            let cfg = SearchConfig {
                gallery: args.gallery,
                modes: args.mode.modes(),
                k: args.k as usize,
                stats_scope: match args.stats_scope {
                    ScopeArg::Full => StatsScope::Full,
                    ScopeArg::OffDiagonal => StatsScope::OffDiagonal,
                },
                out_dir: args.out,
                workers: args.workers,
                cache_dir,
            };
            let summary = report::run_search(&cfg)?;
            for m in &summary.modes {
                println!(
                    "{}: {} subsets, best recall@{} = {} with {}",
                    m.mode,
                    m.n_subsets,
                    summary.k,
                    m.best_recall,
                    m.best_representations.join("+")
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze(args) => {
            let cfg = AnalyzeConfig {
                search_dir: args.search,
                mode: args.mode.into(),
                size_filter: args.size_filter,
                q_max: args.q_max,
                ablation_base: args.ablation_base,
                ablation_scope: if args.same_size {
                    AblationScope::SameSize
                } else {
                    AblationScope::AllSizes
                },
                gallery: args.gallery,
                top_n: args.top_n,
                out_dir: args.out,
            };
            let bundle = report::run_analyze(&cfg)?;
            println!(
                "oracle recall {} (best single {}, best combination {}), {} exclusive hits",
                bundle.oracle.oracle_recall,
                bundle.oracle.best_single_recall,
                bundle.oracle.best_combination_recall,
                bundle.exclusive.total_exclusive
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Bapps(args) => {
            let cfg = BappsConfig {
                tables: args.tables,
                items: args.items,
                weights: args.weights,
                baseline: args.baseline,
                out_dir: args.out,
                workers: args.workers,
            };
            let report = report::run_bapps(&cfg)?;
            for s in &report.scores {
                println!("{}: score {:.4} over {} items", s.distortion, s.score, s.n_items);
            }
            for r in &report.single_layer {
                println!("{}: best single layer L_s = {} scoring {:.4}", r.distortion, r.layer, r.score);
            }
            for t in &report.tables {
                for c in &t.combinations {
                    println!("{} {:?}: best {} scoring {:.4}", t.distortion, c.rule, c.metrics.join("+"), c.score);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
