use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pnml_core::erm::{fit, one_hot_targets, DEFAULT_TARGET_EPS};
use pnml_core::io::{
    encode_csv, encode_score_csv, encode_stats, read_embeddings, read_labels, read_logits,
    read_stats, stats_fingerprint, write_atomic, ReportFile,
};
use pnml_core::linalg::DEFAULT_RANK_TOL_FACTOR;
use pnml_core::metrics::evaluate;
use pnml_core::pipeline::{
    prepare_with, regret_map_scaled, score_batch, spectrum_report, Provenance,
};
use pnml_core::regret::response_curve;
use pnml_core::{FeatureScaler, GridSpec, PrepareOptions, ScoreDirection};

#[derive(Parser)]
#[command(name = "pnml", version, about = "pNML regret scores for out-of-distribution detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Precompute training statistics from an embedding file.
    FitStats(FitStatsArgs),
    /// Score test embeddings against training statistics.
    Score(ScoreArgs),
    /// Compute detection metrics from IND and OOD score tables.
    Eval(EvalArgs),
    /// Regret over a 2-D lattice for a model trained on two features.
    Map(MapArgs),
    /// Two-class normalized regret as a function of xᵀg.
    Curve(CurveArgs),
    /// Eigenvalues stored in a statistics file.
    Spectrum(SpectrumArgs),
}

#[derive(Args)]
struct FitStatsArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the embeddings as given instead of scaling rows to unit norm.
    #[arg(long)]
    no_normalize: bool,
    /// Relative eigenvalue cutoff factor (multiplied by λmax·max(N, M)).
    #[arg(long, default_value_t = DEFAULT_RANK_TOL_FACTOR)]
    rank_tol: f64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Column {
    Regret,
    Baseline,
    Xtg,
    PnmlMax,
}

impl Column {
    fn name(self) -> &'static str {
        match self {
            Column::Regret => "regret",
            Column::Baseline => "baseline",
            Column::Xtg => "xtg",
            Column::PnmlMax => "pnml_max",
        }
    }

    fn direction(self) -> ScoreDirection {
        match self {
            Column::Regret | Column::Xtg => ScoreDirection::HigherIsOod,
            Column::Baseline | Column::PnmlMax => ScoreDirection::LowerIsOod,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ind_scores: PathBuf,
    #[arg(long)]
    ood_scores: PathBuf,
    /// Score column(s) to evaluate; the first one fills the top-level fields.
    #[arg(long, value_enum, default_values_t = [Column::Regret])]
    column: Vec<Column>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// `x1min,x1max,x2min,x2max,steps`
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    /// Label smoothing used for the least-squares targets.
    #[arg(long, default_value_t = DEFAULT_TARGET_EPS)]
    eps: f64,
    /// Fit on raw features instead of centred, unit-variance ones.
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args)]
struct CurveArgs {
    /// Comma-separated probabilities of the first class.
    #[arg(long, value_delimiter = ',', default_values_t = [0.55, 0.85, 0.95, 0.99])]
    p1: Vec<f64>,
    #[arg(long, default_value_t = 6.0)]
    xtg_max: f64,
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitStats(a) => fit_stats(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Map(a) => map(a),
        Command::Curve(a) => curve(a),
        Command::Spectrum(a) => spectrum(a),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Thread pool sized by `PNML_THREADS` (unset or 0: one thread per core).
fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("PNML_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .with_context(|| format!("PNML_THREADS must be a non-negative integer, got {v:?}"))?,
        Err(_) => 0,
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn fit_stats(a: FitStatsArgs) -> Result<()> {
    let train = read_embeddings(&a.train).with_context(|| format!("reading {}", a.train.display()))?;
    let opts = PrepareOptions {
        normalize: !a.no_normalize,
        rank_tol_factor: a.rank_tol,
    };
    let stats = prepare_with(&train, opts)?;
    if stats.is_degenerate() {
        eprintln!("warning: no eigenvalue survives the rank cutoff; every test sample will score xtg = 1");
    }
    write(&a.out, &encode_stats(&stats))
}

fn score(a: ScoreArgs) -> Result<()> {
    let stats = read_stats(&a.stats).with_context(|| format!("reading {}", a.stats.display()))?;
    let test = read_embeddings(&a.embeddings)
        .with_context(|| format!("reading {}", a.embeddings.display()))?;
    let probs = read_logits(&a.logits).with_context(|| format!("reading {}", a.logits.display()))?;
    let batch = thread_pool()?.install(|| score_batch(&stats, &test, &probs))?;
    write(&a.out, &encode_score_csv(&batch.scores))?;

    let provenance = Provenance {
        sources: [&a.stats, &a.embeddings, &a.logits]
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        stats_fingerprint: stats_fingerprint(&stats),
    };
    let mut sidecar = serde_json::to_vec_pretty(&provenance)?;
    sidecar.push(b'\n');
    let mut name = a.out.into_os_string();
    name.push(".provenance.json");
    write(Path::new(&name), &sidecar)
}

/// Reads the named column from a score CSV.
fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let idx = headers
        .iter()
        .position(|h| h.trim() == column)
        .with_context(|| format!("{} has no column named {column:?}", path.display()))?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let cell = record.get(idx).unwrap_or("").trim();
        let v: f64 = cell.parse().with_context(|| {
            format!("{}: data row {}: cannot parse {cell:?} as a number", path.display(), i + 1)
        })?;
        if !v.is_finite() {
            bail!("{}: data row {}: non-finite score", path.display(), i + 1);
        }
        values.push(v);
    }
    Ok(values)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut methods = BTreeMap::new();
    let mut primary = None;
    for col in &a.column {
        let ind = read_column(&a.ind_scores, col.name())?;
        let ood = read_column(&a.ood_scores, col.name())?;
        let report = evaluate(&ind, &ood, col.direction())
            .with_context(|| format!("evaluating column {}", col.name()))?;
        primary.get_or_insert_with(|| report.clone());
        methods.insert(col.name().to_string(), report);
    }
    let Some(primary) = primary else {
        bail!("no score column requested");
    };
    if methods.len() < 2 {
        methods.clear();
    }
    write(&a.out, &ReportFile { primary, methods }.to_json())
}

fn parse_grid(spec: &str) -> Result<GridSpec> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        bail!("--grid expects x1min,x1max,x2min,x2max,steps, got {spec:?}");
    }
    let bound = |i: usize| -> Result<f64> {
        parts[i]
            .parse()
            .with_context(|| format!("--grid: cannot parse {:?} as a number", parts[i]))
    };
    Ok(GridSpec {
        x1_min: bound(0)?,
        x1_max: bound(1)?,
        x2_min: bound(2)?,
        x2_max: bound(3)?,
        steps: parts[4]
            .parse()
            .with_context(|| format!("--grid: cannot parse {:?} as a step count", parts[4]))?,
    })
}

fn map(a: MapArgs) -> Result<()> {
    let grid = parse_grid(&a.grid)?;
    let raw = read_embeddings(&a.train).with_context(|| format!("reading {}", a.train.display()))?;
    let labels = read_labels(&a.labels).with_context(|| format!("reading {}", a.labels.display()))?;
    let scaler = (!a.no_standardize).then(|| FeatureScaler::fit(&raw));
    let train = match &scaler {
        Some(s) => s.transform(&raw)?,
        None => raw,
    };
    let opts = PrepareOptions {
        normalize: false,
        ..PrepareOptions::default()
    };
    let stats = prepare_with(&train, opts)?;
    stats.require_nondegenerate()?;
    let model = fit(&train, &one_hot_targets(&labels, a.eps)?, &stats)?;
    let points = thread_pool()?.install(|| regret_map_scaled(&model, &stats, &grid, scaler.as_ref()))?;
    let rows = points.iter().map(|p| [p.x1, p.x2, p.p_c2, p.regret]);
    write(&a.out, &encode_csv(["x1", "x2", "p_c2", "regret"], rows))
}

fn curve(a: CurveArgs) -> Result<()> {
    if a.steps < 2 {
        bail!("--steps must be at least 2");
    }
    if !(a.xtg_max.is_finite() && a.xtg_max > 0.0) {
        bail!("--xtg-max must be positive and finite");
    }
    let grid: Vec<f64> = (0..a.steps)
        .map(|k| a.xtg_max * k as f64 / (a.steps - 1) as f64)
        .collect();
    let mut rows = Vec::with_capacity(a.p1.len() * a.steps);
    for &p1 in &a.p1 {
        for (xtg, r) in response_curve(p1, &grid)? {
            rows.push([p1, xtg, r]);
        }
    }
    write(&a.out, &encode_csv(["p1", "xtg", "normalized_regret"], rows))
}

fn spectrum(a: SpectrumArgs) -> Result<()> {
    let stats = read_stats(&a.stats).with_context(|| format!("reading {}", a.stats.display()))?;
    let rows = spectrum_report(&stats).into_iter().map(|(i, v)| [i as f64, v]);
    write(&a.out, &encode_csv(["index", "eigenvalue"], rows))
}
