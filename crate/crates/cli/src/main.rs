//! `icsc`: generate datasets, compare covariance matrices, cluster them and
//! segment time series from the command line. Every command except `gen`
//! emits a JSON report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icsc_core::datasets::{self, CovarianceDataset, LabeledTimeSeriesSet};
use icsc_core::icsc_hmm::{run_decoupled, run_icsc, IcscConfig, IcscRun};
use icsc_core::ibp_hmm::{run_ibp, IbpHmmConfig, IbpRun, IterationSummary, MoveStats};
use icsc_core::metrics::{clustering_scores, segmentation_scores};
use icsc_core::similarity::{pairwise_matrix, SimilarityKind, SimilarityMatrix};
use icsc_core::spcm_crp::{run_sampler, CrpRun, CrpSamplerConfig};
use icsc_core::spd_core::SpdMatrix;
use icsc_core::spectral_embedding::{embed, embed_with_dimension};
use icsc_core::Error;
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

/// Relative `-o` paths are resolved against this directory when it is set.
const OUT_DIR_VAR: &str = "ICSC_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "icsc", version, about = "Transform-invariant clustering of covariance matrices and time-series segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Pairwise similarity or distance matrix of a covariance dataset.
    Sim(SimArgs),
    /// Spectral embedding of a covariance dataset.
    Embed(EmbedArgs),
    /// SPCM-CRP clustering of a covariance dataset.
    Cluster(ClusterArgs),
    /// Segment a time-series dataset.
    Segment(SegmentArgs),
    /// Score a prediction report against ground truth.
    Eval(EvalArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GenKind {
    Toy3d,
    Toy6d,
    Toy2dTs,
    Lattice,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(value_enum)]
    kind: GenKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lattice rows.
    #[arg(long, default_value_t = 16)]
    rows: usize,
    /// Lattice columns.
    #[arg(long, default_value_t = 16)]
    cols: usize,
    /// Lattice regions.
    #[arg(long, default_value_t = 5)]
    regions: usize,
    /// Output file; stdout when omitted. Relative paths resolve under $ICSC_OUT_DIR when it is set
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct MatrixInput {
    /// Covariance dataset file.
    #[arg(short, long)]
    input: PathBuf,
    /// Add eps·I to every matrix before use.
    #[arg(long)]
    regularize: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct SimArgs {
    #[command(flatten)]
    data: MatrixInput,
    /// airm (riem), lerm, kldm, jbld, spcm or bspcm.
    #[arg(long, default_value = "bspcm")]
    kind: String,
    /// B-SPCM tolerance.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Output file; stdout when omitted. Relative paths resolve under $ICSC_OUT_DIR when it is set
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EmbedArgs {
    #[command(flatten)]
    data: MatrixInput,
    #[arg(long, default_value = "bspcm")]
    kind: String,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Fixed embedding dimension; chosen from the spectrum when omitted.
    #[arg(long)]
    dim: Option<usize>,
    /// Output file; stdout when omitted. Relative paths resolve under $ICSC_OUT_DIR when it is set
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Clone)]
struct SamplerArgs {
    /// B-SPCM tolerance.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// CRP concentration.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// Seed of the first chain; chain c uses seed + c.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent chains run in parallel; the best one is reported.
    #[arg(long, default_value_t = 1)]
    chains: usize,
    /// Include per-iteration traces in the report.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug, Serialize)]
struct ClusterArgs {
    #[command(flatten)]
    data: MatrixInput,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Output file; stdout when omitted. Relative paths resolve under $ICSC_OUT_DIR when it is set
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Model {
    Ibp,
    Icsc,
    Decoupled,
}

#[derive(Args, Debug, Serialize)]
struct SegmentArgs {
    /// Time-series dataset file.
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Model::Icsc)]
    model: Model,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Z-score each dimension first.
    #[arg(long)]
    standardize: bool,
    /// Output file; stdout when omitted. Relative paths resolve under $ICSC_OUT_DIR when it is set
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum EvalKind {
    Clustering,
    Segmentation,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Level {
    Invariant,
    Dependent,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Dataset file holding ground-truth labels.
    #[arg(long)]
    truth: PathBuf,
    /// Report (or bare label array) to score.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalKind::Clustering)]
    kind: EvalKind,
    /// Which time-series labels to compare.
    #[arg(long, value_enum, default_value_t = Level::Invariant)]
    level: Level,
    /// Output file; stdout when omitted. Relative paths resolve under $ICSC_OUT_DIR when it is set
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunReport<C: Serialize> {
    command: Vec<String>,
    config: C,
    seed: Option<u64>,
    wall_time_secs: f64,
    result: Value,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            e if e.is_data_error() => Failure::Data(e.to_string()),
            e => Failure::Numerical(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Sim(a) => {
            let result = sim(&a)?;
            emit(argv, &a, None, start, result, a.output.as_deref())
        }
        Command::Embed(a) => {
            let result = embed_cmd(&a)?;
            emit(argv, &a, None, start, result, a.output.as_deref())
        }
        Command::Cluster(a) => {
            let result = cluster(&a)?;
            emit(argv, &a, Some(a.sampler.seed), start, result, a.output.as_deref())
        }
        Command::Segment(a) => {
            let result = segment(&a)?;
            emit(argv, &a, Some(a.sampler.seed), start, result, a.output.as_deref())
        }
        Command::Eval(a) => {
            let result = eval(&a)?;
            emit(argv, &a, None, start, result, a.output.as_deref())
        }
    }
}

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_VAR) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn write_or_print(text: &str, output: Option<&Path>) -> CliResult<()> {
    match output {
        Some(p) => Ok(datasets::write_atomic(&resolve(p), text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn emit<C: Serialize>(
    argv: &[String],
    config: &C,
    seed: Option<u64>,
    start: Instant,
    result: Value,
    output: Option<&Path>,
) -> CliResult<()> {
    let report = RunReport {
        command: argv.to_vec(),
        config,
        seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
        result,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Numerical(e.to_string()))?;
    write_or_print(&text, output)
}

fn gen(a: &GenArgs) -> CliResult<()> {
    let text = match a.kind {
        GenKind::Toy3d => datasets::covariance_to_json(&datasets::gen_toy3d(a.seed)),
        GenKind::Toy6d => datasets::covariance_to_json(&datasets::gen_toy6d(a.seed)),
        GenKind::Lattice => {
            datasets::covariance_to_json(&datasets::gen_spd_lattice(a.rows, a.cols, a.regions, a.seed)?)
        }
        GenKind::Toy2dTs => datasets::timeseries_to_json(&datasets::gen_toy2d_timeseries(a.seed)),
    };
    write_or_print(&text, a.output.as_deref())
}

fn load_matrices(m: &MatrixInput) -> CliResult<CovarianceDataset> {
    let mut ds = datasets::load_covariances(&m.input)?;
    if let Some(eps) = m.regularize {
        if !(eps >= 0.0) {
            return Err(Failure::Usage("--regularize must be non-negative".into()));
        }
        ds.matrices = ds.matrices.iter().map(|s| s.regularized(eps)).collect::<Result<Vec<SpdMatrix>, _>>()?;
    }
    Ok(ds)
}

fn parse_kind(kind: &str) -> CliResult<SimilarityKind> {
    Ok(kind.parse::<SimilarityKind>()?)
}

fn check_tau(tau: f64) -> CliResult<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Failure::Usage("--tau must be positive".into()))
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn similarity(ds: &CovarianceDataset, kind: SimilarityKind, tau: f64) -> CliResult<SimilarityMatrix> {
    check_tau(tau)?;
    Ok(pairwise_matrix(&ds.matrices, kind, tau)?)
}

fn sim(a: &SimArgs) -> CliResult<Value> {
    let ds = load_matrices(&a.data)?;
    let kind = parse_kind(&a.kind)?;
    let s = similarity(&ds, kind, a.tau)?;
    Ok(json!({ "kind": kind.name(), "size": s.size(), "matrix": rows(&s.values) }))
}

fn embed_cmd(a: &EmbedArgs) -> CliResult<Value> {
    let ds = load_matrices(&a.data)?;
    let kind = parse_kind(&a.kind)?;
    let s = similarity(&ds, kind, a.tau)?;
    let e = match a.dim {
        Some(p) => embed_with_dimension(&s, p)?,
        None => embed(&s)?,
    };
    Ok(json!({
        "dimension": e.dimension,
        "coords": rows(&e.coords),
        "laplacian_eigenvalues": e.laplacian_eigenvalues,
        "zero_rows": e.zero_rows,
    }))
}

fn check_sampler(s: &SamplerArgs) -> CliResult<()> {
    check_tau(s.tau)?;
    if !(s.alpha > 0.0) {
        return Err(Failure::Usage("--alpha must be positive".into()));
    }
    if s.iters == 0 || s.chains == 0 {
        return Err(Failure::Usage("--iters and --chains must be at least 1".into()));
    }
    Ok(())
}

/// Runs `f` for seeds seed..seed+chains concurrently, in seed order.
fn run_chains<T: Send, F>(s: &SamplerArgs, f: F) -> CliResult<Vec<(u64, T)>>
where
    F: Fn(u64) -> icsc_core::Result<T> + Sync,
{
    let seeds: Vec<u64> = (0..s.chains as u64).map(|c| s.seed.wrapping_add(c)).collect();
    let results: Vec<icsc_core::Result<T>> = std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = seeds.iter().map(|&seed| scope.spawn(move || f(seed))).collect();
        handles.into_iter().map(|h| h.join().expect("sampler thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for (seed, r) in seeds.into_iter().zip(results) {
        out.push((seed, r?));
    }
    Ok(out)
}

/// Index of the largest score; the earliest wins ties.
fn best_index(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

fn one_based(labels: &[usize]) -> Vec<usize> {
    labels.iter().map(|l| l + 1).collect()
}

fn cluster(a: &ClusterArgs) -> CliResult<Value> {
    check_sampler(&a.sampler)?;
    let ds = load_matrices(&a.data)?;
    let s = similarity(&ds, SimilarityKind::Bspcm, a.sampler.tau)?;
    let e = embed(&s)?;
    let runs: Vec<(u64, CrpRun)> = run_chains(&a.sampler, |seed| {
        let cfg = CrpSamplerConfig {
            alpha: a.sampler.alpha,
            iterations: a.sampler.iters,
            seed,
            niw: None,
            record_chain: false,
        };
        run_sampler(&e, &s, &cfg)
    })?;
    let best = best_index(runs.iter().map(|(_, r)| r.map.log_posterior));
    let (seed, run) = &runs[best];
    let mut result = json!({
        "chain_seed": seed,
        "k": run.map.labels.count,
        "labels": one_based(&run.map.labels.labels),
        "log_posterior": run.map.log_posterior,
        "map_iteration": run.map.iteration,
        "embedding_dimension": e.dimension,
        "chains": runs.iter().map(|(seed, r)| json!({
            "seed": seed, "k": r.map.labels.count, "log_posterior": r.map.log_posterior,
        })).collect::<Vec<_>>(),
    });
    if let Some(truth) = &ds.labels {
        let sc = clustering_scores(truth, &run.map.labels.labels)?;
        result["scores"] = serde_json::to_value(sc).expect("scores serialize");
    }
    if a.sampler.trace {
        result["trace"] = json!({ "log_posterior": run.trace, "k": run.k_trace });
    }
    Ok(result)
}

struct Segmentation {
    k: usize,
    k_z: Option<usize>,
    dependent: Vec<Vec<usize>>,
    invariant: Option<Vec<Vec<usize>>>,
    feature_clusters: Option<Vec<usize>>,
    features: Vec<Vec<bool>>,
    log_posterior: f64,
    selected_iteration: usize,
    trace: Vec<IterationSummary>,
    moves: MoveStats,
}

impl Segmentation {
    fn from_ibp(r: IbpRun) -> Self {
        let st = &r.selected;
        let score = r.trace.get(r.selected_iteration).map_or(f64::NAN, |t| t.log_posterior);
        Segmentation {
            k: st.num_features(),
            k_z: None,
            dependent: st.states.clone(),
            invariant: None,
            feature_clusters: None,
            features: (0..st.features.num_rows()).map(|i| st.features.row(i).to_vec()).collect(),
            log_posterior: score,
            selected_iteration: r.selected_iteration,
            trace: r.trace,
            moves: r.moves,
        }
    }

    fn from_icsc(r: IcscRun) -> Self {
        let st = &r.selected;
        Segmentation {
            k: st.num_features(),
            k_z: Some(st.num_clusters()),
            dependent: st.states.clone(),
            invariant: Some(st.invariant_states()),
            feature_clusters: Some(st.feature_clusters.labels.clone()),
            features: (0..st.features.num_rows()).map(|i| st.features.row(i).to_vec()).collect(),
            log_posterior: st.log_joint,
            selected_iteration: r.selected_iteration,
            trace: r.trace,
            moves: r.moves,
        }
    }
}

fn segment(a: &SegmentArgs) -> CliResult<Value> {
    check_sampler(&a.sampler)?;
    let ds: LabeledTimeSeriesSet = datasets::load_timeseries(&a.input)?;
    let runs: Vec<(u64, Segmentation)> = run_chains(&a.sampler, |seed| {
        let cfg = IcscConfig {
            alpha_crp: a.sampler.alpha,
            tau: a.sampler.tau,
            max_iter: a.sampler.iters,
            seed,
            standardize: a.standardize,
            ..Default::default()
        };
        Ok(match a.model {
            Model::Icsc => Segmentation::from_icsc(run_icsc(&ds.data, &cfg)?),
            Model::Decoupled => Segmentation::from_icsc(run_decoupled(&ds.data, &cfg)?),
            Model::Ibp => {
                let data = if a.standardize { ds.data.standardized() } else { ds.data.clone() };
                let ibp = IbpHmmConfig { iterations: a.sampler.iters, seed, ..Default::default() };
                Segmentation::from_ibp(run_ibp(&data, &ibp)?)
            }
        })
    })?;
    let best = best_index(runs.iter().map(|(_, r)| r.log_posterior));
    let (seed, seg) = &runs[best];
    let nested = |v: &[Vec<usize>]| v.iter().map(|s| one_based(s)).collect::<Vec<_>>();
    // without a nested clustering each feature is its own invariant state
    let invariant = seg.invariant.as_deref().unwrap_or(&seg.dependent);
    let mut result = json!({
        "model": a.model,
        "chain_seed": seed,
        "k": seg.k,
        "k_z": seg.k_z,
        "labels": nested(invariant),
        "labels_dependent": nested(&seg.dependent),
        "feature_clusters": seg.feature_clusters.as_deref().map(one_based),
        "features": seg.features,
        "log_posterior": seg.log_posterior,
        "selected_iteration": seg.selected_iteration,
        "moves": seg.moves,
        "chains": runs.iter().map(|(seed, r)| json!({
            "seed": seed, "k": r.k, "k_z": r.k_z, "log_posterior": r.log_posterior,
        })).collect::<Vec<_>>(),
    });
    if let Some(truth) = &ds.labels_invariant {
        let t: Vec<i64> = truth.concat();
        let p: Vec<usize> = invariant.concat();
        result["scores"] = json!({
            "segmentation": segmentation_scores(&t, &p)?,
            "clustering": clustering_scores(&t, &p)?,
        });
    }
    if a.sampler.trace {
        result["trace"] = serde_json::to_value(&seg.trace).expect("trace serializes");
    }
    Ok(result)
}

/// Flattens a (possibly nested) JSON array of integer labels.
fn flatten_labels(v: &Value, out: &mut Vec<i64>) -> CliResult<()> {
    match v {
        Value::Array(items) => items.iter().try_for_each(|x| flatten_labels(x, out)),
        Value::Number(n) => match n.as_i64() {
            Some(l) => {
                out.push(l);
                Ok(())
            }
            None => Err(Failure::Data(format!("label {n} is not an integer"))),
        },
        other => Err(Failure::Data(format!("expected a label, found {other}"))),
    }
}

fn prediction_labels(path: &Path, level: Level) -> CliResult<Vec<i64>> {
    let text = datasets::read_text(path)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    let key = match level {
        Level::Invariant => "labels",
        Level::Dependent => "labels_dependent",
    };
    let found = if v.is_array() {
        Some(&v)
    } else {
        v.get("result").and_then(|r| r.get(key)).or_else(|| v.get(key))
    };
    let found = found.ok_or_else(|| Failure::Data(format!("{}: no `{key}` field", path.display())))?;
    let mut out = Vec::new();
    flatten_labels(found, &mut out)?;
    Ok(out)
}

fn truth_labels(path: &Path, level: Level) -> CliResult<Vec<i64>> {
    let text = datasets::read_text(path)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    let missing = || Failure::Data(format!("{}: no ground-truth labels", path.display()));
    if v.get("series").is_some() {
        let ds = datasets::timeseries_from_json(&text)?;
        let labels = match level {
            Level::Invariant => ds.labels_invariant,
            Level::Dependent => ds.labels_dependent,
        };
        Ok(labels.ok_or_else(missing)?.concat())
    } else {
        datasets::covariance_from_json(&text)?.labels.ok_or_else(missing)
    }
}

fn eval(a: &EvalArgs) -> CliResult<Value> {
    let truth = truth_labels(&a.truth, a.level)?;
    let pred = prediction_labels(&a.pred, a.level)?;
    Ok(match a.kind {
        EvalKind::Clustering => serde_json::to_value(clustering_scores(&truth, &pred)?),
        EvalKind::Segmentation => serde_json::to_value(segmentation_scores(&truth, &pred)?),
    }
    .expect("scores serialize"))
}
