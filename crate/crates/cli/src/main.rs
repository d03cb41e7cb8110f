//! `prunekit`: analyze conv filters, select redundant ones, prune, and report savings.
//!
//! Every machine-readable output is JSON carrying `schema_version`. Failures
//! print `{"error": {"kind", "message"}}` on stderr; usage errors and missing
//! files exit with 2, everything else with 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use prunekit::complexity::{reduction_report, MacsMode};
use prunekit::container::{load_model, save_model};
use prunekit::model::{FlattenOrder, LayerKind, Model};
use prunekit::rank1::{layer_representatives, FilterTensor};
use prunekit::reference_net::{forward_counted, load_feature_map};
use prunekit::selector::{closest_pairs, select_layer, ClosestPair, Diagnostics, SelectionMethod};
use prunekit::similarity::{
    closest_pair_stats_with_bins, distance_matrix, ClosestPairStats, Metric, DEFAULT_HISTOGRAM_BINS,
};
use prunekit::surgery::{apply_plan, build_plan, LayerPlan, Removals};
use prunekit::Violation;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const SCHEMA_VERSION: u32 = 1;
const THREADS_ENV: &str = "PRUNEKIT_THREADS";

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Passive filter pruning for CNN conv layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distance matrix, closest pairs and closest-pair statistics per conv layer.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "cosine")]
        metric: MetricArg,
        /// Histogram bins over [0, max closest distance].
        #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
        bins: usize,
        /// Comma-separated conv layer names; all conv layers by default.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose filters to remove and write a pruning plan.
    Select {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "cosine")]
        method: MethodArg,
        /// Fraction of filters to remove per layer (l1 only).
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Average method only: save a copy of the model whose kept filters hold the merged weights.
        #[arg(long)]
        write_merged: Option<PathBuf>,
    },
    /// Apply a pruning plan and write the pruned model.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and MAC reductions between a model and its pruned version.
    Report {
        #[arg(long)]
        before: PathBuf,
        #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
        after: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "exact")]
        macs_mode: MacsModeArg,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
    },
    /// Run the reference forward pass on a stored input feature map.
    Forward {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the untrained acoustic-scene baseline (Glorot-initialized) as a model file.
    Baseline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Chebyshev,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Chebyshev => Metric::Chebyshev,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(alias = "cosine_greedy")]
    Cosine,
    #[value(alias = "chebyshev_greedy")]
    Chebyshev,
    #[value(alias = "l1_norm")]
    L1,
    Average,
}

impl From<MethodArg> for SelectionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cosine => SelectionMethod::CosineGreedy,
            MethodArg::Chebyshev => SelectionMethod::ChebyshevGreedy,
            MethodArg::L1 => SelectionMethod::L1Norm,
            MethodArg::Average => SelectionMethod::Average,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MacsModeArg {
    Paper,
    Exact,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Table,
}

struct CliError {
    kind: &'static str,
    message: String,
    violations: Vec<Violation>,
    exit: u8,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { kind: "usage", message: message.into(), violations: Vec::new(), exit: 2 }
    }
}

impl From<prunekit::Error> for CliError {
    fn from(e: prunekit::Error) -> Self {
        let message = e.to_string();
        match e {
            prunekit::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Self { kind: "missing_file", message, violations: Vec::new(), exit: 2 }
            }
            prunekit::Error::Validation(violations) => Self { kind: "validation", message, violations, exit: 1 },
            other => Self { kind: other.kind(), message, violations: Vec::new(), exit: 1 },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        prunekit::Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load(path: &Path) -> CliResult<Model> {
    load_model(path).map_err(|e| with_path(e.into(), path))
}

fn with_path(mut e: CliError, path: &Path) -> CliError {
    e.message = format!("{}: {}", path.display(), e.message);
    e
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| with_path(prunekit::Error::from(e).into(), path)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Requested conv layers in network order; all of them when `requested` is empty.
fn conv_layers(model: &Model, requested: &[String]) -> CliResult<Vec<String>> {
    let convs = model.descriptor.conv_layer_names();
    if let Some(bad) = requested.iter().find(|r| !convs.contains(&r.as_str())) {
        return Err(CliError::usage(format!(
            "`{bad}` is not a conv layer of this model (conv layers: {})",
            convs.join(",")
        )));
    }
    Ok(convs
        .into_iter()
        .filter(|c| requested.is_empty() || requested.iter().any(|r| r == c))
        .map(String::from)
        .collect())
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let n: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError { kind: "internal", message: e.to_string(), violations: Vec::new(), exit: 1 })
}

fn per_layer<T: Send>(names: &[String], f: impl Fn(&str) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
    thread_pool()?.install(|| names.par_iter().map(|n| f(n)).collect())
}

#[derive(Serialize)]
struct LayerAnalysis {
    name: String,
    filters: usize,
    /// All-zero filters; they have no representative and are left out of the matrix.
    degenerate: Vec<usize>,
    l1_norms: Vec<f64>,
    /// Filter index of each matrix row.
    matrix_filters: Vec<usize>,
    distance_matrix: Vec<Vec<f64>>,
    closest_pairs: Vec<ClosestPair>,
    stats: Option<ClosestPairStats>,
}

#[derive(Serialize)]
struct AnalyzeOutput {
    schema_version: u32,
    metric: Metric,
    layers: Vec<LayerAnalysis>,
}

fn analyze(model: &Model, metric: Metric, bins: usize, names: &[String]) -> CliResult<AnalyzeOutput> {
    if bins == 0 {
        return Err(CliError::usage("--bins must be at least 1"));
    }
    let layers = per_layer(names, |name| {
        let filters = model.conv_filters(name)?;
        let reps = layer_representatives(&filters)?;
        let live: Vec<usize> = (0..filters.len()).filter(|&i| reps[i].is_some()).collect();
        let degenerate = (0..filters.len()).filter(|&i| reps[i].is_none()).collect();
        let live_reps: Vec<_> = reps.into_iter().flatten().collect();
        let (rows, pairs, stats) = if live_reps.len() >= 2 {
            let w = distance_matrix(&live_reps, metric)?;
            let pairs = closest_pairs(&w)
                .into_iter()
                .map(|p| ClosestPair { anchor: live[p.anchor], partner: live[p.partner], ..p })
                .collect();
            let stats = closest_pair_stats_with_bins(&w, bins)?;
            (w.to_rows(), pairs, Some(stats))
        } else {
            (vec![vec![0.0; live.len()]; live.len()], Vec::new(), None)
        };
        Ok(LayerAnalysis {
            name: name.to_string(),
            filters: filters.len(),
            degenerate,
            l1_norms: filters.iter().map(FilterTensor::l1_norm).collect(),
            matrix_filters: live,
            distance_matrix: rows,
            closest_pairs: pairs,
            stats,
        })
    })?;
    Ok(AnalyzeOutput { schema_version: SCHEMA_VERSION, metric, layers })
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    method: Option<SelectionMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flatten_order: Option<FlattenOrder>,
    layers: Vec<LayerPlan>,
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    #[serde(flatten)]
    plan: &'a PlanFile,
    diagnostics: BTreeMap<&'a str, &'a Diagnostics>,
}

struct Selection {
    plan: PlanFile,
    diagnostics: Vec<(String, Diagnostics)>,
    merged: Option<Model>,
}

fn select(model: &Model, method: SelectionMethod, ratio: Option<f64>, names: &[String]) -> CliResult<Selection> {
    match (method, ratio) {
        (SelectionMethod::L1Norm, None) => return Err(CliError::usage("--method l1 requires --ratio")),
        (SelectionMethod::L1Norm, Some(r)) if !(0.0..1.0).contains(&r) => {
            return Err(CliError::usage(format!("--ratio must lie in [0, 1), got {r}")))
        }
        (SelectionMethod::L1Norm, _) | (_, None) => {}
        (_, Some(_)) => return Err(CliError::usage("--ratio only applies to --method l1")),
    }
    let selections = per_layer(names, |name| Ok(select_layer(&model.conv_filters(name)?, method, ratio)?))?;

    let removals: Removals = names.iter().cloned().zip(selections.iter().map(|s| s.result.removed.clone())).collect();
    let plan = build_plan(model, &removals)?;
    let merged = if method == SelectionMethod::Average {
        let replacements: Vec<(&str, &[FilterTensor])> =
            names.iter().zip(&selections).filter_map(|(n, s)| Some((n.as_str(), s.merged.as_deref()?))).collect();
        Some(with_filters(model, &replacements)?)
    } else {
        None
    };
    Ok(Selection {
        plan: PlanFile {
            schema_version: SCHEMA_VERSION,
            method: Some(method),
            flatten_order: plan.flatten_order,
            layers: plan.layers,
        },
        diagnostics: names.iter().cloned().zip(selections.into_iter().map(|s| s.result.diagnostics)).collect(),
        merged,
    })
}

/// Copy of `model` with the given conv layers' filters replaced.
fn with_filters(model: &Model, replacements: &[(&str, &[FilterTensor])]) -> CliResult<Model> {
    let mut tensors = model.tensors();
    for (layer, filters) in replacements {
        let Some(LayerKind::Conv2d { weight, .. }) = model.layer(layer).map(|l| &l.kind) else {
            continue;
        };
        if let Some(t) = tensors.iter_mut().find(|t| &t.name == weight) {
            t.data = filters.iter().flat_map(|f| f.data.iter().copied()).collect();
        }
    }
    let d = &model.descriptor;
    Ok(Model::new(d.input_shape, d.flatten_order, d.batchnorm_epsilon, d.layers.clone(), tensors)?)
}

fn read_plan(path: &Path) -> CliResult<PlanFile> {
    let text = std::fs::read_to_string(path).map_err(|e| with_path(prunekit::Error::from(e).into(), path))?;
    let plan: PlanFile = serde_json::from_str(&text).map_err(|e| with_path(e.into(), path))?;
    if plan.schema_version != SCHEMA_VERSION {
        return Err(with_path(
            prunekit::Error::Format(format!("unsupported plan schema_version {}", plan.schema_version)).into(),
            path,
        ));
    }
    Ok(plan)
}

/// Rebuilds the plan from its removals and checks the stated kept lists against it.
fn prune_with(model: &Model, plan_file: &PlanFile) -> CliResult<Model> {
    let removals: Removals = plan_file.layers.iter().map(|l| (l.name.clone(), l.removed.clone())).collect();
    let plan = build_plan(model, &removals)?;
    for stated in &plan_file.layers {
        let derived = plan.layer(&stated.name).map(|l| l.kept.as_slice()).unwrap_or_default();
        let mut kept = stated.kept.clone();
        kept.sort_unstable();
        if kept != derived {
            return Err(prunekit::Error::Plan(format!(
                "layer `{}`: kept list {:?} does not complement removed list {:?}",
                stated.name, stated.kept, stated.removed
            ))
            .into());
        }
    }
    if let (Some(stated), Some(actual)) = (plan_file.flatten_order, model.descriptor.flatten_order) {
        if stated != actual {
            return Err(prunekit::Error::Plan(format!(
                "plan was built for flatten order {stated:?} but the model uses {actual:?}"
            ))
            .into());
        }
    }
    Ok(apply_plan(model, &plan)?)
}

#[derive(Serialize)]
struct PruneOutput {
    schema_version: u32,
    out: String,
    layers: Vec<LayerPlan>,
    params_before: u64,
    params_after: u64,
}

#[derive(Serialize)]
struct ReportOutput {
    schema_version: u32,
    #[serde(flatten)]
    report: prunekit::complexity::ComplexityReport,
}

#[derive(Serialize)]
struct ForwardOutput {
    schema_version: u32,
    output: Vec<f32>,
    macs: u64,
}

#[derive(Serialize)]
struct BaselineOutput {
    schema_version: u32,
    out: String,
    seed: u64,
    params: u64,
    macs: u64,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Analyze { model, metric, bins, layers, out } => {
            let m = load(&model)?;
            let names = conv_layers(&m, &layers)?;
            emit(&analyze(&m, metric.into(), bins, &names)?, out.as_deref())
        }
        Command::Select { model, method, ratio, layers, out, write_merged } => {
            let method = SelectionMethod::from(method);
            if write_merged.is_some() && method != SelectionMethod::Average {
                return Err(CliError::usage("--write-merged only applies to --method average"));
            }
            let m = load(&model)?;
            let names = conv_layers(&m, &layers)?;
            let selection = select(&m, method, ratio, &names)?;
            if let (Some(path), Some(merged)) = (&write_merged, &selection.merged) {
                save_model(merged, path).map_err(|e| with_path(e.into(), path))?;
            }
            let output = PlanOutput {
                plan: &selection.plan,
                diagnostics: selection.diagnostics.iter().map(|(n, d)| (n.as_str(), d)).collect(),
            };
            emit(&output, out.as_deref())
        }
        Command::Prune { model, plan, out } => {
            let m = load(&model)?;
            let plan_file = read_plan(&plan)?;
            let pruned = prune_with(&m, &plan_file)?;
            save_model(&pruned, &out).map_err(|e| with_path(e.into(), &out))?;
            emit(
                &PruneOutput {
                    schema_version: SCHEMA_VERSION,
                    out: out.display().to_string(),
                    layers: build_plan(
                        &m,
                        &plan_file.layers.iter().map(|l| (l.name.clone(), l.removed.clone())).collect(),
                    )?
                    .layers,
                    params_before: prunekit::complexity::count_params(&m)?,
                    params_after: prunekit::complexity::count_params(&pruned)?,
                },
                None,
            )
        }
        Command::Report { before, after, plan, macs_mode, format } => {
            let b = load(&before)?;
            let a = match (after, plan) {
                (Some(after), _) => load(&after)?,
                (None, Some(plan)) => prune_with(&b, &read_plan(&plan)?)?,
                (None, None) => return Err(CliError::usage("report needs --after or --plan")),
            };
            let mode = match macs_mode {
                MacsModeArg::Paper => MacsMode::Paper,
                MacsModeArg::Exact => MacsMode::Exact,
            };
            let report = reduction_report(&b, &a, mode)?;
            match format {
                FormatArg::Table => {
                    print!("{}", report.render_table());
                    Ok(())
                }
                FormatArg::Json => emit(&ReportOutput { schema_version: SCHEMA_VERSION, report }, None),
            }
        }
        Command::Forward { model, input } => {
            let m = load(&model)?;
            let x = load_feature_map(&input).map_err(|e| with_path(e.into(), &input))?;
            let (output, macs) = forward_counted(&m, &x)?;
            emit(&ForwardOutput { schema_version: SCHEMA_VERSION, output, macs }, None)
        }
        Command::Baseline { out, seed } => {
            let m = prunekit::baseline::dcase2021_task1a(seed)?;
            save_model(&m, &out).map_err(|e| with_path(e.into(), &out))?;
            let counts = prunekit::complexity::count(&m)?;
            emit(
                &BaselineOutput {
                    schema_version: SCHEMA_VERSION,
                    out: out.display().to_string(),
                    seed,
                    params: counts.total_params,
                    macs: counts.total_macs,
                },
                None,
            )
        }
    }
}

fn report_error(e: &CliError) {
    let mut error = serde_json::json!({ "kind": e.kind, "message": e.message });
    if !e.violations.is_empty() {
        error["violations"] = serde_json::to_value(&e.violations).unwrap_or_default();
    }
    eprintln!("{}", serde_json::json!({ "error": error }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::usage(e.to_string().trim_end());
            report_error(&err);
            return ExitCode::from(err.exit);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(e.exit)
        }
    }
}
