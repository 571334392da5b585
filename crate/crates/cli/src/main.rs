//! `grf train | predict | simulate`.
//!
//! Errors go to standard error as a single `grf-error: <Tag>: <message>` line
//! and the process exits with status 1.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grf::centering::default_centering_options;
use grf::data::ColumnRoles;
use grf::inference::estimate_at;
use grf::rng::derive_seed;
use grf::simulation::{self, DesignKind, DesignSpec, HarnessConfig};
use grf::{
    center, csv_header, load_csv, validate_for_model, CenteringRoles, Forest, ForestOptions,
    GrfError, ModelKind, MomentModel, Result, SplitOptions, SubsampleSize,
};

/// Seed streams split off the master `--seed`.
const FOREST_STREAM: u64 = 1;
const CENTERING_STREAM: u64 = 2;

/// Boolean flags that also accept a `--no-` form; used when expanding config files.
const NEGATABLE: [&str; 5] = ["confounding", "heterogeneity", "additive", "nuisance", "ci"];

#[derive(Parser, Debug)]
#[command(name = "grf", version, about = "Generalized random forests")]
struct Cli {
    /// File of `key = value` lines applied before the command-line flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a forest on a CSV file and save it.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a saved forest on the rows of a CSV file.
    #[command(args_override_self = true)]
    Predict(PredictArgs),
    /// Run a simulation design and write the benchmark table.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
enum ModelArg {
    Regression,
    Quantile,
    PartialEffect,
    Instrumental,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Regression => ModelKind::Regression,
            ModelArg::Quantile => ModelKind::Quantile,
            ModelArg::PartialEffect => ModelKind::PartialEffect,
            ModelArg::Instrumental => ModelKind::Instrumental,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CenterArg {
    None,
    Auto,
}

#[derive(Args, Debug)]
struct ForestArgs {
    #[arg(long, default_value_t = 2000)]
    num_trees: usize,
    #[arg(long, default_value_t = 0.5)]
    subsample_fraction: f64,
    #[arg(long, default_value_t = 4)]
    little_bag_size: usize,
    #[arg(long, default_value_t = 5)]
    min_node_size: usize,
    #[arg(long, default_value_t = 0.05)]
    balance_fraction: f64,
    /// Poisson mean of candidate features per split [default: min(ceil(sqrt(p)) + 1, p)]
    #[arg(long)]
    mtry_rate: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl ForestArgs {
    fn options(&self) -> ForestOptions {
        ForestOptions {
            num_trees: self.num_trees,
            little_bag_size: self.little_bag_size,
            subsample: SubsampleSize::Fraction(self.subsample_fraction),
            split: SplitOptions {
                min_node_size: self.min_node_size,
                balance_fraction: self.balance_fraction,
                mtry_rate: self.mtry_rate,
            },
            seed: derive_seed(self.seed, FOREST_STREAM),
            ci_group_sampling: true,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    /// Comma-separated feature columns [default: every column without a role]
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long)]
    treatment: Option<String>,
    #[arg(long)]
    instrument: Option<String>,
    /// Quantile levels for the quantile model.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
    quantiles: Vec<f64>,
    #[arg(long, value_enum, default_value_t = CenterArg::Auto)]
    center: CenterArg,
    /// Trees in each centering forest.
    #[arg(long, default_value_t = 500)]
    centering_trees: usize,
    #[command(flatten)]
    forest: ForestArgs,
    /// Where to write the forest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Saved forest.
    #[arg(long)]
    forest: PathBuf,
    /// Query points; must contain the forest's feature columns.
    #[arg(long, value_name = "CSV")]
    data: PathBuf,
    /// Add std_err, ci_lower and ci_upper columns.
    #[arg(long, overrides_with = "no_ci")]
    ci: bool,
    #[arg(long, overrides_with = "ci", hide = true)]
    no_ci: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Output CSV [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    design: String,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, overrides_with = "no_confounding")]
    confounding: bool,
    #[arg(long, overrides_with = "confounding")]
    no_confounding: bool,
    #[arg(long, overrides_with = "no_heterogeneity")]
    heterogeneity: bool,
    #[arg(long, overrides_with = "heterogeneity")]
    no_heterogeneity: bool,
    #[arg(long, default_value_t = 0.0)]
    omega: f64,
    #[arg(long, default_value_t = 2)]
    kappa_tau: usize,
    #[arg(long, overrides_with = "no_additive")]
    additive: bool,
    #[arg(long, overrides_with = "additive")]
    no_additive: bool,
    #[arg(long, overrides_with = "no_nuisance")]
    nuisance: bool,
    #[arg(long, overrides_with = "nuisance")]
    no_nuisance: bool,
    /// Coefficient of the main-effect terms when --nuisance is set.
    #[arg(long, default_value_t = 3.0)]
    nuisance_scale: f64,
    /// Quantile levels for the quantile designs.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
    quantiles: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    test_points: usize,
    /// Report interval coverage at `--level`.
    #[arg(long, overrides_with = "no_ci")]
    ci: bool,
    #[arg(long, overrides_with = "ci", hide = true)]
    no_ci: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 500)]
    centering_trees: usize,
    #[command(flatten)]
    forest: ForestArgs,
    /// Output CSV [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match with_config(std::env::args().collect()) {
        Ok(args) => args,
        Err(e) => return report(&e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("grf-error: InvalidOptions: {first}");
            eprint!("{msg}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = configure_threads() {
        return report(&e);
    }
    let result = match cli.command {
        Command::Train(a) => train(&a),
        Command::Predict(a) => predict(&a),
        Command::Simulate(a) => simulate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &GrfError) -> ExitCode {
    eprintln!("grf-error: {}: {e}", e.tag());
    ExitCode::FAILURE
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("GRF_THREADS") else {
        return Ok(());
    };
    let threads = raw
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| {
            GrfError::InvalidOptions(format!(
                "GRF_THREADS must be a positive integer, got {raw:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| GrfError::InvalidOptions(e.to_string()))
}

/// Splice the flags from `--config FILE` in right after the subcommand, so
/// anything given on the command line comes later and wins.
fn with_config(mut args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (k, a) in args.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if a == "--config" {
            path = args.get(k + 1).cloned();
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)?;
    let flags = config_flags(&text)?;
    let at = args
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map_or(args.len(), |k| k + 2);
    args.splice(at.min(args.len())..at.min(args.len()), flags);
    Ok(args)
}

fn config_flags(text: &str) -> Result<Vec<String>> {
    let mut flags = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            GrfError::InvalidOptions(format!("config line {}: expected key = value", line_no + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            return Err(GrfError::InvalidOptions(
                "config files cannot include other config files".into(),
            ));
        }
        if NEGATABLE.contains(&key.as_str()) {
            match value {
                "true" => flags.push(format!("--{key}")),
                "false" => flags.push(format!("--no-{key}")),
                _ => {
                    return Err(GrfError::InvalidOptions(format!(
                        "config line {}: `{key}` takes true or false",
                        line_no + 1
                    )))
                }
            }
        } else {
            flags.push(format!("--{key}={value}"));
        }
    }
    Ok(flags)
}

fn build_model(kind: ModelKind, quantiles: &[f64]) -> Result<MomentModel> {
    Ok(match kind {
        ModelKind::Regression => MomentModel::Regression,
        ModelKind::Quantile => MomentModel::quantile(quantiles.to_vec())?,
        ModelKind::PartialEffect => MomentModel::PartialEffect,
        ModelKind::Instrumental => MomentModel::Instrumental,
    })
}

fn train(a: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let kind = ModelKind::from(a.model);
    let model = build_model(kind, &a.quantiles)?;
    let role_names = [&a.outcome, &a.treatment, &a.instrument];
    let features = match &a.features {
        Some(f) => f.clone(),
        None => csv_header(&a.data)?
            .into_iter()
            .filter(|h| !role_names.iter().any(|r| r.as_deref() == Some(h.as_str())))
            .collect(),
    };
    let mut roles = ColumnRoles::new(features);
    roles.outcome_name = a.outcome.clone();
    roles.treatment_name = a.treatment.clone();
    roles.instrument_name = a.instrument.clone();
    let data = load_csv(&a.data, &roles)?;
    validate_for_model(&data, kind)?;

    let opts = a.forest.options();
    let s = opts.validate(data.n())?;
    let centering = match a.center {
        CenterArg::None => CenteringRoles::NONE,
        CenterArg::Auto => CenteringRoles::auto(kind),
    };
    let data = if centering.is_empty() {
        data
    } else {
        let c_opts = ForestOptions {
            num_trees: a.centering_trees,
            ..default_centering_options(derive_seed(a.forest.seed, CENTERING_STREAM))
        };
        center(&data, centering, &c_opts)?.into_data()
    };
    let (n, p) = (data.n(), data.p());
    let forest = Forest::train(data, model, opts.clone())?;
    forest.save_to_path(&a.out)?;

    let centered: Vec<String> = centering.roles().iter().map(|r| r.to_string()).collect();
    let summary = [
        ("model", kind.name().to_string()),
        ("n", n.to_string()),
        ("p", p.to_string()),
        ("num_trees", opts.num_trees.to_string()),
        ("subsample_size", s.to_string()),
        ("little_bag_size", opts.little_bag_size.to_string()),
        ("seed", a.forest.seed.to_string()),
        (
            "centering",
            if centered.is_empty() {
                "none".into()
            } else {
                centered.join(",")
            },
        ),
        (
            "wall_time_s",
            format!("{:.3}", start.elapsed().as_secs_f64()),
        ),
        ("out", a.out.display().to_string()),
    ];
    let mut stdout = io::stdout().lock();
    for (k, v) in summary {
        writeln!(stdout, "{k}: {v}")?;
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let forest = Forest::load_from_path(&a.forest)?;
    let model = forest.model().clone();
    if a.ci {
        if let MomentModel::Quantile { .. } = model {
            return Err(GrfError::UnsupportedForModel {
                operation: "confidence intervals",
                model: model.name(),
            });
        }
        if !(a.level > 0.0 && a.level < 1.0) {
            return Err(GrfError::InvalidOptions(format!(
                "confidence level {} outside (0, 1)",
                a.level
            )));
        }
    }
    let names = forest.data().feature_names().to_vec();
    let queries = load_csv(&a.data, &ColumnRoles::new(names.clone())).map_err(|e| match e {
        GrfError::MissingColumn(c) => GrfError::FeatureMismatch(format!(
            "forest expects features [{}]; `{c}` is missing",
            names.join(", ")
        )),
        other => other,
    })?;

    let mut header: Vec<String> = match &model {
        MomentModel::Quantile { levels } => {
            levels.iter().map(|q| format!("estimate_q{q}")).collect()
        }
        _ => vec!["estimate".into()],
    };
    if a.ci {
        header.extend(["std_err", "ci_lower", "ci_upper"].map(String::from));
    }

    let mut out = output(a.out.as_deref())?;
    writeln!(
        out,
        "# config: command=predict forest={} data={} model={} ci={} level={}",
        a.forest.display(),
        a.data.display(),
        model.name(),
        a.ci,
        a.level
    )?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header)?;
    let fmt = |v: f64| format!("{v:.16e}");
    for i in 0..queries.n() {
        let x = queries.row(i);
        let row: Vec<String> = if a.ci {
            let r = estimate_at(&forest, &x, Some(a.level))?;
            let ci = r.interval.expect("level given");
            vec![
                fmt(r.estimate.value()),
                fmt(r.std_err().unwrap_or(f64::NAN)),
                fmt(ci.lower),
                fmt(ci.upper),
            ]
        } else {
            forest.predict(&x)?.theta.into_iter().map(fmt).collect()
        };
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let kind = DesignKind::from_str(&a.design)?;
    let design = DesignSpec {
        confounding: a.confounding,
        heterogeneity: a.heterogeneity,
        omega: a.omega,
        kappa_tau: a.kappa_tau,
        additive: a.additive,
        nuisance: a.nuisance,
        nuisance_scale: a.nuisance_scale,
        ..DesignSpec::new(kind, a.n, a.p)
    }
    .with_seed(a.forest.seed);
    let mut config = HarnessConfig::new(design, a.reps);
    config.forest = a.forest.options();
    config.centering = ForestOptions {
        num_trees: a.centering_trees,
        ..default_centering_options(derive_seed(a.forest.seed, CENTERING_STREAM))
    };
    config.test_points = a.test_points;
    config.quantiles = a.quantiles.clone();
    config.ci_level = a.ci.then_some(a.level);
    config.validate()?;
    let report = simulation::run(&config)?;
    report.write_csv(output(a.out.as_deref())?)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}
