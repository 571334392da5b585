//! Replicated benchmark runs: simulate, fit each method, score on fresh test
//! points, and emit per-replication plus averaged rows.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::centering::{center, default_centering_options, CenteringRoles};
use crate::data::{Dataset, Role};
use crate::error::{GrfError, Result};
use crate::forest::{Forest, ForestOptions};
use crate::inference::{estimate_at, ConfidenceInterval};
use crate::moments::{MomentModel, ParameterEstimate};
use crate::par::map_range;
use crate::rng::derive_seed;

use super::designs::{
    diagnostic_checks, diagnostic_mechanism, generate, DesignKind, DesignSpec, MomentCheck,
};
use super::metrics::{coverage, mse};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Forest on the raw data.
    Grf,
    /// Forest on locally centered data.
    CenteredGrf,
    /// Quantile solve on trees grown with regression pseudo-outcomes.
    RegressionSplit,
    /// Partial-effect forest that ignores the instrument.
    CausalForest,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Grf => "grf",
            Method::CenteredGrf => "centered-grf",
            Method::RegressionSplit => "regression-split",
            Method::CausalForest => "causal-forest",
        }
    }

    /// Methods compared for a design.
    pub fn for_design(kind: DesignKind) -> Vec<Method> {
        match kind {
            k if k.is_quantile() => vec![Method::Grf, Method::CenteredGrf, Method::RegressionSplit],
            DesignKind::IvDiagnostic1 | DesignKind::IvDiagnostic2 => {
                vec![Method::Grf, Method::CenteredGrf, Method::CausalForest]
            }
            _ => vec![Method::Grf, Method::CenteredGrf],
        }
    }
}

/// The estimating equation a design is evaluated with.
pub fn design_model(kind: DesignKind, quantiles: &[f64]) -> Result<MomentModel> {
    Ok(match kind {
        k if k.is_quantile() => MomentModel::quantile(quantiles.to_vec())?,
        DesignKind::Causal => MomentModel::PartialEffect,
        _ => MomentModel::Instrumental,
    })
}

/// A fitted method that can be queried anywhere in feature space.
#[derive(Debug, Clone)]
pub struct FittedMethod {
    pub forest: Forest,
    /// Centering forest for `Y` whose prediction is added back to quantiles.
    pub location: Option<Forest>,
}

impl FittedMethod {
    pub fn predict(&self, x: &[f64]) -> Result<ParameterEstimate> {
        let mut est = self.forest.predict(x)?;
        if let Some(loc) = &self.location {
            let shift = loc.predict(x)?.value();
            est.theta.iter_mut().for_each(|t| *t += shift);
        }
        Ok(est)
    }

    /// Point estimate and interval for `θ` (not available for quantiles).
    pub fn interval(&self, x: &[f64], level: f64) -> Result<ConfidenceInterval> {
        let report = estimate_at(&self.forest, x, Some(level))?;
        Ok(report.interval.expect("level supplied"))
    }
}

/// Fit one method on `data`.
///
/// Centered variants residualize `Y, W` (partial effects) or `Y, W, Z`
/// (instrumental); quantile forests are fitted to centered `Y` and shifted
/// back by the centering fit at query time.
pub fn fit_method(
    method: Method,
    kind: DesignKind,
    data: &Dataset,
    quantiles: &[f64],
    forest_opts: &ForestOptions,
    centering_opts: &ForestOptions,
) -> Result<FittedMethod> {
    let model = design_model(kind, quantiles)?;
    match method {
        Method::Grf => Ok(FittedMethod {
            forest: Forest::train(data.clone(), model, forest_opts.clone())?,
            location: None,
        }),
        Method::RegressionSplit => {
            if !kind.is_quantile() {
                return Err(GrfError::UnsupportedForModel {
                    operation: "regression-split",
                    model: model.name(),
                });
            }
            let forest = Forest::train_with_split_model(
                data.clone(),
                model,
                MomentModel::Regression,
                forest_opts.clone(),
            )?;
            Ok(FittedMethod {
                forest,
                location: None,
            })
        }
        Method::CausalForest => {
            let forest = Forest::train(
                data.clone(),
                MomentModel::PartialEffect,
                forest_opts.clone(),
            )?;
            Ok(FittedMethod {
                forest,
                location: None,
            })
        }
        Method::CenteredGrf => {
            let roles = match model {
                MomentModel::Quantile { .. } => CenteringRoles {
                    outcome: true,
                    ..CenteringRoles::NONE
                },
                _ => CenteringRoles::auto(model.kind()),
            };
            let mut centered = center(data, roles, centering_opts)?;
            let location = match model {
                MomentModel::Quantile { .. } => centered
                    .forests
                    .iter()
                    .position(|(r, _)| *r == Role::Outcome)
                    .map(|k| centered.forests.remove(k).1),
                _ => None,
            };
            let forest = Forest::train(Arc::new(centered.data), model, forest_opts.clone())?;
            Ok(FittedMethod { forest, location })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    /// Design and master seed; replication `r` uses `derive_seed(seed, r)`.
    pub design: DesignSpec,
    pub reps: usize,
    pub forest: ForestOptions,
    pub centering: ForestOptions,
    pub test_points: usize,
    /// Levels for the quantile designs.
    pub quantiles: Vec<f64>,
    /// Compute interval coverage of `θ(x)` at this level.
    pub ci_level: Option<f64>,
}

impl HarnessConfig {
    pub fn new(design: DesignSpec, reps: usize) -> Self {
        HarnessConfig {
            design,
            reps,
            forest: ForestOptions::default(),
            centering: default_centering_options(0),
            test_points: 1000,
            quantiles: vec![0.1, 0.5, 0.9],
            ci_level: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.design.validate()?;
        if self.reps == 0 {
            return Err(GrfError::InvalidOptions("reps must be at least 1".into()));
        }
        if self.test_points == 0 {
            return Err(GrfError::InvalidOptions(
                "test_points must be at least 1".into(),
            ));
        }
        if let Some(level) = self.ci_level {
            if !(level > 0.0 && level < 1.0) {
                return Err(GrfError::InvalidOptions(format!(
                    "confidence level {level} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Single-line description of every setting that affects the output.
    pub fn describe(&self) -> String {
        let f = &self.forest;
        let c = &self.centering;
        let mut line = format!(
            "{} reps={} test_points={} num_trees={} subsample={:?} little_bag_size={} ci_group_sampling={} \
             min_node_size={} balance_fraction={} mtry_rate={} forest_seed={} centering_trees={} centering_subsample={:?} \
             centering_seed={}",
            self.design.describe(),
            self.reps,
            self.test_points,
            f.num_trees,
            f.subsample,
            f.little_bag_size,
            f.ci_group_sampling,
            f.split.min_node_size,
            f.split.balance_fraction,
            f.split.mtry_rate.map_or("auto".to_string(), |m| m.to_string()),
            f.seed,
            c.num_trees,
            c.subsample,
            c.seed,
        );
        if self.design.kind.is_quantile() {
            line.push_str(&format!(" quantiles={:?}", self.quantiles));
        }
        if let Some(level) = self.ci_level {
            line.push_str(&format!(" ci_level={level}"));
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    /// `None` marks the average over replications.
    pub rep: Option<usize>,
    pub q: Option<f64>,
    pub mse: f64,
    pub coverage: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct HarnessReport {
    pub config: HarnessConfig,
    pub rows: Vec<ResultRow>,
    /// Generator moment checks per replication (diagnostic designs only).
    pub checks: Vec<(usize, MomentCheck)>,
}

/// Test points for replication `rep`, drawn from the design's covariate law.
pub fn test_points(config: &HarnessConfig, rep: usize) -> Vec<Vec<f64>> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(config.design.seed, rep as u64), 1));
    config.design.sample_features(config.test_points, &mut rng)
}

fn rep_options(config: &HarnessConfig, rep: usize) -> (DesignSpec, ForestOptions, ForestOptions) {
    let r = rep as u64;
    let design = config
        .design
        .clone()
        .with_seed(derive_seed(config.design.seed, r));
    let forest = ForestOptions {
        seed: derive_seed(config.forest.seed, r),
        ..config.forest.clone()
    };
    let centering = ForestOptions {
        seed: derive_seed(config.centering.seed, r),
        ..config.centering.clone()
    };
    (design, forest, centering)
}

fn run_replication(
    config: &HarnessConfig,
    rep: usize,
) -> Result<(Vec<ResultRow>, Vec<MomentCheck>)> {
    let (design, forest_opts, centering_opts) = rep_options(config, rep);
    let sim = generate(&design)?;
    let checks = diagnostic_checks(&sim);
    let points = test_points(config, rep);
    let kind = design.kind;
    let mut rows = Vec::new();
    for method in Method::for_design(kind) {
        let start = Instant::now();
        let fitted = fit_method(
            method,
            kind,
            &sim.data,
            &config.quantiles,
            &forest_opts,
            &centering_opts,
        )?;
        let estimates = map_range(points.len(), |k| fitted.predict(&points[k]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let intervals = match config.ci_level {
            Some(level) if !kind.is_quantile() && forest_opts.ci_group_sampling => Some(
                map_range(points.len(), |k| fitted.interval(&points[k], level))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let wall_time = start.elapsed().as_secs_f64();
        if kind.is_quantile() {
            for (j, &q) in config.quantiles.iter().enumerate() {
                let est: Vec<f64> = estimates.iter().map(|e| e.theta[j]).collect();
                let truth: Vec<f64> = points.iter().map(|x| sim.truth.quantile(x, q)).collect();
                rows.push(ResultRow {
                    method,
                    rep: Some(rep),
                    q: Some(q),
                    mse: mse(&est, &truth)?,
                    coverage: None,
                    wall_time,
                });
            }
        } else {
            let est: Vec<f64> = estimates.iter().map(|e| e.value()).collect();
            let truth: Vec<f64> = points.iter().map(|x| sim.truth.effect(x)).collect();
            let cov = intervals.map(|ci| coverage(&ci, &truth)).transpose()?;
            rows.push(ResultRow {
                method,
                rep: Some(rep),
                q: None,
                mse: mse(&est, &truth)?,
                coverage: cov,
                wall_time,
            });
        }
    }
    Ok((rows, checks))
}

/// Run all replications (concurrently) and append the averaged rows.
pub fn run(config: &HarnessConfig) -> Result<HarnessReport> {
    config.validate()?;
    let results = map_range(config.reps, |rep| run_replication(config, rep));
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for (rep, result) in results.into_iter().enumerate() {
        let (r, c) = result?;
        rows.extend(r);
        checks.extend(c.into_iter().map(|c| (rep, c)));
    }
    let mut means = Vec::new();
    for row in rows.iter().filter(|r| r.rep == Some(0)) {
        let group: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.method == row.method && r.q == row.q)
            .collect();
        let avg = |f: &dyn Fn(&ResultRow) -> f64| {
            group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64
        };
        means.push(ResultRow {
            method: row.method,
            rep: None,
            q: row.q,
            mse: avg(&|r| r.mse),
            coverage: row
                .coverage
                .map(|_| avg(&|r| r.coverage.unwrap_or(f64::NAN))),
            wall_time: avg(&|r| r.wall_time),
        });
    }
    rows.extend(means);
    Ok(HarnessReport {
        config: config.clone(),
        rows,
        checks,
    })
}

pub const CSV_HEADER: [&str; 16] = [
    "design",
    "n",
    "p",
    "confounding",
    "heterogeneity",
    "omega",
    "kappa_tau",
    "additive",
    "nuisance",
    "method",
    "rep",
    "q",
    "mse",
    "mse_x10",
    "coverage",
    "wall_time_s",
];

impl HarnessReport {
    /// CSV with `#` comment lines for the configuration, the diagnostic
    /// mechanism and its moment checks, then one row per result.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# config: {}", self.config.describe())?;
        if let Some(mechanism) = diagnostic_mechanism(self.config.design.kind) {
            writeln!(out, "# mechanism: {mechanism}")?;
        }
        for (rep, c) in &self.checks {
            writeln!(
                out,
                "# check: rep={rep} {}: estimate={:.6} expected={} se={:.6} z={:.3}",
                c.name,
                c.estimate,
                c.expected,
                c.std_err,
                c.z_score()
            )?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        let d = &self.config.design;
        let iv = d.kind == DesignKind::Iv;
        let causal = d.kind == DesignKind::Causal;
        let when = |on: bool, v: String| if on { v } else { String::new() };
        for row in &self.rows {
            w.write_record([
                d.kind.name().to_string(),
                d.n.to_string(),
                d.p.to_string(),
                when(causal, d.confounding.to_string()),
                when(causal, d.heterogeneity.to_string()),
                when(iv, d.omega.to_string()),
                when(iv, d.kappa_tau.to_string()),
                when(iv, d.additive.to_string()),
                when(iv, d.nuisance.to_string()),
                row.method.name().to_string(),
                row.rep.map_or("mean".to_string(), |r| r.to_string()),
                row.q.map_or(String::new(), |q| q.to_string()),
                format!("{:.6}", row.mse),
                format!("{:.6}", 10.0 * row.mse),
                row.coverage.map_or(String::new(), |c| format!("{c:.4}")),
                format!("{:.3}", row.wall_time),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn mean_rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.rep.is_none())
    }
}
