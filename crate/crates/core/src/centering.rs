//! Local centering: residualize outcome, treatment and instrument against
//! out-of-bag regression-forest fits on the features.

use std::sync::Arc;

use crate::data::{Dataset, ModelKind, Role};
use crate::error::{GrfError, Result};
use crate::forest::{Forest, ForestOptions, SubsampleSize};
use crate::moments::MomentModel;
use crate::rng::derive_seed;

/// Which role columns to residualize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CenteringRoles {
    pub outcome: bool,
    pub treatment: bool,
    pub instrument: bool,
}

impl CenteringRoles {
    pub const NONE: CenteringRoles = CenteringRoles {
        outcome: false,
        treatment: false,
        instrument: false,
    };

    /// `Y, W` for partial effects, `Y, W, Z` for instrumental forests, nothing otherwise.
    pub fn auto(kind: ModelKind) -> Self {
        match kind {
            ModelKind::PartialEffect => CenteringRoles {
                outcome: true,
                treatment: true,
                instrument: false,
            },
            ModelKind::Instrumental => CenteringRoles {
                outcome: true,
                treatment: true,
                instrument: true,
            },
            ModelKind::Regression | ModelKind::Quantile => Self::NONE,
        }
    }

    pub fn roles(&self) -> Vec<Role> {
        [
            (self.outcome, Role::Outcome),
            (self.treatment, Role::Treatment),
            (self.instrument, Role::Instrument),
        ]
        .into_iter()
        .filter_map(|(on, r)| on.then_some(r))
        .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.roles().is_empty()
    }
}

/// Options for the nuisance forests: 500 ungrouped trees on half-size subsamples.
pub fn default_centering_options(seed: u64) -> ForestOptions {
    ForestOptions {
        num_trees: 500,
        subsample: SubsampleSize::Fraction(0.5),
        ci_group_sampling: false,
        seed,
        ..ForestOptions::default()
    }
}

#[derive(Debug, Clone)]
pub struct CenteredDataset {
    pub data: Dataset,
    /// The regression forest fitted for each centered role.
    pub forests: Vec<(Role, Forest)>,
}

impl CenteredDataset {
    pub fn forest(&self, role: Role) -> Option<&Forest> {
        self.forests
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, f)| f)
    }

    pub fn into_data(self) -> Dataset {
        self.data
    }
}

/// Replace each selected column by `v_i − v̂^{(−i)}(X_i)`, where `v̂^{(−i)}` is
/// the out-of-bag prediction of a regression forest trained on that column.
///
/// Each role gets its own seed stream derived from `opts.seed`.
pub fn center(
    data: &Dataset,
    roles: CenteringRoles,
    opts: &ForestOptions,
) -> Result<CenteredDataset> {
    let mut out = data.clone();
    let mut forests = Vec::new();
    for role in roles.roles() {
        let values = data.require(role)?.to_vec();
        let view = Arc::new(data.regression_view(values.clone())?);
        let role_opts = ForestOptions {
            seed: derive_seed(opts.seed, role as u64),
            ..opts.clone()
        };
        let forest = Forest::train(view, MomentModel::Regression, role_opts)?;
        let mut residuals = Vec::with_capacity(values.len());
        for (i, (fit, v)) in forest
            .predict_oob_all()
            .into_iter()
            .zip(&values)
            .enumerate()
        {
            let fit = fit.map_err(|e| match e {
                GrfError::NoContributingTrees { .. } => {
                    GrfError::NoContributingTrees { sample: Some(i) }
                }
                other => other,
            })?;
            residuals.push(v - fit.value());
        }
        out = out.with_role(role, residuals)?;
        forests.push((role, forest));
    }
    Ok(CenteredDataset { data: out, forests })
}
