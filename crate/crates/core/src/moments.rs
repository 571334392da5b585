//! Score functions ψ and the four concrete local estimating equations.
//!
//! Each model knows how to solve its weighted estimating equation exactly,
//! how to relabel a node's samples with pseudo-outcomes for splitting, and
//! how to report per-sample scores and the local curvature used by the
//! sandwich variance.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ModelKind, Role};
use crate::error::{GrfError, Result};
use crate::linalg::SquareMatrix;
use crate::weights::WeightVector;

/// Identifying moments smaller than this are treated as degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;
/// Curvature matrices with a smaller determinant are treated as singular.
pub const SINGULARITY_THRESHOLD: f64 = 1e-12;
/// Slack on the cumulative weight when locating a weighted quantile.
const QUANTILE_SLACK: f64 = 1e-12;

/// Solution `(θ, ν)` of a local estimating equation.
///
/// `theta` has one entry, except for quantile models where it holds one
/// quantile per requested level. `nu` holds the intercept for the partial
/// effect and instrumental models and is empty otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub theta: Vec<f64>,
    pub nu: Vec<f64>,
}

impl ParameterEstimate {
    pub fn scalar(theta: f64) -> Self {
        ParameterEstimate {
            theta: vec![theta],
            nu: Vec::new(),
        }
    }

    pub fn with_intercept(theta: f64, nu: f64) -> Self {
        ParameterEstimate {
            theta: vec![theta],
            nu: vec![nu],
        }
    }

    /// The (first) target coordinate.
    pub fn value(&self) -> f64 {
        self.theta[0]
    }
}

/// Split labels for a node.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoOutcomes {
    /// One real pseudo-outcome `ρ_i` per member.
    Values(Vec<f64>),
    /// One class label per member, in `0..num_classes`.
    Classes {
        labels: Vec<u32>,
        num_classes: usize,
    },
}

impl PseudoOutcomes {
    pub fn len(&self) -> usize {
        match self {
            PseudoOutcomes::Values(v) => v.len(),
            PseudoOutcomes::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MomentModel {
    /// `ψ = Y − θ`.
    Regression,
    /// `ψ = q − 1{Y ≤ θ_q}` for each level `q`.
    Quantile { levels: Vec<f64> },
    /// `ψ = (Y − θW − ν)·(W, 1)` for a scalar treatment `W`.
    PartialEffect,
    /// `ψ = (Y − θW − ν)·(Z, 1)` with instrument `Z`.
    Instrumental,
}

impl MomentModel {
    /// Quantile model; levels must be strictly increasing inside (0, 1).
    pub fn quantile(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(GrfError::InvalidOptions(
                "at least one quantile level required".into(),
            ));
        }
        if levels.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(GrfError::InvalidOptions(
                "quantile levels must lie in (0, 1)".into(),
            ));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GrfError::InvalidOptions(
                "quantile levels must be strictly increasing".into(),
            ));
        }
        Ok(MomentModel::Quantile { levels })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            MomentModel::Regression => ModelKind::Regression,
            MomentModel::Quantile { .. } => ModelKind::Quantile,
            MomentModel::PartialEffect => ModelKind::PartialEffect,
            MomentModel::Instrumental => ModelKind::Instrumental,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Length of the score vector ψ.
    pub fn score_dim(&self) -> usize {
        match self {
            MomentModel::Regression => 1,
            MomentModel::Quantile { levels } => levels.len(),
            MomentModel::PartialEffect | MomentModel::Instrumental => 2,
        }
    }

    /// Exact root of `Σ α_i ψ(O_i) = 0` under the given weights.
    pub fn solve_weighted(
        &self,
        data: &Dataset,
        weights: &WeightVector,
    ) -> Result<ParameterEstimate> {
        if weights.len() != data.n() {
            return Err(GrfError::LengthMismatch {
                left: data.n(),
                right: weights.len(),
            });
        }
        self.solve_support(data, &weights.support())
    }

    /// Solve with uniform weights over `members`.
    pub fn solve_uniform(&self, data: &Dataset, members: &[usize]) -> Result<ParameterEstimate> {
        let support: Vec<(usize, f64)> = members.iter().map(|&i| (i, 1.0)).collect();
        self.solve_support(data, &support)
    }

    /// Solve over sparse `(index, weight)` pairs. Weights need not be normalized.
    pub(crate) fn solve_support(
        &self,
        data: &Dataset,
        support: &[(usize, f64)],
    ) -> Result<ParameterEstimate> {
        let total: f64 = support.iter().map(|(_, w)| w).sum();
        if support.is_empty() || total <= 0.0 {
            return Err(GrfError::EmptySupport);
        }
        let y = data.require(Role::Outcome)?;
        let mean = |col: &[f64]| support.iter().map(|&(i, w)| w * col[i]).sum::<f64>() / total;
        match self {
            MomentModel::Regression => Ok(ParameterEstimate::scalar(mean(y))),
            MomentModel::Quantile { levels } => {
                let mut pairs: Vec<(f64, f64)> = support.iter().map(|&(i, w)| (y[i], w)).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                Ok(ParameterEstimate {
                    theta: weighted_quantiles(&pairs, total, levels),
                    nu: Vec::new(),
                })
            }
            MomentModel::PartialEffect => {
                let w = data.require(Role::Treatment)?;
                let (w_bar, y_bar) = (mean(w), mean(y));
                let var_w = support
                    .iter()
                    .map(|&(i, a)| a * (w[i] - w_bar).powi(2))
                    .sum::<f64>()
                    / total;
                if var_w.abs() < DEGENERACY_THRESHOLD {
                    return Err(GrfError::DegenerateIdentification {
                        moment: "Var(W)",
                        value: var_w,
                    });
                }
                let cov_wy = support
                    .iter()
                    .map(|&(i, a)| a * (w[i] - w_bar) * (y[i] - y_bar))
                    .sum::<f64>()
                    / total;
                let theta = cov_wy / var_w;
                Ok(ParameterEstimate::with_intercept(
                    theta,
                    y_bar - theta * w_bar,
                ))
            }
            MomentModel::Instrumental => {
                let w = data.require(Role::Treatment)?;
                let z = data.require(Role::Instrument)?;
                let (w_bar, y_bar, z_bar) = (mean(w), mean(y), mean(z));
                let cov_zw = support
                    .iter()
                    .map(|&(i, a)| a * (z[i] - z_bar) * (w[i] - w_bar))
                    .sum::<f64>()
                    / total;
                if cov_zw.abs() < DEGENERACY_THRESHOLD {
                    return Err(GrfError::DegenerateIdentification {
                        moment: "Cov(W,Z)",
                        value: cov_zw,
                    });
                }
                let cov_zy = support
                    .iter()
                    .map(|&(i, a)| a * (z[i] - z_bar) * (y[i] - y_bar))
                    .sum::<f64>()
                    / total;
                let theta = cov_zy / cov_zw;
                Ok(ParameterEstimate::with_intercept(
                    theta,
                    y_bar - theta * w_bar,
                ))
            }
        }
    }

    /// Relabel the members of a parent node for the CART split search.
    pub fn pseudo_outcomes(&self, data: &Dataset, members: &[usize]) -> Result<PseudoOutcomes> {
        if members.len() < 2 {
            return Err(GrfError::InvalidOptions(
                "pseudo-outcomes need a node with at least 2 members".into(),
            ));
        }
        let y = data.require(Role::Outcome)?;
        let count = members.len() as f64;
        let node_mean = |col: &[f64]| members.iter().map(|&i| col[i]).sum::<f64>() / count;
        let parent = self.solve_uniform(data, members)?;
        let rho = match self {
            MomentModel::Regression => {
                let y_bar = parent.value();
                members.iter().map(|&i| y[i] - y_bar).collect()
            }
            MomentModel::Quantile { levels } if levels.len() == 1 => {
                let theta = parent.value();
                members
                    .iter()
                    .map(|&i| if y[i] > theta { 1.0 } else { 0.0 })
                    .collect()
            }
            MomentModel::Quantile { levels } => {
                // Class j holds samples in [θ_{q_j}, θ_{q_{j+1}}), with open ends.
                let labels = members
                    .iter()
                    .map(|&i| parent.theta.iter().take_while(|&&t| t <= y[i]).count() as u32)
                    .collect();
                return Ok(PseudoOutcomes::Classes {
                    labels,
                    num_classes: levels.len() + 1,
                });
            }
            MomentModel::PartialEffect => {
                let w = data.require(Role::Treatment)?;
                let (w_bar, y_bar) = (node_mean(w), node_mean(y));
                let a_p = members.iter().map(|&i| (w[i] - w_bar).powi(2)).sum::<f64>() / count;
                let beta = parent.value();
                members
                    .iter()
                    .map(|&i| {
                        let dw = w[i] - w_bar;
                        dw * (y[i] - y_bar - dw * beta) / a_p
                    })
                    .collect()
            }
            MomentModel::Instrumental => {
                let w = data.require(Role::Treatment)?;
                let z = data.require(Role::Instrument)?;
                let (w_bar, y_bar, z_bar) = (node_mean(w), node_mean(y), node_mean(z));
                let tau = parent.value();
                members
                    .iter()
                    .map(|&i| (z[i] - z_bar) * ((y[i] - y_bar) - (w[i] - w_bar) * tau))
                    .collect()
            }
        };
        Ok(PseudoOutcomes::Values(rho))
    }

    /// Local curvature `V̂(x)`, the weighted expected Jacobian of −ψ.
    ///
    /// Rows follow the score components, columns follow `(θ, ν)`.
    pub fn curvature(
        &self,
        data: &Dataset,
        weights: &WeightVector,
        _estimate: &ParameterEstimate,
    ) -> Result<SquareMatrix> {
        let support = weights.support();
        let total: f64 = support.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(GrfError::EmptySupport);
        }
        let moment =
            |f: &dyn Fn(usize) -> f64| support.iter().map(|&(i, a)| a * f(i)).sum::<f64>() / total;
        let v = match self {
            MomentModel::Regression => return Ok(SquareMatrix::identity(1)),
            MomentModel::Quantile { .. } => {
                return Err(GrfError::UnsupportedForModel {
                    operation: "curvature",
                    model: self.name(),
                })
            }
            MomentModel::PartialEffect => {
                let w = data.require(Role::Treatment)?;
                let ww = moment(&|i| w[i] * w[i]);
                let w1 = moment(&|i| w[i]);
                SquareMatrix::from_rows(&[&[ww, w1], &[w1, 1.0]])
            }
            MomentModel::Instrumental => {
                let w = data.require(Role::Treatment)?;
                let z = data.require(Role::Instrument)?;
                SquareMatrix::from_rows(&[
                    &[moment(&|i| z[i] * w[i]), moment(&|i| z[i])],
                    &[moment(&|i| w[i]), 1.0],
                ])
            }
        };
        let det = v.determinant();
        if det.abs() < SINGULARITY_THRESHOLD {
            return Err(GrfError::SingularCurvature(det));
        }
        Ok(v)
    }

    /// `ψ_{θ̂,ν̂}(O_i)` for a single sample.
    pub fn score(
        &self,
        data: &Dataset,
        i: usize,
        estimate: &ParameterEstimate,
    ) -> Result<Vec<f64>> {
        let y = data.require(Role::Outcome)?[i];
        Ok(match self {
            MomentModel::Regression => vec![y - estimate.value()],
            MomentModel::Quantile { levels } => levels
                .iter()
                .zip(&estimate.theta)
                .map(|(q, t)| q - if y <= *t { 1.0 } else { 0.0 })
                .collect(),
            MomentModel::PartialEffect => {
                let w = data.require(Role::Treatment)?[i];
                let r = y - estimate.value() * w - estimate.nu[0];
                vec![r * w, r]
            }
            MomentModel::Instrumental => {
                let w = data.require(Role::Treatment)?[i];
                let z = data.require(Role::Instrument)?[i];
                let r = y - estimate.value() * w - estimate.nu[0];
                vec![r * z, r]
            }
        })
    }

    /// Scores for each listed member.
    pub fn score_vectors(
        &self,
        data: &Dataset,
        members: &[usize],
        estimate: &ParameterEstimate,
    ) -> Result<Vec<Vec<f64>>> {
        if estimate
            .theta
            .iter()
            .chain(&estimate.nu)
            .any(|v| !v.is_finite())
        {
            return Err(GrfError::InvalidData("estimate must be finite".into()));
        }
        members
            .iter()
            .map(|&i| self.score(data, i, estimate))
            .collect()
    }
}

/// `inf{y : F̂(y) ≥ q}` for each level, over `(y, w)` pairs sorted by `y`.
fn weighted_quantiles(sorted: &[(f64, f64)], total: f64, levels: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(levels.len());
    let mut cum = 0.0;
    let mut k = 0;
    for &q in levels {
        let target = q * total - QUANTILE_SLACK * total;
        while k < sorted.len() - 1 && cum + sorted[k].1 < target {
            cum += sorted[k].1;
            k += 1;
        }
        out.push(sorted[k].0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(y: &[f64]) -> Dataset {
        Dataset::from_columns(vec![(0..y.len()).map(|i| i as f64).collect()])
            .unwrap()
            .with_outcome(y.to_vec())
            .unwrap()
    }

    fn iv_dataset(rows: &[(f64, f64, f64)]) -> Dataset {
        dataset(&rows.iter().map(|r| r.2).collect::<Vec<_>>())
            .with_instrument(rows.iter().map(|r| r.0).collect())
            .unwrap()
            .with_treatment(rows.iter().map(|r| r.1).collect())
            .unwrap()
    }

    fn uniform(n: usize) -> WeightVector {
        WeightVector::uniform(n, &(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn regression_solve_is_weighted_mean() {
        let d = dataset(&[1.0, 2.0, 3.0]);
        let est = MomentModel::Regression
            .solve_weighted(&d, &uniform(3))
            .unwrap();
        assert_eq!(est.value(), 2.0);
        assert!(est.nu.is_empty());
    }

    #[test]
    fn quantile_solve_uses_inf_of_cdf() {
        let d = dataset(&[4.0, 1.0, 3.0, 2.0]);
        let m = MomentModel::quantile(vec![0.5]).unwrap();
        assert_eq!(m.solve_weighted(&d, &uniform(4)).unwrap().value(), 2.0);
        let multi = MomentModel::quantile(vec![0.1, 0.5, 0.9]).unwrap();
        assert_eq!(
            multi.solve_weighted(&d, &uniform(4)).unwrap().theta,
            vec![1.0, 2.0, 4.0]
        );
    }

    #[test]
    fn quantile_levels_validated() {
        assert!(MomentModel::quantile(vec![]).is_err());
        assert!(MomentModel::quantile(vec![0.0]).is_err());
        assert!(MomentModel::quantile(vec![0.5, 0.5]).is_err());
        assert!(MomentModel::quantile(vec![0.9, 0.1]).is_err());
    }

    #[test]
    fn partial_effect_exact_linear_fit() {
        let d = dataset(&[0.0, 2.0, 0.0, 2.0])
            .with_treatment(vec![0.0, 1.0, 0.0, 1.0])
            .unwrap();
        let est = MomentModel::PartialEffect
            .solve_weighted(&d, &uniform(4))
            .unwrap();
        assert_eq!(est.theta, vec![2.0]);
        assert_eq!(est.nu, vec![0.0]);
    }

    #[test]
    fn instrumental_covariance_ratio() {
        let d = iv_dataset(&[
            (0.0, 0.0, 0.0),
            (0.0, 0.0, 0.0),
            (1.0, 1.0, 1.0),
            (1.0, 1.0, 1.0),
        ]);
        let est = MomentModel::Instrumental
            .solve_weighted(&d, &uniform(4))
            .unwrap();
        assert_eq!(est.theta, vec![1.0]);
        assert_eq!(est.nu, vec![0.0]);
    }

    #[test]
    fn degenerate_and_empty_weights() {
        let d = dataset(&[1.0, 2.0]).with_treatment(vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            MomentModel::PartialEffect.solve_weighted(&d, &uniform(2)),
            Err(GrfError::DegenerateIdentification { .. })
        ));
        let d = iv_dataset(&[(1.0, 1.0, 0.0), (1.0, 0.0, 1.0)]);
        assert!(matches!(
            MomentModel::Instrumental.solve_weighted(&d, &uniform(2)),
            Err(GrfError::DegenerateIdentification { .. })
        ));
        assert!(matches!(
            MomentModel::Regression.solve_support(&d, &[]),
            Err(GrfError::EmptySupport)
        ));
    }

    #[test]
    fn missing_columns_surface_as_missing_role() {
        let d = dataset(&[1.0, 2.0]);
        assert!(matches!(
            MomentModel::Instrumental.solve_weighted(&d, &uniform(2)),
            Err(GrfError::MissingRole(Role::Treatment))
        ));
    }

    #[test]
    fn regression_pseudo_outcomes_are_centered_outcomes() {
        let d = dataset(&[1.0, 3.0]);
        assert_eq!(
            MomentModel::Regression
                .pseudo_outcomes(&d, &[0, 1])
                .unwrap(),
            PseudoOutcomes::Values(vec![-1.0, 1.0])
        );
    }

    #[test]
    fn quantile_pseudo_outcomes_mark_exceedance() {
        let d = dataset(&[1.0, 2.0, 3.0, 4.0]);
        let m = MomentModel::quantile(vec![0.5]).unwrap();
        assert_eq!(
            m.pseudo_outcomes(&d, &[0, 1, 2, 3]).unwrap(),
            PseudoOutcomes::Values(vec![0.0, 0.0, 1.0, 1.0])
        );
    }

    #[test]
    fn multi_quantile_pseudo_outcomes_are_interval_labels() {
        let d = dataset(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        // Parent quantiles: q=0.2 -> 1, q=0.6 -> 3.
        let m = MomentModel::quantile(vec![0.2, 0.6]).unwrap();
        assert_eq!(
            m.pseudo_outcomes(&d, &[0, 1, 2, 3, 4]).unwrap(),
            PseudoOutcomes::Classes {
                labels: vec![1, 1, 2, 2, 2],
                num_classes: 3
            }
        );
    }

    #[test]
    fn instrumental_pseudo_outcomes_hand_values() {
        let d = iv_dataset(&[
            (0.0, 0.0, 0.0),
            (0.0, 0.0, 2.0),
            (1.0, 1.0, 1.0),
            (1.0, 1.0, 3.0),
        ]);
        assert_eq!(
            MomentModel::Instrumental
                .pseudo_outcomes(&d, &[0, 1, 2, 3])
                .unwrap(),
            PseudoOutcomes::Values(vec![0.5, -0.5, -0.5, 0.5])
        );
    }

    #[test]
    fn partial_effect_pseudo_outcomes_sum_to_zero() {
        let d = dataset(&[0.3, 2.0, -1.0, 4.5, 0.0])
            .with_treatment(vec![0.0, 1.0, 0.0, 1.0, 1.0])
            .unwrap();
        let PseudoOutcomes::Values(rho) = MomentModel::PartialEffect
            .pseudo_outcomes(&d, &[0, 1, 2, 3, 4])
            .unwrap()
        else {
            panic!("expected real pseudo-outcomes")
        };
        assert!(rho.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn pseudo_outcomes_need_two_members() {
        let d = dataset(&[1.0]);
        assert!(MomentModel::Regression.pseudo_outcomes(&d, &[0]).is_err());
    }

    #[test]
    fn curvature_per_model() {
        let d = iv_dataset(&[
            (1.0, 1.0, 0.0),
            (1.0, 1.0, 0.0),
            (0.0, 0.0, 0.0),
            (0.0, 0.0, 0.0),
        ]);
        let est = ParameterEstimate::with_intercept(0.0, 0.0);
        let v = MomentModel::Regression
            .curvature(&d, &uniform(4), &est)
            .unwrap();
        assert_eq!(v, SquareMatrix::identity(1));
        let v = MomentModel::Instrumental
            .curvature(&d, &uniform(4), &est)
            .unwrap();
        assert_eq!(v, SquareMatrix::from_rows(&[&[0.5, 0.5], &[0.5, 1.0]]));
        assert!((v.determinant() - 0.25).abs() < 1e-15);

        let orthogonal = iv_dataset(&[
            (1.0, 1.0, 0.0),
            (1.0, 0.0, 0.0),
            (0.0, 1.0, 0.0),
            (0.0, 0.0, 0.0),
        ]);
        assert!(matches!(
            MomentModel::Instrumental.curvature(&orthogonal, &uniform(4), &est),
            Err(GrfError::SingularCurvature(_))
        ));
        let q = MomentModel::quantile(vec![0.5]).unwrap();
        assert!(matches!(
            q.curvature(&d, &uniform(4), &ParameterEstimate::scalar(0.0)),
            Err(GrfError::UnsupportedForModel { .. })
        ));
    }

    #[test]
    fn score_examples() {
        let d = dataset(&[3.0]);
        assert_eq!(
            MomentModel::Regression
                .score(&d, 0, &ParameterEstimate::scalar(2.0))
                .unwrap(),
            vec![1.0]
        );
        let d = dataset(&[0.0]);
        let q = MomentModel::quantile(vec![0.9]).unwrap();
        let s = q.score(&d, 0, &ParameterEstimate::scalar(1.0)).unwrap();
        assert!((s[0] + 0.1).abs() < 1e-15);
        let d = iv_dataset(&[(1.0, 1.0, 3.0)]);
        assert_eq!(
            MomentModel::Instrumental
                .score(&d, 0, &ParameterEstimate::with_intercept(1.0, 0.5))
                .unwrap(),
            vec![1.5, 1.5]
        );
    }
}
