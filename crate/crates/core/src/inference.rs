//! Variance estimation by the bootstrap of little bags, sandwich assembly
//! and Gaussian confidence intervals.
//!
//! For a query `x` each tree `b` contributes a score aggregate
//! `Ψ_b = Σ_i α_bi(x) ψ(O_i)` evaluated at the forest estimate. Trees that
//! share a half-sample form a little bag; the between-bag spread of the bag
//! means, corrected by the within-bag spread, estimates the half-sampling
//! variance `Ĥ` of the forest score. The variance of `θ̂(x)` is then
//! `ξᵀ V̂⁻¹ Ĥ V̂⁻ᵀ ξ`.
//!
//! With few bags the difference `between − within/(ℓ−1)` is noisy and often
//! negative. The default [`VarianceCorrection::Bayes`] projects both ANOVA
//! terms onto `ξᵀV̂⁻¹` and reports the posterior mean of the variance under a
//! flat prior on `[0, ∞)`; [`VarianceCorrection::Truncate`] plugs the
//! floored `Ĥ` straight into the sandwich.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ModelKind, Role};
use crate::error::{GrfError, Result};
use crate::forest::{Forest, ForestOptions};
use crate::linalg::SquareMatrix;
use crate::moments::{MomentModel, ParameterEstimate, SINGULARITY_THRESHOLD};
use crate::rng::derive_seed;

/// Per-tree score aggregates, grouped by little bag.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScores {
    pub dim: usize,
    /// `groups[g][t]` is `Ψ_b` for the `t`-th contributing tree of bag `g`.
    pub groups: Vec<Vec<Vec<f64>>>,
}

/// ANOVA pieces of the little-bag variance estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BlbAnova {
    pub between: SquareMatrix,
    pub within: SquareMatrix,
    /// `between − within/(ℓ−1)` before any truncation.
    pub raw: SquareMatrix,
    /// Positive-semidefinite estimate `Ĥ`.
    pub h_hat: SquareMatrix,
    pub truncated: bool,
    pub groups_used: usize,
}

/// How a noisy little-bag ANOVA is turned into a nonnegative variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceCorrection {
    /// Posterior mean under an improper uniform prior on the nonnegative half-line.
    #[default]
    Bayes,
    /// Sandwich with the diagonally floored `Ĥ`.
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub sigma_sq: f64,
    pub h_hat: SquareMatrix,
    pub v_hat: SquareMatrix,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Point estimate plus optional variance and interval at one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimate: ParameterEstimate,
    pub variance: Option<VarianceEstimate>,
    pub interval: Option<ConfidenceInterval>,
}

impl EstimateReport {
    pub fn std_err(&self) -> Option<f64> {
        self.variance.as_ref().map(|v| v.sigma_sq.sqrt())
    }
}

/// `Ψ_b` for every tree whose leaf at `x` is non-empty, tagged by bag.
pub fn group_scores(
    forest: &Forest,
    x: &[f64],
    estimate: &ParameterEstimate,
) -> Result<GroupScores> {
    if !forest.options().ci_group_sampling {
        return Err(GrfError::GroupsUnavailable);
    }
    let model = forest.model();
    let data = forest.data();
    let dim = model.score_dim();
    let mut groups = vec![Vec::new(); forest.half_samples().len()];
    for (rec, leaf) in forest.trees().iter().zip(forest.leaf_members(x)) {
        let (Some(leaf), Some(g)) = (leaf, rec.group) else {
            continue;
        };
        let mut psi = vec![0.0; dim];
        for &i in leaf {
            for (acc, s) in psi.iter_mut().zip(model.score(data, i, estimate)?) {
                *acc += s;
            }
        }
        let w = 1.0 / leaf.len() as f64;
        psi.iter_mut().for_each(|v| *v *= w);
        groups[g].push(psi);
    }
    Ok(GroupScores { dim, groups })
}

fn outer_add(m: &mut SquareMatrix, u: &[f64], scale: f64) {
    for r in 0..u.len() {
        for c in 0..u.len() {
            m.set(r, c, m.get(r, c) + scale * u[r] * u[c]);
        }
    }
}

/// Between/within ANOVA over bags of exactly `bag_size` contributing trees;
/// bags that lost trees to empty leaves are skipped.
pub fn blb_variance(scores: &GroupScores, bag_size: usize) -> Result<BlbAnova> {
    if bag_size < 2 {
        return Err(GrfError::InvalidOptions(
            "little bag size must be at least 2".into(),
        ));
    }
    let dim = scores.dim;
    let full: Vec<&Vec<Vec<f64>>> = scores
        .groups
        .iter()
        .filter(|g| g.len() == bag_size)
        .collect();
    if full.len() < 2 {
        return Err(GrfError::TooFewGroups(full.len()));
    }
    let num_groups = full.len() as f64;
    let ell = bag_size as f64;

    let means: Vec<Vec<f64>> = full
        .iter()
        .map(|g| {
            (0..dim)
                .map(|k| g.iter().map(|psi| psi[k]).sum::<f64>() / ell)
                .collect()
        })
        .collect();
    let grand: Vec<f64> = (0..dim)
        .map(|k| means.iter().map(|m| m[k]).sum::<f64>() / num_groups)
        .collect();

    let mut between = SquareMatrix::zeros(dim);
    let mut within = SquareMatrix::zeros(dim);
    for (g, mean) in full.iter().zip(&means) {
        let d: Vec<f64> = mean.iter().zip(&grand).map(|(a, b)| a - b).collect();
        outer_add(&mut between, &d, 1.0 / num_groups);
        for psi in g.iter() {
            let d: Vec<f64> = psi.iter().zip(mean).map(|(a, b)| a - b).collect();
            outer_add(&mut within, &d, 1.0 / (num_groups * ell));
        }
    }

    let mut raw = SquareMatrix::zeros(dim);
    for r in 0..dim {
        for c in 0..dim {
            raw.set(r, c, between.get(r, c) - within.get(r, c) / (ell - 1.0));
        }
    }
    let (h_hat, truncated) = project_psd(&raw);
    Ok(BlbAnova {
        between,
        within,
        raw,
        h_hat,
        truncated,
        groups_used: full.len(),
    })
}

/// Floor negative diagonal entries at zero (dropping their covariances) and
/// shrink off-diagonals to the Cauchy-Schwarz bound. Only the diagonal floor
/// counts as truncation; the off-diagonal shrink just keeps the result PSD.
fn project_psd(raw: &SquareMatrix) -> (SquareMatrix, bool) {
    let dim = raw.dim();
    let mut h = SquareMatrix::zeros(dim);
    let mut truncated = false;
    for r in 0..dim {
        for c in 0..dim {
            h.set(r, c, 0.5 * (raw.get(r, c) + raw.get(c, r)));
        }
    }
    for k in 0..dim {
        if h.get(k, k) < 0.0 {
            truncated = true;
            for j in 0..dim {
                h.set(k, j, 0.0);
                h.set(j, k, 0.0);
            }
        }
    }
    for r in 0..dim {
        for c in 0..r {
            let bound = (h.get(r, r) * h.get(c, c)).sqrt();
            let v = h.get(r, c);
            if v.abs() > bound {
                let clipped = v.signum() * bound;
                h.set(r, c, clipped);
                h.set(c, r, clipped);
            }
        }
    }
    (h, truncated)
}

fn require_curvature(model: &MomentModel) -> Result<()> {
    if let MomentModel::Quantile { .. } = model {
        return Err(GrfError::UnsupportedForModel {
            operation: "variance",
            model: model.name(),
        });
    }
    Ok(())
}

/// `σ̂² = ξᵀ V̂⁻¹ Ĥ V̂⁻ᵀ ξ` from its two factors; `ξ` selects `θ`.
pub fn sandwich(v_hat: &SquareMatrix, h_hat: &SquareMatrix) -> Result<f64> {
    let v_inv = v_hat
        .inverse()
        .ok_or_else(|| GrfError::SingularCurvature(v_hat.determinant()))?;
    Ok(h_hat.quadratic_form(v_inv.row(0)).max(0.0))
}

/// Posterior mean of a variance `S ≥ 0` given `between ~ N(S + noise, se²)`,
/// with `se` from the usual `√(2/G)` scaling of a variance estimate.
pub fn bayes_debias(between: f64, noise: f64, num_groups: usize) -> f64 {
    let initial = between - noise;
    let se = between.max(noise) * (2.0 / num_groups as f64).sqrt();
    if !(se > 0.0) {
        return initial.max(0.0);
    }
    (initial + se * inverse_mills(initial / se)).max(0.0)
}

/// `φ(r)/Φ(r)`; the asymptotic series takes over before `Φ` underflows.
fn inverse_mills(r: f64) -> f64 {
    if r > -30.0 {
        let pdf = (-0.5 * r * r).exp() / (2.0 * std::f64::consts::PI).sqrt();
        pdf / (0.5 * libm::erfc(-r / std::f64::consts::SQRT_2))
    } else {
        let a = -r;
        a + 1.0 / a - 2.0 / (a * a * a)
    }
}

/// `σ̂²` from the ANOVA terms under the chosen correction.
pub fn corrected_variance(
    v_hat: &SquareMatrix,
    anova: &BlbAnova,
    bag_size: usize,
    correction: VarianceCorrection,
) -> Result<f64> {
    match correction {
        VarianceCorrection::Truncate => sandwich(v_hat, &anova.h_hat),
        VarianceCorrection::Bayes => {
            let v_inv = v_hat
                .inverse()
                .ok_or_else(|| GrfError::SingularCurvature(v_hat.determinant()))?;
            let u = v_inv.row(0);
            let between = anova.between.quadratic_form(u);
            let noise = anova.within.quadratic_form(u) / (bag_size as f64 - 1.0);
            Ok(bayes_debias(between, noise, anova.groups_used))
        }
    }
}

/// Sandwich variance of `θ̂(x)`.
pub fn variance_at(forest: &Forest, x: &[f64]) -> Result<VarianceEstimate> {
    Ok(estimate_at(forest, x, None)?
        .variance
        .expect("variance requested"))
}

/// Estimate, variance and (when `level` is given) the confidence interval.
pub fn estimate_at(forest: &Forest, x: &[f64], level: Option<f64>) -> Result<EstimateReport> {
    estimate_with(forest, x, level, VarianceCorrection::default())
}

/// [`estimate_at`] with an explicit variance correction.
pub fn estimate_with(
    forest: &Forest,
    x: &[f64],
    level: Option<f64>,
    correction: VarianceCorrection,
) -> Result<EstimateReport> {
    estimate_impl(forest, x, level, correction, None)
}

/// [`estimate_with`], taking `V̂(x)` from separately trained regression
/// forests instead of the forest's own weights.
pub fn estimate_with_curvature_forests(
    forest: &Forest,
    x: &[f64],
    level: Option<f64>,
    correction: VarianceCorrection,
    curvature: &CurvatureForests,
) -> Result<EstimateReport> {
    if curvature.kind != forest.model().kind() {
        return Err(GrfError::InvalidOptions(format!(
            "curvature forests were fitted for the {} model, forest is {}",
            curvature.kind.name(),
            forest.model().name()
        )));
    }
    estimate_impl(forest, x, level, correction, Some(curvature.curvature(x)?))
}

fn estimate_impl(
    forest: &Forest,
    x: &[f64],
    level: Option<f64>,
    correction: VarianceCorrection,
    v_override: Option<SquareMatrix>,
) -> Result<EstimateReport> {
    let model = forest.model();
    require_curvature(model)?;
    let weights = forest.compute_weights(x)?;
    let estimate = model.solve_weighted(forest.data(), &weights)?;
    let v_hat = match v_override {
        Some(v) => v,
        None => model.curvature(forest.data(), &weights, &estimate)?,
    };
    let scores = group_scores(forest, x, &estimate)?;
    let bag_size = forest.options().little_bag_size;
    let anova = blb_variance(&scores, bag_size)?;
    let sigma_sq = corrected_variance(&v_hat, &anova, bag_size, correction)?;
    let interval = level
        .map(|level| confidence_interval(estimate.value(), sigma_sq, level))
        .transpose()?;
    Ok(EstimateReport {
        estimate,
        variance: Some(VarianceEstimate {
            sigma_sq,
            h_hat: anova.h_hat,
            v_hat,
            truncated: anova.truncated,
        }),
        interval,
    })
}

/// Regression forests for the entries of `V̂(x)` in the two-parameter
/// models: `E[ZW | x]`, `E[Z | x]` and `E[W | x]`, where `Z` is the
/// instrument (instrumental) or the treatment itself (partial effect).
#[derive(Debug, Clone)]
pub struct CurvatureForests {
    kind: ModelKind,
    zw: Forest,
    z: Forest,
    w: Forest,
}

impl CurvatureForests {
    /// Each entry gets its own seed stream derived from `opts.seed`.
    pub fn train(data: &Dataset, kind: ModelKind, opts: &ForestOptions) -> Result<Self> {
        let w = data.require(Role::Treatment)?.to_vec();
        let z = match kind {
            ModelKind::Instrumental => data.require(Role::Instrument)?.to_vec(),
            ModelKind::PartialEffect => w.clone(),
            other => {
                return Err(GrfError::UnsupportedForModel {
                    operation: "curvature forests",
                    model: other.name(),
                })
            }
        };
        let zw: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a * b).collect();
        let fit = |values: Vec<f64>, stream: u64| -> Result<Forest> {
            let view = data.regression_view(values)?;
            let opts = ForestOptions {
                seed: derive_seed(opts.seed, stream),
                ..opts.clone()
            };
            Forest::train(view, MomentModel::Regression, opts)
        };
        Ok(CurvatureForests {
            kind,
            zw: fit(zw, 0)?,
            z: fit(z, 1)?,
            w: fit(w, 2)?,
        })
    }

    pub fn curvature(&self, x: &[f64]) -> Result<SquareMatrix> {
        let zw = self.zw.predict(x)?.value();
        let z = self.z.predict(x)?.value();
        let w = self.w.predict(x)?.value();
        let v = SquareMatrix::from_rows(&[&[zw, z], &[w, 1.0]]);
        let det = v.determinant();
        if det.abs() < SINGULARITY_THRESHOLD {
            return Err(GrfError::SingularCurvature(det));
        }
        Ok(v)
    }
}

/// `θ̂ ± Φ⁻¹(1 − (1 − level)/2)·σ̂`.
pub fn confidence_interval(theta: f64, sigma_sq: f64, level: f64) -> Result<ConfidenceInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GrfError::InvalidOptions(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    if !(sigma_sq >= 0.0) {
        return Err(GrfError::InvalidOptions(
            "variance must be nonnegative".into(),
        ));
    }
    let half_width = normal_quantile(1.0 - (1.0 - level) / 2.0) * sigma_sq.sqrt();
    Ok(ConfidenceInterval {
        lower: theta - half_width,
        upper: theta + half_width,
        level,
    })
}

/// Standard normal quantile `Φ⁻¹(p)` (Wichura's AS 241, about 1e-16 relative).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    fn poly(c: &[f64], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        const A: [f64; 8] = [
            3.387_132_872_796_366_5,
            133.141_667_891_784_38,
            1_971.590_950_306_551_3,
            13_731.693_765_509_461,
            45_921.953_931_549_87,
            67_265.770_927_008_7,
            33_430.575_583_588_13,
            2_509.080_928_730_122_7,
        ];
        const B: [f64; 8] = [
            1.0,
            42.313_330_701_600_91,
            687.187_007_492_057_9,
            5_394.196_021_424_751,
            21_213.794_301_586_597,
            39_307.895_800_092_71,
            28_729.085_735_721_943,
            5_226.495_278_852_546,
        ];
        return q * poly(&A, r) / poly(&B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        const C: [f64; 8] = [
            1.423_437_110_749_683_6,
            4.630_337_846_156_545,
            5.769_497_221_460_691,
            3.647_848_324_763_204_5,
            1.270_458_252_452_368_4,
            0.241_780_725_177_450_6,
            0.022_723_844_989_269_184,
            7.745_450_142_783_414e-4,
        ];
        const D: [f64; 8] = [
            1.0,
            2.053_191_626_637_759,
            1.676_384_830_183_803_8,
            0.689_767_334_985_1,
            0.148_103_976_427_480_08,
            0.015_198_666_563_616_457,
            5.475_938_084_995_345e-4,
            1.050_750_071_644_416_8e-9,
        ];
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        const E: [f64; 8] = [
            6.657_904_643_501_103,
            5.463_784_911_164_114,
            1.784_826_539_917_291_3,
            0.296_560_571_828_504_9,
            0.026_532_189_526_576_124,
            0.001_242_660_947_388_078_4,
            2.711_555_568_743_487_6e-5,
            2.010_334_399_292_288_1e-7,
        ];
        const F: [f64; 8] = [
            1.0,
            0.599_832_206_555_887_9,
            0.136_929_880_922_735_8,
            0.014_875_361_290_850_615,
            7.868_691_311_456_133e-4,
            1.846_318_317_510_054_8e-5,
            1.421_511_758_316_446e-7,
            2.044_263_103_389_939_7e-15,
        ];
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_groups(groups: &[&[f64]]) -> GroupScores {
        GroupScores {
            dim: 1,
            groups: groups
                .iter()
                .map(|g| g.iter().map(|v| vec![*v]).collect())
                .collect(),
        }
    }

    #[test]
    fn normal_quantile_matches_reference_values() {
        // Reference values from an independent double-precision implementation.
        let cases = [
            (0.975, 1.959963984540054),
            (0.75, 0.6744897501960817),
            (0.9, 1.2815515655446004),
            (0.5, 0.0),
            (1e-10, -6.361340902404056),
            (0.01, -2.3263478740408408),
            (0.3, -0.5244005127080409),
            (0.999999, 4.753424308817087),
            (0.95, 1.6448536269514722),
        ];
        for (p, z) in cases {
            assert!((normal_quantile(p) - z).abs() < 1e-12, "p = {p}");
        }
    }

    #[test]
    fn identical_scores_give_zero_variance() {
        let a = blb_variance(&scalar_groups(&[&[1.5, 1.5], &[1.5, 1.5], &[1.5, 1.5]]), 2).unwrap();
        assert_eq!(a.h_hat.get(0, 0), 0.0);
        assert!(!a.truncated);
    }

    #[test]
    fn hand_anova() {
        let a = blb_variance(&scalar_groups(&[&[1.0, 3.0], &[-1.0, 1.0]]), 2).unwrap();
        assert_eq!(a.between.get(0, 0), 1.0);
        assert_eq!(a.within.get(0, 0), 1.0);
        assert_eq!(a.h_hat.get(0, 0), 0.0);
        assert!(!a.truncated);
    }

    #[test]
    fn negative_difference_is_truncated() {
        let a = blb_variance(&scalar_groups(&[&[0.0, 4.0], &[0.0, 0.0]]), 2).unwrap();
        assert_eq!(a.between.get(0, 0), 1.0);
        assert_eq!(a.within.get(0, 0), 2.0);
        assert_eq!(a.raw.get(0, 0), -1.0);
        assert_eq!(a.h_hat.get(0, 0), 0.0);
        assert!(a.truncated);
    }

    #[test]
    fn incomplete_bags_are_dropped() {
        let err = blb_variance(&scalar_groups(&[&[0.0, 4.0], &[0.0]]), 2).unwrap_err();
        assert!(matches!(err, GrfError::TooFewGroups(1)));
    }

    #[test]
    fn projection_keeps_matrix_psd() {
        let raw = SquareMatrix::from_rows(&[&[1.0, 3.0], &[3.0, 4.0]]);
        let (h, truncated) = project_psd(&raw);
        assert!(!truncated);
        assert!(h.determinant() >= -1e-12);
        let raw = SquareMatrix::from_rows(&[&[-1.0, 0.5], &[0.5, 4.0]]);
        let (h, truncated) = project_psd(&raw);
        assert!(truncated);
        assert_eq!(h, SquareMatrix::from_rows(&[&[0.0, 0.0], &[0.0, 4.0]]));
    }

    #[test]
    fn sandwich_examples() {
        let one = SquareMatrix::identity(1);
        let h = SquareMatrix::from_rows(&[&[0.7]]);
        assert_eq!(sandwich(&one, &h).unwrap(), 0.7);
        let v = SquareMatrix::from_rows(&[&[0.5, 0.5], &[0.5, 1.0]]);
        assert!((sandwich(&v, &SquareMatrix::identity(2)).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(sandwich(&v, &SquareMatrix::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn bayes_debias_behaviour() {
        // Far from zero the correction vanishes.
        assert!((bayes_debias(10.0, 1.0, 1_000_000) - 9.0).abs() < 1e-9);
        // A negative raw difference still yields a small positive variance.
        let v = bayes_debias(1.0, 1.5, 50);
        assert!(v > 0.0 && v < 1.0, "{v}");
        // Closed form at r = 0: se·φ(0)/Φ(0) = se·2/√(2π).
        let se = 2.0 * (2.0f64 / 8.0).sqrt();
        let expect = se * 2.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((bayes_debias(2.0, 2.0, 8) - expect).abs() < 1e-12);
        assert!(bayes_debias(1.0, 2.0, 3000) > 0.0);
        let (below, above) = (inverse_mills(-30.0 - 1e-9), inverse_mills(-30.0 + 1e-9));
        assert!((below - above).abs() < 1e-6 * above, "{below} {above}");
        assert_eq!(bayes_debias(0.0, 0.0, 10), 0.0);
    }

    #[test]
    fn corrections_agree_for_a_clear_signal() {
        let s = scalar_groups(&[&[0.0, 0.1], &[5.0, 5.1], &[10.0, 10.1], &[15.0, 15.1]]);
        let anova = blb_variance(&s, 2).unwrap();
        let one = SquareMatrix::identity(1);
        let t = corrected_variance(&one, &anova, 2, VarianceCorrection::Truncate).unwrap();
        let b = corrected_variance(&one, &anova, 2, VarianceCorrection::Bayes).unwrap();
        assert!(
            (t - 31.2475).abs() < 1e-9 && b >= t && b < 1.2 * t,
            "{t} {b}"
        );
    }

    #[test]
    fn interval_examples() {
        let ci = confidence_interval(2.0, 0.0, 0.95).unwrap();
        assert_eq!((ci.lower, ci.upper), (2.0, 2.0));
        let ci = confidence_interval(1.0, 0.04, 0.95).unwrap();
        assert!((ci.lower - 0.60801).abs() < 1e-4 && (ci.upper - 1.39199).abs() < 1e-4);
        let ci = confidence_interval(0.0, 1.0, 0.5).unwrap();
        assert!((ci.lower + 0.67449).abs() < 1e-4 && (ci.upper - 0.67449).abs() < 1e-4);
        assert!(confidence_interval(0.0, 1.0, 1.0).is_err());
    }
}
