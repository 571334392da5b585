//! Data-generating processes for the benchmark experiments.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{GrfError, Result};
use crate::inference::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    QuantileMeanShift,
    QuantileScaleShift,
    Causal,
    Iv,
    IvDiagnostic1,
    IvDiagnostic2,
}

impl DesignKind {
    pub const ALL: [DesignKind; 6] = [
        DesignKind::QuantileMeanShift,
        DesignKind::QuantileScaleShift,
        DesignKind::Causal,
        DesignKind::Iv,
        DesignKind::IvDiagnostic1,
        DesignKind::IvDiagnostic2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DesignKind::QuantileMeanShift => "quantile_mean_shift",
            DesignKind::QuantileScaleShift => "quantile_scale_shift",
            DesignKind::Causal => "causal",
            DesignKind::Iv => "iv",
            DesignKind::IvDiagnostic1 => "iv_diagnostic_1",
            DesignKind::IvDiagnostic2 => "iv_diagnostic_2",
        }
    }

    pub fn is_quantile(self) -> bool {
        matches!(
            self,
            DesignKind::QuantileMeanShift | DesignKind::QuantileScaleShift
        )
    }

    pub fn is_iv(self) -> bool {
        matches!(
            self,
            DesignKind::Iv | DesignKind::IvDiagnostic1 | DesignKind::IvDiagnostic2
        )
    }
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DesignKind {
    type Err = GrfError;

    fn from_str(s: &str) -> Result<Self> {
        DesignKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GrfError::UnknownDesign(s.to_string()))
    }
}

/// A design plus its size, toggles and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub kind: DesignKind,
    pub n: usize,
    pub p: usize,
    /// Causal: confounded propensity and main effect.
    pub confounding: bool,
    /// Causal: heterogeneous treatment effect.
    pub heterogeneity: bool,
    /// IV: strength of the dependence between compliance and noise.
    pub omega: f64,
    /// IV: number of signal coordinates in `τ`.
    pub kappa_tau: usize,
    /// IV: additive (`Σ max(0, x_j)`) rather than joint (`max(0, Σ x_j)`) signals.
    pub additive: bool,
    /// IV: include the main effect `μ` on `x₅, x₆`.
    pub nuisance: bool,
    /// IV: coefficient on each `max(0, ·)` term of `μ`. The MSE study uses 3,
    /// the coverage study 1.
    pub nuisance_scale: f64,
    pub seed: u64,
}

impl DesignSpec {
    pub fn new(kind: DesignKind, n: usize, p: usize) -> Self {
        DesignSpec {
            kind,
            n,
            p,
            confounding: false,
            heterogeneity: false,
            omega: 0.0,
            kappa_tau: 2,
            additive: false,
            nuisance: false,
            nuisance_scale: 3.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Smallest `p` the design can use.
    pub fn required_p(&self) -> usize {
        match self.kind {
            DesignKind::Causal => 3,
            DesignKind::Iv => self.kappa_tau.max(if self.nuisance { 6 } else { 1 }),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(GrfError::InvalidOptions("design needs n >= 1".into()));
        }
        if self.kind == DesignKind::Iv && self.kappa_tau == 0 {
            return Err(GrfError::InvalidOptions(
                "kappa_tau must be at least 1".into(),
            ));
        }
        if self.p < self.required_p() {
            return Err(GrfError::InvalidOptions(format!(
                "design {} needs p >= {}, got {}",
                self.kind,
                self.required_p(),
                self.p
            )));
        }
        if !self.omega.is_finite() {
            return Err(GrfError::InvalidOptions("omega must be finite".into()));
        }
        if !self.nuisance_scale.is_finite() {
            return Err(GrfError::InvalidOptions(
                "nuisance_scale must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Compact `key=value` description of the toggles that matter for this design.
    pub fn describe(&self) -> String {
        let mut parts = vec![
            format!("design={}", self.kind),
            format!("n={}", self.n),
            format!("p={}", self.p),
        ];
        match self.kind {
            DesignKind::Causal => {
                parts.push(format!("confounding={}", self.confounding));
                parts.push(format!("heterogeneity={}", self.heterogeneity));
            }
            DesignKind::Iv => {
                parts.push(format!("omega={}", self.omega));
                parts.push(format!("kappa_tau={}", self.kappa_tau));
                parts.push(format!("additive={}", self.additive));
                parts.push(format!("nuisance={}", self.nuisance));
                if self.nuisance {
                    parts.push(format!("nuisance_scale={}", self.nuisance_scale));
                }
            }
            _ => {}
        }
        parts.push(format!("seed={}", self.seed));
        parts.join(" ")
    }

    pub fn truth(&self) -> Truth {
        Truth { spec: self.clone() }
    }

    /// Draw `m` feature vectors from the design's covariate law.
    pub fn sample_features<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..m).map(|_| self.draw_x(rng)).collect()
    }

    fn draw_x<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            DesignKind::Causal => (0..self.p).map(|_| rng.random::<f64>()).collect(),
            DesignKind::Iv => (0..self.p).map(|_| rng.sample(StandardNormal)).collect(),
            _ => (0..self.p).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }
}

/// Noise-mixing coefficients of the diagnostic designs.
///
/// Design 1: `Z ~ N(0,1)`, `W = Z + λ(x)ε + √(1−λ(x)²)ξ`, `Y = τ(x)W + ε` with
/// `λ = 0` for `x₁ ≤ 1/3` and `λ = 0.9` above; `Cov(W, Y | x) = 2τ(x) + λ(x)`
/// jumps at `x₁ = −1/3` (through `τ`) and at `x₁ = +1/3` (through `λ`).
///
/// Design 2: for `x₁ < 0`, `τ = 0`, `ε ~ N(0, 2)`, `W = (Z + ε + ξ)/2`,
/// `Y = ε`; for `x₁ > 0`, `τ = 1`, `ε ~ N(0, 1)`, `W = Z/2 + √0.75·ξ`,
/// `Y = W + ε`. In both regions `(W, Y) ~ N(0, [[1, 1], [1, 2]])`.
pub const DIAGNOSTIC_1_LAMBDA: f64 = 0.9;
pub const DIAGNOSTIC_2_LEFT_NOISE_VAR: f64 = 2.0;

pub fn diagnostic_mechanism(kind: DesignKind) -> Option<&'static str> {
    match kind {
        DesignKind::IvDiagnostic1 => Some(
            "Z~N(0,1); W=Z+lambda*eps+sqrt(1-lambda^2)*xi; Y=tau*W+eps; lambda=0 if x1<=1/3 else 0.9; tau=2*1{x1>-1/3}",
        ),
        DesignKind::IvDiagnostic2 => Some(
            "Z~N(0,1); x1<0: eps~N(0,2), W=0.5*Z+0.5*eps+0.5*xi, Y=eps; x1>0: eps~N(0,1), W=0.5*Z+sqrt(0.75)*xi, Y=W+eps",
        ),
        _ => None,
    }
}

/// Ground truth carried alongside a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    spec: DesignSpec,
}

/// `ς(u) = 1 + 1/(1 + e^{−20(u − 1/3)})`.
pub fn varsigma(u: f64) -> f64 {
    1.0 + 1.0 / (1.0 + (-20.0 * (u - 1.0 / 3.0)).exp())
}

/// Beta(2, 4) density `20·x·(1 − x)³`.
pub fn beta_2_4(x: f64) -> f64 {
    20.0 * x * (1.0 - x).powi(3)
}

pub fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

impl Truth {
    pub fn spec(&self) -> &DesignSpec {
        &self.spec
    }

    /// Treatment effect `τ(x)`; zero for the quantile designs.
    pub fn effect(&self, x: &[f64]) -> f64 {
        let s = &self.spec;
        match s.kind {
            DesignKind::Causal => {
                if s.heterogeneity {
                    varsigma(x[0]) * varsigma(x[1])
                } else {
                    0.0
                }
            }
            DesignKind::Iv => {
                let signal = &x[..s.kappa_tau];
                if s.additive {
                    signal.iter().map(|v| v.max(0.0)).sum()
                } else {
                    signal.iter().sum::<f64>().max(0.0)
                }
            }
            DesignKind::IvDiagnostic1 => {
                if x[0] > -1.0 / 3.0 {
                    2.0
                } else {
                    0.0
                }
            }
            DesignKind::IvDiagnostic2 => {
                if x[0] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            DesignKind::QuantileMeanShift | DesignKind::QuantileScaleShift => 0.0,
        }
    }

    /// IV main effect `μ(x)`.
    pub fn main_effect(&self, x: &[f64]) -> f64 {
        let s = &self.spec;
        match s.kind {
            DesignKind::Iv if s.nuisance => {
                let c = s.nuisance_scale;
                if s.additive {
                    c * x[4].max(0.0) + c * x[5].max(0.0)
                } else {
                    c * (x[4] + x[5]).max(0.0)
                }
            }
            DesignKind::Causal if s.confounding => 2.0 * x[2] - 1.0,
            _ => 0.0,
        }
    }

    /// Causal propensity `e(x)`.
    pub fn propensity(&self, x: &[f64]) -> f64 {
        if self.spec.kind == DesignKind::Causal && self.spec.confounding {
            0.25 * (1.0 + beta_2_4(x[2]))
        } else {
            0.5
        }
    }

    /// Conditional `q`-quantile of `Y` for the quantile designs.
    pub fn quantile(&self, x: &[f64], q: f64) -> f64 {
        let high = x[0] > 0.0;
        match self.spec.kind {
            DesignKind::QuantileMeanShift => (if high { 0.8 } else { 0.0 }) + normal_quantile(q),
            DesignKind::QuantileScaleShift => (if high { 2.0 } else { 1.0 }) * normal_quantile(q),
            _ => f64::NAN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub data: Dataset,
    pub truth: Truth,
}

/// Generate a training set for any design kind.
pub fn generate(spec: &DesignSpec) -> Result<SimulatedData> {
    match spec.kind {
        DesignKind::QuantileMeanShift | DesignKind::QuantileScaleShift => gen_quantile(spec),
        DesignKind::Causal => gen_causal(spec),
        DesignKind::Iv => gen_iv(spec),
        DesignKind::IvDiagnostic1 | DesignKind::IvDiagnostic2 => gen_iv_diagnostic(spec),
    }
}

fn expect_kind(spec: &DesignSpec, ok: bool) -> Result<()> {
    spec.validate()?;
    if ok {
        Ok(())
    } else {
        Err(GrfError::InvalidOptions(format!(
            "generator does not handle design {}",
            spec.kind
        )))
    }
}

fn assemble(
    rows: &[Vec<f64>],
    roles: [Option<Vec<f64>>; 3],
    spec: &DesignSpec,
) -> Result<SimulatedData> {
    let [y, w, z] = roles;
    let mut data = Dataset::from_rows(rows)?;
    if let Some(y) = y {
        data = data.with_outcome(y)?;
    }
    if let Some(w) = w {
        data = data.with_treatment(w)?;
    }
    if let Some(z) = z {
        data = data.with_instrument(z)?;
    }
    Ok(SimulatedData {
        data,
        truth: spec.truth(),
    })
}

/// `X ~ U([−1,1]^p)`; `Y | X ~ N(0.8·1{x₁>0}, 1)` or `N(0, (1 + 1{x₁>0})²)`.
pub fn gen_quantile(spec: &DesignSpec) -> Result<SimulatedData> {
    expect_kind(spec, spec.kind.is_quantile())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x = spec.draw_x(&mut rng);
        let e: f64 = rng.sample(StandardNormal);
        let high = x[0] > 0.0;
        y.push(match spec.kind {
            DesignKind::QuantileMeanShift => e + if high { 0.8 } else { 0.0 },
            _ => e * if high { 2.0 } else { 1.0 },
        });
        rows.push(x);
    }
    assemble(&rows, [Some(y), None, None], spec)
}

/// `X ~ U([0,1]^p)`, `W | X ~ Bern(e(X))`, `Y | X, W ~ N(m(X) + (W − ½)τ(X), 1)`.
pub fn gen_causal(spec: &DesignSpec) -> Result<SimulatedData> {
    expect_kind(spec, spec.kind == DesignKind::Causal)?;
    let truth = spec.truth();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut rows, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..spec.n {
        let x = spec.draw_x(&mut rng);
        let wi = if rng.random::<f64>() < truth.propensity(&x) {
            1.0
        } else {
            0.0
        };
        let e: f64 = rng.sample(StandardNormal);
        y.push(truth.main_effect(&x) + (wi - 0.5) * truth.effect(&x) + e);
        w.push(wi);
        rows.push(x);
    }
    assemble(&rows, [Some(y), Some(w), None], spec)
}

/// Intention-to-treat design: `X ~ N(0, I_p)`, `Z ~ Bern(1/3)`,
/// `Q ~ Bern(logistic(ωε))`, `W = Z ∧ Q`, `Y = μ(X) + (W − ½)τ(X) + ε`.
pub fn gen_iv(spec: &DesignSpec) -> Result<SimulatedData> {
    expect_kind(spec, spec.kind == DesignKind::Iv)?;
    let truth = spec.truth();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut rows, mut y, mut w, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..spec.n {
        let x = spec.draw_x(&mut rng);
        let e: f64 = rng.sample(StandardNormal);
        let zi = rng.random::<f64>() < 1.0 / 3.0;
        let qi = rng.random::<f64>() < logistic(spec.omega * e);
        let wi = if zi && qi { 1.0 } else { 0.0 };
        y.push(truth.main_effect(&x) + (wi - 0.5) * truth.effect(&x) + e);
        w.push(wi);
        z.push(if zi { 1.0 } else { 0.0 });
        rows.push(x);
    }
    assemble(&rows, [Some(y), Some(w), Some(z)], spec)
}

/// The two endogeneity diagnostics; see [`diagnostic_mechanism`].
pub fn gen_iv_diagnostic(spec: &DesignSpec) -> Result<SimulatedData> {
    expect_kind(
        spec,
        matches!(
            spec.kind,
            DesignKind::IvDiagnostic1 | DesignKind::IvDiagnostic2
        ),
    )?;
    let truth = spec.truth();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut rows, mut y, mut w, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..spec.n {
        let x = spec.draw_x(&mut rng);
        let zi: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let xi: f64 = rng.sample(StandardNormal);
        let tau = truth.effect(&x);
        let (wi, yi) = if spec.kind == DesignKind::IvDiagnostic1 {
            let lambda = if x[0] > 1.0 / 3.0 {
                DIAGNOSTIC_1_LAMBDA
            } else {
                0.0
            };
            let wi = zi + lambda * e + (1.0 - lambda * lambda).sqrt() * xi;
            (wi, tau * wi + e)
        } else if x[0] > 0.0 {
            let wi = 0.5 * zi + 0.75f64.sqrt() * xi;
            (wi, tau * wi + e)
        } else {
            let e = DIAGNOSTIC_2_LEFT_NOISE_VAR.sqrt() * e;
            (0.5 * zi + 0.5 * e + 0.5 * xi, e)
        };
        y.push(yi);
        w.push(wi);
        z.push(zi);
        rows.push(x);
    }
    assemble(&rows, [Some(y), Some(w), Some(z)], spec)
}

/// Monte Carlo summary used to confirm a generator's distributional claims.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCheck {
    pub name: String,
    pub estimate: f64,
    pub std_err: f64,
    /// Design value the estimate should match.
    pub expected: f64,
}

impl MomentCheck {
    pub fn z_score(&self) -> f64 {
        if self.std_err > 0.0 {
            (self.estimate - self.expected) / self.std_err
        } else if self.estimate == self.expected {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn diff_check(name: &str, a: &[f64], b: &[f64], expected: f64) -> MomentCheck {
    let (ma, sa) = mean_and_se(a);
    let (mb, sb) = mean_and_se(b);
    MomentCheck {
        name: name.into(),
        estimate: ma - mb,
        std_err: sa.hypot(sb),
        expected,
    }
}

/// Moment checks on a diagnostic dataset: the observable `(W, Y)` moments on
/// either side of each threshold, against their design values.
pub fn diagnostic_checks(sim: &SimulatedData) -> Vec<MomentCheck> {
    let data = &sim.data;
    let (Some(w), Some(y)) = (data.treatment(), data.outcome()) else {
        return Vec::new();
    };
    let x1 = data.column(0);
    let region = |pred: &dyn Fn(f64) -> bool, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..data.n()).filter(|&i| pred(x1[i])).map(f).collect()
    };
    let wy = |i: usize| w[i] * y[i];
    let ww = |i: usize| w[i] * w[i];
    let yy = |i: usize| y[i] * y[i];
    match sim.truth.spec.kind {
        DesignKind::IvDiagnostic1 => {
            let low = |v: f64| v <= -1.0 / 3.0;
            let mid = |v: f64| v > -1.0 / 3.0 && v <= 1.0 / 3.0;
            let high = |v: f64| v > 1.0 / 3.0;
            vec![
                diff_check("E[WY] mid-low", &region(&mid, &wy), &region(&low, &wy), 4.0),
                diff_check(
                    "E[WY] high-mid",
                    &region(&high, &wy),
                    &region(&mid, &wy),
                    DIAGNOSTIC_1_LAMBDA,
                ),
            ]
        }
        DesignKind::IvDiagnostic2 => {
            let neg = |v: f64| v < 0.0;
            let pos = |v: f64| v > 0.0;
            vec![
                diff_check(
                    "E[W] neg-pos",
                    &region(&neg, &|i| w[i]),
                    &region(&pos, &|i| w[i]),
                    0.0,
                ),
                diff_check(
                    "E[Y] neg-pos",
                    &region(&neg, &|i| y[i]),
                    &region(&pos, &|i| y[i]),
                    0.0,
                ),
                diff_check("E[WW] neg-pos", &region(&neg, &ww), &region(&pos, &ww), 0.0),
                diff_check("E[WY] neg-pos", &region(&neg, &wy), &region(&pos, &wy), 0.0),
                diff_check("E[YY] neg-pos", &region(&neg, &yy), &region(&pos, &yy), 0.0),
            ]
        }
        _ => Vec::new(),
    }
}
