//! Monte Carlo harness.
//!
//! A [`DgpSpec`] describes how potential outcomes and effects are generated.
//! [`run`] draws `R` replications, applies one inference method to each, and
//! aggregates coverage of the realized average effect on the treated (SATT),
//! rejection rates, empty-set frequencies and conditional coverage by
//! stratum of realized effects.
//!
//! Every replication owns its random stream, keyed by `(seed, index)`, and
//! results are merged in index order, so a report does not depend on the
//! number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::estimators::{control_residuals, diff_in_means, mean};
use crate::intervals::{
    appendix_b_rule, closed_form_from_band, closed_form_interval, contains, Interpretation,
};
use crate::model::{Assumption, Dataset, Hypothesis, IntervalSet, Level};
use crate::quantile_models::{empirical_convolution, ferman_fit, ferman_psi, QuantileBand};
use crate::sharp_tests::{
    conley_taber_pvalue, permutation_pvalue, quantile_test, PermutationPlan, ResidualMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    IidNormal,
    WeatherMixture,
    DeterministicHetero,
    AppendixA,
    AppendixB,
    FermanScaleModel,
    UnequalVarianceDemo,
}

impl DgpKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.replace('-', "_").as_str() {
            "iid_normal" => Self::IidNormal,
            "weather_mixture" | "weather" => Self::WeatherMixture,
            "deterministic_hetero" => Self::DeterministicHetero,
            "appendix_a" => Self::AppendixA,
            "appendix_b" => Self::AppendixB,
            "ferman_scale_model" | "ferman" => Self::FermanScaleModel,
            "unequal_variance_demo" => Self::UnequalVarianceDemo,
            _ => return Err(Error::UnknownKind(name.to_string())),
        })
    }

    fn default_strata(self) -> Strata {
        match self {
            Self::WeatherMixture | Self::DeterministicHetero | Self::UnequalVarianceDemo => {
                Strata::AlphaPattern
            }
            Self::AppendixA => Strata::ExactSatt,
            _ => Strata::SattDeciles,
        }
    }
}

/// Parameters of every generator; each kind reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub n1: usize,
    pub n0: usize,
    /// Location of untreated outcomes.
    pub mu: f64,
    /// Scale of untreated outcomes.
    pub sigma: f64,
    /// Common (or central) treatment effect.
    pub alpha: f64,
    /// Effect size of the shock (weather) or spread of effects.
    pub tau: f64,
    /// Shock probability.
    pub pi: f64,
    /// Effects independent of untreated outcomes.
    pub independent: bool,
    /// Shift of untreated outcomes under a shock when effects are dependent.
    pub kappa: f64,
    /// Fixed effects for deterministic heterogeneity.
    pub alphas: Vec<f64>,
    /// Effects proportional to untreated outcomes, `alpha_i = delta * Y_i(0)`.
    pub delta: f64,
    /// Variance function `h(x)^2 = theta_1 + theta_2 / x`.
    pub theta: [f64; 2],
    pub control_x: [f64; 2],
    pub treated_x: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub params: DgpParams,
    pub seed: u64,
}

impl DgpSpec {
    /// The generator with its default parameters.
    pub fn new(kind: DgpKind, seed: u64) -> Self {
        let mut p = DgpParams {
            n1: 1,
            n0: 19,
            mu: 0.0,
            sigma: 1.0,
            alpha: 0.0,
            tau: 2.0,
            pi: 0.5,
            independent: true,
            kappa: 2.0,
            alphas: vec![1.0, 3.0],
            delta: 10.0,
            theta: [1.0, 4.0],
            control_x: [2.0, 50.0],
            treated_x: [1.0, 2.0],
        };
        match kind {
            DgpKind::IidNormal => {}
            DgpKind::WeatherMixture => {
                p.n1 = 2;
                p.n0 = 2000;
            }
            DgpKind::DeterministicHetero => {
                p.n1 = 2;
                p.n0 = 200;
            }
            DgpKind::AppendixA => {
                p.n1 = 1;
                p.n0 = 1;
            }
            DgpKind::AppendixB => {
                p.n1 = 2;
                p.n0 = 1;
            }
            DgpKind::FermanScaleModel => {
                p.n1 = 2;
                p.n0 = 2000;
                p.tau = 1.0;
            }
            DgpKind::UnequalVarianceDemo => {
                p.n1 = 2;
                p.n0 = 50;
            }
        }
        Self {
            kind,
            params: p,
            seed,
        }
    }

    /// Overrides one parameter from its textual form, e.g. `("tau", "2.5")`.
    pub fn set_param(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::InvalidParameter(format!("{key}={value}"));
        let num = || value.trim().parse::<f64>().map_err(|_| bad());
        let count = || value.trim().parse::<usize>().map_err(|_| bad());
        let pair = || -> Result<[f64; 2]> {
            let v: Vec<f64> = value
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            <[f64; 2]>::try_from(v).map_err(|_| bad())
        };
        let p = &mut self.params;
        match key {
            "n1" => p.n1 = count()?,
            "n0" => p.n0 = count()?,
            "mu" => p.mu = num()?,
            "sigma" => p.sigma = num()?,
            "alpha" => p.alpha = num()?,
            "tau" => p.tau = num()?,
            "pi" => p.pi = num()?,
            "kappa" => p.kappa = num()?,
            "delta" => p.delta = num()?,
            "independent" => {
                p.independent = match value.trim() {
                    "true" | "1" | "on" => true,
                    "false" | "0" | "off" => false,
                    _ => return Err(bad()),
                }
            }
            "alphas" => {
                p.alphas = value
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                p.n1 = p.alphas.len();
            }
            "theta" => p.theta = pair()?,
            "control_x" => p.control_x = pair()?,
            "treated_x" => p.treated_x = pair()?,
            "seed" => self.seed = value.trim().parse().map_err(|_| bad())?,
            _ => return Err(Error::InvalidParameter(format!("unknown parameter {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let fail = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if p.n1 == 0 || p.n0 == 0 {
            return fail("n1 and n0 must be at least 1");
        }
        if !(p.sigma > 0.0) {
            return fail("sigma must be positive");
        }
        if !(0.0..=1.0).contains(&p.pi) {
            return fail("pi must lie in [0, 1]");
        }
        match self.kind {
            DgpKind::DeterministicHetero if p.alphas.len() != p.n1 => {
                fail("alphas must have one entry per treated unit")
            }
            DgpKind::AppendixA if p.n1 != 1 => fail("appendix_a has a single treated unit"),
            DgpKind::AppendixB if p.n1 != 2 || p.n0 != 1 => {
                fail("appendix_b has two treated units and one control")
            }
            DgpKind::FermanScaleModel => {
                let ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
                if !ok(p.control_x) || !ok(p.treated_x) {
                    return fail("covariate ranges must be positive and ordered");
                }
                if p.n0 < 3 {
                    return fail("the scale model needs at least 3 controls");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Expected effect on the treated implied by the generator.
    pub fn att(&self) -> f64 {
        let p = &self.params;
        match self.kind {
            DgpKind::IidNormal | DgpKind::FermanScaleModel | DgpKind::UnequalVarianceDemo => {
                p.alpha
            }
            DgpKind::WeatherMixture => p.tau * p.pi,
            DgpKind::DeterministicHetero => mean(&p.alphas),
            DgpKind::AppendixA => 0.0,
            DgpKind::AppendixB => p.delta * p.mu,
        }
    }
}

/// One simulated sample with its potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub dataset: Dataset,
    /// Untreated potential outcomes in dataset order.
    pub y0: Vec<f64>,
    /// Realized effects of the treated units, in dataset order.
    pub alphas: Vec<f64>,
    pub satt: f64,
    pub att: f64,
}

fn rep_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates replication `index` of `spec`.
///
/// Treated units come first (`t0, t1, ...`), then controls (`c0, ...`).
pub fn draw(spec: &DgpSpec, index: u64) -> Result<Draw> {
    spec.validate()?;
    let p = &spec.params;
    let mut rng = rep_rng(spec.seed, index);
    let n = p.n1 + p.n0;
    let mut y0 = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(p.n1);
    let mut x: Option<Vec<f64>> = None;
    match spec.kind {
        DgpKind::IidNormal => {
            for _ in 0..n {
                y0.push(p.mu + p.sigma * normal(&mut rng));
            }
            alphas.resize(p.n1, p.alpha);
        }
        DgpKind::WeatherMixture => {
            for i in 0..n {
                let shock = rng.random_bool(p.pi);
                let mut v = p.mu + p.sigma * normal(&mut rng);
                if !p.independent && shock {
                    v -= p.kappa;
                }
                y0.push(v);
                if i < p.n1 {
                    alphas.push(if shock { p.tau } else { 0.0 });
                }
            }
        }
        DgpKind::DeterministicHetero => {
            for _ in 0..n {
                y0.push(p.mu + p.sigma * normal(&mut rng));
            }
            alphas.extend_from_slice(&p.alphas);
        }
        DgpKind::AppendixA => {
            for _ in 0..n {
                y0.push(normal(&mut rng));
            }
            // Y(1) = 2 Y(0)
            alphas.push(y0[0]);
        }
        DgpKind::AppendixB => {
            for _ in 0..n {
                y0.push(p.mu + normal(&mut rng));
            }
            alphas.extend(y0[..p.n1].iter().map(|v| p.delta * v));
        }
        DgpKind::FermanScaleModel => {
            let mut xs = Vec::with_capacity(n);
            for i in 0..n {
                let [lo, hi] = if i < p.n1 { p.treated_x } else { p.control_x };
                let xi = if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                };
                let h = (p.theta[0] + p.theta[1] / xi).sqrt();
                y0.push(p.mu + h * normal(&mut rng));
                xs.push(xi);
            }
            for _ in 0..p.n1 {
                alphas.push(p.alpha + p.tau * normal(&mut rng));
            }
            x = Some(xs);
        }
        DgpKind::UnequalVarianceDemo => {
            for _ in 0..n {
                y0.push(p.mu + p.sigma * normal(&mut rng));
            }
            for _ in 0..p.n1 {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                alphas.push(p.alpha + sign * p.tau);
            }
        }
    }
    let ids = (0..n)
        .map(|i| {
            if i < p.n1 {
                format!("t{i}")
            } else {
                format!("c{}", i - p.n1)
            }
        })
        .collect();
    let y = (0..n)
        .map(|i| if i < p.n1 { y0[i] + alphas[i] } else { y0[i] })
        .collect();
    let d = (0..n).map(|i| if i < p.n1 { 1.0 } else { 0.0 }).collect();
    let dataset = Dataset::from_columns(ids, y, d, x)?;
    Ok(Draw {
        dataset,
        y0,
        satt: mean(&alphas),
        alphas,
        att: spec.att(),
    })
}

/// Additive split of `beta_dm - beta` into effect heterogeneity, treated
/// untreated-outcome noise and control untreated-outcome noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub heterogeneity: f64,
    pub treated_noise: f64,
    pub control_noise: f64,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.heterogeneity + self.treated_noise + self.control_noise
    }
}

pub fn error_decomposition(draw: &Draw, beta: f64) -> Decomposition {
    let treated = draw.dataset.treatment();
    let het: Vec<f64> = draw.alphas.iter().map(|a| a - beta).collect();
    let y0_t: Vec<f64> = draw
        .y0
        .iter()
        .zip(treated)
        .filter(|(_, &t)| t)
        .map(|(v, _)| *v)
        .collect();
    let y0_c: Vec<f64> = draw
        .y0
        .iter()
        .zip(treated)
        .filter(|(_, &t)| !t)
        .map(|(v, _)| *v)
        .collect();
    Decomposition {
        heterogeneity: mean(&het),
        treated_noise: mean(&y0_t),
        control_noise: -mean(&y0_c),
    }
}

/// Inference procedure evaluated on each replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    /// Randomization test of the sharp null.
    Permutation { budget: u64 },
    /// Residual-based test.
    ConleyTaber { residual_mode: ResidualMode },
    /// Empirical-convolution quantiles of control residuals.
    Quantile { budget: u64 },
    /// Scale-model quantiles.
    Ferman { budget: u64 },
    /// Known quantiles around a known proxy for the untreated mean.
    OracleBand { lower: f64, upper: f64, proxy: f64 },
    /// Max-statistic rule for two treated units and one control.
    MaxGap { iota: f64 },
    /// Unequal-variance t interval.
    WelchT,
}

impl Method {
    pub fn is_interval(&self) -> bool {
        !matches!(self, Self::Permutation { .. } | Self::ConleyTaber { .. })
    }

    /// Method used by default for a generator.
    ///
    /// The known-quantile band of `appendix_a` is the standard normal band,
    /// written as the conventional `+/- 1.96` at the 95% level.
    pub fn default_for(kind: DgpKind, budget: u64, level: Level) -> Self {
        match kind {
            DgpKind::IidNormal => Self::Permutation { budget },
            DgpKind::WeatherMixture | DgpKind::DeterministicHetero => Self::Quantile { budget },
            DgpKind::AppendixA => {
                let z = if (level.gamma() - 0.05).abs() < 1e-12 {
                    1.96
                } else {
                    Normal::new(0.0, 1.0)
                        .expect("standard normal")
                        .inverse_cdf(1.0 - level.gamma() / 2.0)
                };
                Self::OracleBand {
                    lower: -z,
                    upper: z,
                    proxy: 0.0,
                }
            }
            DgpKind::AppendixB => Self::MaxGap { iota: f64::NAN },
            DgpKind::FermanScaleModel => Self::Ferman { budget },
            DgpKind::UnequalVarianceDemo => Self::WelchT,
        }
    }
}

/// How replications are grouped for conditional coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strata {
    /// One stratum per exact vector of realized treated effects.
    AlphaPattern,
    /// Ten equal-count bins of the realized SATT.
    SattDeciles,
    /// One stratum per exact SATT value; adjacent strata with equal coverage
    /// are reported as one range.
    ExactSatt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub method: Method,
    pub level: Level,
    /// Hypothesized value; test-only methods fall back to the generator's ATT.
    pub null: Option<f64>,
    pub interpretation: Interpretation,
    pub replications: u64,
    /// Worker threads, 0 for automatic.
    #[serde(skip)]
    pub workers: usize,
    pub strata: Option<Strata>,
}

impl SimConfig {
    pub fn new(method: Method, level: Level, replications: u64) -> Self {
        Self {
            method,
            level,
            null: None,
            interpretation: Interpretation::PredictionSet,
            replications,
            workers: 0,
            strata: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCoverage {
    pub key: String,
    pub lo: f64,
    pub hi: f64,
    pub replications: u64,
    pub covered: u64,
    pub coverage: f64,
    pub mc_stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSummary {
    pub heterogeneity: Moments,
    pub treated_noise: Moments,
    pub control_noise: Moments,
    /// Largest `|sum of components - (beta_dm - beta)|` over replications.
    pub max_identity_error: f64,
}

/// Per-replication agreement checks for quantile methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consistency {
    /// Sharp-null and realized-effect tests disagree on p-value or decision.
    pub pvalue_identity_violations: u64,
    /// Interval membership disagrees with non-rejection.
    pub duality_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub dgp: DgpSpec,
    pub config: SimConfig,
    pub replications: u64,
    /// Replications where the method could not be evaluated (for example a
    /// fitted variance that is not positive at a treated covariate). Rates
    /// are computed over the remaining replications.
    pub method_failures: u64,
    pub unconditional_coverage: Option<f64>,
    pub stratification: Strata,
    pub conditional_coverage: Vec<StratumCoverage>,
    pub rejection_rate: Option<f64>,
    pub empty_set_frequency: Option<f64>,
    pub mean_length: Option<f64>,
    pub decomposition_summary: DecompositionSummary,
    /// Standard error of the headline rate (coverage, else rejection rate).
    pub mc_stderr: f64,
    pub consistency: Option<Consistency>,
}

struct RepOutcome {
    alphas: Vec<f64>,
    satt: f64,
    covered: Option<bool>,
    empty: bool,
    length: Option<f64>,
    reject: Option<bool>,
    decomposition: Decomposition,
    identity_error: f64,
    identity_violation: bool,
    duality_violation: bool,
    failed: bool,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn method_seed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ index.wrapping_mul(0xd134_2543_de82_ef95))
}

fn welch_interval(ds: &Dataset, level: Level) -> Result<IntervalSet> {
    let t = ds.treated_outcomes();
    let c = ds.control_outcomes();
    if t.len() < 2 || c.len() < 2 {
        return Err(Error::MethodIncompatible(
            "the unequal-variance t interval needs two units per group".into(),
        ));
    }
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (a, b) = (var(&t) / t.len() as f64, var(&c) / c.len() as f64);
    let se = (a + b).sqrt();
    let df = (a + b).powi(2) / (a * a / (t.len() - 1) as f64 + b * b / (c.len() - 1) as f64);
    let beta = diff_in_means(ds);
    if !(se > 0.0 && df.is_finite()) {
        return IntervalSet::single(beta, beta);
    }
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::InvalidParameter(format!("student t: {e}")))?;
    let q = dist.inverse_cdf(1.0 - level.gamma() / 2.0);
    IntervalSet::single(beta - q * se, beta + q * se)
}

#[derive(Default)]
struct Evaluation {
    set: Option<IntervalSet>,
    reject: Option<bool>,
    identity_violation: bool,
    duality_violation: bool,
}

fn evaluate(dr: &Draw, cfg: &SimConfig, mseed: u64) -> Result<Evaluation> {
    let ds = &dr.dataset;
    let level = cfg.level;
    let null = cfg.null;
    let test_null = null.unwrap_or(dr.att);

    let mut set: Option<IntervalSet> = None;
    let mut reject = None;
    let mut identity_violation = false;
    let mut duality_violation = false;

    match cfg.method {
        Method::Permutation { budget } => {
            let plan = PermutationPlan::new(budget, mseed);
            reject = Some(permutation_pvalue(ds, test_null, &plan, level)?.reject);
        }
        Method::ConleyTaber { residual_mode } => {
            reject = Some(conley_taber_pvalue(ds, test_null, residual_mode, level).reject);
        }
        Method::Quantile { budget } | Method::Ferman { budget } => {
            let (alpha_hat, qm) = if let Method::Ferman { .. } = cfg.method {
                let fit = ferman_fit(ds).map_err(|e| match e {
                    Error::MissingCovariates => {
                        Error::MethodIncompatible("the scale model needs covariates".into())
                    }
                    other => other,
                })?;
                let tx = ds.treated_covariates().unwrap_or_default();
                let qm = ferman_psi(&fit, &tx, budget, mseed)?;
                (mean(&ds.treated_outcomes()) - fit.mu_hat, qm)
            } else {
                let resid = control_residuals(ds, None);
                (
                    diff_in_means(ds),
                    empirical_convolution(&resid, ds.n1(), budget, mseed)?,
                )
            };
            let report = closed_form_interval(alpha_hat, &qm, level, cfg.interpretation)?;
            if let Some(c) = null {
                let sharp = quantile_test(alpha_hat, Hypothesis::sharp(c)?, &qm, level)?;
                let realized = quantile_test(alpha_hat, Hypothesis::realized(c)?, &qm, level)?;
                identity_violation = sharp.p_value.to_bits() != realized.p_value.to_bits()
                    || sharp.reject != realized.reject;
                duality_violation = contains(&report, c) == sharp.reject;
                reject = Some(sharp.reject);
            }
            set = Some(report.set);
        }
        Method::OracleBand {
            lower,
            upper,
            proxy,
        } => {
            let alpha_hat = mean(&ds.treated_outcomes()) - proxy;
            let report = closed_form_from_band(
                alpha_hat,
                QuantileBand::new(lower, upper)?,
                level,
                cfg.interpretation,
                Assumption::IidControls,
                "oracle_band",
            )?;
            set = Some(report.set);
        }
        Method::MaxGap { iota } => {
            if ds.n1() != 2 {
                return Err(Error::MethodIncompatible(
                    "the max-gap rule needs exactly two treated units".into(),
                ));
            }
            let t = ds.treated_outcomes();
            let rule = appendix_b_rule(t[0], t[1], ds.control_outcomes()[0], iota)?;
            set = Some(rule.region());
        }
        Method::WelchT => {
            set = Some(welch_interval(ds, level)?);
        }
    }

    if let (Some(s), Some(c), true) = (&set, null, reject.is_none()) {
        reject = Some(!s.contains(c));
    }
    Ok(Evaluation {
        set,
        reject,
        identity_violation,
        duality_violation,
    })
}

fn one_replication(spec: &DgpSpec, cfg: &SimConfig, index: u64) -> Result<RepOutcome> {
    let dr = draw(spec, index)?;
    let ds = &dr.dataset;
    // a fit that breaks down on one sample is counted, not fatal
    let (eval, failed) = match evaluate(&dr, cfg, method_seed(spec.seed, index)) {
        Ok(e) => (e, false),
        Err(
            Error::NonPositiveVariance { .. }
            | Error::TooFewControls { .. }
            | Error::TooFewResiduals { .. },
        ) => (Evaluation::default(), true),
        Err(e) => return Err(e),
    };
    let Evaluation {
        set,
        reject,
        identity_violation,
        duality_violation,
    } = eval;
    let decomposition = error_decomposition(&dr, dr.att);
    let beta_dm = diff_in_means(ds);
    let identity_error = (decomposition.total() - (beta_dm - dr.att)).abs();
    Ok(RepOutcome {
        satt: dr.satt,
        covered: set.as_ref().map(|s| s.contains(dr.satt)),
        empty: set.as_ref().is_some_and(|s| s.is_empty()),
        length: set.as_ref().filter(|s| !s.is_empty()).map(|s| s.length()),
        alphas: dr.alphas,
        reject,
        decomposition,
        identity_error,
        identity_violation,
        duality_violation,
        failed,
    })
}

/// Neumaier-compensated sum.
fn stable_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn moments(values: &[f64]) -> Moments {
    let n = values.len() as f64;
    let m = stable_sum(values.iter().copied()) / n;
    let v = if values.len() > 1 {
        stable_sum(values.iter().map(|x| (x - m) * (x - m))) / (n - 1.0)
    } else {
        0.0
    };
    Moments {
        mean: m,
        variance: v,
    }
}

fn binomial_se(hits: u64, total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = hits as f64 / total as f64;
    (p * (1.0 - p) / total as f64).sqrt()
}

fn stratum(key: String, lo: f64, hi: f64, reps: u64, covered: u64) -> StratumCoverage {
    StratumCoverage {
        key,
        lo,
        hi,
        replications: reps,
        covered,
        coverage: covered as f64 / reps as f64,
        mc_stderr: binomial_se(covered, reps),
    }
}

fn fmt_pattern(a: &[f64]) -> String {
    let parts: Vec<String> = a.iter().map(|v| format!("{v}")).collect();
    format!("alpha=[{}]", parts.join(", "))
}

fn lexi(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn conditional(outcomes: &[RepOutcome], strata: Strata) -> Vec<StratumCoverage> {
    let mut items: Vec<(&RepOutcome, bool)> = outcomes
        .iter()
        .filter_map(|o| o.covered.map(|c| (o, c)))
        .collect();
    if items.is_empty() {
        return Vec::new();
    }
    match strata {
        Strata::AlphaPattern => {
            items.sort_by(|a, b| lexi(&a.0.alphas, &b.0.alphas));
            let mut out = Vec::new();
            let mut i = 0;
            while i < items.len() {
                let mut j = i;
                while j < items.len() && lexi(&items[j].0.alphas, &items[i].0.alphas).is_eq() {
                    j += 1;
                }
                let covered = items[i..j].iter().filter(|x| x.1).count() as u64;
                let satt = items[i].0.satt;
                out.push(stratum(
                    fmt_pattern(&items[i].0.alphas),
                    satt,
                    satt,
                    (j - i) as u64,
                    covered,
                ));
                i = j;
            }
            out
        }
        Strata::SattDeciles => {
            items.sort_by(|a, b| a.0.satt.total_cmp(&b.0.satt));
            let n = items.len();
            let bins = 10.min(n);
            (0..bins)
                .map(|k| {
                    let (s, e) = (k * n / bins, (k + 1) * n / bins);
                    let slice = &items[s..e];
                    let covered = slice.iter().filter(|x| x.1).count() as u64;
                    stratum(
                        format!("satt_decile_{}", k + 1),
                        slice[0].0.satt,
                        slice[slice.len() - 1].0.satt,
                        slice.len() as u64,
                        covered,
                    )
                })
                .collect()
        }
        Strata::ExactSatt => {
            items.sort_by(|a, b| a.0.satt.total_cmp(&b.0.satt));
            // exact strata first: (satt, reps, covered)
            let mut exact: Vec<(f64, u64, u64)> = Vec::new();
            for (o, c) in &items {
                match exact.last_mut() {
                    Some(last) if last.0 == o.satt => {
                        last.1 += 1;
                        last.2 += *c as u64;
                    }
                    _ => exact.push((o.satt, 1, *c as u64)),
                }
            }
            let mut out: Vec<StratumCoverage> = Vec::new();
            let mut run_start = 0;
            for i in 1..=exact.len() {
                let same = i < exact.len() && {
                    let (a, b) = (exact[run_start], exact[i]);
                    a.2 as u128 * b.1 as u128 == b.2 as u128 * a.1 as u128
                };
                if !same {
                    let run = &exact[run_start..i];
                    let reps: u64 = run.iter().map(|r| r.1).sum();
                    let covered: u64 = run.iter().map(|r| r.2).sum();
                    let (lo, hi) = (run[0].0, run[run.len() - 1].0);
                    out.push(StratumCoverage {
                        // every exact stratum in the run shares this coverage
                        mc_stderr: 0.0,
                        ..stratum(format!("satt in [{lo}, {hi}]"), lo, hi, reps, covered)
                    });
                    run_start = i;
                }
            }
            out
        }
    }
}

/// Runs `cfg.replications` replications of `spec` and aggregates them.
pub fn run(spec: &DgpSpec, cfg: &SimConfig) -> Result<SimReport> {
    spec.validate()?;
    if cfg.replications == 0 {
        return Err(Error::InvalidParameter(
            "replications must be at least 1".into(),
        ));
    }
    if matches!(cfg.method, Method::Ferman { .. }) && spec.kind != DgpKind::FermanScaleModel {
        return Err(Error::MethodIncompatible(format!(
            "the scale-model method needs covariates, which {:?} does not generate",
            spec.kind
        )));
    }
    if let Method::MaxGap { iota } = cfg.method {
        if !(iota > 0.0) {
            return Err(Error::InvalidParameter(
                "max-gap rule needs a positive iota".into(),
            ));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let outcomes: Vec<RepOutcome> = pool.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|i| one_replication(spec, cfg, i))
            .collect::<Result<Vec<_>>>()
    })?;

    let failures = outcomes.iter().filter(|o| o.failed).count() as u64;
    let r = outcomes.len() as u64 - failures;
    if r == 0 {
        return Err(Error::InvalidParameter(
            "the method failed on every replication".into(),
        ));
    }
    let covered = outcomes.iter().filter(|o| o.covered == Some(true)).count() as u64;
    let rejected = outcomes.iter().filter(|o| o.reject == Some(true)).count() as u64;
    let has_reject = outcomes.iter().any(|o| o.reject.is_some());
    let is_interval = cfg.method.is_interval();
    let empties = outcomes.iter().filter(|o| o.empty).count() as u64;
    let lengths: Vec<f64> = outcomes.iter().filter_map(|o| o.length).collect();
    let comp = |f: fn(&Decomposition) -> f64| -> Vec<f64> {
        outcomes.iter().map(|o| f(&o.decomposition)).collect()
    };
    let strata = cfg.strata.unwrap_or_else(|| spec.kind.default_strata());
    let quantile_like = matches!(cfg.method, Method::Quantile { .. } | Method::Ferman { .. });

    Ok(SimReport {
        dgp: spec.clone(),
        config: cfg.clone(),
        replications: outcomes.len() as u64,
        method_failures: failures,
        unconditional_coverage: is_interval.then(|| covered as f64 / r as f64),
        stratification: strata,
        conditional_coverage: conditional(&outcomes, strata),
        rejection_rate: has_reject.then(|| rejected as f64 / r as f64),
        empty_set_frequency: is_interval.then(|| empties as f64 / r as f64),
        mean_length: (!lengths.is_empty())
            .then(|| stable_sum(lengths.iter().copied()) / lengths.len() as f64),
        decomposition_summary: DecompositionSummary {
            heterogeneity: moments(&comp(|d| d.heterogeneity)),
            treated_noise: moments(&comp(|d| d.treated_noise)),
            control_noise: moments(&comp(|d| d.control_noise)),
            max_identity_error: outcomes
                .iter()
                .map(|o| o.identity_error)
                .fold(0.0, f64::max),
        },
        mc_stderr: if is_interval {
            binomial_se(covered, r)
        } else {
            binomial_se(rejected, r)
        },
        consistency: (quantile_like && cfg.null.is_some()).then(|| Consistency {
            pvalue_identity_violations: outcomes.iter().filter(|o| o.identity_violation).count()
                as u64,
            duality_violations: outcomes.iter().filter(|o| o.duality_violation).count() as u64,
        }),
    })
}

/// `(1 - gamma)` quantile of `max(|Z1|, |Z2|)` for a centered bivariate
/// normal with common variance `var` and covariance `cov`, from `mc` draws.
pub fn max_abs_normal_quantile(
    gamma: f64,
    var: f64,
    cov: f64,
    mc: usize,
    seed: u64,
) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidLevel(gamma));
    }
    if mc < 10_000 {
        return Err(Error::InvalidParameter("need at least 10000 draws".into()));
    }
    if !(var > 0.0) || cov.abs() > var {
        return Err(Error::InvalidParameter(
            "covariance matrix is not positive semidefinite".into(),
        ));
    }
    // Cholesky factor of [[var, cov], [cov, var]]
    let a = var.sqrt();
    let b = cov / a;
    let c = (var - b * b).max(0.0).sqrt();
    const CHUNK: usize = 1 << 16;
    let chunks = mc.div_ceil(CHUNK);
    let mut m: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut rng = rep_rng(seed, k as u64);
            let len = CHUNK.min(mc - k * CHUNK);
            (0..len)
                .map(move |_| {
                    let g1 = normal(&mut rng);
                    let g2 = normal(&mut rng);
                    (a * g1).abs().max((b * g1 + c * g2).abs())
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let rank = (((1.0 - gamma) * mc as f64).ceil() as usize).clamp(1, mc) - 1;
    let (_, q, _) = m.select_nth_unstable_by(rank, f64::total_cmp);
    Ok(*q)
}

/// Critical value of the max-gap rule: the `(1 - gamma)` quantile of
/// `max(|Z1|, |Z2|)` with `Var Z = 2`, `Cov(Z1, Z2) = 1`.
pub fn appendix_b_iota(gamma: f64, mc: usize, seed: u64) -> Result<f64> {
    max_abs_normal_quantile(gamma, 2.0, 1.0, mc, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind() {
        assert_eq!(
            DgpKind::parse("nope"),
            Err(Error::UnknownKind("nope".into()))
        );
        assert_eq!(DgpKind::parse("appendix-a").unwrap(), DgpKind::AppendixA);
    }

    #[test]
    fn appendix_a_draw() {
        let spec = DgpSpec::new(DgpKind::AppendixA, 3);
        for i in 0..20 {
            let d = draw(&spec, i).unwrap();
            assert_eq!(d.dataset.n1(), 1);
            assert_eq!(d.alphas, vec![d.y0[0]]);
            assert_eq!(d.satt, d.y0[0]);
            assert_eq!(d.dataset.treated_outcomes()[0], 2.0 * d.y0[0]);
        }
    }

    #[test]
    fn deterministic_hetero_satt_is_fixed() {
        let spec = DgpSpec::new(DgpKind::DeterministicHetero, 1);
        for i in 0..10 {
            let d = draw(&spec, i).unwrap();
            assert_eq!(d.satt, 2.0);
            assert_eq!(d.att, 2.0);
        }
    }

    #[test]
    fn weather_mixture_satt_values() {
        let spec = DgpSpec::new(DgpKind::WeatherMixture, 5);
        assert_eq!(spec.att(), 1.0);
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..200 {
            let d = draw(&spec, i).unwrap();
            assert!([0.0, 1.0, 2.0].contains(&d.satt));
            seen.insert(d.satt.to_bits());
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn draws_are_reproducible() {
        let spec = DgpSpec::new(DgpKind::FermanScaleModel, 8);
        assert_eq!(draw(&spec, 4).unwrap(), draw(&spec, 4).unwrap());
        assert_ne!(draw(&spec, 4).unwrap(), draw(&spec, 5).unwrap());
    }

    #[test]
    fn decomposition_examples() {
        let mut spec = DgpSpec::new(DgpKind::IidNormal, 2);
        spec.params.alpha = 1.5;
        let d = draw(&spec, 0).unwrap();
        let dec = error_decomposition(&d, 1.5);
        assert_eq!(dec.heterogeneity, 0.0);

        spec.params.sigma = 1e-300;
        spec.params.mu = 0.0;
        let d = draw(&spec, 0).unwrap();
        let dec = error_decomposition(&d, 1.5);
        assert!(dec.total().abs() < 1e-290);

        for kind in [
            DgpKind::WeatherMixture,
            DgpKind::AppendixB,
            DgpKind::FermanScaleModel,
        ] {
            let spec = DgpSpec::new(kind, 9);
            for i in 0..20 {
                let d = draw(&spec, i).unwrap();
                let dec = error_decomposition(&d, d.att);
                let target = diff_in_means(&d.dataset) - d.att;
                assert!((dec.total() - target).abs() <= 1e-10 * (1.0 + target.abs()));
            }
        }
    }

    #[test]
    fn params_parse() {
        let mut spec = DgpSpec::new(DgpKind::WeatherMixture, 0);
        spec.set_param("tau", "3").unwrap();
        spec.set_param("independent", "false").unwrap();
        spec.set_param("control_x", "1, 9").unwrap();
        assert_eq!(spec.params.tau, 3.0);
        assert!(!spec.params.independent);
        assert_eq!(spec.params.control_x, [1.0, 9.0]);
        assert!(spec.set_param("tau", "x").is_err());
        assert!(spec.set_param("bogus", "1").is_err());
        spec.set_param("pi", "2").unwrap();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn iota_limits() {
        let lo = appendix_b_iota(0.5, 20_000, 1).unwrap();
        let hi = appendix_b_iota(0.05, 20_000, 1).unwrap();
        let tiny = appendix_b_iota(0.999, 20_000, 1).unwrap();
        assert!(tiny < lo && lo < hi);
        assert!(tiny < 0.1);
        assert!(appendix_b_iota(0.05, 100, 1).is_err());
    }

    #[test]
    fn ferman_needs_covariates() {
        let spec = DgpSpec::new(DgpKind::IidNormal, 0);
        let cfg = SimConfig::new(Method::Ferman { budget: 100 }, Level::new(0.05).unwrap(), 5);
        assert!(matches!(
            run(&spec, &cfg),
            Err(Error::MethodIncompatible(_))
        ));
    }

    #[test]
    fn failed_fits_are_counted() {
        let mut spec = DgpSpec::new(DgpKind::FermanScaleModel, 0);
        spec.params.n0 = 100;
        let cfg = SimConfig::new(
            Method::Ferman { budget: 2000 },
            Level::new(0.05).unwrap(),
            200,
        );
        let rep = run(&spec, &cfg).unwrap();
        assert!(rep.method_failures > 0);
        assert_eq!(rep.replications, 200);
        let covered = rep
            .conditional_coverage
            .iter()
            .map(|s| s.replications)
            .sum::<u64>();
        assert_eq!(covered, 200 - rep.method_failures);
    }

    #[test]
    fn exact_satt_merges_equal_coverage() {
        let spec = DgpSpec::new(DgpKind::AppendixA, 0);
        let level = Level::new(0.05).unwrap();
        let method = Method::default_for(DgpKind::AppendixA, 1, level);
        let rep = run(&spec, &SimConfig::new(method, level, 2000)).unwrap();
        assert_eq!(rep.stratification, Strata::ExactSatt);
        assert!(rep.conditional_coverage.len() <= 3);
        for s in &rep.conditional_coverage {
            assert!(s.coverage == 0.0 || s.coverage == 1.0);
        }
    }
}
