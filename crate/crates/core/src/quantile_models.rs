//! Estimated distributions of the average untreated error of the treated
//! group, `(1/N1) * sum(eps_i)`.
//!
//! Two estimators are provided:
//!
//! * [`empirical_convolution`]: under iid untreated outcomes, the law of the
//!   mean of `N1` independent draws from the empirical residual distribution.
//! * [`ferman_psi`]: under a location-scale model `Y(0) = mu + h(X) * eps`,
//!   control residuals are normalized by the fitted scale and rescaled with
//!   the treated units' own scales before averaging.
//!
//! Both enumerate all `N0^N1` ordered index tuples when that count fits in
//! the budget, and fall back to Monte Carlo sampling otherwise. Enumeration
//! and sampling are split into fixed-size chunks so that the result never
//! depends on how many worker threads run them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::mean;
use crate::model::{Dataset, Level};

const CHUNK: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileKind {
    EmpiricalConvolution,
    FermanScale,
    /// Built directly from caller-supplied atoms.
    Supplied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enumeration {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub residual_count: usize,
    pub enumeration: Enumeration,
    /// Number of tuples enumerated or drawn.
    pub tuples: u64,
    pub seed: u64,
    pub theta_hat: Option<[f64; 2]>,
}

/// A discrete distribution with sorted, distinct atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    pub kind: QuantileKind,
    pub n1: usize,
    pub meta: Provenance,
    atoms: Vec<f64>,
    weights: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

/// Lower and upper quantiles at `gamma/2` and `1 - gamma/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileBand {
    pub lower: f64,
    pub upper: f64,
}

impl QuantileBand {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower > upper || lower.is_nan() || upper.is_nan() {
            return Err(Error::QuantileOrderViolation { lower, upper });
        }
        Ok(Self { lower, upper })
    }
}

impl QuantileModel {
    fn from_counts(
        kind: QuantileKind,
        n1: usize,
        meta: Provenance,
        atoms: Vec<f64>,
        counts: Vec<u64>,
    ) -> Self {
        let total: u64 = counts.iter().sum();
        let t = total as f64;
        let weights = counts.iter().map(|&c| c as f64 / t).collect();
        let mut running = 0u64;
        let cumulative = counts
            .iter()
            .map(|&c| {
                running += c;
                running as f64 / t
            })
            .collect();
        Self {
            kind,
            n1,
            meta,
            atoms,
            weights,
            cumulative,
        }
    }

    /// Builds a model from arbitrary atoms and positive weights.
    ///
    /// Atoms are sorted, equal atoms merged and weights renormalized.
    pub fn from_weighted(atoms: &[f64], weights: &[f64]) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::LengthMismatch {
                expected: atoms.len(),
                got: weights.len(),
            });
        }
        if atoms.is_empty() {
            return Err(Error::TooFewResiduals { needed: 1, got: 0 });
        }
        if atoms.iter().any(|a| !a.is_finite())
            || weights.iter().any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(Error::InvalidParameter(
                "atoms must be finite and weights positive".into(),
            ));
        }
        let mut pairs: Vec<(f64, f64)> =
            atoms.iter().copied().zip(weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
        for (a, w) in pairs {
            match merged.last_mut() {
                Some(last) if last.0 == a => last.1 += w,
                _ => merged.push((a, w)),
            }
        }
        let total: f64 = merged.iter().map(|p| p.1).sum();
        let atoms: Vec<f64> = merged.iter().map(|p| p.0).collect();
        let weights: Vec<f64> = merged.iter().map(|p| p.1 / total).collect();
        let mut running = 0.0;
        let mut cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                running += w;
                running
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(Self {
            kind: QuantileKind::Supplied,
            n1: 1,
            meta: Provenance {
                residual_count: atoms.len(),
                enumeration: Enumeration::Exact,
                tuples: atoms.len() as u64,
                seed: 0,
                theta_hat: None,
            },
            atoms,
            weights,
            cumulative,
        })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Generalized inverse: the smallest atom whose cumulative weight is at
    /// least `u`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::UOutOfRange(u));
        }
        let idx = self.cumulative.partition_point(|&c| c < u);
        Ok(self.atoms[idx.min(self.atoms.len() - 1)])
    }

    /// Quantiles at `gamma/2` and `1 - gamma/2`.
    pub fn band(&self, level: Level) -> Result<QuantileBand> {
        let g = level.gamma();
        QuantileBand::new(self.quantile(g / 2.0)?, self.quantile(1.0 - g / 2.0)?)
    }

    /// Mass strictly below `v`.
    pub fn prob_below(&self, v: f64) -> f64 {
        let idx = self.atoms.partition_point(|&a| a < v);
        if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        }
    }

    /// Mass strictly above `v`.
    pub fn prob_above(&self, v: f64) -> f64 {
        let idx = self.atoms.partition_point(|&a| a <= v);
        if idx == 0 {
            1.0
        } else {
            1.0 - self.cumulative[idx - 1]
        }
    }
}

/// Sorted distinct values with their multiplicities.
fn tally(mut values: Vec<f64>) -> (Vec<f64>, Vec<u64>) {
    values.sort_unstable_by(f64::total_cmp);
    let mut atoms = Vec::new();
    let mut counts = Vec::new();
    for v in values {
        match atoms.last() {
            Some(&last) if last == v => *counts.last_mut().unwrap() += 1,
            _ => {
                atoms.push(v);
                counts.push(1u64);
            }
        }
    }
    (atoms, counts)
}

#[inline]
fn tuple_mean(values: &[f64], scales: Option<&[f64]>, idx: &[usize]) -> f64 {
    let mut s = 0.0;
    match scales {
        None => {
            for &j in idx {
                s += values[j];
            }
        }
        Some(h) => {
            for (i, &j) in idx.iter().enumerate() {
                s += h[i] * values[j];
            }
        }
    }
    s / idx.len() as f64
}

struct Convolution {
    atoms: Vec<f64>,
    counts: Vec<u64>,
    enumeration: Enumeration,
    tuples: u64,
}

/// Distribution of `(1/k) * sum_i scale_i * values[j_i]` over index tuples
/// `(j_1, ..., j_k)` with `k = n1` (or `scales.len()`).
fn convolve(
    values: &[f64],
    n1: usize,
    scales: Option<&[f64]>,
    budget: u64,
    seed: u64,
) -> Convolution {
    let base = values.len() as u64;
    let exact_count = u32::try_from(n1)
        .ok()
        .and_then(|k| base.checked_pow(k))
        .filter(|&m| m <= budget);
    match exact_count {
        Some(total) => {
            let total_us = total as usize;
            let chunks = total_us.div_ceil(CHUNK);
            let all: Vec<f64> = (0..chunks)
                .into_par_iter()
                .flat_map_iter(|c| {
                    let start = c * CHUNK;
                    let end = (start + CHUNK).min(total_us);
                    // odometer initialised at tuple number `start`
                    let mut idx = vec![0usize; n1];
                    let mut r = start;
                    for slot in idx.iter_mut().rev() {
                        *slot = r % values.len();
                        r /= values.len();
                    }
                    let mut out = Vec::with_capacity(end - start);
                    for _ in start..end {
                        out.push(tuple_mean(values, scales, &idx));
                        for slot in idx.iter_mut().rev() {
                            *slot += 1;
                            if *slot < values.len() {
                                break;
                            }
                            *slot = 0;
                        }
                    }
                    out.into_iter()
                })
                .collect();
            let (atoms, counts) = tally(all);
            Convolution {
                atoms,
                counts,
                enumeration: Enumeration::Exact,
                tuples: total,
            }
        }
        None => {
            let total = budget as usize;
            let chunks = total.div_ceil(CHUNK);
            let all: Vec<f64> = (0..chunks)
                .into_par_iter()
                .flat_map_iter(|c| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(c as u64);
                    let len = CHUNK.min(total - c * CHUNK);
                    let mut idx = vec![0usize; n1];
                    let mut out = Vec::with_capacity(len);
                    for _ in 0..len {
                        for slot in idx.iter_mut() {
                            *slot = rng.random_range(0..values.len());
                        }
                        out.push(tuple_mean(values, scales, &idx));
                    }
                    out.into_iter()
                })
                .collect();
            let (atoms, counts) = tally(all);
            Convolution {
                atoms,
                counts,
                enumeration: Enumeration::Sampled,
                tuples: budget,
            }
        }
    }
}

/// Law of the mean of `n1` independent draws from the empirical distribution
/// of `residuals`.
pub fn empirical_convolution(
    residuals: &[f64],
    n1: usize,
    budget: u64,
    seed: u64,
) -> Result<QuantileModel> {
    if residuals.len() < 2 {
        return Err(Error::TooFewResiduals {
            needed: 2,
            got: residuals.len(),
        });
    }
    if budget == 0 {
        return Err(Error::BudgetZero);
    }
    if n1 == 0 {
        return Err(Error::InvalidParameter("n1 must be positive".into()));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::InvalidParameter("residuals must be finite".into()));
    }
    let conv = convolve(residuals, n1, None, budget, seed);
    Ok(QuantileModel::from_counts(
        QuantileKind::EmpiricalConvolution,
        n1,
        Provenance {
            residual_count: residuals.len(),
            enumeration: conv.enumeration,
            tuples: conv.tuples,
            seed,
            theta_hat: None,
        },
        conv.atoms,
        conv.counts,
    ))
}

/// Fitted location-scale model `Y(0) = mu + h(x) * eps` with
/// `h(x)^2 = theta_1 + theta_2 / x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFit {
    pub theta_hat: [f64; 2],
    pub mu_hat: f64,
    /// Control residuals divided by their fitted scale.
    pub xi_hat: Vec<f64>,
    /// All control covariates coincide, so `theta_2` was pinned to zero.
    pub degenerate: bool,
}

impl ScaleFit {
    pub fn scale(&self, x: f64) -> f64 {
        (self.theta_hat[0] + self.theta_hat[1] / x).sqrt()
    }
}

fn check_variance(theta: [f64; 2], xs: &[f64]) -> Result<()> {
    for &x in xs {
        let v = theta[0] + theta[1] / x;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositiveVariance { x, variance: v });
        }
    }
    Ok(())
}

/// Fits the scale model on the control units.
///
/// The squared centered control outcomes are regressed on `(1, 1/x)` by
/// ordinary least squares. The fitted variance must be positive at every
/// observed covariate, treated units included.
pub fn ferman_fit(ds: &Dataset) -> Result<ScaleFit> {
    let xc = ds.control_covariates().ok_or(Error::MissingCovariates)?;
    let yc = ds.control_outcomes();
    if yc.len() < 3 {
        return Err(Error::TooFewControls {
            needed: 3,
            got: yc.len(),
        });
    }
    let mu = mean(&yc);
    let resid: Vec<f64> = yc.iter().map(|y| y - mu).collect();
    let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
    let z: Vec<f64> = xc.iter().map(|x| 1.0 / x).collect();
    let z_bar = mean(&z);
    let sq_bar = mean(&sq);
    let szz: f64 = z.iter().map(|v| (v - z_bar) * (v - z_bar)).sum();
    let szs: f64 = z
        .iter()
        .zip(&sq)
        .map(|(v, s)| (v - z_bar) * (s - sq_bar))
        .sum();
    let degenerate = xc.iter().all(|&x| x == xc[0]) || szz <= 0.0;
    let theta = if degenerate {
        [sq_bar, 0.0]
    } else {
        let t2 = szs / szz;
        [sq_bar - t2 * z_bar, t2]
    };
    check_variance(theta, ds.covariates().unwrap_or(&[]))?;
    let xi_hat = resid
        .iter()
        .zip(&xc)
        .map(|(r, &x)| r / (theta[0] + theta[1] / x).sqrt())
        .collect();
    Ok(ScaleFit {
        theta_hat: theta,
        mu_hat: mu,
        xi_hat,
        degenerate,
    })
}

/// Conditional law of the treated mean error under the fitted scale model.
pub fn ferman_psi(
    fit: &ScaleFit,
    treated_x: &[f64],
    budget: u64,
    seed: u64,
) -> Result<QuantileModel> {
    check_variance(fit.theta_hat, treated_x)?;
    let scales: Vec<f64> = treated_x.iter().map(|&x| fit.scale(x)).collect();
    let mut qm = ferman_psi_with_scales(&fit.xi_hat, &scales, budget, seed)?;
    qm.meta.theta_hat = Some(fit.theta_hat);
    Ok(qm)
}

/// Same as [`ferman_psi`] with the treated scales supplied directly, for
/// scale families other than `theta_1 + theta_2 / x`.
pub fn ferman_psi_with_scales(
    xi_hat: &[f64],
    treated_scales: &[f64],
    budget: u64,
    seed: u64,
) -> Result<QuantileModel> {
    if budget == 0 {
        return Err(Error::BudgetZero);
    }
    if treated_scales.is_empty() {
        return Err(Error::NoTreated);
    }
    if xi_hat.len() < 2 {
        return Err(Error::TooFewResiduals {
            needed: 2,
            got: xi_hat.len(),
        });
    }
    if treated_scales.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::InvalidParameter("scales must be positive".into()));
    }
    let conv = convolve(
        xi_hat,
        treated_scales.len(),
        Some(treated_scales),
        budget,
        seed,
    );
    Ok(QuantileModel::from_counts(
        QuantileKind::FermanScale,
        treated_scales.len(),
        Provenance {
            residual_count: xi_hat.len(),
            enumeration: conv.enumeration,
            tuples: conv.tuples,
            seed,
            theta_hat: None,
        },
        conv.atoms,
        conv.counts,
    ))
}
