//! Point estimators of the average effect on the treated and the residuals
//! that feed the tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Difference between the treated and control outcome means.
pub fn diff_in_means(ds: &Dataset) -> f64 {
    mean(&ds.treated_outcomes()) - mean(&ds.control_outcomes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    /// Every treated unit is imputed the control-group mean.
    ControlMean,
    /// Location of a location-scale model fitted on controls.
    FermanScale,
    /// Proxies supplied by the caller.
    External,
}

/// Imputed untreated outcomes for the treated units, one per treated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyModel {
    pub kind: ProxyKind,
    pub m_hat: Vec<f64>,
    pub mu_hat: Option<f64>,
}

impl ProxyModel {
    pub fn control_mean(ds: &Dataset) -> Self {
        let mu = mean(&ds.control_outcomes());
        Self {
            kind: ProxyKind::ControlMean,
            m_hat: vec![mu; ds.n1()],
            mu_hat: Some(mu),
        }
    }

    /// The scale model's location is the control mean as well; only the
    /// provenance differs.
    pub fn ferman_scale(ds: &Dataset) -> Self {
        Self {
            kind: ProxyKind::FermanScale,
            ..Self::control_mean(ds)
        }
    }

    pub fn external(m_hat: Vec<f64>) -> Result<Self> {
        if m_hat.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("proxies must be finite".into()));
        }
        Ok(Self {
            kind: ProxyKind::External,
            m_hat,
            mu_hat: None,
        })
    }
}

/// Average of treated outcomes minus their proxies.
///
/// When a common location `mu_hat` is available it is subtracted from the
/// treated mean directly, which makes the control-mean proxy reproduce
/// [`diff_in_means`] bit for bit.
pub fn proxy_effect(ds: &Dataset, pm: &ProxyModel) -> Result<f64> {
    if pm.m_hat.len() != ds.n1() {
        return Err(Error::LengthMismatch {
            expected: ds.n1(),
            got: pm.m_hat.len(),
        });
    }
    let treated = ds.treated_outcomes();
    Ok(match pm.mu_hat {
        Some(mu) => mean(&treated) - mu,
        None => mean(&treated) - mean(&pm.m_hat),
    })
}

/// Residuals around the control mean.
///
/// Without a null value, returns the `N0` control residuals in dataset order.
/// With `null_c`, appends the null-imposed treated residuals
/// `(y - c) - mu_hat`, giving `N` residuals (controls first).
pub fn control_residuals(ds: &Dataset, null_c: Option<f64>) -> Vec<f64> {
    let controls = ds.control_outcomes();
    let mu = mean(&controls);
    let mut out: Vec<f64> = controls.iter().map(|y| y - mu).collect();
    if let Some(c) = null_c {
        out.extend(ds.treated_outcomes().iter().map(|y| (y - c) - mu));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate, RawRecord};
    use proptest::prelude::*;

    fn ds(y: &[f64], d: &[f64]) -> Dataset {
        let rows: Vec<_> = y
            .iter()
            .zip(d)
            .enumerate()
            .map(|(i, (&y, &d))| RawRecord::new(i.to_string(), y, d, None))
            .collect();
        validate(&rows).unwrap()
    }

    #[test]
    fn diff_in_means_examples() {
        assert_eq!(diff_in_means(&ds(&[1.0, 0.0, 2.0], &[1.0, 0.0, 0.0])), 0.0);
        assert_eq!(diff_in_means(&ds(&[3.0, 1.0, 1.0], &[1.0, 0.0, 0.0])), 2.0);
        assert_eq!(
            diff_in_means(&ds(&[2.0, 4.0, 1.0, 3.0], &[1.0, 1.0, 0.0, 0.0])),
            1.0
        );
    }

    #[test]
    fn proxy_effect_examples() {
        let single = ds(&[3.0, 0.0], &[1.0, 0.0]);
        let pm = ProxyModel::external(vec![1.0]).unwrap();
        assert_eq!(proxy_effect(&single, &pm).unwrap(), 2.0);

        let two = ds(&[2.0, 4.0, 0.0], &[1.0, 1.0, 0.0]);
        let pm = ProxyModel::external(vec![1.5, 2.5]).unwrap();
        assert_eq!(proxy_effect(&two, &pm).unwrap(), 1.0);

        let bad = ProxyModel::external(vec![1.0]).unwrap();
        assert_eq!(
            proxy_effect(&two, &bad),
            Err(Error::LengthMismatch {
                expected: 2,
                got: 1
            })
        );
    }

    #[test]
    fn residual_examples() {
        assert_eq!(
            control_residuals(&ds(&[9.0, 1.0, 3.0], &[1.0, 0.0, 0.0]), None),
            vec![-1.0, 1.0]
        );
        assert_eq!(
            control_residuals(&ds(&[2.0, 2.0, 5.0], &[0.0, 0.0, 1.0]), Some(3.0)),
            vec![0.0, 0.0, 0.0]
        );
        assert_eq!(
            control_residuals(&ds(&[4.0, 0.0], &[1.0, 0.0]), None),
            vec![0.0]
        );
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (1usize..5, 1usize..12).prop_flat_map(|(n1, n0)| {
            prop::collection::vec(-1e3f64..1e3, n1 + n0).prop_map(move |y| {
                let d: Vec<f64> = (0..n1 + n0).map(|i| (i < n1) as u8 as f64).collect();
                ds(&y, &d)
            })
        })
    }

    proptest! {
        #[test]
        fn control_mean_proxy_equals_diff_in_means(ds in arb_dataset()) {
            let pm = ProxyModel::control_mean(&ds);
            prop_assert_eq!(proxy_effect(&ds, &pm).unwrap(), diff_in_means(&ds));
        }

        #[test]
        fn translation_and_effect_equivariance(ds in arb_dataset(), k in -50f64..50.0) {
            let base = diff_in_means(&ds);
            let all: Vec<f64> = ds.outcomes().iter().map(|y| y + k).collect();
            let treated: Vec<f64> = ds
                .outcomes()
                .iter()
                .zip(ds.treatment())
                .map(|(y, &t)| if t { y + k } else { *y })
                .collect();
            let d: Vec<f64> = ds.treatment().iter().map(|&t| t as u8 as f64).collect();
            let shifted_all = Dataset::from_columns(ds.ids().to_vec(), all, d.clone(), None).unwrap();
            let shifted_treated = Dataset::from_columns(ds.ids().to_vec(), treated, d, None).unwrap();
            let tol = 1e-9 * (1.0 + base.abs() + k.abs());
            prop_assert!((diff_in_means(&shifted_all) - base).abs() < tol);
            prop_assert!((diff_in_means(&shifted_treated) - (base + k)).abs() < tol);
        }

        #[test]
        fn control_residuals_sum_to_zero(ds in arb_dataset()) {
            let r = control_residuals(&ds, None);
            prop_assert_eq!(r.len(), ds.n0());
            let scale: f64 = ds.control_outcomes().iter().map(|y| y.abs()).sum::<f64>().max(1.0);
            prop_assert!(r.iter().sum::<f64>().abs() <= 1e-12 * scale);
        }
    }
}
