//! Domain types shared by every procedure.
//!
//! A [`Dataset`] is an immutable cross-section of outcomes, binary treatment
//! flags and (optionally) one strictly positive covariate per unit. It can
//! only be obtained through validation, so downstream code never re-checks
//! the invariants.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unvalidated input row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub unit: String,
    pub y: f64,
    pub d: f64,
    pub x: Option<f64>,
}

impl RawRecord {
    pub fn new(unit: impl Into<String>, y: f64, d: f64, x: Option<f64>) -> Self {
        Self {
            unit: unit.into(),
            y,
            d,
            x,
        }
    }
}

/// A validated cross-section.
///
/// Stored column-wise. `N1 >= 1` and `N0 >= 1` always hold, outcomes are
/// finite, and covariates are either absent or present and positive for
/// every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    y: Vec<f64>,
    d: Vec<bool>,
    x: Option<Vec<f64>>,
    n1: usize,
}

/// Validates raw rows into a [`Dataset`].
pub fn validate(rows: &[RawRecord]) -> Result<Dataset> {
    let ids = rows.iter().map(|r| r.unit.clone()).collect();
    let y = rows.iter().map(|r| r.y).collect();
    let d = rows.iter().map(|r| r.d).collect();
    let with_x = rows.iter().filter(|r| r.x.is_some()).count();
    let x = if with_x == 0 {
        None
    } else if with_x == rows.len() {
        Some(rows.iter().map(|r| r.x.unwrap_or(f64::NAN)).collect())
    } else {
        return Err(Error::PartialCovariates);
    };
    Dataset::from_columns(ids, y, d, x)
}

impl Dataset {
    /// Builds a dataset from columns, applying the same checks as [`validate`].
    pub fn from_columns(
        ids: Vec<String>,
        y: Vec<f64>,
        d: Vec<f64>,
        x: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if ids.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: ids.len(),
            });
        }
        if d.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: d.len(),
            });
        }
        let mut flags = Vec::with_capacity(n);
        for (row, &v) in d.iter().enumerate() {
            flags.push(if v == 1.0 {
                true
            } else if v == 0.0 {
                false
            } else {
                return Err(Error::NonBinaryTreatment { row, value: v });
            });
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutcome { row });
        }
        if let Some(xs) = &x {
            if xs.len() != n {
                return Err(Error::PartialCovariates);
            }
            if let Some(row) = xs.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::NonPositiveCovariate {
                    row,
                    value: xs[row],
                });
            }
        }
        let n1 = flags.iter().filter(|&&t| t).count();
        if n1 == 0 {
            return Err(Error::NoTreated);
        }
        if n1 == n {
            return Err(Error::NoControls);
        }
        Ok(Self {
            ids,
            y,
            d: flags,
            x,
            n1,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.y.len() - self.n1
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn treatment(&self) -> &[bool] {
        &self.d
    }

    pub fn covariates(&self) -> Option<&[f64]> {
        self.x.as_deref()
    }

    pub fn has_covariates(&self) -> bool {
        self.x.is_some()
    }

    /// Outcomes of treated units, in dataset order.
    pub fn treated_outcomes(&self) -> Vec<f64> {
        self.select(&self.y, true)
    }

    /// Outcomes of control units, in dataset order.
    pub fn control_outcomes(&self) -> Vec<f64> {
        self.select(&self.y, false)
    }

    pub fn treated_covariates(&self) -> Option<Vec<f64>> {
        self.x.as_ref().map(|xs| self.select(xs, true))
    }

    pub fn control_covariates(&self) -> Option<Vec<f64>> {
        self.x.as_ref().map(|xs| self.select(xs, false))
    }

    fn select(&self, col: &[f64], treated: bool) -> Vec<f64> {
        col.iter()
            .zip(&self.d)
            .filter(|(_, &t)| t == treated)
            .map(|(&v, _)| v)
            .collect()
    }

    /// Rows that reproduce this dataset through [`validate`].
    pub fn to_rows(&self) -> Vec<RawRecord> {
        (0..self.len())
            .map(|i| RawRecord {
                unit: self.ids[i].clone(),
                y: self.y[i],
                d: if self.d[i] { 1.0 } else { 0.0 },
                x: self.x.as_ref().map(|xs| xs[i]),
            })
            .collect()
    }
}

/// Which null a hypothesized value refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisKind {
    /// Every treated effect equals `c` with probability one.
    Sharp,
    /// The expected effect on the treated equals `c`.
    Att,
    /// The realized in-sample average effect on the treated equals `c`.
    Realized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub c: f64,
    pub kind: HypothesisKind,
}

impl Hypothesis {
    pub fn new(c: f64, kind: HypothesisKind) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::NonFiniteNull(c));
        }
        Ok(Self { c, kind })
    }

    pub fn sharp(c: f64) -> Result<Self> {
        Self::new(c, HypothesisKind::Sharp)
    }

    pub fn realized(c: f64) -> Result<Self> {
        Self::new(c, HypothesisKind::Realized)
    }
}

/// Significance level `gamma`, strictly between 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Level(f64);

impl Level {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma < 1.0 {
            Ok(Self(gamma))
        } else {
            Err(Error::InvalidLevel(gamma))
        }
    }

    /// Converts a confidence level `1 - gamma`.
    pub fn from_confidence(confidence: f64) -> Result<Self> {
        if confidence > 0.0 && confidence < 1.0 {
            Self::new(1.0 - confidence)
        } else {
            Err(Error::InvalidLevel(confidence))
        }
    }

    pub fn gamma(self) -> f64 {
        self.0
    }

    pub fn confidence(self) -> f64 {
        1.0 - self.0
    }

    /// Scale-model intervals need `gamma < 1/2`.
    pub fn require_below_half(self) -> Result<Self> {
        if self.0 < 0.5 {
            Ok(self)
        } else {
            Err(Error::InvalidLevel(self.0))
        }
    }
}

/// Assumptions under which a reported decision or set is valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    /// Untreated outcomes are iid across units given the assignment.
    IidControls,
    /// Realized effects are independent of untreated outcomes.
    IndependentEffects,
    /// Untreated outcomes follow a location-scale model in an observed trait.
    ScaleModel,
    /// Treatment effects are constant and homogeneous.
    Homogeneity,
}

pub type AssumptionSet = BTreeSet<Assumption>;

pub(crate) fn assumptions<const K: usize>(tags: [Assumption; K]) -> AssumptionSet {
    tags.into_iter().collect()
}

/// Outcome of a hypothesis test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub valid_under: AssumptionSet,
    pub method: String,
    /// Set when validity only holds as the number of controls grows.
    pub asymptotic: bool,
}

/// A finite union of disjoint closed intervals, sorted ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntervalSet {
    intervals: Vec<[f64; 2]>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![[lo, hi]])
    }

    /// Sorts the pieces and merges any that overlap or touch.
    pub fn new(mut pieces: Vec<[f64; 2]>) -> Result<Self> {
        for &[lo, hi] in &pieces {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::MalformedInterval { lo, hi });
            }
        }
        pieces.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let mut merged: Vec<[f64; 2]> = Vec::with_capacity(pieces.len());
        for p in pieces {
            match merged.last_mut() {
                Some(last) if p[0] <= last[1] => last[1] = last[1].max(p[1]),
                _ => merged.push(p),
            }
        }
        Ok(Self { intervals: merged })
    }

    pub fn intervals(&self) -> &[[f64; 2]] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, c: f64) -> bool {
        self.intervals.iter().any(|&[lo, hi]| lo <= c && c <= hi)
    }

    /// Total length of the set.
    pub fn length(&self) -> f64 {
        self.intervals.iter().map(|[lo, hi]| hi - lo).sum()
    }

    pub fn shifted(&self, k: f64) -> Self {
        Self {
            intervals: self
                .intervals
                .iter()
                .map(|[lo, hi]| [lo + k, hi + k])
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(y: &[f64], d: &[f64]) -> Vec<RawRecord> {
        y.iter()
            .zip(d)
            .enumerate()
            .map(|(i, (&y, &d))| RawRecord::new(format!("u{i}"), y, d, None))
            .collect()
    }

    #[test]
    fn minimal_valid_input() {
        let ds = validate(&rows(&[1.0, 0.0, 2.0], &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(ds.n1(), 1);
        assert_eq!(ds.n0(), 2);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.treated_outcomes(), vec![1.0]);
        assert_eq!(ds.control_outcomes(), vec![0.0, 2.0]);
    }

    #[test]
    fn rejects_invariant_violations() {
        assert!(matches!(
            validate(&rows(&[1.0, 0.0], &[2.0, 0.0])),
            Err(Error::NonBinaryTreatment { row: 0, .. })
        ));
        assert_eq!(
            validate(&rows(&[1.0, 0.0], &[1.0, 1.0])),
            Err(Error::NoControls)
        );
        assert_eq!(
            validate(&rows(&[1.0, 0.0], &[0.0, 0.0])),
            Err(Error::NoTreated)
        );
        assert_eq!(
            validate(&rows(&[f64::NAN, 0.0], &[1.0, 0.0])),
            Err(Error::NonFiniteOutcome { row: 0 })
        );
    }

    #[test]
    fn covariate_checks() {
        let partial = vec![
            RawRecord::new("a", 1.0, 1.0, Some(2.0)),
            RawRecord::new("b", 0.0, 0.0, None),
        ];
        assert_eq!(validate(&partial), Err(Error::PartialCovariates));
        let negative = vec![
            RawRecord::new("a", 1.0, 1.0, Some(2.0)),
            RawRecord::new("b", 0.0, 0.0, Some(-1.0)),
        ];
        assert!(matches!(
            validate(&negative),
            Err(Error::NonPositiveCovariate { row: 1, .. })
        ));
        let zero = vec![
            RawRecord::new("a", 1.0, 1.0, Some(0.0)),
            RawRecord::new("b", 0.0, 0.0, Some(1.0)),
        ];
        assert!(validate(&zero).is_err());
    }

    #[test]
    fn validate_is_idempotent() {
        let ds = validate(&[
            RawRecord::new("a", 1.5, 1.0, Some(3.0)),
            RawRecord::new("b", -0.25, 0.0, Some(1.0)),
            RawRecord::new("c", 7.0, 0.0, Some(10.0)),
        ])
        .unwrap();
        assert_eq!(validate(&ds.to_rows()).unwrap(), ds);
    }

    #[test]
    fn level_bounds() {
        assert!(Level::new(0.0).is_err());
        assert!(Level::new(1.0).is_err());
        assert!(Level::new(0.6).unwrap().require_below_half().is_err());
        let l = Level::from_confidence(0.95).unwrap();
        assert!((l.gamma() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn interval_set_normalizes() {
        let s = IntervalSet::new(vec![[3.0, 4.0], [0.0, 1.0], [0.5, 2.0]]).unwrap();
        assert_eq!(s.intervals(), &[[0.0, 2.0], [3.0, 4.0]]);
        assert!(s.contains(2.0));
        assert!(!s.contains(2.5));
        assert_eq!(s.length(), 3.0);
        assert!(IntervalSet::new(vec![[1.0, 0.0]]).is_err());
        assert!(!IntervalSet::empty().contains(0.0));
    }
}
