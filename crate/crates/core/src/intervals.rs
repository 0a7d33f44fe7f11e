//! Prediction sets and realized-effect confidence sets.
//!
//! Three routes are provided: the closed-form quantile interval
//! ([`closed_form_interval`]), generic inversion of any family of decision
//! rules indexed by the hypothesized value ([`invert_tests`]), and membership
//! ([`contains`]), whose complement is a test of the sharp null.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{assumptions, Assumption, AssumptionSet, IntervalSet, Level};
use crate::quantile_models::{QuantileBand, QuantileKind, QuantileModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpretation {
    /// Covers the realized average effect over repeated samples.
    PredictionSet,
    /// Covers the realized average effect conditionally on the realized effects.
    RealizedEffectCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub set: IntervalSet,
    pub interpretation: Interpretation,
    pub level: Level,
    pub valid_under: AssumptionSet,
    pub method: String,
}

fn tags_for(interpretation: Interpretation, base: Assumption) -> AssumptionSet {
    match interpretation {
        Interpretation::PredictionSet => assumptions([base]),
        Interpretation::RealizedEffectCi => assumptions([base, Assumption::IndependentEffects]),
    }
}

/// `[alpha_hat - upper, alpha_hat - lower]` for an explicit quantile band.
pub fn closed_form_from_band(
    alpha_hat: f64,
    band: QuantileBand,
    level: Level,
    interpretation: Interpretation,
    base: Assumption,
    method: impl Into<String>,
) -> Result<IntervalReport> {
    let band = QuantileBand::new(band.lower, band.upper)?;
    Ok(IntervalReport {
        set: IntervalSet::single(alpha_hat - band.upper, alpha_hat - band.lower)?,
        interpretation,
        level,
        valid_under: tags_for(interpretation, base),
        method: method.into(),
    })
}

/// Closed-form quantile interval
/// `[alpha_hat - Q(1 - gamma/2), alpha_hat - Q(gamma/2)]`.
///
/// Both interpretations get the same numbers; only the recorded assumptions
/// differ. Scale-model quantiles require `gamma < 1/2`.
pub fn closed_form_interval(
    alpha_hat: f64,
    qm: &QuantileModel,
    level: Level,
    interpretation: Interpretation,
) -> Result<IntervalReport> {
    let (base, method) = match qm.kind {
        QuantileKind::FermanScale => {
            level.require_below_half()?;
            (Assumption::ScaleModel, "closed_form/ferman_scale")
        }
        QuantileKind::EmpiricalConvolution => {
            (Assumption::IidControls, "closed_form/empirical_convolution")
        }
        QuantileKind::Supplied => (Assumption::IidControls, "closed_form/supplied"),
    };
    closed_form_from_band(
        alpha_hat,
        qm.band(level)?,
        level,
        interpretation,
        base,
        method,
    )
}

/// 1 iff `c` lies in the reported set.
pub fn contains(report: &IntervalReport, c: f64) -> bool {
    report.set.contains(c)
}

/// Evenly spaced evaluation points `lo, ..., hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi || n < 2 {
            return Err(Error::EmptyGrid);
        }
        Ok(Self { lo, hi, n })
    }

    /// Grid of `n` points on `center +/- 10 * (Q(0.95) - Q(0.05))`.
    pub fn around(center: f64, qm: &QuantileModel, n: usize) -> Result<Self> {
        let spread = qm.quantile(0.95)? - qm.quantile(0.05)?;
        let half = if spread > 0.0 { 10.0 * spread } else { 1.0 };
        Self::new(center - half, center + half, n)
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * (i as f64 / (self.n - 1) as f64)
        }
    }

    pub fn default_refine_tol(&self) -> f64 {
        1e-9 * (self.hi - self.lo).max(1.0)
    }
}

const MAX_BISECTIONS: usize = 64;

/// Moves `accept` towards the decision boundary with `reject`, returning the
/// last accepted point once the bracket is narrower than `tol`.
fn refine<F: Fn(f64) -> bool>(phi: &F, mut accept: f64, mut reject: f64, tol: f64) -> Result<f64> {
    for _ in 0..MAX_BISECTIONS {
        if (accept - reject).abs() <= tol {
            return Ok(accept);
        }
        let mid = 0.5 * (accept + reject);
        if mid == accept || mid == reject {
            break;
        }
        if phi(mid) {
            reject = mid;
        } else {
            accept = mid;
        }
    }
    if (accept - reject).abs() <= tol {
        Ok(accept)
    } else {
        Err(Error::NonConvergentRefinement {
            lo: accept.min(reject),
            hi: accept.max(reject),
        })
    }
}

/// The set of hypothesized values the rule `phi` does not reject.
///
/// `phi(c)` returns `true` to reject. The rule is evaluated on the grid,
/// every maximal run of accepted grid points becomes a closed interval, and
/// each interior boundary is refined by bisection until the bracket is within
/// `refine_tol`. Reported endpoints are accepted points. Accepted regions
/// narrower than the grid step that contain no grid point are not seen, and
/// runs reaching the grid edge are truncated there.
pub fn invert_tests<F>(phi: F, grid: Grid, refine_tol: f64) -> Result<IntervalSet>
where
    F: Fn(f64) -> bool + Sync,
{
    let grid = Grid::new(grid.lo, grid.hi, grid.n)?;
    if !(refine_tol > 0.0) {
        return Err(Error::InvalidParameter(
            "refine_tol must be positive".into(),
        ));
    }
    let accepted: Vec<bool> = (0..grid.n)
        .into_par_iter()
        .map(|i| !phi(grid.point(i)))
        .collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < grid.n {
        if !accepted[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < grid.n && accepted[i + 1] {
            i += 1;
        }
        let end = i;
        let lo = if start == 0 {
            grid.lo
        } else {
            refine(&phi, grid.point(start), grid.point(start - 1), refine_tol)?
        };
        let hi = if end + 1 == grid.n {
            grid.hi
        } else {
            refine(&phi, grid.point(end), grid.point(end + 1), refine_tol)?
        };
        pieces.push([lo, hi]);
        i += 1;
    }
    IntervalSet::new(pieces)
}

/// Max-statistic rule for two treated units and one control:
/// reject `c` iff `max_i |y_i - y_c - c| > iota`.
///
/// Its inversion is `[max gap - iota, min gap + iota]` when the treated
/// outcomes are within `2 * iota` of each other and empty otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxGapRule {
    pub treated: [f64; 2],
    pub control: f64,
    pub iota: f64,
}

pub fn appendix_b_rule(y_t1: f64, y_t2: f64, y_c: f64, iota: f64) -> Result<MaxGapRule> {
    if !(iota > 0.0 && iota.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "iota must be positive, got {iota}"
        )));
    }
    Ok(MaxGapRule {
        treated: [y_t1, y_t2],
        control: y_c,
        iota,
    })
}

impl MaxGapRule {
    pub fn rejects(&self, c: f64) -> bool {
        self.treated
            .iter()
            .map(|y| (y - self.control - c).abs())
            .fold(f64::NEG_INFINITY, f64::max)
            > self.iota
    }

    pub fn region(&self) -> IntervalSet {
        let g1 = self.treated[0] - self.control;
        let g2 = self.treated[1] - self.control;
        let lo = g1.max(g2) - self.iota;
        let hi = g1.min(g2) + self.iota;
        if (self.treated[0] - self.treated[1]).abs() <= 2.0 * self.iota && lo <= hi {
            IntervalSet::single(lo, hi).unwrap_or_default()
        } else {
            IntervalSet::empty()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharp_tests::quantile_decision_band;
    use proptest::prelude::*;

    fn lvl(g: f64) -> Level {
        Level::new(g).unwrap()
    }

    fn symmetric_band() -> QuantileBand {
        QuantileBand::new(-1.96, 1.96).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let r = closed_form_from_band(
            0.0,
            symmetric_band(),
            lvl(0.05),
            Interpretation::PredictionSet,
            Assumption::IidControls,
            "t",
        )
        .unwrap();
        assert_eq!(r.set.intervals(), &[[-1.96, 1.96]]);

        let y = 0.7;
        let r = closed_form_from_band(
            y,
            symmetric_band(),
            lvl(0.05),
            Interpretation::PredictionSet,
            Assumption::IidControls,
            "t",
        )
        .unwrap();
        assert_eq!(r.set.intervals(), &[[y - 1.96, y + 1.96]]);

        let r = closed_form_from_band(
            2.0,
            QuantileBand {
                lower: -1.0,
                upper: 3.0,
            },
            lvl(0.1),
            Interpretation::RealizedEffectCi,
            Assumption::IidControls,
            "t",
        )
        .unwrap();
        assert_eq!(r.set.intervals(), &[[-1.0, 3.0]]);
        assert!(r.valid_under.contains(&Assumption::IndependentEffects));

        assert!(matches!(
            closed_form_from_band(
                0.0,
                QuantileBand {
                    lower: 1.0,
                    upper: -1.0
                },
                lvl(0.1),
                Interpretation::PredictionSet,
                Assumption::IidControls,
                "t"
            ),
            Err(Error::QuantileOrderViolation { .. })
        ));
    }

    #[test]
    fn interpretations_share_numbers() {
        let qm = QuantileModel::from_weighted(&[-2.0, -1.0, 0.5, 1.0, 3.0], &[1.0; 5]).unwrap();
        let p = closed_form_interval(1.0, &qm, lvl(0.2), Interpretation::PredictionSet).unwrap();
        let r = closed_form_interval(1.0, &qm, lvl(0.2), Interpretation::RealizedEffectCi).unwrap();
        assert_eq!(p.set, r.set);
        assert!(!p.valid_under.contains(&Assumption::IndependentEffects));
        assert!(r.valid_under.contains(&Assumption::IndependentEffects));
    }

    #[test]
    fn inversion_matches_closed_form() {
        let band = symmetric_band();
        let grid = Grid::new(-10.0, 10.0, 2001).unwrap();
        let tol = 1e-9;
        let set = invert_tests(|c| quantile_decision_band(0.0, c, band), grid, tol).unwrap();
        assert_eq!(set.intervals().len(), 1);
        let [lo, hi] = set.intervals()[0];
        assert!((lo + 1.96).abs() <= tol);
        assert!((hi - 1.96).abs() <= tol);
    }

    #[test]
    fn always_reject_is_empty() {
        let grid = Grid::new(-1.0, 1.0, 11).unwrap();
        assert!(invert_tests(|_| true, grid, 1e-9).unwrap().is_empty());
        assert_eq!(Grid::new(1.0, 1.0, 10), Err(Error::EmptyGrid));
        assert_eq!(Grid::new(0.0, 1.0, 1), Err(Error::EmptyGrid));
    }

    #[test]
    fn unreachable_tolerance_is_reported() {
        let grid = Grid::new(1e8, 1e8 + 10.0, 11).unwrap();
        let r = invert_tests(|c| c < 1e8 + 5.0, grid, 1e-12);
        assert!(matches!(r, Err(Error::NonConvergentRefinement { .. })));
    }

    #[test]
    fn disconnected_acceptance_regions() {
        let grid = Grid::new(-5.0, 5.0, 1001).unwrap();
        let phi = |c: f64| !((-3.0..=-1.0).contains(&c) || (1.0..=2.0).contains(&c));
        let set = invert_tests(phi, grid, 1e-10).unwrap();
        assert_eq!(set.intervals().len(), 2);
        let [a, b] = [set.intervals()[0], set.intervals()[1]];
        for (got, want) in [(a[0], -3.0), (a[1], -1.0), (b[0], 1.0), (b[1], 2.0)] {
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn contains_examples() {
        let r = closed_form_from_band(
            0.0,
            symmetric_band(),
            lvl(0.05),
            Interpretation::PredictionSet,
            Assumption::IidControls,
            "t",
        )
        .unwrap();
        assert!(contains(&r, 0.0));
        assert!(contains(&r, 1.96));
        assert!(!contains(&r, 1.97));
        let empty = IntervalReport {
            set: IntervalSet::empty(),
            ..r
        };
        assert!(!contains(&empty, 0.0));
    }

    #[test]
    fn max_gap_rule_examples() {
        let r = appendix_b_rule(1.0, 1.0, 0.0, 2.0).unwrap();
        assert_eq!(r.region().intervals(), &[[-1.0, 3.0]]);
        let r = appendix_b_rule(5.0, 0.0, 0.0, 2.0).unwrap();
        assert!(r.region().is_empty());
        let r = appendix_b_rule(2.0, 0.0, 0.0, 2.0).unwrap();
        assert_eq!(r.region().intervals(), &[[0.0, 2.0]]);
        assert!(appendix_b_rule(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn max_gap_rule_inversion_agrees() {
        for (y1, y2, yc) in [
            (1.0, 1.0, 0.0),
            (5.0, 0.0, 0.0),
            (2.0, 0.0, 0.0),
            (0.3, -2.1, 0.4),
        ] {
            let rule = appendix_b_rule(y1, y2, yc, 2.0).unwrap();
            let grid = Grid::new(-20.0, 20.0, 4001).unwrap();
            let inv = invert_tests(|c| rule.rejects(c), grid, 1e-9).unwrap();
            let closed = rule.region();
            assert_eq!(inv.intervals().len(), closed.intervals().len());
            for (a, b) in inv.intervals().iter().zip(closed.intervals()) {
                assert!((a[0] - b[0]).abs() <= 1e-9 && (a[1] - b[1]).abs() <= 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn duality_away_from_boundaries(
            alpha in -5f64..5.0,
            lower in -3f64..-0.1,
            upper in 0.1f64..3.0,
        ) {
            let band = QuantileBand::new(lower, upper).unwrap();
            let grid = Grid::new(alpha - 20.0, alpha + 20.0, 801).unwrap();
            let tol = grid.default_refine_tol();
            let set = invert_tests(|c| quantile_decision_band(alpha, c, band), grid, tol).unwrap();
            let report = IntervalReport {
                set: set.clone(),
                interpretation: Interpretation::PredictionSet,
                level: lvl(0.05),
                valid_under: AssumptionSet::new(),
                method: "inverted".into(),
            };
            for i in 0..grid.n {
                let c = grid.point(i);
                let near = set.intervals().iter().any(|[lo, hi]| (c - lo).abs() <= tol || (c - hi).abs() <= tol);
                if !near {
                    prop_assert_eq!(contains(&report, c), !quantile_decision_band(alpha, c, band));
                }
            }
        }

        #[test]
        fn nesting_and_equivariance(
            atoms in prop::collection::vec(-10f64..10.0, 5..40),
            alpha in -5f64..5.0,
            k in -5f64..5.0,
            g1 in 0.01f64..0.5,
            g2 in 0.01f64..0.5,
        ) {
            let w = vec![1.0; atoms.len()];
            let qm = QuantileModel::from_weighted(&atoms, &w).unwrap();
            let (small, large) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let wide = closed_form_interval(alpha, &qm, lvl(small), Interpretation::PredictionSet).unwrap();
            let narrow = closed_form_interval(alpha, &qm, lvl(large), Interpretation::PredictionSet).unwrap();
            let [wl, wh] = wide.set.intervals()[0];
            let [nl, nh] = narrow.set.intervals()[0];
            prop_assert!(wl <= nl && nh <= wh);
            let moved = closed_form_interval(alpha + k, &qm, lvl(small), Interpretation::PredictionSet).unwrap();
            let [ml, mh] = moved.set.intervals()[0];
            prop_assert!((ml - (wl + k)).abs() <= 1e-12 * (1.0 + ml.abs()));
            prop_assert!((mh - (wh + k)).abs() <= 1e-12 * (1.0 + mh.abs()));
        }
    }
}
