//! Bounded sigmoid accuracy-vs-compute curves and compute-multiplier tables.
//!
//! A curve maps pre-training FLOPs `x` to accuracy
//!
//! ```text
//! y = ymin + (ymax - ymin) / (1 + exp(-a * (log10(x) - m)))
//! ```
//!
//! with fixed asymptotes. The compute multiplier of a method is the factor by
//! which the base model's budget would have to grow for the curve to reach the
//! method's accuracy.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScalingError {
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("flops must be positive and finite, got {0}")]
    NonPositiveFlops(f64),
    #[error("accuracy {value} is not above the lower bound ymin = {bound}")]
    BelowLowerBound { value: f64, bound: f64 },
    #[error("accuracy {value} is not below the upper bound ymax = {bound}")]
    AboveUpperBound { value: f64, bound: f64 },
    #[error("need at least 3 points to fit, got {0}")]
    TooFewPoints(usize),
    #[error("fit did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<ScalingError>,
    },
    #[error("reading curve data: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, ScalingError>;

/// Bounded sigmoid over log10(FLOPs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidCurve {
    pub ymin: f64,
    pub ymax: f64,
    pub slope: f64,
    /// log10 of the FLOPs at which the curve sits halfway between its bounds.
    pub midpoint: f64,
}

impl SigmoidCurve {
    pub fn new(ymin: f64, ymax: f64, slope: f64, midpoint: f64) -> Result<Self> {
        if !(ymin.is_finite() && ymax.is_finite() && slope.is_finite() && midpoint.is_finite()) {
            return Err(ScalingError::InvalidCurve("non-finite parameter".into()));
        }
        if ymin >= ymax {
            return Err(ScalingError::InvalidCurve(format!(
                "ymin {ymin} must be below ymax {ymax}"
            )));
        }
        if slope <= 0.0 {
            return Err(ScalingError::InvalidCurve(format!(
                "slope must be positive, got {slope}"
            )));
        }
        Ok(Self {
            ymin,
            ymax,
            slope,
            midpoint,
        })
    }

    /// Curve from the `range` / `max` form used when publishing fits
    /// (`ymin = max - range`).
    pub fn from_range(ymin: f64, range: f64, slope: f64, midpoint: f64) -> Result<Self> {
        Self::new(ymin, ymin + range, slope, midpoint)
    }

    pub fn range(&self) -> f64 {
        self.ymax - self.ymin
    }

    /// Accuracy at log10(FLOPs) = `log_flops`.
    pub fn eval_log10(&self, log_flops: f64) -> f64 {
        self.ymin + self.range() / (1.0 + (-self.slope * (log_flops - self.midpoint)).exp())
    }

    pub fn eval(&self, flops: f64) -> Result<f64> {
        check_flops(flops)?;
        Ok(self.eval_log10(flops.log10()))
    }

    /// log10 of the FLOPs at which the curve reaches `accuracy`.
    pub fn invert_log10(&self, accuracy: f64) -> Result<f64> {
        self.check_accuracy(accuracy)?;
        let ratio = self.range() / (accuracy - self.ymin) - 1.0;
        Ok(self.midpoint - ratio.ln() / self.slope)
    }

    pub fn invert(&self, accuracy: f64) -> Result<f64> {
        Ok(10f64.powf(self.invert_log10(accuracy)?))
    }

    fn check_accuracy(&self, accuracy: f64) -> Result<()> {
        if accuracy.is_nan() || accuracy <= self.ymin {
            return Err(ScalingError::BelowLowerBound {
                value: accuracy,
                bound: self.ymin,
            });
        }
        if accuracy >= self.ymax {
            return Err(ScalingError::AboveUpperBound {
                value: accuracy,
                bound: self.ymax,
            });
        }
        Ok(())
    }
}

fn check_flops(flops: f64) -> Result<()> {
    if flops > 0.0 && flops.is_finite() {
        Ok(())
    } else {
        Err(ScalingError::NonPositiveFlops(flops))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub flops: f64,
    pub accuracy: f64,
}

impl CurvePoint {
    pub fn new(flops: f64, accuracy: f64) -> Self {
        Self { flops, accuracy }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop once the relative step on both parameters drops below this.
    pub step_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            step_tolerance: 1e-13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit {
    pub curve: SigmoidCurve,
    /// Sum of squared accuracy residuals at the solution.
    pub residual_ss: f64,
    pub iterations: usize,
}

pub fn fit_sigmoid(points: &[CurvePoint], ymin: f64, ymax: f64) -> Result<SigmoidFit> {
    fit_sigmoid_with(points, ymin, ymax, FitOptions::default())
}

/// Least-squares fit of slope and midpoint with fixed bounds, using a damped
/// Gauss-Newton (Levenberg-Marquardt) iteration started from slope 1 and the
/// median log10(FLOPs).
pub fn fit_sigmoid_with(
    points: &[CurvePoint],
    ymin: f64,
    ymax: f64,
    opts: FitOptions,
) -> Result<SigmoidFit> {
    if points.len() < 3 {
        return Err(ScalingError::TooFewPoints(points.len()));
    }
    // Validates the bounds.
    SigmoidCurve::new(ymin, ymax, 1.0, 0.0)?;
    let range = ymax - ymin;
    let mut xs = Vec::with_capacity(points.len());
    for (row, p) in points.iter().enumerate() {
        let wrap = |e| ScalingError::Row {
            row,
            source: Box::new(e),
        };
        check_flops(p.flops).map_err(wrap)?;
        if p.accuracy.is_nan() || p.accuracy <= ymin {
            return Err(wrap(ScalingError::BelowLowerBound {
                value: p.accuracy,
                bound: ymin,
            }));
        }
        if p.accuracy >= ymax {
            return Err(wrap(ScalingError::AboveUpperBound {
                value: p.accuracy,
                bound: ymax,
            }));
        }
        xs.push(p.flops.log10());
    }

    let sse = |a: f64, m: f64| -> f64 {
        points
            .iter()
            .zip(&xs)
            .map(|(p, &u)| {
                let r = ymin + range / (1.0 + (-a * (u - m)).exp()) - p.accuracy;
                r * r
            })
            .sum()
    };

    let mut a = 1.0;
    let mut m = median(&xs);
    let mut cost = sse(a, m);
    let mut damping = 1e-3;

    for iter in 1..=opts.max_iterations {
        // Normal equations J^T J and J^T r for residual r = f - y.
        let (mut jaa, mut jam, mut jmm, mut ga, mut gm) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (p, &u) in points.iter().zip(&xs) {
            let s = 1.0 / (1.0 + (-a * (u - m)).exp());
            let ds = range * s * (1.0 - s);
            let da = ds * (u - m);
            let dm = -ds * a;
            let r = ymin + range * s - p.accuracy;
            jaa += da * da;
            jam += da * dm;
            jmm += dm * dm;
            ga += da * r;
            gm += dm * r;
        }

        loop {
            let haa = jaa + damping * jaa.max(1e-12);
            let hmm = jmm + damping * jmm.max(1e-12);
            let det = haa * hmm - jam * jam;
            if det == 0.0 || !det.is_finite() {
                damping *= 10.0;
                if damping > 1e16 {
                    return Err(ScalingError::NonConvergence(iter));
                }
                continue;
            }
            let step_a = -(hmm * ga - jam * gm) / det;
            let step_m = -(haa * gm - jam * ga) / det;
            let (na, nm) = (a + step_a, m + step_m);
            let new_cost = if na > 0.0 { sse(na, nm) } else { f64::INFINITY };
            if new_cost <= cost {
                let converged = step_a.abs() <= opts.step_tolerance * a.abs().max(1.0)
                    && step_m.abs() <= opts.step_tolerance * m.abs().max(1.0);
                a = na;
                m = nm;
                cost = new_cost;
                damping = (damping / 10.0).max(1e-15);
                if converged {
                    return Ok(SigmoidFit {
                        curve: SigmoidCurve::new(ymin, ymax, a, m)?,
                        residual_ss: cost,
                        iterations: iter,
                    });
                }
                break;
            }
            damping *= 10.0;
            if damping > 1e16 {
                // No downhill step exists at machine precision: a stationary point.
                return Ok(SigmoidFit {
                    curve: SigmoidCurve::new(ymin, ymax, a, m)?,
                    residual_ss: cost,
                    iterations: iter,
                });
            }
        }
    }
    Err(ScalingError::NonConvergence(opts.max_iterations))
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiplierInput {
    pub budget: f64,
    pub base_acc: f64,
    pub method_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiplierRow {
    pub budget: f64,
    pub base_acc: f64,
    pub method_acc: f64,
    /// FLOPs at which the base curve reaches `method_acc`.
    pub matched_compute: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierReport {
    pub curve: SigmoidCurve,
    pub rows: Vec<MultiplierRow>,
    pub mean: f64,
    pub geometric_mean: f64,
    pub median: f64,
}

pub fn multiplier_table(curve: &SigmoidCurve, rows: &[MultiplierInput]) -> Result<MultiplierReport> {
    let mut out = Vec::with_capacity(rows.len());
    for (row, input) in rows.iter().enumerate() {
        let wrap = |e| ScalingError::Row {
            row,
            source: Box::new(e),
        };
        check_flops(input.budget).map_err(wrap)?;
        let matched = curve.invert(input.method_acc).map_err(wrap)?;
        out.push(MultiplierRow {
            budget: input.budget,
            base_acc: input.base_acc,
            method_acc: input.method_acc,
            matched_compute: matched,
            ratio: matched / input.budget,
        });
    }
    let ratios: Vec<f64> = out.iter().map(|r| r.ratio).collect();
    let (mean, geometric_mean, median) = if ratios.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let n = ratios.len() as f64;
        (
            ratios.iter().sum::<f64>() / n,
            (ratios.iter().map(|r| r.ln()).sum::<f64>() / n).exp(),
            median(&ratios),
        )
    };
    Ok(MultiplierReport {
        curve: *curve,
        rows: out,
        mean,
        geometric_mean,
        median,
    })
}

/// Compute each method would save relative to the baseline, as the ratio of
/// matched budgets on `curve`. The baseline itself is reported first with
/// ratio 1.
pub fn method_efficiency(
    curve: &SigmoidCurve,
    baseline_acc: f64,
    method_accs: &[(String, f64)],
) -> Result<Vec<(String, f64)>> {
    let base_log = curve.invert_log10(baseline_acc)?;
    let mut out = vec![("baseline".to_string(), 1.0)];
    for (row, (name, acc)) in method_accs.iter().enumerate() {
        let log = curve.invert_log10(*acc).map_err(|e| ScalingError::Row {
            row,
            source: Box::new(e),
        })?;
        out.push((name.clone(), 10f64.powf(log - base_log)));
    }
    Ok(out)
}

/// Lower/upper accuracy bounds per category, e.g. MMLU subject groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub ymin: f64,
    pub ymax: f64,
}

pub type BoundsTable = BTreeMap<String, Bounds>;

/// The MMLU category maxima used for the published category fits, with the
/// four-choice random baseline as the floor.
pub fn mmlu_category_bounds() -> BoundsTable {
    serde_json::from_str(MMLU_BOUNDS_JSON).expect("bundled bounds table parses")
}

pub const MMLU_BOUNDS_JSON: &str = include_str!("../data/mmlu_category_bounds.json");

pub fn load_bounds(path: &Path) -> Result<BoundsTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScalingError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ScalingError::Data(format!("{}: {e}", path.display())))
}

/// One row of a curve CSV: `flops,accuracy[,label]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub flops: f64,
    pub accuracy: f64,
    #[serde(default)]
    pub label: Option<String>,
}

pub fn read_points_csv<R: Read>(reader: R) -> Result<Vec<LabeledPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| ScalingError::Data(format!("csv record {}: {e}", i + 1))))
        .collect()
}

/// Multiplier rows keyed by method label.
pub type MethodRows = BTreeMap<String, Vec<MultiplierInput>>;

/// Split labeled points into the baseline curve points and per-label method
/// rows matched to a baseline point at the same budget.
pub fn split_labeled(
    points: &[LabeledPoint],
    baseline_label: &str,
) -> Result<(Vec<CurvePoint>, MethodRows)> {
    let is_base = |p: &LabeledPoint| p.label.as_deref().is_none_or(|l| l == baseline_label);
    let base: Vec<CurvePoint> = points
        .iter()
        .filter(|p| is_base(p))
        .map(|p| CurvePoint::new(p.flops, p.accuracy))
        .collect();
    let mut methods: BTreeMap<String, Vec<MultiplierInput>> = BTreeMap::new();
    for p in points.iter().filter(|p| !is_base(p)) {
        let label = p.label.clone().unwrap_or_default();
        let base_acc = base
            .iter()
            .find(|b| b.flops == p.flops)
            .map(|b| b.accuracy)
            .ok_or_else(|| {
                ScalingError::Data(format!(
                    "no {baseline_label} point at budget {:e} for label {label}",
                    p.flops
                ))
            })?;
        methods.entry(label).or_default().push(MultiplierInput {
            budget: p.flops,
            base_acc,
            method_acc: p.accuracy,
        });
    }
    Ok((base, methods))
}

/// Evenly spaced samples of the curve over `[lo, hi]` in log10(FLOPs), for
/// plotting.
pub fn sample_curve(curve: &SigmoidCurve, lo: f64, hi: f64, samples: usize) -> Vec<(f64, f64)> {
    let samples = samples.max(2);
    (0..samples)
        .map(|i| {
            let u = lo + (hi - lo) * i as f64 / (samples - 1) as f64;
            (u, curve.eval_log10(u))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mmlu_all() -> SigmoidCurve {
        SigmoidCurve::new(0.25, 0.9407, 0.7968, 2.48e22f64.log10()).unwrap()
    }

    #[test]
    fn midpoint_is_halfway() {
        let c = mmlu_all();
        let y = c.eval(2.48e22).unwrap();
        assert!((y - 0.59535).abs() < 1e-12);
        assert!((c.invert(y).unwrap() / 2.48e22 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smallest_budget_sits_near_its_observation() {
        // The fit leaves a residual at the smallest model (observed 0.4873).
        let y = mmlu_all().eval(5.64e21).unwrap();
        assert!((y - 0.508_744_755).abs() < 1e-8, "{y}");
        assert!((y - 0.4873).abs() < 0.025);
    }

    #[test]
    fn approaches_upper_asymptote() {
        let c = mmlu_all();
        let y = c.eval(1e40).unwrap();
        assert!(y < 0.9407 && y > 0.9406);
    }

    #[test]
    fn invert_matches_published_row() {
        let x = mmlu_all().invert(0.6063).unwrap();
        assert!((x / 2.98e22 - 1.0).abs() < 0.01, "{x:e}");
    }

    #[test]
    fn invert_rejects_out_of_range() {
        let c = mmlu_all();
        assert_eq!(
            c.invert(0.95),
            Err(ScalingError::AboveUpperBound {
                value: 0.95,
                bound: 0.9407
            })
        );
        assert!(matches!(c.invert(0.25), Err(ScalingError::BelowLowerBound { .. })));
        assert!(matches!(c.eval(0.0), Err(ScalingError::NonPositiveFlops(_))));
        assert!(matches!(c.eval(-1.0), Err(ScalingError::NonPositiveFlops(_))));
    }

    #[test]
    fn curve_validation() {
        assert!(SigmoidCurve::new(0.5, 0.5, 1.0, 22.0).is_err());
        assert!(SigmoidCurve::new(0.25, 0.9, 0.0, 22.0).is_err());
        assert!(SigmoidCurve::new(0.25, 0.9, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn fit_needs_three_points() {
        let pts = [CurvePoint::new(1e21, 0.4), CurvePoint::new(1e22, 0.5)];
        assert_eq!(fit_sigmoid(&pts, 0.25, 0.9), Err(ScalingError::TooFewPoints(2)));
    }

    #[test]
    fn fit_rejects_points_on_bounds() {
        let pts = [
            CurvePoint::new(1e21, 0.25),
            CurvePoint::new(1e22, 0.5),
            CurvePoint::new(1e23, 0.6),
        ];
        let err = fit_sigmoid(&pts, 0.25, 0.9).unwrap_err();
        assert!(matches!(err, ScalingError::Row { row: 0, .. }), "{err}");
    }

    #[test]
    fn fit_tolerates_contradictory_duplicates() {
        let pts = [
            CurvePoint::new(1e21, 0.40),
            CurvePoint::new(1e21, 0.46),
            CurvePoint::new(1e22, 0.55),
            CurvePoint::new(1e23, 0.70),
        ];
        let fit = fit_sigmoid(&pts, 0.25, 0.9).unwrap();
        assert!(fit.residual_ss > 0.0);
        assert!(fit.curve.slope > 0.0);
    }

    #[test]
    fn efficiency_of_baseline_is_one() {
        let r = method_efficiency(&mmlu_all(), 0.716, &[("same".into(), 0.716)]).unwrap();
        assert_eq!(r[0], ("baseline".into(), 1.0));
        assert!((r[1].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bundled_bounds() {
        let b = mmlu_category_bounds();
        assert_eq!(b["STEM"].ymax, 0.9544);
        assert_eq!(b["All"].ymax, 0.9407);
        assert!(b.values().all(|b| b.ymin == 0.25));
    }

    #[test]
    fn split_matches_budgets() {
        let csv = "flops,accuracy,label\n1e21,0.4,baseline\n1e22,0.5,baseline\n1e22,0.6,retrieval\n";
        let pts = read_points_csv(csv.as_bytes()).unwrap();
        let (base, methods) = split_labeled(&pts, "baseline").unwrap();
        assert_eq!(base.len(), 2);
        assert_eq!(methods["retrieval"][0].base_acc, 0.5);
        let bad = "flops,accuracy,label\n1e21,0.4,baseline\n1e23,0.6,retrieval\n";
        let pts = read_points_csv(bad.as_bytes()).unwrap();
        assert!(split_labeled(&pts, "baseline").is_err());
    }
}
