//! Evaluation metrics over frame sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::scalar::Scalar;

/// Standard thresholds on a 0-255 rescaled field.
pub const DEFAULT_CSI_THRESHOLDS: [f64; 6] = [219.0, 181.0, 160.0, 133.0, 74.0, 16.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiThresholds(Vec<f64>);

impl Default for CsiThresholds {
    fn default() -> Self {
        Self(DEFAULT_CSI_THRESHOLDS.to_vec())
    }
}

impl CsiThresholds {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one CSI threshold is required".into(),
            ));
        }
        if values.windows(2).any(|w| w[0] <= w[1]) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "CSI thresholds must be strictly decreasing: {values:?}"
            )));
        }
        Ok(Self(values))
    }

    /// Parses a comma-separated list.
    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!("bad threshold `{}`: {e}", s.trim()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn check_frames<T: Scalar>(
    op: &'static str,
    pred: &[ScalarField<T>],
    truth: &[ScalarField<T>],
) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            op,
            format!(
                "{} predicted frames vs {} true frames",
                pred.len(),
                truth.len()
            ),
        ));
    }
    for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.dims() != t.dims() {
            return Err(Error::shape(
                op,
                format!("frame {k}: {:?} vs {:?}", p.dims(), t.dims()),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub mae: f64,
    pub per_frame_mse: Vec<f64>,
}

/// MSE and MAE over `[N][T]` sequences of frames, plus the MSE of each
/// lead time averaged over sequences.
pub fn error_metrics<T: Scalar>(
    pred: &[Vec<ScalarField<T>>],
    truth: &[Vec<ScalarField<T>>],
) -> Result<ErrorMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "error_metrics",
            format!("{} vs {} sequences", pred.len(), truth.len()),
        ));
    }
    let horizon = pred.first().map_or(0, Vec::len);
    let mut frame_se = vec![0.0; horizon];
    let mut frame_cells = vec![0usize; horizon];
    let (mut se, mut ae, mut cells) = (0.0, 0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        check_frames("error_metrics", p, t)?;
        if p.len() != horizon {
            return Err(Error::shape(
                "error_metrics",
                format!("sequence lengths {} vs {horizon}", p.len()),
            ));
        }
        for (k, (pf, tf)) in p.iter().zip(t).enumerate() {
            for (&a, &b) in pf.values().iter().zip(tf.values()) {
                let d = (a - b).as_f64();
                se += d * d;
                ae += d.abs();
                frame_se[k] += d * d;
            }
            cells += pf.len();
            frame_cells[k] += pf.len();
        }
    }
    let div = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(ErrorMetrics {
        mse: div(se, cells),
        mae: div(ae, cells),
        per_frame_mse: frame_se
            .iter()
            .zip(&frame_cells)
            .map(|(&s, &n)| div(s, n))
            .collect(),
    })
}

/// Pearson correlation over all elements of two equally shaped series.
pub fn correlation<T: Scalar>(pred: &[ScalarField<T>], truth: &[ScalarField<T>]) -> Result<f64> {
    check_frames("correlation", pred, truth)?;
    let xs = || {
        pred.iter()
            .flat_map(|f| f.values().iter().map(|v| v.as_f64()))
    };
    let ys = || {
        truth
            .iter()
            .flat_map(|f| f.values().iter().map(|v| v.as_f64()))
    };
    let n = xs().count() as f64;
    if n == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    let mx = xs().sum::<f64>() / n;
    let my = ys().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs().zip(ys()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    if sxx == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Contingency {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
}

impl Contingency {
    pub fn csi(&self) -> f64 {
        let denom = self.hits + self.misses + self.false_alarms;
        if denom == 0 {
            0.0
        } else {
            self.hits as f64 / denom as f64
        }
    }
}

/// Event counts at threshold `tau`: an event is a value `>= tau`.
pub fn contingency<T: Scalar>(
    pred: &[ScalarField<T>],
    truth: &[ScalarField<T>],
    tau: f64,
) -> Result<Contingency> {
    check_frames("csi", pred, truth)?;
    let mut c = Contingency::default();
    for (p, t) in pred.iter().zip(truth) {
        for (&a, &b) in p.values().iter().zip(t.values()) {
            match (a.as_f64() >= tau, b.as_f64() >= tau) {
                (true, true) => c.hits += 1,
                (false, true) => c.misses += 1,
                (true, false) => c.false_alarms += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

/// Critical success index; 0 when neither field has an event.
pub fn csi<T: Scalar>(pred: &[ScalarField<T>], truth: &[ScalarField<T>], tau: f64) -> Result<f64> {
    Ok(contingency(pred, truth, tau)?.csi())
}

/// Unweighted mean of [`csi`] over the thresholds.
pub fn csi_mean<T: Scalar>(
    pred: &[ScalarField<T>],
    truth: &[ScalarField<T>],
    thresholds: &CsiThresholds,
) -> Result<f64> {
    let mut sum = 0.0;
    for &tau in thresholds.values() {
        sum += csi(pred, truth, tau)?;
    }
    Ok(sum / thresholds.values().len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Least-squares fit against the whole first reference frame.
    InitialField,
    /// Ratio at a single reference cell `(frame, row, column)`.
    SinglePoint {
        frame: usize,
        row: usize,
        col: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub alpha: f64,
    /// MSE of `estimate / alpha` against the reference.
    pub calibrated_mse: f64,
}

/// Recovers the unknown scale `alpha` in `estimate ≈ alpha * reference`.
pub fn calibrate_alpha<T: Scalar>(
    estimate: &[ScalarField<T>],
    reference: &[ScalarField<T>],
    mode: CalibrationMode,
) -> Result<Calibration> {
    check_frames("calibrate_alpha", estimate, reference)?;
    if reference.is_empty() {
        return Err(Error::ZeroReference);
    }
    let alpha = match mode {
        CalibrationMode::InitialField => {
            let (e, r) = (&estimate[0], &reference[0]);
            let (mut er, mut rr) = (0.0, 0.0);
            for (&a, &b) in e.values().iter().zip(r.values()) {
                er += a.as_f64() * b.as_f64();
                rr += b.as_f64() * b.as_f64();
            }
            if rr == 0.0 {
                return Err(Error::ZeroReference);
            }
            er / rr
        }
        CalibrationMode::SinglePoint { frame, row, col } => {
            let r = reference
                .get(frame)
                .filter(|f| row < f.height() && col < f.width())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "calibration point ({frame}, {row}, {col}) out of range"
                    ))
                })?;
            let u = r.get(row, col).as_f64();
            if u == 0.0 {
                return Err(Error::ZeroReference);
            }
            estimate[frame].get(row, col).as_f64() / u
        }
    };
    if alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::Numerical(format!(
            "calibration produced alpha = {alpha}"
        )));
    }
    let (mut se, mut n) = (0.0, 0usize);
    for (e, r) in estimate.iter().zip(reference) {
        for (&a, &b) in e.values().iter().zip(r.values()) {
            let d = a.as_f64() / alpha - b.as_f64();
            se += d * d;
            n += 1;
        }
    }
    Ok(Calibration {
        alpha,
        calibrated_mse: se / n.max(1) as f64,
    })
}

/// Persistence forecast: the last observed frame repeated `horizon` times.
pub fn persistence<T: Scalar>(last: &ScalarField<T>, horizon: usize) -> Vec<ScalarField<T>> {
    vec![last.clone(); horizon]
}

/// Maps values linearly from `[lo, hi]` to `[0, 255]`.
pub fn rescale_255<T: Scalar>(
    frames: &[ScalarField<T>],
    lo: f64,
    hi: f64,
) -> Vec<ScalarField<f64>> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    frames
        .iter()
        .map(|f| f.cast::<f64>().map(|v| (v - lo) / span * 255.0))
        .collect()
}
