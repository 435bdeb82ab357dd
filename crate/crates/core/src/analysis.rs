//! Numerical checks for the scaling derivation: loss decomposition, the
//! range-ordering remark, approximation biases, the brute-force optimum of the
//! scaling gain and the perturbation study.
//!
//! Losses are squared output errors summed over rows and averaged over output
//! channels; errors are the L1 analogue with the same normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{PtqError, Result};
use crate::gps::{self, ScalingVector};
use crate::quantcore;
use crate::sim::{self, output_l1, output_loss, QuantSimConfig};
use crate::tensorio::{matmul, Tensor};

pub const DEFAULT_GRID_POINTS: usize = 2000;
pub const RANGE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// `L(X^, W) - L(X, W)`.
    pub e_x: f64,
    /// `L(X^, W^) - L(X, W^)`, the activation loss seen under quantized weights.
    pub e_x_hat: f64,
    /// `L(X, W^) - L(X, W)`.
    pub e_w: f64,
    /// `L(X^, W^) - L(X, W)`.
    pub e_total: f64,
    /// |full quadratic - diagonal| for the weight quantization loss.
    pub cross_term_w: f64,
    /// |full quadratic - diagonal| for the activation quantization loss.
    pub cross_term_x: f64,
}

impl LossBreakdown {
    /// Slack left in `e_total <= e_x_hat + e_w`.
    pub fn bound_slack(&self) -> f64 {
        self.e_x_hat + self.e_w - self.e_total
    }

    /// `|e_x_hat - e_x| / e_x`.
    pub fn upper_bound_ratio(&self) -> f64 {
        ratio(self.e_x_hat - self.e_x, self.e_x)
    }
}

fn ratio(bias: f64, truth: f64) -> f64 {
    if truth == 0.0 {
        if bias == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        bias.abs() / truth.abs()
    }
}

fn check_layer(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.cols() != w.dims()[0] {
        return Err(PtqError::Shape(format!(
            "activation {:?} does not feed weight {:?}",
            x.dims(),
            w.dims()
        )));
    }
    Ok(x.flatten_rows())
}

fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(u, v)| u - v).collect();
    Tensor::new(a.dims().to_vec(), data).expect("same shape")
}

/// Full quadratic loss of a perturbation and its diagonal (no cross terms).
///
/// For the weight side the perturbation is `x_ri * dW_ij`; for the activation
/// side it is `dx_ri * W_ij`. Both are summed over rows and averaged over
/// output channels.
fn quadratic_and_diagonal(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    let m = b.cols();
    let full = matmul(a, b)?
        .data()
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        / m as f64;
    let mut a2 = vec![0f64; a.cols()];
    for r in 0..a.rows() {
        for (acc, &v) in a2.iter_mut().zip(a.row(r)) {
            *acc += (v as f64).powi(2);
        }
    }
    let b2: f64 = (0..b.rows())
        .map(|i| a2[i] * b.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
        .sum();
    Ok((full, b2 / m as f64))
}

/// Splits the joint quantization loss of `X W` into its activation and weight parts.
pub fn loss_decompose(x: &Tensor, w: &Tensor, cfg: &QuantSimConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let x = check_layer(x, w)?;
    let xq = cfg.quantize_activations(&x)?;
    let wq = cfg.quantize_weights(w)?;
    let y = matmul(&x, w)?;
    let e_x = output_loss(&y, &matmul(&xq, w)?)?;
    let e_w = output_loss(&y, &matmul(&x, &wq)?)?;
    let e_total = output_loss(&y, &matmul(&xq, &wq)?)?;
    let (full_w, diag_w) = quadratic_and_diagonal(&x, &sub(&wq, w))?;
    let (full_x, diag_x) = quadratic_and_diagonal(&sub(&xq, &x), w)?;
    Ok(LossBreakdown {
        e_x,
        e_x_hat: e_total - e_w,
        e_w,
        e_total,
        cross_term_w: (full_w - diag_w).abs(),
        cross_term_x: (full_x - diag_x).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Remark1Report {
    pub frac_s_monotone: f64,
    pub frac_range_preserved: f64,
    pub pair_count: u64,
}

/// Over all ordered channel pairs with `R_i > R_j`, the fraction with
/// `s_i > s_j` and the fraction with `R_i / s_i > R_j / s_j`.
pub fn remark1_check(x: &Tensor, s: &ScalingVector) -> Result<Remark1Report> {
    let n = x.cols();
    s.check_len(n)?;
    let ranges = channel_ranges(x);
    let s = s.as_slice();
    let (pairs, mono, kept) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = (0u64, 0u64, 0u64);
            for j in 0..n {
                if ranges[i] > ranges[j] {
                    acc.0 += 1;
                    acc.1 += u64::from(s[i] > s[j]);
                    acc.2 += u64::from(ranges[i] / s[i] as f64 > ranges[j] / s[j] as f64);
                }
            }
            acc
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let frac = |k: u64| if pairs == 0 { 1.0 } else { k as f64 / pairs as f64 };
    Ok(Remark1Report {
        frac_s_monotone: frac(mono),
        frac_range_preserved: frac(kept),
        pair_count: pairs,
    })
}

/// `max - min` of each channel (column).
pub fn channel_ranges(x: &Tensor) -> Vec<f64> {
    let n = x.cols();
    let mut lo = vec![f32::INFINITY; n];
    let mut hi = vec![f32::NEG_INFINITY; n];
    for row in x.data().chunks_exact(n) {
        for (i, &v) in row.iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    hi.iter().zip(&lo).map(|(&h, &l)| h as f64 - l as f64).collect()
}

/// Brute-force maximizer of the scaling gain on a log grid over
/// `[s1 / 100, 100 s1]`. Ties keep the smaller factor.
pub fn oracle_grid_search(s1: f64, a: f64, b: f64, grid_points: usize) -> Result<(f64, f64)> {
    if !(s1 > 0.0 && a > 0.0 && b > 0.0) || !(s1.is_finite() && a.is_finite() && b.is_finite()) {
        return Err(PtqError::Config(format!("grid search needs positive inputs, got s1={s1} A={a} B={b}")));
    }
    if grid_points < 100 {
        return Err(PtqError::Config(format!("grid needs at least 100 points, got {grid_points}")));
    }
    let step = 4.0 / (grid_points - 1) as f64;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for k in 0..grid_points {
        let s2 = s1 * 10f64.powf(-2.0 + step * k as f64);
        let g = gps::scaling_gain(s2, s1, a, b);
        if g > best.1 {
            best = (s2, g);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub baseline: f64,
    pub trials: Vec<f64>,
    pub amplitude: f64,
    pub seed: u64,
}

impl PerturbationReport {
    /// Fraction of trials strictly below the baseline error.
    pub fn fraction_better(&self) -> f64 {
        let k = self.trials.iter().filter(|&&e| e < self.baseline).count();
        k as f64 / self.trials.len() as f64
    }

    /// Percentile of the trial errors, interpolated like calibration percentiles.
    pub fn trial_percentile(&self, pct: f64) -> f64 {
        let mut sorted = self.trials.clone();
        sorted.sort_by(f64::total_cmp);
        quantcore::percentile(&sorted, pct)
    }
}

/// Draws `trials` scalings `s' = s (1 + u)`, `u ~ U(-amplitude, amplitude)`
/// per channel, and records the quantized output MSE of each. Non-positive
/// factors are redrawn.
pub fn perturbation_study(
    x: &Tensor,
    w: &Tensor,
    s: &ScalingVector,
    cfg: &QuantSimConfig,
    trials: usize,
    amplitude: f64,
    seed: u64,
) -> Result<PerturbationReport> {
    if trials == 0 {
        return Err(PtqError::Config("perturbation study needs at least one trial".into()));
    }
    if !(0.0..1.0).contains(&amplitude) {
        return Err(PtqError::Config(format!("amplitude must lie in [0, 1), got {amplitude}")));
    }
    let x = check_layer(x, w)?;
    s.check_len(x.cols())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<ScalingVector> = (0..trials)
        .map(|_| {
            let v = s
                .as_slice()
                .iter()
                .map(|&si| loop {
                    let u = if amplitude > 0.0 {
                        rng.random_range(-amplitude..amplitude)
                    } else {
                        0.0
                    };
                    let p = (si as f64 * (1.0 + u)) as f32;
                    if p > 0.0 && p.is_finite() {
                        break p;
                    }
                })
                .collect();
            ScalingVector::new(v)
        })
        .collect::<Result<_>>()?;
    let baseline = sim::simulate_linear(&x, w, Some(s), cfg)?.mse;
    let trials = draws
        .par_iter()
        .map(|sp| sim::simulate_linear(&x, w, Some(sp), cfg).map(|r| r.mse))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationReport {
        baseline,
        trials,
        amplitude,
        seed,
    })
}

/// A measured value, its approximation and the relative bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Approximation {
    pub real: f64,
    pub appro: f64,
    pub bias: f64,
    pub ratio: f64,
}

impl Approximation {
    fn new(real: f64, appro: f64) -> Self {
        let bias = (real - appro).abs();
        Self {
            real,
            appro,
            bias,
            ratio: ratio(bias, real),
        }
    }
}

/// Biases of the three approximations behind the scaling factors, for one
/// layer after applying `s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub layer: String,
    /// Weight loss with and without cross terms (MSE).
    pub hessian_cross_w: Approximation,
    /// Activation loss with and without cross terms (MSE).
    pub hessian_cross_x: Approximation,
    /// Activation error under quantized weights vs full-precision weights (L1).
    pub upper_bound: Approximation,
    /// Activation error after scaling vs the unscaled error divided by the
    /// anchor factor (L1).
    pub scaled_error: Approximation,
}

pub fn bias_report(
    x: &Tensor,
    w: &Tensor,
    cfg: &QuantSimConfig,
    s: &ScalingVector,
    layer: &str,
) -> Result<BiasReport> {
    cfg.validate()?;
    let x = check_layer(x, w)?;
    s.check_len(x.cols())?;
    let (xs, ws) = gps::equivalent_scale(&x, w, s)?;
    let xq = cfg.quantize_activations(&xs)?;
    let wq = cfg.quantize_weights(&ws)?;
    let dx = sub(&xq, &xs);
    let dw = sub(&wq, &ws);

    let (full_w, diag_w) = quadratic_and_diagonal(&xs, &dw)?;
    let (full_x, diag_x) = quadratic_and_diagonal(&dx, &ws)?;

    let e_x_hat = output_l1(&matmul(&xs, &wq)?, &matmul(&xq, &wq)?)?;
    let e_x = output_l1(&matmul(&xs, &ws)?, &matmul(&xq, &ws)?)?;

    // Unscaled error divided by the factor of the widest channel.
    let anchor = gps::anchor_channel(&channel_ranges(&x));
    let dx0 = sub(&cfg.quantize_activations(&x)?, &x);
    let l1 = |t: &Tensor| t.data().iter().map(|&v| (v as f64).abs()).sum::<f64>() / t.cols() as f64;
    let dx_real = l1(&dx);
    let dx_appro = l1(&dx0) / s.as_slice()[anchor] as f64;

    Ok(BiasReport {
        layer: layer.to_string(),
        hessian_cross_w: Approximation::new(full_w, diag_w),
        hessian_cross_x: Approximation::new(full_x, diag_x),
        upper_bound: Approximation::new(e_x_hat, e_x),
        scaled_error: Approximation::new(dx_real, dx_appro),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RangeCheck {
    /// Fraction of output channels within tolerance.
    pub fraction: f64,
    pub tolerance: f64,
    pub channels: usize,
}

fn column_range(w: &Tensor, j: usize) -> f64 {
    let (lo, hi) = (0..w.rows()).fold((0f64, 0f64), |(lo, hi), i| {
        let v = w.at2(i, j) as f64;
        (lo.min(v), hi.max(v))
    });
    hi - lo
}

/// Fraction of output channels whose quantization range after scaling,
/// `R_W'`, satisfies `|R_W' - R_W s_max| <= 5% R_W s_max`.
///
/// `R_W` is the column's range before scaling and `s_max` the largest factor
/// over the rows feeding the column (every row feeds every column of a dense
/// layer, so this is the global maximum). Ranges include zero, matching the
/// quantizer.
pub fn range_after_scaling_check(w: &Tensor, s: &ScalingVector) -> Result<RangeCheck> {
    if w.rank() != 2 {
        return Err(PtqError::Shape(format!("weight must be rank 2, got {:?}", w.dims())));
    }
    s.check_len(w.rows())?;
    let scaled = gps::scale_weights(w, s)?;
    let s_max = s.as_slice().iter().fold(0f32, |a, &v| a.max(v)) as f64;
    let m = w.cols();
    let within = (0..m)
        .filter(|&j| {
            let predicted = column_range(w, j) * s_max;
            (column_range(&scaled, j) - predicted).abs() <= RANGE_TOLERANCE * predicted
        })
        .count();
    Ok(RangeCheck {
        fraction: within as f64 / m as f64,
        tolerance: RANGE_TOLERANCE,
        channels: m,
    })
}

#[derive(Debug, Serialize)]
struct BiasRow<'a> {
    layer: &'a str,
    e_w_real: f64,
    e_w_appro: f64,
    e_w_bias: f64,
    e_w_ratio: f64,
    e_x_real: f64,
    e_x_appro: f64,
    e_x_bias: f64,
    e_x_ratio: f64,
    e_x_hat: f64,
    e_x_upper: f64,
    upper_bias: f64,
    upper_ratio: f64,
    dx_real: f64,
    dx_appro: f64,
    dx_bias: f64,
    dx_ratio: f64,
}

/// One CSV row per layer with every measured, approximated and bias value.
pub fn bias_reports_csv(reports: &[BiasReport]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in reports {
        wtr.serialize(BiasRow {
            layer: &r.layer,
            e_w_real: r.hessian_cross_w.real,
            e_w_appro: r.hessian_cross_w.appro,
            e_w_bias: r.hessian_cross_w.bias,
            e_w_ratio: r.hessian_cross_w.ratio,
            e_x_real: r.hessian_cross_x.real,
            e_x_appro: r.hessian_cross_x.appro,
            e_x_bias: r.hessian_cross_x.bias,
            e_x_ratio: r.hessian_cross_x.ratio,
            e_x_hat: r.upper_bound.real,
            e_x_upper: r.upper_bound.appro,
            upper_bias: r.upper_bound.bias,
            upper_ratio: r.upper_bound.ratio,
            dx_real: r.scaled_error.real,
            dx_appro: r.scaled_error.appro,
            dx_bias: r.scaled_error.bias,
            dx_ratio: r.scaled_error.ratio,
        })
        .map_err(csv_err)?;
    }
    finish_csv(wtr)
}

/// `trial,error` rows, with the unperturbed run as trial `baseline`.
pub fn perturbation_csv(report: &PerturbationReport) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["trial", "error"]).map_err(csv_err)?;
    wtr.write_record(["baseline".to_string(), report.baseline.to_string()])
        .map_err(csv_err)?;
    for (i, e) in report.trials.iter().enumerate() {
        wtr.write_record([i.to_string(), e.to_string()]).map_err(csv_err)?;
    }
    finish_csv(wtr)
}

fn csv_err(e: csv::Error) -> PtqError {
    PtqError::Config(format!("csv encoding failed: {e}"))
}

fn finish_csv(wtr: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = wtr
        .into_inner()
        .map_err(|e| PtqError::Config(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
