//! Gain-projected scaling.
//!
//! Per-in-channel factors `s` move quantization difficulty from activations
//! to weights through `Y = (X / s)(s * W)`. The channel with the widest
//! activation range is the anchor: its factor equalizes its activation and
//! weight ranges. Every other factor maximizes the scaling gain relative to
//! the anchor, which has the closed form
//!
//! ```text
//! s_i = s_k * sqrt(sum_j |dW_ij x_i|) / sqrt(sum_j |W_ij dx_i|)
//! ```
//!
//! with the sums taken over output channels and calibration rows.

use serde::Serialize;

use crate::error::{PtqError, Result};
use crate::quantcore::{self, Calibration, GroupAxis};
use crate::sim::QuantSimConfig;
use crate::tensorio::Tensor;

/// Denominator below which a channel is left unscaled.
pub const ZERO_GUARD: f64 = 1e-12;
/// Non-strict solves clip factors to `[CLIP_RATIO^-1, CLIP_RATIO] * s_k`.
pub const CLIP_RATIO: f64 = 1e3;
/// Lower bound applied to SmoothQuant factors.
pub const SMOOTHQUANT_FLOOR: f32 = 1e-5;

/// Positive per-in-channel scaling factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVector(Vec<f32>);

impl ScalingVector {
    pub fn new(s: Vec<f32>) -> Result<Self> {
        if s.is_empty() {
            return Err(PtqError::Shape("empty scaling vector".into()));
        }
        if let Some((i, v)) = s.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(PtqError::Numeric(format!(
                "scaling factor {i} must be positive and finite, got {v}"
            )));
        }
        Ok(Self(s))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.0.clone()).expect("non-empty")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 1 {
            return Err(PtqError::Shape(format!(
                "scaling vector must be rank-1, got {:?}",
                t.dims()
            )));
        }
        Self::new(t.data().to_vec())
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(PtqError::Shape(format!(
                "scaling vector has {} entries, layer has {n} in-channels",
                self.len()
            )));
        }
        Ok(())
    }
}

fn check_layer(x: &Tensor, w: &Tensor) -> Result<(usize, usize)> {
    if w.rank() != 2 || x.cols() != w.dims()[0] {
        return Err(PtqError::Shape(format!(
            "activation {:?} does not feed weight {:?}",
            x.dims(),
            w.dims()
        )));
    }
    Ok((w.dims()[0], w.dims()[1]))
}

/// Returns `(X / s, s * W)`.
pub fn equivalent_scale(x: &Tensor, w: &Tensor, s: &ScalingVector) -> Result<(Tensor, Tensor)> {
    let (n, m) = check_layer(x, w)?;
    s.check_len(n)?;
    Ok((scale_activations(x, s)?, scale_weights(w, s)?.reshape(vec![n, m])?))
}

/// `X / s` along the innermost axis.
pub fn scale_activations(x: &Tensor, s: &ScalingVector) -> Result<Tensor> {
    s.check_len(x.cols())?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(s.len()) {
        for (v, &f) in row.iter_mut().zip(s.as_slice()) {
            *v /= f;
        }
    }
    Ok(out)
}

/// `s * W`, row `i` of the weight multiplied by `s_i`.
pub fn scale_weights(w: &Tensor, s: &ScalingVector) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(PtqError::Shape(format!("weight must be rank-2, got {:?}", w.dims())));
    }
    s.check_len(w.dims()[0])?;
    let m = w.dims()[1];
    let mut out = w.clone();
    for (row, &f) in out.data_mut().chunks_exact_mut(m).zip(s.as_slice()) {
        for v in row {
            *v *= f;
        }
    }
    Ok(out)
}

/// Per-in-channel error statistics over a calibration batch.
///
/// Sums run over every calibration row (samples x tokens) and, for weight
/// terms, over output channels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelErrorStats {
    pub rows: usize,
    pub x_rms: Vec<f64>,
    pub dx_rms: Vec<f64>,
    pub w_abs: Vec<f64>,
    pub dw_abs: Vec<f64>,
    /// `sum_r sum_j |dW_ij x_ri|`
    pub dw_x_abs: Vec<f64>,
    /// `sum_r sum_j |W_ij dx_ri|`
    pub w_dx_abs: Vec<f64>,
    /// `sum_r sum_j W_ij^2 dx_ri^2`
    pub w2_dx2: Vec<f64>,
    /// `sum_r sum_j dW_ij^2 x_ri^2`
    pub dw2_x2: Vec<f64>,
    /// Activation range `max - min` of each channel.
    pub x_range: Vec<f64>,
}

/// Solver settings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GpsConfig {
    pub quant: QuantSimConfig,
    /// Disables the `[1e-3, 1e3] * s_k` clip.
    pub strict: bool,
}

impl GpsConfig {
    pub fn new(bits_a: u32, bits_w: u32, pct: (f64, f64)) -> Self {
        Self {
            quant: QuantSimConfig {
                bits_a,
                bits_w,
                act_calib: Calibration::Percentile { lo: pct.0, hi: pct.1 },
                weight_calib: Calibration::Mse,
            },
            strict: false,
        }
    }
}

/// Quantizes `X` (per-tensor) and `W` (per-out-channel) with the configured
/// calibrations and aggregates the resulting errors per in-channel.
pub fn gather_error_stats(x: &Tensor, w: &Tensor, cfg: &GpsConfig) -> Result<ChannelErrorStats> {
    let (n, m) = check_layer(x, w)?;
    let q = &cfg.quant;
    q.validate()?;
    let (x_hat, _) =
        quantcore::calibrate_and_fake_quant(x, GroupAxis::PerTensor, q.bits_a, q.act_calib)?;
    let (w_hat, _) =
        quantcore::calibrate_and_fake_quant(w, GroupAxis::PerOutChannel, q.bits_w, q.weight_calib)?;

    let rows = x.rows();
    let mut x_abs = vec![0f64; n];
    let mut x_sq = vec![0f64; n];
    let mut dx_abs = vec![0f64; n];
    let mut dx_sq = vec![0f64; n];
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for (xr, xq) in x.data().chunks_exact(n).zip(x_hat.data().chunks_exact(n)) {
        for i in 0..n {
            let v = xr[i] as f64;
            let d = v - xq[i] as f64;
            x_abs[i] += v.abs();
            x_sq[i] += v * v;
            dx_abs[i] += d.abs();
            dx_sq[i] += d * d;
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }

    let mut w_abs = vec![0f64; n];
    let mut w_sq = vec![0f64; n];
    let mut dw_abs = vec![0f64; n];
    let mut dw_sq = vec![0f64; n];
    for i in 0..n {
        for j in 0..m {
            let v = w.data()[i * m + j] as f64;
            let d = v - w_hat.data()[i * m + j] as f64;
            w_abs[i] += v.abs();
            w_sq[i] += v * v;
            dw_abs[i] += d.abs();
            dw_sq[i] += d * d;
        }
    }

    let rows_f = rows as f64;
    Ok(ChannelErrorStats {
        rows,
        x_rms: x_sq.iter().map(|s| (s / rows_f).sqrt()).collect(),
        dx_rms: dx_sq.iter().map(|s| (s / rows_f).sqrt()).collect(),
        dw_x_abs: (0..n).map(|i| dw_abs[i] * x_abs[i]).collect(),
        w_dx_abs: (0..n).map(|i| w_abs[i] * dx_abs[i]).collect(),
        w2_dx2: (0..n).map(|i| w_sq[i] * dx_sq[i]).collect(),
        dw2_x2: (0..n).map(|i| dw_sq[i] * x_sq[i]).collect(),
        x_range: lo.iter().zip(&hi).map(|(l, h)| h - l).collect(),
        w_abs,
        dw_abs,
    })
}

/// `sqrt(R_x / R_w)`: equalizes the scaled activation and weight ranges of
/// the anchor channel.
pub fn anchor_factor(r_x_max: f64, r_w_anchor: f64) -> Result<f64> {
    if !(r_x_max > 0.0 && r_w_anchor > 0.0) || !r_x_max.is_finite() || !r_w_anchor.is_finite() {
        return Err(PtqError::Numeric(format!(
            "anchor ranges must be positive, got R_x={r_x_max}, R_w={r_w_anchor}"
        )));
    }
    Ok((r_x_max / r_w_anchor).sqrt())
}

/// Scaling gain of a channel with factor `s2` against anchor factor `s1`:
///
/// `g = (A + B)/2 - (s2^2 / 2 s1^2) A - (s1^2 / 2 s2^2) B`
///
/// where `A = sum W^2 dx^2` and `B = sum dW^2 x^2`. Evaluated in the
/// factored form `(1 - r^2)(A - B / r^2) / 2`, `r = s2 / s1`, which is exact
/// at `r = 1` and avoids cancellation near the optimum.
pub fn scaling_gain(s2: f64, s1: f64, a: f64, b: f64) -> f64 {
    let r2 = (s2 / s1).powi(2);
    0.5 * (1.0 - r2) * (a - b / r2)
}

/// Maximizer of [`scaling_gain`]: `s1 * (B / A)^(1/4)`.
pub fn optimal_factor(s1: f64, a: f64, b: f64) -> f64 {
    s1 * (b / a).sqrt().sqrt()
}

/// Full solver output.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsSolution {
    pub scaling: ScalingVector,
    pub anchor: usize,
    pub anchor_factor: f64,
    pub stats: ChannelErrorStats,
}

/// Index of the widest channel; the first one wins ties.
pub fn anchor_channel(x_range: &[f64]) -> usize {
    x_range
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Value range `max - min` of weight row `i`.
pub fn weight_row_range(w: &Tensor, i: usize) -> f64 {
    let m = w.dims()[1];
    let row = &w.data()[i * m..(i + 1) * m];
    let (lo, hi) = row
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    hi as f64 - lo as f64
}

pub fn gps_solve(x: &Tensor, w: &Tensor, cfg: &GpsConfig) -> Result<ScalingVector> {
    Ok(gps_solve_detailed(x, w, cfg)?.scaling)
}

pub fn gps_solve_detailed(x: &Tensor, w: &Tensor, cfg: &GpsConfig) -> Result<GpsSolution> {
    let stats = gather_error_stats(x, w, cfg)?;
    let n = stats.x_range.len();
    let anchor = anchor_channel(&stats.x_range);
    let s_k = match anchor_factor(stats.x_range[anchor], weight_row_range(w, anchor)) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("anchor channel {anchor} is degenerate ({e}); using s_k = 1");
            1.0
        }
    };

    let mut s = Vec::with_capacity(n);
    for i in 0..n {
        let (num, den) = (stats.dw_x_abs[i], stats.w_dx_abs[i]);
        if num.is_nan() || den.is_nan() {
            return Err(PtqError::Numeric(format!("NaN error statistics on channel {i}")));
        }
        let f = if i == anchor {
            s_k
        } else if den < ZERO_GUARD || num < ZERO_GUARD {
            1.0
        } else {
            let f = s_k * num.sqrt() / den.sqrt();
            if cfg.strict {
                f
            } else {
                f.clamp(s_k / CLIP_RATIO, s_k * CLIP_RATIO)
            }
        };
        s.push(f as f32);
    }
    Ok(GpsSolution {
        scaling: ScalingVector::new(s)?,
        anchor,
        anchor_factor: s_k,
        stats,
    })
}

/// SmoothQuant factors `max|X_i|^alpha / max|W_i|^(1-alpha)`, floored at 1e-5.
///
/// Channels whose activation or weight row is identically zero keep `s = 1`.
pub fn smoothquant_baseline(x: &Tensor, w: &Tensor, alpha: f64) -> Result<ScalingVector> {
    let (n, m) = check_layer(x, w)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PtqError::Config(format!("smoothing alpha must lie in (0, 1), got {alpha}")));
    }
    let mut x_max = vec![0f64; n];
    for row in x.data().chunks_exact(n) {
        for (mx, &v) in x_max.iter_mut().zip(row) {
            *mx = mx.max((v as f64).abs());
        }
    }
    let s = (0..n)
        .map(|i| {
            let w_max = w.data()[i * m..(i + 1) * m]
                .iter()
                .fold(0f64, |a, &v| a.max((v as f64).abs()));
            if x_max[i] == 0.0 || w_max == 0.0 {
                return 1.0;
            }
            let f = (x_max[i].powf(alpha) / w_max.powf(1.0 - alpha)) as f32;
            f.max(SMOOTHQUANT_FLOOR)
        })
        .collect();
    ScalingVector::new(s)
}

/// Folds `1 / s` into a preceding per-channel affine (`gain * x + bias`),
/// so it emits `X / s` directly.
pub fn fuse_scaling(gain: &Tensor, bias: &Tensor, s: &ScalingVector) -> Result<(Tensor, Tensor)> {
    if gain.rank() != 1 || bias.rank() != 1 || gain.numel() != bias.numel() {
        return Err(PtqError::Shape(format!(
            "gain {:?} and bias {:?} must be equal-length vectors",
            gain.dims(),
            bias.dims()
        )));
    }
    s.check_len(gain.numel())?;
    let div = |t: &Tensor| {
        Tensor::from_vec(t.data().iter().zip(s.as_slice()).map(|(v, f)| v / f).collect())
    };
    Ok((div(gain)?, div(bias)?))
}

/// Inverse of [`fuse_scaling`].
pub fn unfuse_scaling(gain: &Tensor, bias: &Tensor, s: &ScalingVector) -> Result<(Tensor, Tensor)> {
    s.check_len(gain.numel())?;
    let mul = |t: &Tensor| {
        Tensor::from_vec(t.data().iter().zip(s.as_slice()).map(|(v, f)| v * f).collect())
    };
    Ok((mul(gain)?, mul(bias)?))
}
