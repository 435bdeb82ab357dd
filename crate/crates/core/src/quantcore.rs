//! Uniform asymmetric quantization and range calibration.
//!
//! A value `x` maps to `clamp(round(x / delta) + z, 0, 2^b - 1)` and back to
//! `delta * (q - z)`. Rounding is half-away-from-zero (`f64::round`). Every
//! calibrated range is widened to contain zero so that `z` lands inside the
//! integer lattice and `0.0` is represented exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::tensorio::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Default activation percentiles.
pub const DEFAULT_PCT_LO: f64 = 0.1;
pub const DEFAULT_PCT_HI: f64 = 99.9;

/// Shrink factors searched by MSE calibration: 0.50, 0.52, ..., 1.00.
pub fn mse_alpha_grid() -> impl DoubleEndedIterator<Item = f64> {
    (0..=25).map(|k| (50 + 2 * k) as f64 / 100.0)
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(PtqError::Config(format!(
            "bit-width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )));
    }
    Ok(())
}

/// How elements of a tensor are grouped under one set of parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    PerTensor,
    /// One group per column of a rank-2 `[in x out]` weight.
    PerOutChannel,
    /// One group per token position. For `[T x n]` that is one group per
    /// row; for `[S x T x n]` position `t` is pooled across samples.
    PerToken,
}

impl GroupAxis {
    pub fn group_count(self, dims: &[usize]) -> Result<usize> {
        match self {
            GroupAxis::PerTensor => Ok(1),
            GroupAxis::PerOutChannel => {
                if dims.len() != 2 {
                    return Err(PtqError::Shape(format!(
                        "per-out-channel grouping needs a rank-2 weight, got {dims:?}"
                    )));
                }
                Ok(dims[1])
            }
            GroupAxis::PerToken => match dims.len() {
                2 => Ok(dims[0]),
                3 => Ok(dims[1]),
                _ => Err(PtqError::Shape(format!(
                    "per-token grouping needs a token axis, got {dims:?}"
                ))),
            },
        }
    }

    /// Group index of every element, in storage order.
    pub fn assignments(self, dims: &[usize]) -> Result<Vec<usize>> {
        self.group_count(dims)?;
        let numel: usize = dims.iter().product();
        let cols = *dims.last().unwrap();
        Ok(match self {
            GroupAxis::PerTensor => vec![0; numel],
            GroupAxis::PerOutChannel => (0..numel).map(|i| i % cols).collect(),
            GroupAxis::PerToken => {
                let tokens = if dims.len() == 2 { dims[0] } else { dims[1] };
                (0..numel).map(|i| (i / cols) % tokens).collect()
            }
        })
    }

    /// Gathers each group's values.
    pub fn gather(self, t: &Tensor) -> Result<Vec<Vec<f32>>> {
        let count = self.group_count(t.dims())?;
        let mut groups = vec![Vec::new(); count];
        for (g, &v) in self.assignments(t.dims())?.into_iter().zip(t.data()) {
            groups[g].push(v);
        }
        Ok(groups)
    }
}

/// Parameters of one quantization group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub delta: f64,
    pub zero_point: u32,
    pub bits: u32,
    pub range_down: f64,
    pub range_up: f64,
}

impl QuantParams {
    /// Builds parameters covering `[lo, hi]` (widened to include zero).
    ///
    /// An empty range falls back to `delta = 2^(1-b)`, `z = 2^(b-1)`, which
    /// reproduces an all-zero group exactly.
    pub fn from_range(lo: f64, hi: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if !lo.is_finite() || !hi.is_finite() {
            return Err(PtqError::NonFinite {
                context: Some("quantization range".into()),
            });
        }
        if lo > hi {
            return Err(PtqError::Numeric(format!("inverted range [{lo}, {hi}]")));
        }
        let levels = levels(bits);
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        if hi - lo <= f32::MIN_POSITIVE as f64 {
            let delta = 2f64.powi(1 - bits as i32);
            let zero_point = 1u32 << (bits - 1);
            return Ok(Self {
                delta,
                zero_point,
                bits,
                range_down: -(zero_point as f64) * delta,
                range_up: (levels - zero_point) as f64 * delta,
            });
        }
        let delta = (hi - lo) / levels as f64;
        let zero_point = (-lo / delta).round().clamp(0.0, levels as f64) as u32;
        Ok(Self {
            delta,
            zero_point,
            bits,
            range_down: lo,
            range_up: hi,
        })
    }

    pub fn levels(&self) -> u32 {
        levels(self.bits)
    }

    pub fn quantize_value(&self, x: f32) -> u32 {
        let q = (x as f64 / self.delta).round() + self.zero_point as f64;
        q.clamp(0.0, self.levels() as f64) as u32
    }

    pub fn dequantize_value(&self, q: u32) -> f32 {
        (self.delta * (q as f64 - self.zero_point as f64)) as f32
    }

    pub fn fake_quant_value(&self, x: f32) -> f32 {
        self.dequantize_value(self.quantize_value(x))
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(PtqError::Numeric(format!("invalid delta {}", self.delta)));
        }
        if self.zero_point > self.levels() {
            return Err(PtqError::Numeric(format!(
                "zero point {} outside 0..={}",
                self.zero_point,
                self.levels()
            )));
        }
        if !(self.range_down.is_finite() && self.range_up.is_finite())
            || self.range_up <= self.range_down
        {
            return Err(PtqError::Numeric(format!(
                "invalid range [{}, {}]",
                self.range_down, self.range_up
            )));
        }
        Ok(())
    }
}

fn levels(bits: u32) -> u32 {
    (1u32 << bits) - 1
}

/// Range calibration strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Calibration {
    MinMax,
    Percentile { lo: f64, hi: f64 },
    Mse,
}

impl Calibration {
    pub fn default_percentile() -> Self {
        Calibration::Percentile {
            lo: DEFAULT_PCT_LO,
            hi: DEFAULT_PCT_HI,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Calibration::Percentile { lo, hi } = *self {
            if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
                return Err(PtqError::Config(format!(
                    "percentiles must satisfy 0 <= lo < hi <= 100, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Parameters for a single group of values.
    pub fn fit(&self, values: &[f32], bits: u32) -> Result<QuantParams> {
        check_bits(bits)?;
        if values.is_empty() {
            return Err(PtqError::Shape("cannot calibrate an empty group".into()));
        }
        match *self {
            Calibration::MinMax => {
                let (lo, hi) = min_max(values);
                QuantParams::from_range(lo, hi, bits)
            }
            Calibration::Percentile { lo, hi } => {
                self.validate()?;
                let sorted = sorted_f64(values);
                QuantParams::from_range(percentile(&sorted, lo), percentile(&sorted, hi), bits)
            }
            Calibration::Mse => Ok(mse_search(values, bits)?.params),
        }
    }
}

fn min_max(values: &[f32]) -> (f64, f64) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    (lo as f64, hi as f64)
}

fn sorted_f64(values: &[f32]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted
}

/// Percentile of ascending data, interpolating linearly between order
/// statistics at position `pct / 100 * (len - 1)`.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let last = sorted.len() - 1;
    let pos = (pct / 100.0).clamp(0.0, 1.0) * last as f64;
    let below = pos.floor() as usize;
    let frac = pos - below as f64;
    if below >= last || frac == 0.0 {
        return sorted[below.min(last)];
    }
    sorted[below] + frac * (sorted[below + 1] - sorted[below])
}

/// Outcome of the MSE range search for one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseChoice {
    pub params: QuantParams,
    pub alpha: f64,
    pub mse: f64,
}

/// Mean squared fake-quantization error of `values` under `params`.
pub fn fake_quant_mse(values: &[f32], params: &QuantParams) -> f64 {
    let sum: f64 = values
        .iter()
        .map(|&v| {
            let d = v as f64 - params.fake_quant_value(v) as f64;
            d * d
        })
        .sum();
    sum / values.len() as f64
}

/// Shrinks `[min, max]` by each grid factor and keeps the lowest-error
/// range. Ties go to the larger factor.
pub fn mse_search(values: &[f32], bits: u32) -> Result<MseChoice> {
    if values.is_empty() {
        return Err(PtqError::Shape("cannot calibrate an empty group".into()));
    }
    let (lo, hi) = min_max(values);
    let mut best: Option<MseChoice> = None;
    for alpha in mse_alpha_grid().rev() {
        let params = QuantParams::from_range(alpha * lo, alpha * hi, bits)?;
        let mse = fake_quant_mse(values, &params);
        if best.is_none_or(|b| mse < b.mse) {
            best = Some(MseChoice { params, alpha, mse });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Calibrates every group of `t` under `axis`.
pub fn calibrate(
    t: &Tensor,
    axis: GroupAxis,
    bits: u32,
    method: Calibration,
) -> Result<Vec<QuantParams>> {
    check_bits(bits)?;
    method.validate()?;
    axis.gather(t)?
        .par_iter()
        .map(|g| method.fit(g, bits))
        .collect()
}

pub fn calibrate_minmax(t: &Tensor, axis: GroupAxis, bits: u32) -> Result<Vec<QuantParams>> {
    calibrate(t, axis, bits, Calibration::MinMax)
}

pub fn calibrate_percentile(
    t: &Tensor,
    axis: GroupAxis,
    bits: u32,
    lo_pct: f64,
    hi_pct: f64,
) -> Result<Vec<QuantParams>> {
    calibrate(t, axis, bits, Calibration::Percentile { lo: lo_pct, hi: hi_pct })
}

pub fn calibrate_mse(t: &Tensor, axis: GroupAxis, bits: u32) -> Result<Vec<QuantParams>> {
    calibrate(t, axis, bits, Calibration::Mse)
}

/// Integer codes with the shape of the source tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u32>,
}

fn check_param_count(dims: &[usize], params: &[QuantParams], axis: GroupAxis) -> Result<Vec<usize>> {
    let groups = axis.group_count(dims)?;
    if params.len() != groups {
        return Err(PtqError::Shape(format!(
            "{groups} groups under {axis:?} but {} parameter sets",
            params.len()
        )));
    }
    axis.assignments(dims)
}

pub fn quantize(t: &Tensor, params: &[QuantParams], axis: GroupAxis) -> Result<IntTensor> {
    let groups = check_param_count(t.dims(), params, axis)?;
    let data = t
        .data()
        .iter()
        .zip(groups)
        .map(|(&v, g)| params[g].quantize_value(v))
        .collect();
    Ok(IntTensor {
        dims: t.dims().to_vec(),
        data,
    })
}

pub fn dequantize(q: &IntTensor, params: &[QuantParams], axis: GroupAxis) -> Result<Tensor> {
    let groups = check_param_count(&q.dims, params, axis)?;
    let data = q
        .data
        .iter()
        .zip(groups)
        .map(|(&c, g)| {
            let p = &params[g];
            if c > p.levels() {
                return Err(PtqError::Numeric(format!(
                    "code {c} outside 0..={} for {}-bit group {g}",
                    p.levels(),
                    p.bits
                )));
            }
            Ok(p.dequantize_value(c))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(q.dims.clone(), data)
}

/// Quantize then dequantize.
pub fn fake_quant(t: &Tensor, params: &[QuantParams], axis: GroupAxis) -> Result<Tensor> {
    let groups = check_param_count(t.dims(), params, axis)?;
    let data = t
        .data()
        .iter()
        .zip(groups)
        .map(|(&v, g)| params[g].fake_quant_value(v))
        .collect();
    Tensor::new(t.dims().to_vec(), data)
}

/// Calibrates on `t` and fake-quantizes it with the result.
pub fn calibrate_and_fake_quant(
    t: &Tensor,
    axis: GroupAxis,
    bits: u32,
    method: Calibration,
) -> Result<(Tensor, Vec<QuantParams>)> {
    let params = calibrate(t, axis, bits, method)?;
    Ok((fake_quant(t, &params, axis)?, params))
}

/// Flat JSON record for one group's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRecord {
    pub delta: f64,
    pub zero_point: u32,
    pub bits: u32,
    pub range_down: f64,
    pub range_up: f64,
    pub axis: GroupAxis,
    pub group_index: usize,
}

pub fn to_records(params: &[QuantParams], axis: GroupAxis) -> Vec<QuantRecord> {
    params
        .iter()
        .enumerate()
        .map(|(group_index, p)| QuantRecord {
            delta: p.delta,
            zero_point: p.zero_point,
            bits: p.bits,
            range_down: p.range_down,
            range_up: p.range_up,
            axis,
            group_index,
        })
        .collect()
}

/// Inverse of [`to_records`]; records must be in group order.
pub fn from_records(records: &[QuantRecord]) -> Result<(GroupAxis, Vec<QuantParams>)> {
    let axis = records
        .first()
        .map(|r| r.axis)
        .ok_or_else(|| PtqError::Config("empty parameter record list".into()))?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.group_index != i || r.axis != axis {
                return Err(PtqError::Config(format!(
                    "record {i} out of order or mixes grouping axes"
                )));
            }
            let p = QuantParams {
                delta: r.delta,
                zero_point: r.zero_point,
                bits: r.bits,
                range_down: r.range_down,
                range_up: r.range_up,
            };
            p.validate()?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()
        .map(|ps| (axis, ps))
}
