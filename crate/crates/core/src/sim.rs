//! Fake-quantized linear layers: the measurement path shared by the scaling
//! comparisons, the analysis harness and the CLI.

use serde::Serialize;

use crate::error::{PtqError, Result};
use crate::gps::{self, ScalingVector};
use crate::quantcore::{self, Calibration, GroupAxis};
use crate::tensorio::{matmul, Tensor};

/// Bit-widths and calibrations for one weight-activation layer.
///
/// Activations are quantized per tensor, weights per output channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantSimConfig {
    pub bits_a: u32,
    pub bits_w: u32,
    pub act_calib: Calibration,
    pub weight_calib: Calibration,
}

impl Default for QuantSimConfig {
    fn default() -> Self {
        Self {
            bits_a: 8,
            bits_w: 8,
            act_calib: Calibration::default_percentile(),
            weight_calib: Calibration::Mse,
        }
    }
}

impl QuantSimConfig {
    pub fn with_bits(bits_a: u32, bits_w: u32) -> Self {
        Self {
            bits_a,
            bits_w,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        quantcore::check_bits(self.bits_a)?;
        quantcore::check_bits(self.bits_w)?;
        self.act_calib.validate()?;
        self.weight_calib.validate()
    }

    pub fn quantize_activations(&self, x: &Tensor) -> Result<Tensor> {
        Ok(quantcore::calibrate_and_fake_quant(x, GroupAxis::PerTensor, self.bits_a, self.act_calib)?.0)
    }

    pub fn quantize_weights(&self, w: &Tensor) -> Result<Tensor> {
        Ok(quantcore::calibrate_and_fake_quant(w, GroupAxis::PerOutChannel, self.bits_w, self.weight_calib)?.0)
    }
}

/// Mean squared difference over all elements.
pub fn mse(reference: &Tensor, other: &Tensor) -> Result<f64> {
    reference.same_shape(other)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / reference.numel() as f64)
}

/// Squared error summed over rows and averaged over output channels.
pub fn output_loss(reference: &Tensor, other: &Tensor) -> Result<f64> {
    Ok(mse(reference, other)? * reference.rows() as f64)
}

/// L1 error summed over rows and averaged over output channels.
pub fn output_l1(reference: &Tensor, other: &Tensor) -> Result<f64> {
    reference.same_shape(other)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / reference.cols() as f64)
}

#[derive(Debug, Clone)]
pub struct LinearSim {
    pub y_fp: Tensor,
    pub y_q: Tensor,
    pub mse: f64,
}

/// Runs `X W` in full precision and through the fake-quantized path
/// `Q(X / s) Q(s W)`. `x` may be rank 2 or 3; the output is `[rows x m]`.
pub fn simulate_linear(
    x: &Tensor,
    w: &Tensor,
    s: Option<&ScalingVector>,
    cfg: &QuantSimConfig,
) -> Result<LinearSim> {
    cfg.validate()?;
    if w.rank() != 2 || x.cols() != w.dims()[0] {
        return Err(PtqError::Shape(format!(
            "activation {:?} does not feed weight {:?}",
            x.dims(),
            w.dims()
        )));
    }
    let x2 = x.flatten_rows();
    let y_fp = matmul(&x2, w)?;
    let (xs, ws) = match s {
        Some(s) => gps::equivalent_scale(&x2, w, s)?,
        None => (x2, w.clone()),
    };
    let y_q = matmul(&cfg.quantize_activations(&xs)?, &cfg.quantize_weights(&ws)?)?;
    let mse = mse(&y_fp, &y_q)?;
    Ok(LinearSim { y_fp, y_q, mse })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_inputs_are_lossless() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = QuantSimConfig {
            bits_a: 2,
            bits_w: 2,
            act_calib: Calibration::MinMax,
            weight_calib: Calibration::MinMax,
        };
        let sim = simulate_linear(&x, &w, None, &cfg).unwrap();
        assert_eq!(sim.mse, 0.0);
    }

    #[test]
    fn loss_normalizations() {
        let a = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 1.5);
        assert_eq!(output_loss(&a, &b).unwrap(), 3.0);
        assert_eq!(output_l1(&a, &b).unwrap(), 2.0);
    }
}
