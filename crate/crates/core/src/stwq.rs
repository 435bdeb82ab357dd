//! Static token-wise quantization: activation parameters fixed offline per
//! token position, relying on a fixed sequence length and on position-wise
//! distributions that do not change across samples.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::quantcore::{self, Calibration, GroupAxis, QuantParams, QuantRecord};
use crate::tensorio::Tensor;

pub const DEFAULT_SINK_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// One parameter set per token position.
    PerPosition,
    /// One parameter set for the sink positions, one for all others.
    SinkSplit,
}

impl PlanMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "per-position" => Ok(PlanMode::PerPosition),
            "sink-split" => Ok(PlanMode::SinkSplit),
            other => Err(PtqError::Config(format!("unknown token plan mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenQuantPlan {
    pub layer: String,
    pub mode: PlanMode,
    pub seq_len: usize,
    pub sink_set: BTreeSet<usize>,
    pub params: Vec<QuantParams>,
}

impl TokenQuantPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(PtqError::Config("token plan needs seq_len >= 1".into()));
        }
        if let Some(&t) = self.sink_set.iter().find(|&&t| t >= self.seq_len) {
            return Err(PtqError::Config(format!(
                "sink position {t} outside sequence of length {}",
                self.seq_len
            )));
        }
        let expected = match self.mode {
            PlanMode::PerPosition => self.seq_len,
            PlanMode::SinkSplit => 2,
        };
        if self.params.len() != expected {
            return Err(PtqError::Config(format!(
                "{:?} plan needs {expected} parameter sets, found {}",
                self.mode,
                self.params.len()
            )));
        }
        self.params.iter().try_for_each(QuantParams::validate)
    }

    /// Parameters used for token position `t`.
    pub fn params_for(&self, t: usize) -> &QuantParams {
        match self.mode {
            PlanMode::PerPosition => &self.params[t],
            PlanMode::SinkSplit if self.sink_set.contains(&t) => &self.params[0],
            PlanMode::SinkSplit => &self.params[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenPlanConfig {
    pub bits: u32,
    pub calib: Calibration,
    pub mode: PlanMode,
    pub sink_threshold: f64,
}

impl TokenPlanConfig {
    pub fn new(bits: u32, calib: Calibration, mode: PlanMode) -> Self {
        Self {
            bits,
            calib,
            mode,
            sink_threshold: DEFAULT_SINK_THRESHOLD,
        }
    }
}

/// `(samples, tokens, channels)` of a token tensor; rank 2 is one sample.
fn token_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [t, n] => Ok((1, t, n)),
        [s, t, n] => Ok((s, t, n)),
        _ => Err(PtqError::Shape(format!(
            "token tensors are [T x n] or [S x T x n], got {:?}",
            x.dims()
        ))),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Mean over samples of each position's percentile range
/// (`DEFAULT_PCT_HI - DEFAULT_PCT_LO` percentiles over channels).
pub fn position_ranges(x: &Tensor) -> Result<Vec<f64>> {
    let (s_n, t_n, n) = token_dims(x)?;
    let data = x.data();
    Ok((0..t_n)
        .into_par_iter()
        .map(|t| {
            let mut per_sample: Vec<f64> = (0..s_n)
                .map(|s| {
                    let start = (s * t_n + t) * n;
                    let mut row: Vec<f64> = data[start..start + n].iter().map(|&v| v as f64).collect();
                    row.sort_by(f64::total_cmp);
                    quantcore::percentile(&row, quantcore::DEFAULT_PCT_HI)
                        - quantcore::percentile(&row, quantcore::DEFAULT_PCT_LO)
                })
                .collect();
            // Summing in sorted order keeps the mean independent of sample order.
            per_sample.sort_by(f64::total_cmp);
            per_sample.iter().sum::<f64>() / s_n as f64
        })
        .collect())
}

/// Positions whose mean range exceeds `threshold` times the median position
/// range. Position 0 is always a sink: it carries the conditioning token.
pub fn detect_sink_tokens(x: &Tensor, threshold: f64) -> Result<BTreeSet<usize>> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(PtqError::Config(format!("sink threshold must be positive, got {threshold}")));
    }
    let ranges = position_ranges(x)?;
    let mut sinks = BTreeSet::from([0]);
    if ranges.len() == 1 {
        return Ok(sinks);
    }
    let cut = threshold * median(&ranges);
    sinks.extend(ranges.iter().enumerate().filter(|(_, &r)| r > cut).map(|(t, _)| t));
    Ok(sinks)
}

/// Values of every sample at the positions selected by `keep`.
fn gather_positions(x: &Tensor, keep: impl Fn(usize) -> bool) -> Result<Vec<f32>> {
    let (_, t_n, n) = token_dims(x)?;
    Ok(x.data()
        .chunks_exact(n)
        .enumerate()
        .filter(|(row, _)| keep(row % t_n))
        .flat_map(|(_, r)| r.iter().copied())
        .collect())
}

/// Calibrates a plan offline from `[S x T x n]` (or `[T x n]`) data.
pub fn build_token_plan(x: &Tensor, layer: &str, cfg: &TokenPlanConfig) -> Result<TokenQuantPlan> {
    quantcore::check_bits(cfg.bits)?;
    cfg.calib.validate()?;
    let (_, t_n, _) = token_dims(x)?;
    let (sink_set, params) = match cfg.mode {
        PlanMode::PerPosition => {
            let params = quantcore::calibrate(x, GroupAxis::PerToken, cfg.bits, cfg.calib)?;
            (BTreeSet::from([0]), params)
        }
        PlanMode::SinkSplit => {
            let sinks = detect_sink_tokens(x, cfg.sink_threshold)?;
            let sink_vals = gather_positions(x, |t| sinks.contains(&t))?;
            let sink = cfg.calib.fit(&sink_vals, cfg.bits)?;
            let normal = if sinks.len() == t_n {
                sink
            } else {
                cfg.calib.fit(&gather_positions(x, |t| !sinks.contains(&t))?, cfg.bits)?
            };
            (sinks, vec![sink, normal])
        }
    };
    let plan = TokenQuantPlan {
        layer: layer.to_string(),
        mode: cfg.mode,
        seq_len: t_n,
        sink_set,
        params,
    };
    plan.validate()?;
    Ok(plan)
}

/// Same as [`build_token_plan`] for separately captured `[T x n]` samples.
pub fn build_token_plan_from_samples(
    samples: &[Tensor],
    layer: &str,
    cfg: &TokenPlanConfig,
) -> Result<TokenQuantPlan> {
    let first = samples
        .first()
        .ok_or_else(|| PtqError::Config("no calibration samples".into()))?;
    if samples.iter().any(|s| s.rank() != 2 || s.dims() != first.dims()) {
        if samples.iter().all(|s| s.rank() == 2 && s.cols() == first.cols()) {
            return Err(PtqError::Shape("ARVG requires fixed token length".into()));
        }
        return Err(PtqError::Shape("calibration samples must all be [T x n] with equal n".into()));
    }
    build_token_plan(&Tensor::stack(samples)?, layer, cfg)
}

/// Fake-quantizes each token position with its static parameters.
pub fn apply_token_plan(x: &Tensor, plan: &TokenQuantPlan) -> Result<Tensor> {
    let (_, t_n, n) = token_dims(x)?;
    if t_n != plan.seq_len {
        return Err(PtqError::Shape(format!(
            "plan '{}' is for {} tokens, input has {t_n}",
            plan.layer, plan.seq_len
        )));
    }
    let mut out = x.clone();
    out.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(row, vals)| {
            let p = plan.params_for(row % t_n);
            for v in vals {
                *v = p.fake_quant_value(*v);
            }
        });
    Ok(out)
}

/// Baseline that derives min-max parameters from each (sample, token) row at
/// run time.
pub fn dynamic_token_quant(x: &Tensor, bits: u32) -> Result<Tensor> {
    quantcore::check_bits(bits)?;
    let (_, _, n) = token_dims(x)?;
    let mut out = x.clone();
    out.data_mut()
        .par_chunks_mut(n)
        .try_for_each(|vals| -> Result<()> {
            let p = Calibration::MinMax.fit(vals, bits)?;
            for v in vals {
                *v = p.fake_quant_value(*v);
            }
            Ok(())
        })?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanRecord {
    layer: String,
    mode: PlanMode,
    seq_len: usize,
    sink_set: Vec<usize>,
    params: Vec<QuantRecord>,
}

impl From<&TokenQuantPlan> for PlanRecord {
    fn from(p: &TokenQuantPlan) -> Self {
        Self {
            layer: p.layer.clone(),
            mode: p.mode,
            seq_len: p.seq_len,
            sink_set: p.sink_set.iter().copied().collect(),
            params: quantcore::to_records(&p.params, GroupAxis::PerToken),
        }
    }
}

impl TryFrom<PlanRecord> for TokenQuantPlan {
    type Error = PtqError;

    fn try_from(r: PlanRecord) -> Result<Self> {
        let (_, params) = quantcore::from_records(&r.params)?;
        let plan = TokenQuantPlan {
            layer: r.layer,
            mode: r.mode,
            seq_len: r.seq_len,
            sink_set: r.sink_set.into_iter().collect(),
            params,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Plans keyed by layer name.
pub fn plans_to_json(plans: &[TokenQuantPlan]) -> Result<String> {
    let map: BTreeMap<&str, PlanRecord> = plans.iter().map(|p| (p.layer.as_str(), p.into())).collect();
    if map.len() != plans.len() {
        return Err(PtqError::Config("duplicate layer names in token plans".into()));
    }
    Ok(serde_json::to_string_pretty(&map)?)
}

/// Parses a plan file and checks each plan's sequence length against
/// `expected_seq_len` when given.
pub fn plans_from_json(text: &str, expected_seq_len: Option<usize>) -> Result<BTreeMap<String, TokenQuantPlan>> {
    let map: BTreeMap<String, PlanRecord> = serde_json::from_str(text)?;
    map.into_iter()
        .map(|(key, rec)| {
            if rec.layer != key {
                return Err(PtqError::Config(format!("plan keyed '{key}' names layer '{}'", rec.layer)));
            }
            let plan = TokenQuantPlan::try_from(rec)?;
            if let Some(t) = expected_seq_len.filter(|&t| t != plan.seq_len) {
                return Err(PtqError::Config(format!(
                    "plan '{key}' has seq_len {}, expected {t}",
                    plan.seq_len
                )));
            }
            Ok((key, plan))
        })
        .collect()
}

pub fn load_plans(path: impl AsRef<Path>, expected_seq_len: Option<usize>) -> Result<BTreeMap<String, TokenQuantPlan>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PtqError::io(path, e))?;
    plans_from_json(&text, expected_seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_activations, Preset, SynthConfig};

    fn minmax(mode: PlanMode) -> TokenPlanConfig {
        TokenPlanConfig::new(6, Calibration::MinMax, mode)
    }

    #[test]
    fn homogeneous_tokens_only_force_position_zero() {
        let x = gen_activations(&SynthConfig::plain(4, 16, 32, 4, 1)).unwrap();
        assert_eq!(detect_sink_tokens(&x, 4.0).unwrap(), BTreeSet::from([0]));
    }

    #[test]
    fn single_position_is_its_own_sink() {
        let x = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(detect_sink_tokens(&x, 4.0).unwrap(), BTreeSet::from([0]));
    }

    #[test]
    fn boosted_position_is_detected() {
        let x = gen_activations(&SynthConfig::preset(Preset::Sinks, 2)).unwrap();
        assert_eq!(detect_sink_tokens(&x, 4.0).unwrap(), BTreeSet::from([0]));
        let mut cfg = SynthConfig::plain(4, 16, 32, 4, 3);
        cfg.sink_magnitude = 10.0;
        let x = gen_activations(&cfg).unwrap();
        let ranges = position_ranges(&x).unwrap();
        assert!(ranges[0] > 4.0 * median(&ranges));
    }

    #[test]
    fn detection_ignores_sample_order() {
        let x = gen_activations(&SynthConfig::preset(Preset::TokensSinks, 4)).unwrap();
        let mut parts = x.samples().unwrap();
        parts.reverse();
        let y = Tensor::stack(&parts).unwrap();
        assert_eq!(detect_sink_tokens(&x, 4.0).unwrap(), detect_sink_tokens(&y, 4.0).unwrap());
        assert_eq!(position_ranges(&x).unwrap(), position_ranges(&y).unwrap());
    }

    #[test]
    fn single_slice_matches_per_tensor() {
        let x = Tensor::new(vec![1, 1, 4], vec![-1.0, 0.5, 2.0, 3.0]).unwrap();
        let cfg = TokenPlanConfig::new(4, Calibration::default_percentile(), PlanMode::PerPosition);
        let plan = build_token_plan(&x, "l", &cfg).unwrap();
        let whole = quantcore::calibrate(&x, GroupAxis::PerTensor, 4, cfg.calib).unwrap();
        assert_eq!(plan.params, whole);
    }

    #[test]
    fn identical_positions_share_delta() {
        // Every position holds the same multiset of values.
        let (s, t, n) = (3, 5, 8);
        let data = (0..s * t * n).map(|i| ((i % n) as f32 - 3.0) * 0.7).collect();
        let x = Tensor::new(vec![s, t, n], data).unwrap();
        let plan = build_token_plan(&x, "l", &minmax(PlanMode::PerPosition)).unwrap();
        for p in &plan.params {
            assert!((p.delta - plan.params[0].delta).abs() <= 1e-6);
        }
    }

    #[test]
    fn sink_delta_scales_with_magnitude() {
        let mut cfg = SynthConfig::plain(8, 16, 64, 4, 6);
        cfg.sink_magnitude = 10.0;
        let x = gen_activations(&cfg).unwrap();
        let plan = build_token_plan(&x, "l", &TokenPlanConfig::new(6, Calibration::default_percentile(), PlanMode::PerPosition)).unwrap();
        let normal: f64 = plan.params[1..].iter().map(|p| p.delta).sum::<f64>() / 15.0;
        let ratio = plan.params[0].delta / normal;
        assert!((ratio / 10.0 - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn ragged_samples_are_rejected() {
        let a = Tensor::zeros(vec![4, 3]).unwrap();
        let b = Tensor::zeros(vec![5, 3]).unwrap();
        let err = build_token_plan_from_samples(&[a, b], "l", &minmax(PlanMode::PerPosition)).unwrap_err();
        assert!(err.to_string().contains("ARVG requires fixed token length"), "{err}");
    }

    #[test]
    fn minmax_plan_respects_half_step() {
        let x = gen_activations(&SynthConfig::preset(Preset::TokensSinks, 7)).unwrap();
        let plan = build_token_plan(&x, "l", &minmax(PlanMode::PerPosition)).unwrap();
        let y = apply_token_plan(&x, &plan).unwrap();
        let n = x.cols();
        for (row, (a, b)) in x.data().chunks(n).zip(y.data().chunks(n)).enumerate() {
            let d = plan.params[row % plan.seq_len].delta;
            for (u, v) in a.iter().zip(b) {
                assert!(((u - v).abs() as f64) <= d / 2.0 + 1e-5);
            }
        }
    }

    #[test]
    fn apply_checks_sequence_length() {
        let x = Tensor::zeros(vec![2, 4, 3]).unwrap();
        let plan = build_token_plan(&x, "l", &minmax(PlanMode::PerPosition)).unwrap();
        assert!(apply_token_plan(&Tensor::zeros(vec![2, 5, 3]).unwrap(), &plan).is_err());
    }

    #[test]
    fn plan_is_static() {
        let x = gen_activations(&SynthConfig::preset(Preset::Tokens, 1)).unwrap();
        let other = gen_activations(&SynthConfig::preset(Preset::Tokens, 2)).unwrap();
        let plan = build_token_plan(&x, "l", &minmax(PlanMode::SinkSplit)).unwrap();
        let before = plan.clone();
        apply_token_plan(&x, &plan).unwrap();
        apply_token_plan(&other, &plan).unwrap();
        assert_eq!(plan, before);
    }

    #[test]
    fn dynamic_equals_static_on_one_sample() {
        let x = gen_activations(&SynthConfig::preset(Preset::Tokens, 8)).unwrap();
        let one = &x.samples().unwrap()[0];
        let plan = build_token_plan(one, "l", &minmax(PlanMode::PerPosition)).unwrap();
        assert_eq!(apply_token_plan(one, &plan).unwrap(), dynamic_token_quant(one, 6).unwrap());
    }

    #[test]
    fn homogeneous_sink_split_has_close_params() {
        let x = gen_activations(&SynthConfig::plain(8, 16, 64, 4, 9)).unwrap();
        let plan = build_token_plan(&x, "l", &TokenPlanConfig::new(6, Calibration::default_percentile(), PlanMode::SinkSplit)).unwrap();
        assert_eq!(plan.sink_set, BTreeSet::from([0]));
        let r = plan.params[0].delta / plan.params[1].delta;
        assert!((0.7..1.3).contains(&r), "{r}");
    }

    #[test]
    fn plan_file_round_trip() {
        let x = gen_activations(&SynthConfig::preset(Preset::TokensSinks, 3)).unwrap();
        let a = build_token_plan(&x, "blk0.qkv", &minmax(PlanMode::PerPosition)).unwrap();
        let b = build_token_plan(&x, "blk0.fc1", &minmax(PlanMode::SinkSplit)).unwrap();
        let text = plans_to_json(&[a.clone(), b.clone()]).unwrap();
        let back = plans_from_json(&text, Some(32)).unwrap();
        assert_eq!(back["blk0.qkv"], a);
        assert_eq!(back["blk0.fc1"], b);
        assert!(plans_from_json(&text, Some(16)).is_err());
    }
}
