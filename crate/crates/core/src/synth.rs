//! Synthetic activations that reproduce the three activation pathologies of
//! autoregressive visual generators, plus a toy AdaLN-style block.
//!
//! * channel level: a few outlier channels with large magnitude
//! * token level: a per-position scale ramp and a dominant initial (sink) token
//! * sample level: a fraction of near-duplicate samples
//!
//! A fourth, optional pattern scatters single-element spikes at random
//! positions per sample, which stresses per-token calibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PtqError, Result};
use crate::gps::{self, ScalingVector};
use crate::sim::QuantSimConfig;
use crate::tensorio::{matmul, Tensor};

const WEIGHT_STREAM: u64 = 0x5745_4947_4854_5321;

/// Channel multiplier for an outlier channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierChannel {
    pub channel: usize,
    pub multiplier: f32,
}

/// Rare single-element spikes: each (sample, token) row receives one spike
/// on a random channel with probability `rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spikes {
    pub rate: f64,
    /// Spike size in units of `noise_sigma`, sign drawn at random.
    pub magnitude: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub samples: usize,
    pub tokens: usize,
    pub channels: usize,
    pub out_channels: usize,
    pub outlier_channels: Vec<OutlierChannel>,
    /// Linear per-position scale from `.0` at token 0 to `.1` at the last token.
    pub token_ramp: (f32, f32),
    pub sink_magnitude: f32,
    pub duplicate_fraction: f64,
    pub noise_sigma: f32,
    pub spikes: Option<Spikes>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Outliers,
    Tokens,
    Sinks,
    /// Token ramp and sink together.
    TokensSinks,
    Duplicates,
    /// Spikes at varying token positions.
    Spikes,
    All,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "outliers" => Preset::Outliers,
            "tokens" => Preset::Tokens,
            "sinks" => Preset::Sinks,
            "tokens-sinks" => Preset::TokensSinks,
            "duplicates" => Preset::Duplicates,
            "spikes" => Preset::Spikes,
            "all" => Preset::All,
            other => return Err(PtqError::Config(format!("unknown preset '{other}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Outliers => "outliers",
            Preset::Tokens => "tokens",
            Preset::Sinks => "sinks",
            Preset::TokensSinks => "tokens-sinks",
            Preset::Duplicates => "duplicates",
            Preset::Spikes => "spikes",
            Preset::All => "all",
        }
    }
}

impl SynthConfig {
    /// Homogeneous Gaussian activations.
    pub fn plain(samples: usize, tokens: usize, channels: usize, out_channels: usize, seed: u64) -> Self {
        Self {
            samples,
            tokens,
            channels,
            out_channels,
            outlier_channels: Vec::new(),
            token_ramp: (1.0, 1.0),
            sink_magnitude: 1.0,
            duplicate_fraction: 0.0,
            noise_sigma: 1.0,
            spikes: None,
            seed,
        }
    }

    pub fn preset(preset: Preset, seed: u64) -> Self {
        let outliers = vec![
            OutlierChannel { channel: 7, multiplier: 50.0 },
            OutlierChannel { channel: 21, multiplier: 20.0 },
            OutlierChannel { channel: 40, multiplier: 30.0 },
            OutlierChannel { channel: 58, multiplier: 10.0 },
        ];
        match preset {
            Preset::Outliers => Self {
                outlier_channels: outliers,
                ..Self::plain(8, 32, 64, 64, seed)
            },
            Preset::Tokens => Self {
                token_ramp: (1.0, 3.0),
                ..Self::plain(8, 32, 64, 64, seed)
            },
            Preset::Sinks => Self {
                sink_magnitude: 10.0,
                ..Self::plain(8, 32, 64, 64, seed)
            },
            Preset::TokensSinks => Self {
                token_ramp: (1.0, 3.0),
                sink_magnitude: 10.0,
                ..Self::plain(8, 32, 64, 64, seed)
            },
            Preset::Duplicates => Self {
                duplicate_fraction: 0.5,
                ..Self::plain(100, 8, 16, 16, seed)
            },
            Preset::Spikes => Self {
                spikes: Some(Spikes { rate: 0.25, magnitude: 8.0 }),
                ..Self::plain(16, 16, 1024, 16, seed)
            },
            Preset::All => Self {
                outlier_channels: outliers,
                token_ramp: (1.0, 3.0),
                sink_magnitude: 10.0,
                duplicate_fraction: 0.25,
                ..Self::plain(16, 32, 64, 64, seed)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.tokens == 0 || self.channels == 0 || self.out_channels == 0 {
            return Err(PtqError::Config("all synthetic counts must be >= 1".into()));
        }
        let positive = |v: f32| v.is_finite() && v > 0.0;
        if !positive(self.noise_sigma)
            || !positive(self.sink_magnitude)
            || !positive(self.token_ramp.0)
            || !positive(self.token_ramp.1)
        {
            return Err(PtqError::Config("synthetic scales must be positive".into()));
        }
        for o in &self.outlier_channels {
            if o.channel >= self.channels || !positive(o.multiplier) {
                return Err(PtqError::Config(format!("invalid outlier channel {o:?}")));
            }
        }
        if !(0.0..1.0).contains(&self.duplicate_fraction) {
            return Err(PtqError::Config("duplicate_fraction must lie in [0, 1)".into()));
        }
        if let Some(sp) = self.spikes {
            if !(0.0..=1.0).contains(&sp.rate) || !positive(sp.magnitude) {
                return Err(PtqError::Config(format!("invalid spike settings {sp:?}")));
            }
        }
        Ok(())
    }

    fn ramp(&self, t: usize) -> f32 {
        if self.tokens == 1 {
            return self.token_ramp.0;
        }
        let f = t as f32 / (self.tokens - 1) as f32;
        self.token_ramp.0 + f * (self.token_ramp.1 - self.token_ramp.0)
    }

    /// Number of trailing samples replaced by jittered copies of sample 0.
    /// Sample 0 itself is never replaced.
    pub fn duplicate_count(&self) -> usize {
        let n = (self.duplicate_fraction * self.samples as f64).ceil() as usize;
        n.min(self.samples - 1)
    }
}

/// Draws `[samples x tokens x channels]` activations.
pub fn gen_activations(cfg: &SynthConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (s_n, t_n, c_n) = (cfg.samples, cfg.tokens, cfg.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = Normal::new(0.0f32, cfg.noise_sigma).expect("sigma checked");

    let mut channel_scale = vec![1f32; c_n];
    for o in &cfg.outlier_channels {
        channel_scale[o.channel] *= o.multiplier;
    }

    let mut data = Vec::with_capacity(s_n * t_n * c_n);
    for _ in 0..s_n {
        for t in 0..t_n {
            let mut pos_scale = cfg.ramp(t);
            if t == 0 {
                pos_scale *= cfg.sink_magnitude;
            }
            for scale in &channel_scale {
                data.push(base.sample(&mut rng) * scale * pos_scale);
            }
        }
    }

    if let Some(sp) = cfg.spikes {
        for row in data.chunks_exact_mut(c_n) {
            if rng.random_bool(sp.rate) {
                let c = rng.random_range(0..c_n);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                row[c] = sign * sp.magnitude * cfg.noise_sigma;
            }
        }
    }

    let dups = cfg.duplicate_count();
    if dups > 0 {
        let jitter = Normal::new(0.0f32, 0.01 * cfg.noise_sigma).expect("sigma checked");
        let block = t_n * c_n;
        let (head, tail) = data.split_at_mut(block);
        for sample in tail.chunks_exact_mut(block).skip(s_n - 1 - dups) {
            for (v, &src) in sample.iter_mut().zip(head.iter()) {
                *v = src + jitter.sample(&mut rng);
            }
        }
    }
    Tensor::new(vec![s_n, t_n, c_n], data)
}

/// Gaussian `[channels x out_channels]` weight with variance `1 / channels`,
/// drawn from a stream independent of the activations.
pub fn gen_weights(cfg: &SynthConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, m) = (cfg.channels, cfg.out_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ WEIGHT_STREAM);
    let std = 1.0 / (n as f32).sqrt();
    let data = (0..n * m)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
        .collect();
    Tensor::new(vec![n, m], data)
}

/// Per-channel affine (AdaLN scale/shift stand-in) followed by a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub w1: Tensor,
    pub label: String,
}

impl ToyBlock {
    pub fn new(norm_gain: Tensor, norm_bias: Tensor, w1: Tensor, label: impl Into<String>) -> Result<Self> {
        let n = norm_gain.numel();
        if norm_gain.rank() != 1 || norm_bias.dims() != [n] || w1.rank() != 2 || w1.dims()[0] != n {
            return Err(PtqError::Shape(format!(
                "toy block shapes gain {:?} bias {:?} w1 {:?}",
                norm_gain.dims(),
                norm_bias.dims(),
                w1.dims()
            )));
        }
        if !(norm_gain.is_finite() && norm_bias.is_finite() && w1.is_finite()) {
            return Err(PtqError::NonFinite {
                context: Some("toy block".into()),
            });
        }
        Ok(Self {
            norm_gain,
            norm_bias,
            w1,
            label: label.into(),
        })
    }

    /// Gain near 1, small bias and the config's Gaussian weight.
    pub fn for_config(cfg: &SynthConfig) -> Result<Self> {
        let n = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0AD1));
        let gain = (0..n)
            .map(|_| 1.0 + 0.1 * rng.sample::<f32, _>(StandardNormal))
            .collect();
        let bias = (0..n)
            .map(|_| 0.1 * rng.sample::<f32, _>(StandardNormal))
            .collect();
        Self::new(
            Tensor::from_vec(gain)?,
            Tensor::from_vec(bias)?,
            gen_weights(cfg)?,
            "block0.fc1",
        )
    }

    /// Output of the affine stage, `X * gain + bias`, flattened to rows.
    pub fn affine(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.norm_gain.numel();
        if x.cols() != n {
            return Err(PtqError::Shape(format!(
                "toy block expects {n} channels, input is {:?}",
                x.dims()
            )));
        }
        let mut out = x.flatten_rows();
        for row in out.data_mut().chunks_exact_mut(n) {
            for ((v, g), b) in row.iter_mut().zip(self.norm_gain.data()).zip(self.norm_bias.data()) {
                *v = *v * g + b;
            }
        }
        Ok(out)
    }

    /// Folds `s` into the block: the affine emits `X / s` and `W1` becomes `s * W1`.
    pub fn fused(&self, s: &ScalingVector) -> Result<ToyBlock> {
        let (gain, bias) = gps::fuse_scaling(&self.norm_gain, &self.norm_bias, s)?;
        let w1 = gps::scale_weights(&self.w1, s)?;
        ToyBlock::new(gain, bias, w1, self.label.clone())
    }
}

/// `((X * gain + bias) / s) (s * W1)`, optionally fake-quantizing the linear
/// layer's input and weight. Without `s` no runtime scaling happens, which is
/// the right call for a block that already has `s` fused in.
pub fn toy_forward(
    block: &ToyBlock,
    x: &Tensor,
    s: Option<&ScalingVector>,
    quant: Option<&QuantSimConfig>,
) -> Result<Tensor> {
    let mut h = block.affine(x)?;
    let mut w = block.w1.clone();
    if let Some(s) = s {
        (h, w) = gps::equivalent_scale(&h, &w, s)?;
    }
    if let Some(q) = quant {
        q.validate()?;
        h = q.quantize_activations(&h)?;
        w = q.quantize_weights(&w)?;
    }
    matmul(&h, &w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_ranges(x: &Tensor) -> Vec<f32> {
        let n = x.cols();
        let mut lo = vec![f32::MAX; n];
        let mut hi = vec![f32::MIN; n];
        for r in 0..x.rows() {
            for (i, &v) in x.row(r).iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        hi.iter().zip(&lo).map(|(h, l)| h - l).collect()
    }

    fn median(mut v: Vec<f32>) -> f32 {
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn same_seed_same_tensor() {
        for p in [Preset::Outliers, Preset::Duplicates, Preset::Spikes, Preset::All] {
            let a = gen_activations(&SynthConfig::preset(p, 5)).unwrap();
            let b = gen_activations(&SynthConfig::preset(p, 5)).unwrap();
            assert_eq!(a, b);
            let c = gen_activations(&SynthConfig::preset(p, 6)).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn homogeneous_channels_are_comparable() {
        let x = gen_activations(&SynthConfig::plain(4, 32, 16, 4, 1)).unwrap();
        let r = channel_ranges(&x);
        let (lo, hi) = r.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        eprintln!("homogeneous channel range spread {:.2}x", hi / lo);
    }

    #[test]
    fn outlier_channel_dominates() {
        let mut cfg = SynthConfig::plain(4, 32, 16, 4, 2);
        cfg.outlier_channels = vec![OutlierChannel { channel: 7, multiplier: 50.0 }];
        let r = channel_ranges(&gen_activations(&cfg).unwrap());
        assert!(r[7] >= 10.0 * median(r.clone()));
    }

    #[test]
    fn sink_position_dominates() {
        let cfg = SynthConfig::preset(Preset::Sinks, 3);
        let x = gen_activations(&cfg).unwrap();
        let n = cfg.channels;
        let pos_max = |t: usize| {
            (0..cfg.samples)
                .flat_map(|s| x.data()[(s * cfg.tokens + t) * n..(s * cfg.tokens + t + 1) * n].iter())
                .fold(0f32, |a, v| a.max(v.abs()))
        };
        assert!(pos_max(0) > 4.0 * pos_max(1));
    }

    #[test]
    fn duplicates_copy_sample_zero() {
        let cfg = SynthConfig::preset(Preset::Duplicates, 4);
        let x = gen_activations(&cfg).unwrap();
        let parts = x.samples().unwrap();
        let dups = cfg.duplicate_count();
        assert_eq!(dups, 50);
        for p in &parts[cfg.samples - dups..] {
            let dev = p.data().iter().zip(parts[0].data()).fold(0f32, |a, (u, v)| a.max((u - v).abs()));
            assert!(dev < 0.1, "{dev}");
        }
        let dev = parts[1].data().iter().zip(parts[0].data()).fold(0f32, |a, (u, v)| a.max((u - v).abs()));
        assert!(dev > 1.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::plain(1, 1, 1, 1, 0);
        cfg.duplicate_fraction = 1.0;
        assert!(gen_activations(&cfg).is_err());
        let mut cfg = SynthConfig::plain(1, 1, 1, 1, 0);
        cfg.outlier_channels = vec![OutlierChannel { channel: 3, multiplier: 2.0 }];
        assert!(gen_activations(&cfg).is_err());
        assert!(gen_activations(&SynthConfig::plain(0, 1, 1, 1, 0)).is_err());
    }

    #[test]
    fn plain_block_is_matmul() {
        let cfg = SynthConfig::plain(2, 3, 4, 5, 9);
        let x = gen_activations(&cfg).unwrap();
        let w = gen_weights(&cfg).unwrap();
        let block = ToyBlock::new(
            Tensor::from_vec(vec![1.0; 4]).unwrap(),
            Tensor::from_vec(vec![0.0; 4]).unwrap(),
            w.clone(),
            "id",
        )
        .unwrap();
        let y = toy_forward(&block, &x, None, None).unwrap();
        assert_eq!(y, matmul(&x.flatten_rows(), &w).unwrap());
    }

    #[test]
    fn fused_matches_runtime_scaling() {
        let cfg = SynthConfig::preset(Preset::Outliers, 11);
        let x = gen_activations(&cfg).unwrap();
        let block = ToyBlock::for_config(&cfg).unwrap();
        let h = block.affine(&x).unwrap();
        let s = gps::gps_solve(&h, &block.w1, &gps::GpsConfig::new(6, 6, (0.1, 99.9))).unwrap();
        let unfused = toy_forward(&block, &x, Some(&s), None).unwrap();
        let fused = toy_forward(&block.fused(&s).unwrap(), &x, None, None).unwrap();
        let diff = unfused
            .data()
            .iter()
            .zip(fused.data())
            .fold(0f32, |a, (u, v)| a.max((u - v).abs()));
        assert!(diff <= 1e-5, "{diff}");
    }
}
