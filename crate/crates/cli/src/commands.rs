use std::path::{Path, PathBuf};

use log::info;
use serde_json::{json, Value};

use ptqkit::analysis;
use ptqkit::dgc::{self, FeatureReduce};
use ptqkit::gps::{self, GpsConfig, ScalingVector};
use ptqkit::quantcore::{self, Calibration, GroupAxis};
use ptqkit::sim::{self, QuantSimConfig};
use ptqkit::stwq::{self, PlanMode, TokenPlanConfig};
use ptqkit::synth::{self, Preset, SynthConfig};
use ptqkit::tensorio::{encode_tensor, load_tensor, matmul, Tensor};
use ptqkit::{PtqError, Result};

use crate::output::{check_writable, Outputs};
use crate::{AxisArg, CalibMethod, CmdResult, Command, Common, LayerInput, ReduceArg, ScalingMode, TokenMode};

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Gen {
            preset,
            weights_out,
            common,
        } => gen(&preset, weights_out.as_deref(), &common),
        Command::Calib {
            input,
            axis,
            method,
            common,
        } => calib(&input, axis, method, &common),
        Command::Gps {
            layer,
            scaling,
            alpha,
            common,
        } => gps_cmd(&layer, scaling, alpha, &common),
        Command::QuantSim {
            layer,
            scaling,
            scales,
            alpha,
            token_mode,
            common,
        } => quant_sim(&layer, scaling, scales.as_deref(), alpha, token_mode, &common),
        Command::Stwq {
            input,
            token_mode,
            method,
            layer,
            sink_threshold,
            common,
        } => stwq_cmd(&input, token_mode, method, &layer, sink_threshold, &common),
        Command::DgcSelect {
            features,
            fraction,
            reduce,
            ridge_scale,
            common,
        } => dgc_select(&features, fraction, reduce, ridge_scale, &common),
        Command::Analyze {
            layer,
            scaling,
            alpha,
            layer_name,
            json_out,
            common,
        } => analyze(&layer, scaling, alpha, &layer_name, json_out, &common),
        Command::Perturb {
            layer,
            scaling,
            alpha,
            trials,
            amplitude,
            common,
        } => perturb(&layer, scaling, alpha, trials, amplitude, &common),
    }
}

fn config_err(msg: impl Into<String>) -> PtqError {
    PtqError::Config(msg.into())
}

fn required_out(common: &Common) -> Result<&Path> {
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| config_err("--out is required for this command"))?;
    check_writable(out)?;
    Ok(out)
}

fn check_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(PtqError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        });
    }
    Ok(())
}

fn percentile(common: &Common) -> Result<Calibration> {
    let c = Calibration::Percentile {
        lo: common.pct_lo,
        hi: common.pct_hi,
    };
    c.validate()?;
    Ok(c)
}

fn quant_cfg(common: &Common) -> Result<QuantSimConfig> {
    let cfg = QuantSimConfig {
        bits_a: common.bits_a,
        bits_w: common.bits_w,
        act_calib: percentile(common)?,
        weight_calib: Calibration::Mse,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn calibration(method: CalibMethod, common: &Common) -> Result<Calibration> {
    Ok(match method {
        CalibMethod::Minmax => Calibration::MinMax,
        CalibMethod::Percentile => percentile(common)?,
        CalibMethod::Mse => Calibration::Mse,
    })
}

fn summary(command: &str, config: Value, outputs: &Outputs, results: Value) -> Value {
    let mut v = json!({
        "command": command,
        "config": config,
        "outputs": outputs.paths(),
    });
    if let (Some(map), Value::Object(extra)) = (v.as_object_mut(), results) {
        map.extend(extra);
    }
    v
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

/// Validates paths, then loads or generates the layer.
fn load_layer(layer: &LayerInput, common: &Common) -> Result<(Tensor, Tensor)> {
    match (&layer.preset, &layer.input, &layer.weights) {
        (Some(name), None, None) => {
            let cfg = SynthConfig::preset(Preset::parse(name)?, common.seed);
            Ok((synth::gen_activations(&cfg)?, synth::gen_weights(&cfg)?))
        }
        (None, Some(x), Some(w)) => {
            check_input(x)?;
            check_input(w)?;
            Ok((load_tensor(x)?, load_tensor(w)?))
        }
        _ => Err(config_err("give either --preset or both --input and --weights")),
    }
}

fn solve_scaling(mode: ScalingMode, x: &Tensor, w: &Tensor, alpha: f64, common: &Common) -> Result<Option<ScalingVector>> {
    let x2 = x.flatten_rows();
    Ok(match mode {
        ScalingMode::None => None,
        ScalingMode::Smoothquant => Some(gps::smoothquant_baseline(&x2, w, alpha)?),
        ScalingMode::Gps => {
            let cfg = GpsConfig {
                quant: quant_cfg(common)?,
                strict: false,
            };
            Some(gps::gps_solve(&x2, w, &cfg)?)
        }
    })
}

fn scaling_name(mode: ScalingMode) -> &'static str {
    match mode {
        ScalingMode::None => "none",
        ScalingMode::Smoothquant => "smoothquant",
        ScalingMode::Gps => "gps",
    }
}

fn gen(preset: &str, weights_out: Option<&Path>, common: &Common) -> CmdResult {
    let out = required_out(common)?;
    if let Some(p) = weights_out {
        check_writable(p)?;
    }
    let preset = Preset::parse(preset)?;
    let cfg = SynthConfig::preset(preset, common.seed);
    let x = synth::gen_activations(&cfg)?;
    let mut outputs = Outputs::default();
    outputs.stage(out, &encode_tensor(&x)?)?;
    if let Some(p) = weights_out {
        outputs.stage(p, &encode_tensor(&synth::gen_weights(&cfg)?)?)?;
    }
    let s = summary(
        "gen",
        json!({ "common": common, "preset": preset.name(), "synth": cfg }),
        &outputs,
        json!({ "dims": x.dims() }),
    );
    outputs.commit()?;
    Ok(s)
}

fn calib(input: &Path, axis: AxisArg, method: CalibMethod, common: &Common) -> CmdResult {
    check_input(input)?;
    let out = required_out(common)?;
    let calib = calibration(method, common)?;
    let (axis, bits) = match axis {
        AxisArg::Tensor => (GroupAxis::PerTensor, common.bits_a),
        AxisArg::Token => (GroupAxis::PerToken, common.bits_a),
        AxisArg::OutChannel => (GroupAxis::PerOutChannel, common.bits_w),
    };
    let t = load_tensor(input)?;
    let params = quantcore::calibrate(&t, axis, bits, calib)?;
    let records = quantcore::to_records(&params, axis);
    let fq = quantcore::fake_quant(&t, &params, axis)?;
    let mut outputs = Outputs::default();
    outputs.stage(out, serde_json::to_string_pretty(&records)?.as_bytes())?;
    let s = summary(
        "calib",
        json!({ "common": common, "input": input, "axis": axis, "calibration": calib, "bits": bits }),
        &outputs,
        json!({ "groups": params.len(), "mse": sim::mse(&t, &fq)? }),
    );
    outputs.commit()?;
    Ok(s)
}

fn gps_cmd(layer: &LayerInput, scaling: ScalingMode, alpha: f64, common: &Common) -> CmdResult {
    let out = required_out(common)?;
    let (x, w) = load_layer(layer, common)?;
    let x2 = x.flatten_rows();
    let mut results = json!({});
    let s = match scaling {
        ScalingMode::Gps => {
            let cfg = GpsConfig {
                quant: quant_cfg(common)?,
                strict: false,
            };
            let sol = gps::gps_solve_detailed(&x2, &w, &cfg)?;
            info!("anchor channel {} with factor {}", sol.anchor, sol.anchor_factor);
            results["anchor"] = json!(sol.anchor);
            results["anchor_factor"] = json!(sol.anchor_factor);
            sol.scaling
        }
        other => solve_scaling(other, &x, &w, alpha, common)?.unwrap_or_else(|| ScalingVector::ones(w.rows())),
    };
    let (lo, hi) = s
        .as_slice()
        .iter()
        .fold((f32::INFINITY, 0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    results["s_min"] = json!(lo);
    results["s_max"] = json!(hi);
    results["remark1"] = to_json(&analysis::remark1_check(&x2, &s)?);

    let mut outputs = Outputs::default();
    outputs.stage(out, &encode_tensor(&s.to_tensor())?)?;
    let s = summary(
        "gps",
        json!({ "common": common, "layer": layer, "scaling": scaling, "alpha": alpha }),
        &outputs,
        results,
    );
    outputs.commit()?;
    Ok(s)
}

/// Quantized output of `(X / s)(s W)` with activations grouped by `mode`.
pub fn simulate_tokens(
    x: &Tensor,
    w: &Tensor,
    s: Option<&ScalingVector>,
    cfg: &QuantSimConfig,
    mode: TokenMode,
) -> Result<(Tensor, f64)> {
    let y_fp = matmul(&x.flatten_rows(), w)?;
    let (xs, ws) = match s {
        Some(s) => (gps::scale_activations(x, s)?, gps::scale_weights(w, s)?),
        None => (x.clone(), w.clone()),
    };
    let xq = match mode {
        TokenMode::Tensor => cfg.quantize_activations(&xs)?,
        TokenMode::PerPosition | TokenMode::SinkSplit => {
            let plan_mode = if mode == TokenMode::PerPosition {
                PlanMode::PerPosition
            } else {
                PlanMode::SinkSplit
            };
            let plan = stwq::build_token_plan(&xs, "sim", &TokenPlanConfig::new(cfg.bits_a, cfg.act_calib, plan_mode))?;
            stwq::apply_token_plan(&xs, &plan)?
        }
        TokenMode::Dynamic => stwq::dynamic_token_quant(&xs, cfg.bits_a)?,
    };
    let y_q = matmul(&xq.flatten_rows(), &cfg.quantize_weights(&ws)?)?;
    let mse = sim::mse(&y_fp, &y_q)?;
    Ok((y_q, mse))
}

fn quant_sim(
    layer: &LayerInput,
    scaling: ScalingMode,
    scales: Option<&Path>,
    alpha: f64,
    token_mode: TokenMode,
    common: &Common,
) -> CmdResult {
    if let Some(out) = &common.out {
        check_writable(out)?;
    }
    if let Some(p) = scales {
        check_input(p)?;
    }
    let cfg = quant_cfg(common)?;
    let (x, w) = load_layer(layer, common)?;
    let (s, label) = match scales {
        Some(p) => (Some(ScalingVector::from_tensor(&load_tensor(p)?)?), "scales"),
        None => (solve_scaling(scaling, &x, &w, alpha, common)?, scaling_name(scaling)),
    };
    let (y_none, mse_none) = simulate_tokens(&x, &w, None, &cfg, token_mode)?;
    let mut results = json!({ "mse_none": mse_none });
    let y_q = match &s {
        Some(s) => {
            let (y, mse) = simulate_tokens(&x, &w, Some(s), &cfg, token_mode)?;
            results[format!("mse_{label}")] = json!(mse);
            y
        }
        None => y_none,
    };
    let mut outputs = Outputs::default();
    if let Some(out) = &common.out {
        outputs.stage(out, &encode_tensor(&y_q)?)?;
    }
    let s = summary(
        "quant-sim",
        json!({
            "common": common, "layer": layer, "scaling": scaling, "scales": scales,
            "alpha": alpha, "token_mode": token_mode, "quant": cfg,
        }),
        &outputs,
        results,
    );
    outputs.commit()?;
    Ok(s)
}

fn stwq_cmd(
    input: &Path,
    token_mode: TokenMode,
    method: CalibMethod,
    layer: &str,
    sink_threshold: f64,
    common: &Common,
) -> CmdResult {
    check_input(input)?;
    let out = required_out(common)?;
    let mode = match token_mode {
        TokenMode::PerPosition => PlanMode::PerPosition,
        TokenMode::SinkSplit => PlanMode::SinkSplit,
        other => {
            return Err(config_err(format!(
                "static plans support per-position or sink-split, not {other:?}"
            )))
        }
    };
    let calib = calibration(method, common)?;
    let cfg = TokenPlanConfig {
        bits: common.bits_a,
        calib,
        mode,
        sink_threshold,
    };
    let x = load_tensor(input)?;
    let plan = stwq::build_token_plan(&x, layer, &cfg)?;
    let mse_plan = sim::mse(&x, &stwq::apply_token_plan(&x, &plan)?)?;
    let mse_tensor = sim::mse(
        &x,
        &quantcore::calibrate_and_fake_quant(&x, GroupAxis::PerTensor, cfg.bits, calib)?.0,
    )?;
    let mse_dynamic = sim::mse(&x, &stwq::dynamic_token_quant(&x, cfg.bits)?)?;

    let mut outputs = Outputs::default();
    outputs.stage(out, stwq::plans_to_json(std::slice::from_ref(&plan))?.as_bytes())?;
    let s = summary(
        "stwq",
        json!({
            "common": common, "input": input, "token_mode": token_mode, "calibration": calib,
            "layer": layer, "sink_threshold": sink_threshold,
        }),
        &outputs,
        json!({
            "seq_len": plan.seq_len, "sink_set": plan.sink_set,
            "mse_plan": mse_plan, "mse_tensor": mse_tensor, "mse_dynamic": mse_dynamic,
        }),
    );
    outputs.commit()?;
    Ok(s)
}

fn dgc_select(features: &Path, fraction: f64, reduce: ReduceArg, ridge_scale: f64, common: &Common) -> CmdResult {
    check_input(features)?;
    let out = required_out(common)?;
    dgc::selection_size(fraction, 1)?;
    let t = load_tensor(features)?;
    let reduce_kind = match reduce {
        ReduceArg::Mean => FeatureReduce::Mean,
        ReduceArg::MeanStd => FeatureReduce::MeanStd,
    };
    let feats = match t.rank() {
        2 => dgc::features_from_matrix(&t)?,
        3 => dgc::extract_features(&t, reduce_kind)?,
        _ => return Err(PtqError::Shape(format!("features must be rank 2 or 3, got {:?}", t.dims()))),
    };
    let stats = dgc::fit_set_stats(&feats, ridge_scale)?;
    let rho = dgc::entropies(&feats, &stats)?;
    let indices = dgc::select_by_entropy(&rho, fraction)?;
    let report = json!({
        "indices": indices,
        "fraction": fraction,
        "candidates": feats.len(),
        "lambda": stats.lambda,
        "entropy": rho,
    });
    let mut outputs = Outputs::default();
    outputs.stage(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let s = summary(
        "dgc-select",
        json!({
            "common": common, "features": features, "fraction": fraction,
            "reduce": reduce, "ridge_scale": ridge_scale,
        }),
        &outputs,
        json!({ "candidates": feats.len(), "selected": indices.len() }),
    );
    outputs.commit()?;
    Ok(s)
}

fn analyze(
    layer: &LayerInput,
    scaling: ScalingMode,
    alpha: f64,
    layer_name: &str,
    json_out: Option<PathBuf>,
    common: &Common,
) -> CmdResult {
    let out = required_out(common)?;
    let json_out = json_out.unwrap_or_else(|| out.with_extension("json"));
    check_writable(&json_out)?;
    if json_out == out {
        return Err(config_err("--json-out must differ from --out"));
    }
    let cfg = quant_cfg(common)?;
    let (x, w) = load_layer(layer, common)?;
    let x2 = x.flatten_rows();
    let s = solve_scaling(scaling, &x, &w, alpha, common)?.unwrap_or_else(|| ScalingVector::ones(w.rows()));

    let breakdown = analysis::loss_decompose(&x2, &w, &cfg)?;
    let remark = analysis::remark1_check(&x2, &s)?;
    let range = analysis::range_after_scaling_check(&w, &s)?;
    let bias = analysis::bias_report(&x2, &w, &cfg, &s, layer_name)?;
    let report = json!({
        "layer": layer_name,
        "loss": breakdown,
        "upper_bound_ratio": breakdown.upper_bound_ratio(),
        "remark1": remark,
        "range_after_scaling": range,
        "bias": bias,
    });

    let mut outputs = Outputs::default();
    outputs.stage(out, analysis::bias_reports_csv(std::slice::from_ref(&bias))?.as_bytes())?;
    outputs.stage(&json_out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let s = summary(
        "analyze",
        json!({
            "common": common, "layer": layer, "scaling": scaling, "alpha": alpha,
            "layer_name": layer_name, "json_out": json_out, "quant": cfg,
        }),
        &outputs,
        json!({
            "bound_slack": breakdown.bound_slack(),
            "upper_bound_ratio": breakdown.upper_bound_ratio(),
            "cross_ratio_w": bias.hessian_cross_w.ratio,
            "cross_ratio_x": bias.hessian_cross_x.ratio,
            "scaled_error_ratio": bias.scaled_error.ratio,
        }),
    );
    outputs.commit()?;
    Ok(s)
}

fn perturb(
    layer: &LayerInput,
    scaling: ScalingMode,
    alpha: f64,
    trials: usize,
    amplitude: f64,
    common: &Common,
) -> CmdResult {
    let out = required_out(common)?;
    let cfg = quant_cfg(common)?;
    let (x, w) = load_layer(layer, common)?;
    let s = solve_scaling(scaling, &x, &w, alpha, common)?.unwrap_or_else(|| ScalingVector::ones(w.rows()));
    let report = analysis::perturbation_study(&x, &w, &s, &cfg, trials, amplitude, common.seed)?;

    let mut outputs = Outputs::default();
    outputs.stage(out, analysis::perturbation_csv(&report)?.as_bytes())?;
    let s = summary(
        "perturb",
        json!({
            "common": common, "layer": layer, "scaling": scaling, "alpha": alpha,
            "trials": trials, "amplitude": amplitude, "quant": cfg,
        }),
        &outputs,
        json!({
            "baseline": report.baseline,
            "p5": report.trial_percentile(5.0),
            "p95": report.trial_percentile(95.0),
            "fraction_better": report.fraction_better(),
        }),
    );
    outputs.commit()?;
    Ok(s)
}
