//! `key = value` configuration files mapping onto [`TrainConfig`], with
//! unknown keys treated as hard errors and CLI flags applied afterwards as
//! overrides.

use std::path::Path;

use crate::error::{Result, VdlError};
use crate::losses::{Divergence, GenLossMode};
use crate::trainer::TrainConfig;

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| VdlError::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(VdlError::Config(format!(
            "bad boolean for {key}: {other:?}"
        ))),
    }
}

/// Apply one key to the configuration. Unknown keys are an error.
pub fn apply_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "d" => cfg.d = parse_num(key, value)?,
        "batch" => cfg.batch = parse_num(key, value)?,
        "iters" => cfg.iters = parse_num(key, value)?,
        "lr" => cfg.lr = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "eval_every" => cfg.eval_every = parse_num(key, value)?,
        "d_steps_per_g_step" => cfg.d_steps_per_g_step = parse_num(key, value)?,
        "semi_ratio" => cfg.semi_ratio = parse_num(key, value)?,
        "deterministic" => cfg.deterministic = parse_bool(key, value)?,
        "width" => cfg.width = parse_num(key, value)?,
        "depth" => cfg.depth = parse_num(key, value)?,
        "adv_depth" => cfg.adv_depth = parse_num(key, value)?,
        "alpha" => cfg.alpha = parse_num(key, value)?,
        "r1_every" => cfg.r1_every = parse_num(key, value)?,
        "eval_holdout" => cfg.eval_holdout = parse_num(key, value)?,
        "sigma" => cfg.weights.sigma = parse_num(key, value)?,
        "lambda_rkd" => cfg.weights.lambda_rkd = parse_num(key, value)?,
        "lambda_semi" => cfg.weights.lambda_semi = parse_num(key, value)?,
        "delta" => cfg.weights.delta = parse_num(key, value)?,
        "gamma_r1" => cfg.weights.gamma_r1 = parse_num(key, value)?,
        "divergence" => {
            cfg.weights.divergence = match value.trim() {
                "js" => Divergence::Js,
                "dv" => Divergence::Dv,
                other => {
                    return Err(VdlError::Config(format!(
                        "divergence must be js|dv, got {other:?}"
                    )))
                }
            }
        }
        "gen_mode" => {
            cfg.weights.gen_mode = match value.trim() {
                "minimax" => GenLossMode::Minimax,
                "nonsaturating" => GenLossMode::NonSaturating,
                other => {
                    return Err(VdlError::Config(format!(
                        "gen_mode must be minimax|nonsaturating, got {other:?}"
                    )))
                }
            }
        }
        "r_txt" => cfg.svdl.r_txt = parse_num(key, value)?,
        "r_img" => cfg.svdl.r_img = parse_num(key, value)?,
        other => {
            return Err(VdlError::Config(format!(
                "unknown configuration key {other:?}"
            )))
        }
    }
    Ok(())
}

/// Parse a whole config file body. Blank lines and `#` comments allowed.
pub fn apply_config_text(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(VdlError::Config(format!(
                "line {}: expected key = value, got {raw:?}",
                lineno + 1
            )));
        };
        apply_kv(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

pub fn load_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    apply_config_text(cfg, &text)
}
