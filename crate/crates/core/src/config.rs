//! `key = value` run configuration files.
//!
//! Every key is optional and overrides the corresponding [`RunConfig`] field;
//! unknown keys are rejected. `#` starts a comment.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scenario::RunConfig;

/// Applies the overrides in a config file on top of `base`.
pub fn apply_config_file(base: RunConfig, path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading {}", path.display()), e))?;
    apply_config_text(base, &text, &path.display().to_string())
}

/// Applies the overrides in config text; `origin` labels parse errors.
pub fn apply_config_text(mut cfg: RunConfig, text: &str, origin: &str) -> Result<RunConfig> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(lineno, "expected 'key = value'".into()))?;
        let key = key.trim();
        let value = value.trim();

        let f = || -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| parse_err(lineno, format!("invalid number '{value}' for {key}")))
        };
        let u = || -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| parse_err(lineno, format!("invalid integer '{value}' for {key}")))
        };

        match key {
            "controller" => {
                cfg.controller = value.parse().map_err(|e: String| parse_err(lineno, e))?;
            }
            "alpha" => cfg.ctrl.alpha = f()?,
            "alpha_d" => cfg.ctrl.alpha_d = f()?,
            "alpha_u" => cfg.ctrl.alpha_u = f()?,
            "r_p" => cfg.ctrl.r_p = f()?,
            "r_d" => cfg.ctrl.r_d = f()?,
            "epsilon" => cfg.ctrl.epsilon = f()?,
            "t_inner" => cfg.ctrl.t_inner = u()?,
            "v_min" => cfg.ctrl.v_min = f()?,
            "v_max" => cfg.ctrl.v_max = f()?,
            "box_deflation" => cfg.ctrl.box_deflation = f()?,
            "droop_v1" => cfg.droop.v1 = f()?,
            "droop_v2" => cfg.droop.v2 = f()?,
            "droop_v3" => cfg.droop.v3 = f()?,
            "droop_v4" => cfg.droop.v4 = f()?,
            "plant_tol" => cfg.plant_tol = f()?,
            "plant_max_iter" => cfg.plant_max_iter = u()?,
            "seed" => {
                cfg.seed = value
                    .parse::<u64>()
                    .map_err(|_| parse_err(lineno, format!("invalid integer '{value}' for seed")))?;
            }
            "noise_std" => cfg.noise_std = f()?,
            "max_outer" => cfg.max_outer = u()?,
            "conv_tol" => cfg.conv_tol = f()?,
            "setpoints_per_sample" => cfg.setpoints_per_sample = u()?,
            other => {
                return Err(parse_err(lineno, format!("unknown config key '{other}'")));
            }
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    let c = &cfg.ctrl;
    let positive = [
        ("alpha", c.alpha),
        ("alpha_d", c.alpha_d),
        ("alpha_u", c.alpha_u),
        ("epsilon", c.epsilon),
        ("plant_tol", cfg.plant_tol),
        ("conv_tol", cfg.conv_tol),
    ];
    for (name, v) in positive {
        if !(v > 0.0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
        }
    }
    let nonnegative = [
        ("r_p", c.r_p),
        ("r_d", c.r_d),
        ("box_deflation", c.box_deflation),
        ("noise_std", cfg.noise_std),
    ];
    for (name, v) in nonnegative {
        if !(v >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{name} must be nonnegative, got {v}"
            )));
        }
    }
    if c.v_min >= c.v_max {
        return Err(Error::InvalidConfig(format!(
            "v_min {} must be below v_max {}",
            c.v_min, c.v_max
        )));
    }
    if c.box_deflation >= 1.0 {
        return Err(Error::InvalidConfig(
            "box_deflation must be below 1".into(),
        ));
    }
    if !cfg.droop.is_valid() {
        return Err(Error::InvalidConfig(
            "droop breakpoints must be nondecreasing".into(),
        ));
    }
    Ok(())
}
