//! Flat `key=value` sampler configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the
//! [`SamplerConfig`] field names.

use sketchmotion_core::SamplerConfig;

use crate::error::{Error, Result};

pub const KEYS: [&str; 14] = [
    "steps",
    "tau1",
    "tau2",
    "lambda",
    "frames",
    "align_iters",
    "align_step",
    "seed",
    "word_mode",
    "align",
    "compose",
    "spatial_blocks",
    "refine_iters",
    "refine_step",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value `{value}` for `{key}`"))
}

/// Set one field by name.
pub fn set(cfg: &mut SamplerConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let value = value.trim();
    match key {
        "steps" => cfg.steps = parse(key, value)?,
        "tau1" => cfg.tau1 = parse(key, value)?,
        "tau2" => cfg.tau2 = parse(key, value)?,
        "lambda" => cfg.lambda = parse(key, value)?,
        "frames" => cfg.frames = parse(key, value)?,
        "align_iters" => cfg.align_iters = parse(key, value)?,
        "align_step" => cfg.align_step = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "word_mode" => cfg.word_mode = parse(key, value)?,
        "align" => cfg.align = parse(key, value)?,
        "compose" => cfg.compose = parse(key, value)?,
        "spatial_blocks" => {
            cfg.spatial_blocks = if value.is_empty() {
                Vec::new()
            } else {
                value
                    .split(',')
                    .map(|b| parse(key, b.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
        }
        "refine_iters" => cfg.refine_iters = parse(key, value)?,
        "refine_step" => cfg.refine_step = parse(key, value)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

/// Value of one field, in the form [`set`] reads back.
pub fn get(cfg: &SamplerConfig, key: &str) -> Option<String> {
    Some(match key {
        "steps" => cfg.steps.to_string(),
        "tau1" => cfg.tau1.to_string(),
        "tau2" => cfg.tau2.to_string(),
        "lambda" => cfg.lambda.to_string(),
        "frames" => cfg.frames.to_string(),
        "align_iters" => cfg.align_iters.to_string(),
        "align_step" => cfg.align_step.to_string(),
        "seed" => cfg.seed.to_string(),
        "word_mode" => cfg.word_mode.to_string(),
        "align" => cfg.align.to_string(),
        "compose" => cfg.compose.to_string(),
        "spatial_blocks" => cfg
            .spatial_blocks
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
        "refine_iters" => cfg.refine_iters.to_string(),
        "refine_step" => cfg.refine_step.to_string(),
        _ => return None,
    })
}

/// Split a `key=value` line; `None` for blank and comment lines.
pub(crate) fn split_line(line: &str, number: usize) -> Result<Option<(&str, &str)>> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
        line: number,
        reason: format!("expected key=value, got `{trimmed}`"),
    })?;
    Ok(Some((k.trim(), v.trim())))
}

/// Apply a config file's entries on top of `base`.
pub fn apply(base: &mut SamplerConfig, text: &str) -> Result<()> {
    for (i, line) in text.lines().enumerate() {
        if let Some((k, v)) = split_line(line, i + 1)? {
            set(base, k, v).map_err(|reason| Error::Parse {
                line: i + 1,
                reason,
            })?;
        }
    }
    Ok(())
}

pub fn render(cfg: &SamplerConfig) -> String {
    KEYS.iter()
        .map(|k| format!("{k}={}\n", get(cfg, k).expect("known key")))
        .collect()
}
