//! Plain-text record of one animation run.

use std::fs;
use std::path::Path;

use sketchmotion_core::{Prompt, SamplerConfig};

use crate::config;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub prompt: Prompt,
    pub config: SamplerConfig,
    pub sketch: String,
    pub checkpoint: String,
    pub checkpoint_id: String,
    pub adapters: Option<String>,
    pub adapters_id: Option<String>,
    /// Post-processed frame files, relative to the manifest.
    pub frame_files: Vec<String>,
    /// Free-form `(name, value)` summaries.
    pub diagnostics: Vec<(String, String)>,
}

const DIAG: &str = "diag.";

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: &str| {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        };
        line("prompt", &self.prompt.to_string());
        for k in config::KEYS {
            line(k, &config::get(&self.config, k).expect("known key"));
        }
        line("sketch", &self.sketch);
        line("checkpoint", &self.checkpoint);
        line("checkpoint_id", &self.checkpoint_id);
        if let Some(a) = &self.adapters {
            line("adapters", a);
        }
        if let Some(a) = &self.adapters_id {
            line("adapters_id", a);
        }
        line("frame_files", &self.frame_files.join(","));
        for (k, v) in &self.diagnostics {
            line(&format!("{DIAG}{k}"), v);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut prompt = None;
        let mut cfg = SamplerConfig::default();
        let (mut sketch, mut checkpoint, mut checkpoint_id) = (None, None, None);
        let (mut adapters, mut adapters_id) = (None, None);
        let mut frame_files = None;
        let mut diagnostics = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let Some((k, v)) = config::split_line(raw, n)? else {
                continue;
            };
            let err = |reason: String| Error::Parse { line: n, reason };
            match k {
                "prompt" => prompt = Some(v.parse::<Prompt>().map_err(|e| err(e.to_string()))?),
                "sketch" => sketch = Some(v.to_owned()),
                "checkpoint" => checkpoint = Some(v.to_owned()),
                "checkpoint_id" => checkpoint_id = Some(v.to_owned()),
                "adapters" => adapters = Some(v.to_owned()),
                "adapters_id" => adapters_id = Some(v.to_owned()),
                "frame_files" => {
                    frame_files = Some(if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(str::to_owned).collect()
                    })
                }
                _ => match k.strip_prefix(DIAG) {
                    Some(name) => diagnostics.push((name.to_owned(), v.to_owned())),
                    None => config::set(&mut cfg, k, v).map_err(err)?,
                },
            }
        }
        let missing = |key: &str| Error::Parse {
            line: 0,
            reason: format!("missing `{key}`"),
        };
        Ok(Self {
            prompt: prompt.ok_or_else(|| missing("prompt"))?,
            config: cfg,
            sketch: sketch.ok_or_else(|| missing("sketch"))?,
            checkpoint: checkpoint.ok_or_else(|| missing("checkpoint"))?,
            checkpoint_id: checkpoint_id.ok_or_else(|| missing("checkpoint_id"))?,
            adapters,
            adapters_id,
            frame_files: frame_files.ok_or_else(|| missing("frame_files"))?,
            diagnostics,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(Error::io(path))?)
    }
}
