//! Flat `key = value` run configuration.
//!
//! Keys are the field names of [`MetaConfig`], [`SynthSpec`] and
//! [`ModelDims`]; `channels`, `feature_dim` and `classes` are shared between
//! the generator and the learner. `#` starts a comment. Unknown or repeated
//! keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::MetaGradMode;
use crate::data::SynthSpec;
use crate::learner::ModelDims;
use crate::meta::MetaConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    Value { line: usize, key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything a CLI run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub meta: MetaConfig,
    pub synth: SynthSpec,
    pub dims: ModelDims,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let dims = ModelDims::new(synth.channels, synth.feature_dim, 2, 8, synth.classes);
        Self {
            meta: MetaConfig::default(),
            synth,
            dims,
        }
    }
}

const KEYS: &[&str] = &[
    "eta_inner",
    "beta",
    "meta_batch",
    "adapt_steps",
    "lambda_mix",
    "weight_decay",
    "n_way",
    "k_shot",
    "meta_iterations",
    "mode",
    "seed",
    "n_subjects",
    "t_steps",
    "channels",
    "feature_dim",
    "classes",
    "coupling_strength",
    "noise_sigma",
    "subject_shift_sigma",
    "d_proj",
    "heads",
    "d_attn",
    "d_hidden",
    "d_out",
    "dropout",
    "lambda_recon",
    "gamma",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        // Derived widths follow the base sizes unless set explicitly.
        let (mut d_proj, mut d_hidden, mut d_out) = (None, None, None);

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or(ConfigError::Syntax { line })?;
            let Some(&key) = KEYS.iter().find(|k| **k == key) else {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            };
            if seen.contains(&key) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(key);
            let bad = || ConfigError::Value {
                line,
                key: key.to_string(),
                value: value.to_string(),
            };
            let f = || value.parse::<f64>().map_err(|_| bad());
            let u = || value.parse::<usize>().map_err(|_| bad());
            match key {
                "eta_inner" => cfg.meta.eta_inner = f()?,
                "beta" => cfg.meta.beta = f()?,
                "meta_batch" => cfg.meta.meta_batch = u()?,
                "adapt_steps" => cfg.meta.adapt_steps = u()?,
                "lambda_mix" => cfg.meta.lambda_mix = f()?,
                "weight_decay" => cfg.meta.weight_decay = f()?,
                "n_way" => cfg.meta.n_way = u()?,
                "k_shot" => cfg.meta.k_shot = u()?,
                "meta_iterations" => cfg.meta.meta_iterations = u()?,
                "mode" => cfg.meta.mode = value.parse::<MetaGradMode>().map_err(|_| bad())?,
                "seed" => cfg.meta.seed = value.parse::<u64>().map_err(|_| bad())?,
                "n_subjects" => cfg.synth.n_subjects = u()?,
                "t_steps" => cfg.synth.t_steps = u()?,
                "channels" => cfg.synth.channels = u()?,
                "feature_dim" => cfg.synth.feature_dim = u()?,
                "classes" => cfg.synth.classes = u()?,
                "coupling_strength" => cfg.synth.coupling_strength = f()?,
                "noise_sigma" => cfg.synth.noise_sigma = f()?,
                "subject_shift_sigma" => cfg.synth.subject_shift_sigma = f()?,
                "d_proj" => d_proj = Some(u()?),
                "heads" => cfg.dims.heads = u()?,
                "d_attn" => cfg.dims.d_attn = u()?,
                "d_hidden" => d_hidden = Some(u()?),
                "d_out" => d_out = Some(u()?),
                "dropout" => cfg.dims.dropout = f()?,
                "lambda_recon" => cfg.dims.lambda_recon = f()?,
                "gamma" => cfg.dims.gamma = f()?,
                _ => unreachable!("key list and match arms agree"),
            }
        }

        cfg.dims.channels = cfg.synth.channels;
        cfg.dims.feature_dim = cfg.synth.feature_dim;
        cfg.dims.classes = cfg.synth.classes;
        cfg.dims.d_proj = d_proj.unwrap_or(cfg.dims.feature_dim);
        cfg.dims.d_hidden = d_hidden.unwrap_or(2 * cfg.dims.heads * cfg.dims.d_attn);
        cfg.dims.d_out = d_out.unwrap_or(cfg.dims.feature_dim);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.meta.validate().map_err(|e| inv(&e))?;
        self.dims.validate().map_err(|e| inv(&e))?;
        if self.meta.n_way > self.dims.classes {
            return Err(ConfigError::Invalid(format!(
                "n_way {} exceeds classes {}",
                self.meta.n_way, self.dims.classes
            )));
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` per line in a
    /// fixed order. Parsing the output yields the same configuration.
    pub fn to_text(&self) -> String {
        let (m, s, d) = (&self.meta, &self.synth, &self.dims);
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("eta_inner", m.eta_inner.to_string());
        put("beta", m.beta.to_string());
        put("meta_batch", m.meta_batch.to_string());
        put("adapt_steps", m.adapt_steps.to_string());
        put("lambda_mix", m.lambda_mix.to_string());
        put("weight_decay", m.weight_decay.to_string());
        put("n_way", m.n_way.to_string());
        put("k_shot", m.k_shot.to_string());
        put("meta_iterations", m.meta_iterations.to_string());
        put("mode", m.mode.to_string());
        put("seed", m.seed.to_string());
        put("n_subjects", s.n_subjects.to_string());
        put("t_steps", s.t_steps.to_string());
        put("channels", d.channels.to_string());
        put("feature_dim", d.feature_dim.to_string());
        put("classes", d.classes.to_string());
        put("coupling_strength", s.coupling_strength.to_string());
        put("noise_sigma", s.noise_sigma.to_string());
        put("subject_shift_sigma", s.subject_shift_sigma.to_string());
        put("d_proj", d.d_proj.to_string());
        put("heads", d.heads.to_string());
        put("d_attn", d.d_attn.to_string());
        put("d_hidden", d.d_hidden.to_string());
        put("d_out", d.d_out.to_string());
        put("dropout", d.dropout.to_string());
        put("lambda_recon", d.lambda_recon.to_string());
        put("gamma", d.gamma.to_string());
        out
    }

    /// SHA-256 of [`RunConfig::to_text`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Copy with the environment's reproducibility switch applied.
    pub fn with_deterministic(mut self, on: bool) -> Self {
        self.meta.deterministic = on;
        if on {
            self.dims.dropout = 0.0;
        }
        self
    }
}

/// `STH_DETERMINISTIC=1` in the environment.
pub fn deterministic_from_env() -> bool {
    std::env::var("STH_DETERMINISTIC").is_ok_and(|v| v.trim() == "1")
}
