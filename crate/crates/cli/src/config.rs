//! The single TOML file binding every tunable.

use std::path::{Path, PathBuf};

use memgraph_core::ggpo::DEFAULT_CLIP_EPS;
use memgraph_core::retrieval::{DEFAULT_CLIP_LEN_S, DEFAULT_FRAMES_PER_CLIP, DEFAULT_SEARCH_K};
use memgraph_core::runtime::{EndpointSettings, DEFAULT_T_MAX};
use memgraph_core::{EnergyParams, EpisodeConfig, JudgeMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    pub t_max: usize,
    pub search_k: usize,
    pub n_frames: usize,
    pub clip_len_s: f64,
    /// File holding a replacement system instruction.
    pub instruction_path: Option<PathBuf>,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        RuntimeSection {
            t_max: DEFAULT_T_MAX,
            search_k: DEFAULT_SEARCH_K,
            n_frames: DEFAULT_FRAMES_PER_CLIP,
            clip_len_s: DEFAULT_CLIP_LEN_S,
            instruction_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    /// JSON list of responses for the scripted policy.
    pub script: Option<PathBuf>,
    pub remote: EndpointSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    ExactMatch,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    pub mode: JudgeKind,
    pub remote: EndpointSettings,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Built corpus file.
    pub corpus: Option<PathBuf>,
    /// Where per-episode checkpoints go; no checkpoints when unset.
    pub session_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GgpoSection {
    pub clip_eps: f64,
    /// Token-overlap threshold when gold evidence is given as text.
    pub text_overlap: f64,
}

impl Default for GgpoSection {
    fn default() -> Self {
        GgpoSection { clip_eps: DEFAULT_CLIP_EPS, text_overlap: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub energy: EnergyParams,
    pub runtime: RuntimeSection,
    pub policy: PolicySection,
    pub judge: JudgeSection,
    pub paths: PathsSection,
    pub ggpo: GgpoSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config {
            field: e.span().map_or_else(String::new, |s| locate(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            field: "--config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Make file paths in the config relative to the config file's directory.
    fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.paths.corpus.as_mut(),
            self.paths.session_dir.as_mut(),
            self.policy.script.as_mut(),
            self.runtime.instruction_path.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.paths.output_dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, message: &str| Err(CliError::Config { field: field.into(), message: message.into() });
        if let Err(e) = self.energy.validate() {
            return bad("energy", &e.to_string());
        }
        if self.runtime.t_max == 0 {
            return bad("runtime.t_max", "must be at least 1");
        }
        if self.runtime.search_k == 0 {
            return bad("runtime.search_k", "must be at least 1");
        }
        if self.runtime.n_frames == 0 {
            return bad("runtime.n_frames", "must be at least 1");
        }
        if !(self.runtime.clip_len_s.is_finite() && self.runtime.clip_len_s > 0.0) {
            return bad("runtime.clip_len_s", "must be positive");
        }
        if !(self.ggpo.clip_eps > 0.0 && self.ggpo.clip_eps < 1.0) {
            return bad("ggpo.clip_eps", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ggpo.text_overlap) {
            return bad("ggpo.text_overlap", "must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn episode_config(&self) -> Result<EpisodeConfig, CliError> {
        let instruction = match &self.runtime.instruction_path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config {
                field: "runtime.instruction_path".into(),
                message: format!("{}: {e}", p.display()),
            })?,
            None => memgraph_core::protocol::DEFAULT_INSTRUCTION.to_string(),
        };
        Ok(EpisodeConfig {
            t_max: self.runtime.t_max,
            energy: self.energy.clone(),
            search_k: self.runtime.search_k,
            n_frames: self.runtime.n_frames,
            instruction,
            judge: self.judge_mode(),
        })
    }

    pub fn judge_mode(&self) -> JudgeMode {
        match self.judge.mode {
            JudgeKind::ExactMatch => JudgeMode::ExactMatch,
            JudgeKind::Remote => JudgeMode::Remote(self.judge.remote.clone()),
        }
    }

    pub fn corpus_path(&self) -> Result<&Path, CliError> {
        let p = self.paths.corpus.as_deref().ok_or_else(|| CliError::Config {
            field: "paths.corpus".into(),
            message: "not set".into(),
        })?;
        if !p.exists() {
            return Err(CliError::Config {
                field: "paths.corpus".into(),
                message: format!("{} does not exist", p.display()),
            });
        }
        Ok(p)
    }
}

/// `line:column` of a byte offset, for config error messages.
fn locate(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    format!("line {line}, column {col}")
}
