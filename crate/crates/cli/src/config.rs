//! The `refcolor` configuration file (TOML or JSON).

use std::path::{Path, PathBuf};

use refcolor_core::pipeline::{TransferConfig, Variant};
use refcolor_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// JSON Schema for [`CliConfig`].
pub const SCHEMA: &str = include_str!("../schema/cli_config.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Fixed seeded noise grid; exact DDIM round trips.
    ToyConst,
    /// Tiny seeded network with real self-attention sites.
    #[value(alias = "toy")]
    ToyAttn,
    /// Stable Diffusion 1.4 weights from a checkpoint directory.
    #[default]
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResizeConfig {
    /// Bicubic resize to `size x size` before colorizing, and back after.
    pub enabled: bool,
    pub size: usize,
}

impl Default for ResizeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            size: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub backend: BackendKind,
    /// Overrides the checkpoint directory environment variable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Site table for the pretrained backend; the bundled SD 1.4 table when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub site_table: Option<PathBuf>,
    /// Image-to-latent factor of the toy backends.
    pub toy_factor: usize,
    pub resize: ResizeConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub transfer: TransferConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::default(),
            checkpoint_dir: None,
            site_table: None,
            toy_factor: 8,
            resize: ResizeConfig::default(),
            variant: None,
            transfer: TransferConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn of(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

impl CliConfig {
    pub fn parse(text: &str, format: Format) -> Result<Self> {
        let cfg: CliConfig = match format {
            Format::Toml => toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?,
            Format::Json => serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, Format::of(path))
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_string(&self, format: Format) -> Result<String> {
        match format {
            Format::Toml => toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string())),
            Format::Json => serde_json::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transfer.validate()?;
        if self.toy_factor == 0 {
            return Err(Error::InvalidConfig("toy_factor must be >= 1".into()));
        }
        if self.resize.enabled && self.resize.size == 0 {
            return Err(Error::InvalidConfig("resize.size must be >= 1".into()));
        }
        Ok(())
    }

    /// Transfer settings after applying the configured variant.
    pub fn effective_transfer(&self) -> TransferConfig {
        match self.variant {
            Some(v) => v.apply(&self.transfer),
            None => self.transfer,
        }
    }
}
