//! Decoder site tables: which up-block self-attention layers are hookable
//! and which transfer group each belongs to.

use std::path::Path;

use refcolor_core::backend::LayerGroup;
use refcolor_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Table shipped for Stable Diffusion 1.4.
pub const SD14_SITES_JSON: &str = include_str!("../data/sd14_sites.json");

pub const SITE_TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub layer_index: usize,
    pub up_block: usize,
    pub attention: usize,
    /// Transformer block inside the attention module; 0 for SD 1.x.
    #[serde(default)]
    pub block: usize,
    pub group: LayerGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteTable {
    pub version: u32,
    pub checkpoint: String,
    #[serde(default)]
    pub numbering: String,
    /// Whether the numbering has been checked against a reference
    /// implementation.
    #[serde(default)]
    pub verified: bool,
    pub sites: Vec<SiteEntry>,
}

impl SiteTable {
    pub fn sd14() -> Self {
        Self::from_json(SD14_SITES_JSON).expect("bundled site table parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: SiteTable = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("site table: {e}")))?;
        table.check()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let table: SiteTable = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<()> {
        if self.version != SITE_TABLE_VERSION {
            return Err(Error::InvalidConfig(format!(
                "site table version {} (supported: {SITE_TABLE_VERSION})",
                self.version
            )));
        }
        let mut layers: Vec<usize> = self.sites.iter().map(|s| s.layer_index).collect();
        layers.sort_unstable();
        if layers.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("site table repeats a layer index".into()));
        }
        let mut slots: Vec<_> = self
            .sites
            .iter()
            .map(|s| (s.up_block, s.attention, s.block))
            .collect();
        slots.sort_unstable();
        if slots.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("site table maps two layers to one module".into()));
        }
        Ok(())
    }

    pub fn find(&self, up_block: usize, attention: usize, block: usize) -> Option<&SiteEntry> {
        self.sites
            .iter()
            .find(|s| s.up_block == up_block && s.attention == attention && s.block == block)
    }

    pub fn layers(&self, group: LayerGroup) -> Vec<usize> {
        let mut out: Vec<_> = self
            .sites
            .iter()
            .filter(|s| s.group == group)
            .map(|s| s.layer_index)
            .collect();
        out.sort_unstable();
        out
    }
}
