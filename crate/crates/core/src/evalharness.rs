//! Histogram intersection similarity (HIS) on ab histograms, manifest-driven
//! evaluation, and subprocess adapters for external scorers such as FID or
//! LPIPS.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{rgb_pixel_to_lab, RgbImage};
use crate::error::{Error, Result};
use crate::io::{load_gray, load_rgb};

pub const DEFAULT_BINS: usize = 64;
/// Range covered by the histogram on both a and b.
pub const AB_MIN: f64 = -128.0;
pub const AB_MAX: f64 = 128.0;

fn bin_of(v: f64, bins: usize) -> usize {
    let pos = (v - AB_MIN) / (AB_MAX - AB_MIN) * bins as f64;
    (pos.floor().max(0.0) as usize).min(bins - 1)
}

/// L1-normalized `bins x bins` histogram of the Lab (a, b) values, row-major
/// in a. Values outside [-128, 128) fall into the edge bins.
pub fn ab_histogram(img: &RgbImage, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let mut hist = vec![0.0f64; bins * bins];
    for px in img.pixels() {
        let [_, a, b] = rgb_pixel_to_lab(px.map(f64::from));
        hist[bin_of(a, bins) * bins + bin_of(b, bins)] += 1.0;
    }
    let n = img.pixels().len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}

/// Sum of bin-wise minima of two normalized histograms.
pub fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// Histogram intersection similarity between the ab distributions of two
/// images of any size.
pub fn his(a: &RgbImage, b: &RgbImage, bins: usize) -> Result<f64> {
    Ok(histogram_intersection(&ab_histogram(a, bins)?, &ab_histogram(b, bins)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub input: PathBuf,
    pub reference: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn manifest_version() -> u32 {
    1
}

/// Input/reference pairs. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairManifest {
    #[serde(default = "manifest_version")]
    pub version: u32,
    pub pairs: Vec<PairEntry>,
}

impl PairManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest: PairManifest =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        manifest.validate()?;
        let base = path.parent().unwrap_or(Path::new(""));
        for pair in &mut manifest.pairs {
            pair.input = base.join(&pair.input);
            pair.reference = base.join(&pair.reference);
            if let Some(out) = &pair.output {
                pair.output = Some(base.join(out));
            }
        }
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::InvalidConfig(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate pair id `{}`", p.id)));
            }
        }
        Ok(())
    }

    /// Output path of `pair`: its own `output` field, else `<dir>/<id>.png`.
    pub fn output_path(pair: &PairEntry, output_dir: Option<&Path>) -> Option<PathBuf> {
        pair.output
            .clone()
            .or_else(|| output_dir.map(|d| d.join(format!("{}.png", pair.id))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    /// HIS(output, reference); `None` when the pair could not be scored.
    pub his: Option<f64>,
    /// HIS(gray input replicated to three channels, reference).
    pub gray_his: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScore {
    pub name: String,
    pub value: f64,
    pub tool_version: Option<String>,
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bins: usize,
    pub pairs: Vec<PairScore>,
    pub mean_his: Option<f64>,
    pub mean_gray_his: Option<f64>,
    pub failures: usize,
    #[serde(default)]
    pub external: Vec<ExternalScore>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn score_pair(pair: &PairEntry, output_dir: Option<&Path>, bins: usize) -> PairScore {
    let mut errors = Vec::new();
    let reference = load_rgb(&pair.reference).map_err(|e| errors.push(e.to_string())).ok();
    let gray = load_gray(&pair.input).map_err(|e| errors.push(e.to_string())).ok();
    let output = match PairManifest::output_path(pair, output_dir) {
        Some(path) => load_rgb(&path).map_err(|e| errors.push(e.to_string())).ok(),
        None => {
            errors.push("no output path".to_string());
            None
        }
    };
    let mut score = |img: Option<&RgbImage>| -> Option<f64> {
        let (img, reference) = (img?, reference.as_ref()?);
        his(img, reference, bins).map_err(|e| errors.push(e.to_string())).ok()
    };
    let his_value = score(output.as_ref());
    let gray_his = score(gray.map(|g| g.to_rgb()).as_ref());
    PairScore {
        id: pair.id.clone(),
        his: his_value,
        gray_his,
        errors,
    }
}

/// Scores every pair in parallel. Missing or unreadable files are recorded
/// on the pair and counted in `failures`; the rest of the report is still
/// produced.
pub fn evaluate(
    manifest: &PairManifest,
    output_dir: Option<&Path>,
    bins: usize,
) -> Result<MetricReport> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let pairs: Vec<PairScore> = manifest
        .pairs
        .par_iter()
        .map(|p| score_pair(p, output_dir, bins))
        .collect();
    Ok(MetricReport {
        bins,
        mean_his: mean(pairs.iter().filter_map(|p| p.his)),
        mean_gray_his: mean(pairs.iter().filter_map(|p| p.gray_his)),
        failures: pairs.iter().filter(|p| !p.errors.is_empty()).count(),
        pairs,
        external: Vec::new(),
    })
}

impl MetricReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    fn external(&self, name: &str) -> Option<f64> {
        self.external
            .iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
            .map(|s| s.value)
    }

    /// Markdown table with one row for the gray baseline and one for
    /// `method`. External metrics are shown for the method row only.
    pub fn to_markdown(&self, method: &str) -> String {
        let cell = |v: Option<f64>, digits: usize| match v {
            Some(v) => format!("{v:.digits$}"),
            None => "-".to_string(),
        };
        let mut out = String::from("| Method | FID | SI-FID | HIS | LPIPS |\n|---|---|---|---|---|\n");
        out += &format!(
            "| Grayscale input | - | - | {} | - |\n",
            cell(self.mean_gray_his, 3)
        );
        out += &format!(
            "| {method} | {} | {} | {} | {} |\n",
            cell(self.external("fid"), 2),
            cell(self.external("si-fid"), 2),
            cell(self.mean_his, 3),
            cell(self.external("lpips"), 3),
        );
        out
    }
}

/// An external metric program. `{outputs}` and `{references}` in the
/// arguments are replaced by directories; the last number printed on stdout
/// is the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalScorer {
    pub name: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub version_command: Option<Vec<String>>,
}

fn run_command(name: &str, argv: &[String]) -> Result<String> {
    let (program, args) = argv.split_first().ok_or_else(|| Error::ExternalScorer {
        name: name.to_string(),
        message: "empty command".into(),
    })?;
    let out = Command::new(program)
        .args(args)
        .output()
        .map_err(|e| Error::ExternalScorer {
            name: name.to_string(),
            message: format!("cannot run `{program}`: {e}"),
        })?;
    if !out.status.success() {
        return Err(Error::ExternalScorer {
            name: name.to_string(),
            message: format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

impl ExternalScorer {
    pub fn run(&self, outputs: &Path, references: &Path) -> Result<ExternalScore> {
        let argv: Vec<String> = self
            .command
            .iter()
            .map(|a| {
                a.replace("{outputs}", &outputs.to_string_lossy())
                    .replace("{references}", &references.to_string_lossy())
            })
            .collect();
        let stdout = run_command(&self.name, &argv)?;
        let value = stdout
            .split_whitespace()
            .rev()
            .find_map(|tok| tok.parse::<f64>().ok())
            .ok_or_else(|| Error::ExternalScorer {
                name: self.name.clone(),
                message: format!("no numeric score in output `{}`", stdout.trim()),
            })?;
        let tool_version = match &self.version_command {
            Some(cmd) => Some(run_command(&self.name, cmd)?.trim().to_string()),
            None => None,
        };
        Ok(ExternalScore {
            name: self.name.clone(),
            value,
            tool_version,
            command: argv,
        })
    }
}
