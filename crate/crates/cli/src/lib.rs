//! Library side of the `refcolor` command: configuration, backend selection
//! and the bodies of the subcommands. `main.rs` only parses arguments.

pub mod config;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::ArrayView2;
use refcolor_core::attention::{AttentionObserver, HeatmapDumper, MapContext, StochasticityAudit};
use refcolor_core::backend::{ConstantNoiseBackend, DenoiserBackend, ToyAttentionBackend};
use refcolor_core::colorspace::replace_luminance;
use refcolor_core::evalharness::{evaluate, MetricReport, PairManifest};
use refcolor_core::io::{load_gray, load_rgb, resize_gray, resize_rgb, save_rgb};
use refcolor_core::pipeline::{ablation_run, colorize_with, ColorizationJob, PostprocessMode};
use refcolor_core::{Error, Result};
use refcolor_sd::{SdBackend, SiteTable, CHECKPOINT_ENV};
use serde::Serialize;
use tracing::{error, info};

pub use config::{BackendKind, CliConfig, Format, ResizeConfig};

pub type SharedBackend = Box<dyn DenoiserBackend + Send + Sync>;

pub fn build_backend(cfg: &CliConfig) -> Result<SharedBackend> {
    let seed = cfg.transfer.seed;
    Ok(match cfg.backend {
        BackendKind::ToyConst => Box::new(ConstantNoiseBackend::new(seed).with_factor(cfg.toy_factor)),
        BackendKind::ToyAttn => Box::new(ToyAttentionBackend::new(seed).with_factor(cfg.toy_factor)),
        BackendKind::Pretrained => {
            let table = match &cfg.site_table {
                Some(p) => SiteTable::load(p)?,
                None => SiteTable::sd14(),
            };
            let dir = cfg
                .checkpoint_dir
                .clone()
                .or_else(SdBackend::checkpoint_dir_from_env)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "the pretrained backend needs checkpoint_dir or {CHECKPOINT_ENV}"
                    ))
                })?;
            info!(dir = %dir.display(), "loading checkpoint");
            Box::new(SdBackend::from_checkpoint_dir(&dir, &table)?)
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairResult {
    pub output: PathBuf,
    pub width: usize,
    pub height: usize,
    pub denoiser_calls: usize,
}

/// Colorizes one pair of files and writes the result as an 8-bit PNG.
///
/// With resizing on, both images are resized to the working size, and the
/// result is resized back to the input's size, after which the input's own
/// lightness is put back. Without resizing, the reference is resized to the
/// input's size.
pub fn colorize_files<B: DenoiserBackend + ?Sized>(
    cfg: &CliConfig,
    backend: &B,
    input: &Path,
    reference: &Path,
    out: &Path,
    observer: Option<&mut dyn AttentionObserver>,
) -> Result<PairResult> {
    cfg.validate()?;
    let gray = load_gray(input)?;
    let reference = load_rgb(reference)?;
    let (w, h) = gray.dims();
    let (work_w, work_h) = if cfg.resize.enabled {
        (cfg.resize.size, cfg.resize.size)
    } else {
        (w, h)
    };
    let job = ColorizationJob {
        input: resize_gray(&gray, work_w, work_h),
        reference: resize_rgb(&reference, work_w, work_h),
        config: cfg.transfer,
    };
    let result = match (cfg.variant, observer) {
        (Some(v), None) => ablation_run(&job, backend, v.name())?,
        (variant, observer) => {
            let job = ColorizationJob {
                config: variant.map_or(job.config, |v| v.apply(&job.config)),
                ..job
            };
            colorize_with(&job, backend, observer)?
        }
    };
    let effective = cfg.effective_transfer();
    let image = if (work_w, work_h) == (w, h) {
        result.image
    } else {
        let back = resize_rgb(&result.image, w, h);
        match effective.postprocess {
            PostprocessMode::Off => back,
            _ => replace_luminance(&back, &gray, effective.color_space)?,
        }
    };
    save_rgb(out, &image)?;
    Ok(PairResult {
        output: out.to_path_buf(),
        width: w,
        height: h,
        denoiser_calls: result.calls.total(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairFailure {
    pub id: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchOutcome {
    pub outputs: Vec<PathBuf>,
    pub failures: Vec<PairFailure>,
    pub report: MetricReport,
    /// Most pairs that were in flight at once.
    pub peak_parallel: usize,
}

/// Colorizes every manifest pair with at most `jobs` pairs in flight, then
/// scores the outputs. A failing pair is logged and recorded; the others
/// still run. `report.json` and `report.md` are written to `out_dir`.
pub fn run_batch<B: DenoiserBackend + Sync + ?Sized>(
    cfg: &CliConfig,
    backend: &B,
    manifest: &PairManifest,
    out_dir: &Path,
    jobs: usize,
    bins: usize,
) -> Result<BatchOutcome> {
    cfg.validate()?;
    if jobs == 0 {
        return Err(Error::InvalidConfig("jobs must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let next = AtomicUsize::new(0);
    let in_flight = AtomicUsize::new(0);
    let peak = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let workers = jobs.min(manifest.pairs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(pair) = manifest.pairs.get(i) else { break };
                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let out = PairManifest::output_path(pair, Some(out_dir)).expect("output dir given");
                let r = colorize_files(cfg, backend, &pair.input, &pair.reference, &out, None);
                in_flight.fetch_sub(1, Ordering::SeqCst);
                match &r {
                    Ok(_) => info!(pair = %pair.id, out = %out.display(), "pair done"),
                    Err(e) => error!(pair = %pair.id, kind = e.kind(), error = %e, "pair failed"),
                }
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(p) => outputs.push(p.output),
            Err(e) => failures.push(PairFailure {
                id: manifest.pairs[i].id.clone(),
                kind: e.kind().to_string(),
                message: e.to_string(),
            }),
        }
    }
    let report = evaluate(manifest, Some(out_dir), bins)?;
    report.save_json(&out_dir.join("report.json"))?;
    write_text(&out_dir.join("report.md"), &report.to_markdown("Ours"))?;
    Ok(BatchOutcome {
        outputs,
        failures,
        report,
        peak_parallel: peak.into_inner(),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Feeds every map to both the audit and the heatmap writer.
struct Tee<'a> {
    audit: &'a mut StochasticityAudit,
    dumper: &'a mut HeatmapDumper,
}

impl AttentionObserver for Tee<'_> {
    fn observe(&mut self, ctx: &MapContext, map: ArrayView2<f32>) {
        self.audit.observe(ctx, map);
        self.dumper.observe(ctx, map);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DumpSummary {
    pub colorized: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub heatmap_errors: Vec<String>,
    pub audit: StochasticityAudit,
    pub row_stochastic: bool,
}

/// Colorizes one pair while writing attention heatmaps and a
/// row-stochasticity audit to `out_dir`.
pub fn dump_attention<B: DenoiserBackend + ?Sized>(
    cfg: &CliConfig,
    backend: &B,
    input: &Path,
    reference: &Path,
    out_dir: &Path,
    limit: usize,
    layers: Option<Vec<usize>>,
) -> Result<DumpSummary> {
    let mut audit = StochasticityAudit::new();
    let mut dumper = HeatmapDumper::new(out_dir.join("heatmaps"), limit);
    if let Some(layers) = layers {
        dumper = dumper.only_layers(layers);
    }
    let colorized = out_dir.join("colorized.png");
    {
        let mut tee = Tee {
            audit: &mut audit,
            dumper: &mut dumper,
        };
        colorize_files(cfg, backend, input, reference, &colorized, Some(&mut tee))?;
    }
    let summary = DumpSummary {
        colorized,
        heatmaps: dumper.written().to_vec(),
        heatmap_errors: dumper.errors().to_vec(),
        row_stochastic: audit.passes(1e-6),
        audit,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Model(e.to_string()))?;
    write_text(&out_dir.join("audit.json"), &text)?;
    Ok(summary)
}

/// Machine-readable error line for stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}
