use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refcolor_cli::config::SCHEMA;
use refcolor_cli::{build_backend, colorize_files, dump_attention, error_json, run_batch, write_text, BackendKind, CliConfig, Format};
use refcolor_core::colorspace::ColorSpace;
use refcolor_core::evalharness::{evaluate, ExternalScorer, PairManifest};
use refcolor_core::pipeline::Variant;
use refcolor_core::{Error, Result};
use tracing_subscriber::EnvFilter;

/// Exemplar-based colorization by steering diffusion self-attention.
#[derive(Parser, Debug)]
#[command(name = "refcolor", version)]
struct Cli {
    /// Log level filter (also read from REFCOLOR_LOG).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    /// Emit logs as JSON lines.
    #[arg(long, global = true)]
    log_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Colorize one grayscale image from one color reference.
    Colorize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Colorize every pair of a manifest, then score the outputs.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for outputs and the report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score existing outputs against their references.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<id>.png` outputs for pairs without an output path.
        #[arg(long)]
        outputs: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the markdown table here.
        #[arg(long)]
        markdown: Option<PathBuf>,
        /// JSON list of external scorer commands.
        #[arg(long, requires = "references")]
        scorers: Option<PathBuf>,
        /// Reference directory handed to external scorers.
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Attention diagnostics.
    Attention {
        #[command(subcommand)]
        command: AttentionCommand,
    },
    /// Inspect or check configuration files.
    Config {
        #[command(subcommand)]
        command: ConfigCommand,
    },
}

#[derive(Subcommand, Debug)]
enum AttentionCommand {
    /// Colorize one pair and write attention heatmaps plus a
    /// row-stochasticity audit.
    Dump {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Most heatmaps to write.
        #[arg(long, default_value_t = 64)]
        limit: usize,
        /// Only these layers (comma separated).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Toml,
    Json,
}

#[derive(Subcommand, Debug)]
enum ConfigCommand {
    /// Print the default configuration.
    Default {
        #[arg(long, value_enum, default_value = "toml")]
        format: FormatArg,
    },
    /// Print the JSON Schema of the configuration file.
    Schema,
    /// Validate a configuration file and print it with defaults filled in.
    Check {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "toml")]
        format: FormatArg,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Ablation variant, e.g. no_guidance.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["lab", "yuv"])]
    space: Option<String>,
    /// Keep the input resolution instead of resizing to the working size.
    #[arg(long)]
    no_resize: bool,
    /// Checkpoint directory for the pretrained backend.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<CliConfig> {
        let mut cfg = match &self.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        if let Some(b) = self.backend {
            cfg.backend = b;
        }
        if let Some(v) = &self.variant {
            cfg.variant = Some(v.parse::<Variant>()?);
        }
        if let Some(s) = self.seed {
            cfg.transfer.seed = s;
        }
        if let Some(s) = &self.space {
            cfg.transfer.color_space = s.parse::<ColorSpace>()?;
        }
        if self.no_resize {
            cfg.resize.enabled = false;
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint_dir = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn format_of(f: FormatArg) -> Format {
    match f {
        FormatArg::Toml => Format::Toml,
        FormatArg::Json => Format::Json,
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Model(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn load_scorers(path: &Path) -> Result<Vec<ExternalScorer>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Returns whether everything succeeded; `Err` is a hard failure.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Colorize {
            input,
            reference,
            out,
            run,
        } => {
            let cfg = run.config()?;
            let backend = build_backend(&cfg)?;
            let r = colorize_files(&cfg, &*backend, &input, &reference, &out, None)?;
            print_json(&r)?;
            Ok(true)
        }
        Command::Batch {
            manifest,
            out,
            jobs,
            bins,
            run,
        } => {
            let cfg = run.config()?;
            let manifest = PairManifest::load(&manifest)?;
            let backend = build_backend(&cfg)?;
            let outcome = run_batch(&cfg, &*backend, &manifest, &out, jobs, bins)?;
            print_json(&serde_json::json!({
                "outputs": outcome.outputs,
                "failures": outcome.failures,
                "mean_his": outcome.report.mean_his,
                "mean_gray_his": outcome.report.mean_gray_his,
                "report": out.join("report.json"),
            }))?;
            Ok(outcome.failures.is_empty())
        }
        Command::Evaluate {
            manifest,
            outputs,
            bins,
            report,
            markdown,
            scorers,
            references,
        } => {
            let manifest = PairManifest::load(&manifest)?;
            let mut rep = evaluate(&manifest, outputs.as_deref(), bins)?;
            if let (Some(scorers), Some(refs)) = (scorers, references) {
                let out_dir = outputs.clone().ok_or_else(|| {
                    Error::InvalidConfig("external scorers need --outputs".into())
                })?;
                for s in load_scorers(&scorers)? {
                    rep.external.push(s.run(&out_dir, &refs)?);
                }
            }
            if let Some(md) = markdown {
                write_text(&md, &rep.to_markdown("Ours"))?;
            }
            match report {
                Some(p) => rep.save_json(&p)?,
                None => print_json(&rep)?,
            }
            Ok(rep.failures == 0)
        }
        Command::Attention {
            command:
                AttentionCommand::Dump {
                    input,
                    reference,
                    out,
                    limit,
                    layers,
                    run,
                },
        } => {
            let cfg = run.config()?;
            let backend = build_backend(&cfg)?;
            let summary = dump_attention(&cfg, &*backend, &input, &reference, &out, limit, layers)?;
            print_json(&serde_json::json!({
                "colorized": summary.colorized,
                "heatmaps": summary.heatmaps.len(),
                "maps": summary.audit.maps,
                "max_row_error": summary.audit.max_row_error,
                "row_stochastic": summary.row_stochastic,
            }))?;
            Ok(true)
        }
        Command::Config { command } => {
            match command {
                ConfigCommand::Default { format } => {
                    print!("{}", CliConfig::default().to_string(format_of(format))?);
                }
                ConfigCommand::Schema => print!("{SCHEMA}"),
                ConfigCommand::Check { file, format } => {
                    print!("{}", CliConfig::load(&file)?.to_string(format_of(format))?);
                }
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_from_env("REFCOLOR_LOG").unwrap_or_else(|_| EnvFilter::new(&cli.log));
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if cli.log_json {
        builder.json().init();
    } else {
        builder.init();
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(1)
        }
    }
}
