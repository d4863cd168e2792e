use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use refcolor_cli::config::SCHEMA;
use refcolor_cli::{run_batch, BackendKind, CliConfig, Format, ResizeConfig};
use refcolor_core::backend::ToyAttentionBackend;
use refcolor_core::colorspace::{extract_luminance, GrayImage, RgbImage};
use refcolor_core::evalharness::{PairEntry, PairManifest};
use refcolor_core::io::{load_gray, load_rgb, save_gray, save_rgb};
use refcolor_core::pipeline::Variant;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_refcolor"));
    c.env_remove("REFCOLOR_CHECKPOINT_DIR").env_remove("REFCOLOR_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gray(w: usize, h: usize, seed: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        0.5 + 0.4 * (((x * 3 + y * 2 + seed * 7) as f32) / 5.0).sin()
    })
}

fn color(w: usize, h: usize, seed: usize) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let t = (x + 2 * y + seed) as f32 / (w + h) as f32;
        [0.2 + 0.6 * t, 0.5 + 0.3 * (t * 6.0).sin(), 0.8 - 0.5 * t]
    })
}

fn write_pair(dir: &Path, id: &str, seed: usize, (w, h): (usize, usize)) {
    save_gray(&dir.join(format!("{id}_in.png")), &gray(w, h, seed)).unwrap();
    save_rgb(&dir.join(format!("{id}_ref.png")), &color(w, h, seed + 1)).unwrap();
}

fn write_manifest(dir: &Path, ids: &[&str]) -> PathBuf {
    let pairs = ids
        .iter()
        .map(|id| PairEntry {
            id: id.to_string(),
            input: format!("{id}_in.png").into(),
            reference: format!("{id}_ref.png").into(),
            output: None,
        })
        .collect();
    let path = dir.join("manifest.json");
    let m = PairManifest { version: 1, pairs };
    std::fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    path
}

fn toy_config(steps: usize) -> CliConfig {
    let mut cfg = CliConfig {
        backend: BackendKind::ToyAttn,
        resize: ResizeConfig { enabled: false, size: 16 },
        ..Default::default()
    };
    cfg.transfer.steps = steps;
    cfg.transfer.rounds = 2;
    cfg
}

const TOY: &[&str] = &["--backend", "toy", "--seed", "7", "--no-resize"];

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn colorize(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "colorize".to_string(),
        "--input".into(),
        dir.join("a_in.png").display().to_string(),
        "--ref".into(),
        dir.join("a_ref.png").display().to_string(),
        "--out".into(),
        dir.join(out).display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    bin().args(&args).output().unwrap()
}

#[test]
fn config_round_trips_in_both_formats() {
    let mut cfg = toy_config(4);
    cfg.variant = Some(Variant::NoAdain);
    cfg.transfer.shallow.gamma = 0.25;
    cfg.checkpoint_dir = Some("/models/sd14".into());
    for format in [Format::Toml, Format::Json] {
        let text = cfg.to_string(format).unwrap();
        assert_eq!(CliConfig::parse(&text, format).unwrap(), cfg, "{format:?}");
    }
}

/// Walks the serialized config alongside the schema: every emitted key is
/// declared, every declared key is emitted unless optional, and declared
/// defaults equal the actual defaults.
fn compare(value: &Value, schema: &Value, defs: &Value, path: &str) {
    let schema = match schema.get("$ref").and_then(Value::as_str) {
        Some(r) => &defs[r.trim_start_matches("#/$defs/")],
        None => schema,
    };
    let Some(obj) = value.as_object() else { return };
    let props = schema["properties"].as_object().unwrap_or_else(|| panic!("{path}: no properties"));
    assert_eq!(schema["additionalProperties"], Value::Bool(false), "{path}");
    for (k, v) in obj {
        let sub = props.get(k).unwrap_or_else(|| panic!("{path}.{k} missing from schema"));
        if let Some(d) = sub.get("default") {
            assert_eq!(d, v, "{path}.{k} default");
        }
        compare(v, sub, defs, &format!("{path}.{k}"));
    }
    let optional = ["checkpoint_dir", "site_table", "variant"];
    for k in props.keys() {
        assert!(obj.contains_key(k) || optional.contains(&k.as_str()), "{path}.{k} not emitted");
    }
}

#[test]
fn schema_matches_default_config() {
    let schema: Value = serde_json::from_str(SCHEMA).unwrap();
    let value = serde_json::to_value(CliConfig::default()).unwrap();
    compare(&value, &schema, &schema["$defs"], "");
    let variants: Vec<&str> = schema["properties"]["variant"]["enum"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(variants, Variant::ALL.map(Variant::name));
}

#[test]
fn config_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["config", "default", "--format", "toml"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(CliConfig::parse(&text, Format::Toml).unwrap(), CliConfig::default());

    let o = run(&["config", "schema"]);
    assert!(o.status.success());
    let _: Value = serde_json::from_slice(&o.stdout).unwrap();

    let file = dir.path().join("c.toml");
    std::fs::write(&file, "backend = \"toy-const\"\n[transfer]\nrounds = 1\n").unwrap();
    let o = run(&["config", "check", p(&file), "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = CliConfig::parse(&String::from_utf8(o.stdout).unwrap(), Format::Json).unwrap();
    assert_eq!(cfg.backend, BackendKind::ToyConst);
    assert_eq!(cfg.transfer.rounds, 1);

    std::fs::write(&file, "[transfer]\nrouns = 1\n").unwrap();
    let o = run(&["config", "check", p(&file)]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_str(stderr(&o).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "invalid_config");
}

#[test]
fn colorize_is_deterministic_and_keeps_size() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 1, (16, 16));
    let first = colorize(dir.path(), "one.png", TOY);
    assert!(first.status.success(), "{}", stderr(&first));
    let report: Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(report["width"], 16);
    assert_eq!(report["denoiser_calls"], 15 + 3 * 10 + 2 * 5);
    let second = colorize(dir.path(), "two.png", TOY);
    assert!(second.status.success());
    let a = std::fs::read(dir.path().join("one.png")).unwrap();
    let b = std::fs::read(dir.path().join("two.png")).unwrap();
    assert_eq!(a, b);

    let out = load_rgb(&dir.path().join("one.png")).unwrap();
    let input = load_gray(&dir.path().join("a_in.png")).unwrap();
    assert_eq!(out.dims(), (16, 16));
    // clamping out-of-gamut colors moves some extreme pixels; most stay put
    let mut diff: Vec<u8> = extract_luminance(&out)
        .quantized()
        .iter()
        .zip(input.quantized())
        .map(|(a, b)| a.abs_diff(b))
        .collect::<Vec<_>>();
    diff.sort_unstable();
    assert!(diff[diff.len() / 2] <= 1, "lightness moved: {diff:?}");
}

#[test]
fn resize_round_trip_restores_input_size() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 2, (20, 12));
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"resize": {"size": 16}, "transfer": {"rounds": 1}}"#).unwrap();
    let o = colorize(dir.path(), "out.png", &["--backend", "toy", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_rgb(&dir.path().join("out.png")).unwrap().dims(), (20, 12));
}

#[test]
fn variant_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 3, (16, 16));
    let base = colorize(dir.path(), "base.png", TOY);
    let mut args = TOY.to_vec();
    args.extend(["--variant", "no_guidance"]);
    let ablated = colorize(dir.path(), "ablated.png", &args);
    assert!(ablated.status.success(), "{}", stderr(&ablated));
    let calls = |o: &Output| serde_json::from_slice::<Value>(&o.stdout).unwrap()["denoiser_calls"].clone();
    assert_eq!(calls(&base), 55);
    assert_eq!(calls(&ablated), 15 + 3 * 5 + 2 * 5);
    assert_ne!(
        std::fs::read(dir.path().join("base.png")).unwrap(),
        std::fs::read(dir.path().join("ablated.png")).unwrap()
    );

    args.pop();
    args.push("no_such_variant");
    let o = colorize(dir.path(), "x.png", &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("\"error\""));
}

#[test]
fn usage_errors_exit_two() {
    let o = run(&["colorize", "--input", "a.png", "--out", "b.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--ref"));
    assert_eq!(run(&["colorize", "--input", "a", "--ref", "b", "--out", "c", "--space", "hsv"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = colorize(dir.path(), "out.png", TOY);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_str(stderr(&o).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn pretrained_without_weights_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 1, (16, 16));
    let o = colorize(dir.path(), "out.png", &["--no-resize"]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_str(stderr(&o).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "invalid_config");
    assert!(err["message"].as_str().unwrap().contains("REFCOLOR_CHECKPOINT_DIR"));
}

#[test]
fn batch_writes_outputs_and_report() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 1, (16, 16));
    write_pair(dir.path(), "b", 5, (16, 8));
    let manifest = write_manifest(dir.path(), &["a", "b"]);
    let out = dir.path().join("out");
    let mut args = vec!["batch", "--manifest", p(&manifest), "--out", p(&out), "--jobs", "2"];
    args.extend(TOY);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("a.png").is_file() && out.join("b.png").is_file());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pairs"].as_array().unwrap().len(), 2);
    assert!(std::fs::read_to_string(out.join("report.md")).unwrap().contains("HIS"));

    // scoring the same outputs again through `evaluate`
    let o = run(&["evaluate", "--manifest", p(&manifest), "--outputs", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(again["mean_his"], report["mean_his"]);
}

#[test]
fn batch_continues_past_a_bad_pair() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 1, (16, 16));
    let manifest = write_manifest(dir.path(), &["a", "gone"]);
    let out = dir.path().join("out");
    let mut args = vec!["batch", "--manifest", p(&manifest), "--out", p(&out)];
    args.extend(TOY);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["outputs"].as_array().unwrap().len(), 1);
    assert_eq!(summary["failures"][0]["id"], "gone");
    assert_eq!(summary["failures"][0]["kind"], "io");
    assert!(out.join("a.png").is_file());
    assert!(out.join("report.json").is_file());
}

#[test]
fn jobs_bound_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    let ids = ["a", "b", "c", "d", "e"];
    for (i, id) in ids.iter().enumerate() {
        write_pair(dir.path(), id, i, (8, 8));
    }
    let manifest = PairManifest::load(&write_manifest(dir.path(), &ids)).unwrap();
    let cfg = toy_config(2);
    let backend = ToyAttentionBackend::new(0).with_factor(8);
    for jobs in [1, 2] {
        let out = dir.path().join(format!("out{jobs}"));
        let r = run_batch(&cfg, &backend, &manifest, &out, jobs, 64).unwrap();
        assert!(r.failures.is_empty());
        assert_eq!(r.outputs.len(), 5);
        assert!((1..=jobs).contains(&r.peak_parallel), "{jobs}: {}", r.peak_parallel);
    }
    assert_eq!(
        std::fs::read(dir.path().join("out1/c.png")).unwrap(),
        std::fs::read(dir.path().join("out2/c.png")).unwrap()
    );
    assert!(run_batch(&cfg, &backend, &manifest, &dir.path().join("x"), 0, 64).is_err());
}

#[test]
fn empty_manifest_is_fine() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[]);
    let out = dir.path().join("out");
    let mut args = vec!["batch", "--manifest", p(&manifest), "--out", p(&out)];
    args.extend(TOY);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("report.json").is_file());
}

#[test]
fn attention_dump_writes_heatmaps_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 4, (16, 8));
    let out = dir.path().join("dump");
    let mut args = vec![
        "attention",
        "dump",
        "--input",
        "",
        "--ref",
        "",
        "--out",
        p(&out),
        "--limit",
        "6",
        "--layers",
        "7,10",
    ];
    let input = dir.path().join("a_in.png");
    let reference = dir.path().join("a_ref.png");
    args[3] = p(&input);
    args[5] = p(&reference);
    args.extend(TOY);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["row_stochastic"], true);
    assert_eq!(summary["heatmaps"], 6);
    let audit: Value = serde_json::from_str(&std::fs::read_to_string(out.join("audit.json")).unwrap()).unwrap();
    assert!(audit["audit"]["maps"].as_u64().unwrap() > 0);
    for h in audit["heatmaps"].as_array().unwrap() {
        let name = Path::new(h.as_str().unwrap()).file_name().unwrap().to_string_lossy().into_owned();
        assert!(name.contains("_l07_") || name.contains("_l10_"), "{name}");
    }
    assert!(out.join("colorized.png").is_file());
}
