//! Acceptance run: one PASS/FAIL/SKIP line per criterion, each at its
//! stated tolerance. The last criterion needs real weights and a pair
//! manifest and is skipped without them.
//!
//! `cargo test -p refcolor-cli --test acceptance -- --nocapture`

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use ndarray::Array3;
use rand::Rng;
use refcolor_core::attention::*;
use refcolor_core::backend::{ConstantNoiseBackend, DenoiserBackend, ToyAttentionBackend};
use refcolor_core::colorspace::*;
use refcolor_core::diffusion::{channel_moments, initial_latent_adain, Latent};
use refcolor_core::evalharness::{ab_histogram, his, PairManifest};
use refcolor_core::guidance::{guide, GuidanceConfig};
use refcolor_core::pipeline::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn FnOnce() -> Option<Outcome>>);

enum Verdict {
    Pass,
    Fail,
    Skip,
}

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let detail = f()?;
    let took = start.elapsed();
    check(took < limit, format!("took {took:?}, limit {limit:?}"))?;
    Ok(format!("{detail}, {:.3}s", took.as_secs_f64()))
}

fn mixed(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * gamma + q * (1.0 - gamma)).collect())
        .collect()
}

fn attention_oracles() -> Outcome {
    let mut worst = 0.0f64;
    let cases = 128;
    for seed in 0..cases {
        let mut r = rng(1000 + seed);
        let m = r.random_range(1..=16);
        let n = r.random_range(1..=16);
        let d = r.random_range(1..=8);
        let gamma = r.random_range(0.0f32..=1.0);

        let phi = random_matrix(&mut r, m, d);
        let (wq, wk, wv) = (random_weights(&mut r, d, d), random_weights(&mut r, d, d), random_weights(&mut r, d, d));
        let out = attention_forward(phi.view(), wq.view(), wk.view(), wv.view()).map_err(|e| e.to_string())?;
        let (q, k, v) = (brute_matmul(&phi, &wq), brute_matmul(&phi, &wk), brute_matmul(&phi, &wv));
        worst = worst.max(max_diff(&out, &brute_apply(&brute_softmax(&brute_logits(&q, &k)), &v)));

        let q_in = random_matrix(&mut r, m, d);
        let k_l = random_matrix(&mut r, n, d);
        let q_out = random_matrix(&mut r, m, d);
        let k_ref = random_matrix(&mut r, n, d);
        let g2g = brute_logits(&q_in, &k_l);
        let c2c = brute_logits(&q_out, &k_ref);

        let dual = dual_attention_map(q_in.view(), k_l.view(), q_out.view(), k_ref.view(), gamma).unwrap();
        worst = worst.max(max_diff(&dual, &brute_softmax(&mixed(&g2g, &c2c, gamma as f64))));

        let g2c = g2c_attention_map(q_in.view(), k_ref.view()).unwrap();
        worst = worst.max(max_diff(&g2c, &brute_softmax(&brute_logits(&q_in, &k_ref))));

        let pre = presoftmax_dual_map(q_in.view(), k_l.view(), q_out.view(), k_ref.view(), gamma).unwrap();
        let want = mixed(&brute_softmax(&g2g), &brute_softmax(&c2c), gamma as f64);
        worst = worst.max(max_diff(&pre, &want));
    }
    check(worst <= 1e-6, format!("max abs error {worst:e}"))?;
    Ok(format!("{cases} cases x 4 maps, max abs error {worst:.2e}"))
}

fn ablation_algebra() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut r = rng(2000 + seed);
        let (m, n, d) = (r.random_range(1..=16), r.random_range(1..=16), r.random_range(1..=8));
        let q_in = random_matrix(&mut r, m, d);
        let k_l = random_matrix(&mut r, n, d);
        let q_out = random_matrix(&mut r, m, d);
        let k_ref = random_matrix(&mut r, n, d);
        let dual = |g| dual_attention_map(q_in.view(), k_l.view(), q_out.view(), k_ref.view(), g).unwrap();
        let g2g = attention_map(q_in.view(), k_l.view()).unwrap();
        let c2c = attention_map(q_out.view(), k_ref.view()).unwrap();
        worst = worst.max(max_abs(&dual(1.0), &g2g));
        worst = worst.max(max_abs(&dual(0.0), &c2c));
        for g in [0.0, 1.0] {
            let pre = presoftmax_dual_map(q_in.view(), k_l.view(), q_out.view(), k_ref.view(), g).unwrap();
            worst = worst.max(max_abs(&pre, &dual(g)));
        }

        let shape = (4, r.random_range(1..=6), r.random_range(1..=6));
        let col = Array3::from_shape_simple_fn(shape, || r.random_range(-1.0f32..1.0));
        let plain = Array3::from_shape_simple_fn(shape, || r.random_range(-1.0f32..1.0));
        let unit = guide(&col, &plain, GuidanceConfig::new(1.0).unwrap()).unwrap();
        worst = worst.max(max_abs3(&unit, &col));
        for w in [0.0f32, 1.0, 5.0, 10.0, 15.0] {
            let got = guide(&col, &plain, GuidanceConfig::new(w).unwrap()).unwrap();
            // extrapolation form: plain + w (col - plain)
            for ((g, c), p) in got.iter().zip(col.iter()).zip(plain.iter()) {
                let want = *p as f64 + w as f64 * (*c as f64 - *p as f64);
                worst = worst.max((*g as f64 - want).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("max abs error {worst:e}"))?;
    Ok(format!("max abs error {worst:.2e}"))
}

fn toy_job(w: usize, h: usize, config: TransferConfig) -> ColorizationJob {
    ColorizationJob {
        input: smooth_gray(w, h, 1),
        reference: smooth_image(w, h, 2),
        config,
    }
}

fn row_stochasticity() -> Outcome {
    let mut audit = StochasticityAudit::new();
    let modes = [
        TransferMode::Dual,
        TransferMode::G2g,
        TransferMode::C2c,
        TransferMode::G2c,
        TransferMode::Presoftmax,
    ];
    for (i, mode) in modes.into_iter().enumerate() {
        let cfg = TransferConfig {
            mode,
            deep: GroupSettings { gamma: 0.7, beta: 0.2 },
            ..Default::default()
        };
        colorize_with(&toy_job(8, 6, cfg), &ToyAttentionBackend::new(i as u64), Some(&mut audit))
            .map_err(|e| e.to_string())?;
    }
    check(audit.passes(1e-6), format!("{audit:?}"))?;
    Ok(format!(
        "{} maps over {} kinds, max row error {:.2e}, min entry {:e}",
        audit.maps,
        audit.by_kind.len(),
        audit.max_row_error,
        audit.min_entry
    ))
}

fn ddim_round_trip() -> Outcome {
    let img = smooth_image(12, 10, 1);
    let (_, max_err) = round_trip_error(&ConstantNoiseBackend::new(9), &img, 5);
    check(max_err <= 1e-6, format!("constant-noise max error {max_err:e}"))?;
    // measured before the build on the same image and backend
    let pinned = 3.662e-3;
    let (rel, _) = round_trip_error(&ToyAttentionBackend::new(0), &smooth_image(16, 16, 11), 5);
    let ratio = rel / pinned;
    check((0.9..=1.1).contains(&ratio), format!("toy relative L2 {rel:e}, pinned {pinned:e}"))?;
    Ok(format!("constant max error {max_err:.2e}; toy relative L2 {rel:.4e} (pinned {pinned:e})"))
}

fn random_rgb(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    RgbImage::from_fn(w, h, |_, _| std::array::from_fn(|_| r.random_range(0.0f32..=1.0)))
}

fn random_gray(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut r = rng(seed);
    GrayImage::from_fn(w, h, |_, _| r.random_range(0.0f32..=1.0))
}

fn all_planes(p: &ColorPlanes) -> Vec<f64> {
    p.luma.iter().chain(&p.chroma[0]).chain(&p.chroma[1]).copied().collect()
}

fn postprocess_exactness() -> Outcome {
    let (mut moment_err, mut idem_err) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let (w, h) = (r.random_range(2..=12), r.random_range(2..=12));
        let out = random_rgb(w, h, 3000 + seed);
        let input = random_gray(w, h, 4000 + seed);
        let reference = random_rgb(w, h, 5000 + seed);
        let planes = postprocess_planes(&out, &input, Some(&reference), ColorSpace::Lab).map_err(|e| e.to_string())?;
        let q: Vec<u8> = planes.luma.iter().map(|l| quantize_unit(l / 100.0)).collect();
        check(q == input.quantized(), format!("seed {seed}: quantized lightness differs"))?;
        let ref_planes = rgb_to_lab(&reference);
        for c in 0..2 {
            let (m, s) = moments(&planes.chroma[c]);
            let (rm, rs) = moments(&ref_planes.chroma[c]);
            moment_err = moment_err.max((m - rm).abs()).max((s - rs).abs());
        }
        let twice = postprocess_color_planes(planes.clone(), &input, Some(&ref_planes)).unwrap();
        let diff = all_planes(&planes)
            .iter()
            .zip(all_planes(&twice))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        idem_err = idem_err.max(diff);
    }
    check(moment_err <= 1e-4, format!("chroma moment error {moment_err:e}"))?;
    check(idem_err <= 1e-6, format!("idempotence error {idem_err:e}"))?;
    Ok(format!(
        "100 triples, L exact, moment error {moment_err:.2e}, idempotence {idem_err:.2e}"
    ))
}

fn adain() -> Outcome {
    let (mut moment_err, mut idem_err) = (0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let mut r = rng(6000 + seed);
        let shape = (4, r.random_range(2..=8), r.random_range(2..=8));
        let scale = r.random_range(0.2f32..3.0);
        let z_out = Latent::new(Array3::from_shape_simple_fn(shape, || r.random_range(-1.0f32..1.0)), 5);
        let z_ref = Latent::new(Array3::from_shape_simple_fn(shape, || r.random_range(-1.0f32..1.0) * scale + 0.3), 5);
        let once = initial_latent_adain(&z_out, &z_ref).map_err(|e| e.to_string())?;
        for ((m, s), (rm, rs)) in channel_moments(&once.values).into_iter().zip(channel_moments(&z_ref.values)) {
            moment_err = moment_err.max((m - rm).abs()).max((s - rs).abs());
        }
        let twice = initial_latent_adain(&once, &z_ref).unwrap();
        idem_err = idem_err.max(max_abs3(&once.values, &twice.values));
    }
    check(moment_err <= 1e-6, format!("moment error {moment_err:e}"))?;
    check(idem_err <= 1e-6, format!("idempotence error {idem_err:e}"))?;
    Ok(format!("moment error {moment_err:.2e}, idempotence {idem_err:.2e}"))
}

fn his_properties() -> Outcome {
    for seed in 0..20u64 {
        let a = random_rgb(9, 7, 7000 + seed);
        let b = random_rgb(5, 11, 8000 + seed);
        let self_score = his(&a, &a, 64).unwrap();
        check((self_score - 1.0).abs() <= 1e-9, format!("his(x, x) = {self_score}"))?;
        check(his(&a, &b, 64).unwrap() == his(&b, &a, 64).unwrap(), "asymmetric")?;
        for img in [&a, &b] {
            let mass: f64 = ab_histogram(img, 64).unwrap().iter().sum();
            check((mass - 1.0).abs() <= 1e-9, format!("histogram mass {mass}"))?;
        }
    }
    let red = RgbImage::from_fn(3, 3, |_, _| [1.0, 0.0, 0.0]);
    let green = RgbImage::from_fn(2, 5, |_, _| [0.0, 1.0, 0.0]);
    check(his(&red, &green, 64).unwrap() == 0.0, "disjoint support is not 0")?;
    // {red, green} vs {red, blue}: three distinct cells, one shared
    let a = RgbImage::new(2, 1, vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
    let b = RgbImage::new(2, 1, vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    let two = his(&a, &b, 64).unwrap();
    check(two == 0.5, format!("two-pixel case {two}"))?;
    Ok("self = 1, symmetric, disjoint = 0, two-pixel = 0.5, mass = 1".into())
}

fn bits(img: &RgbImage) -> Vec<u32> {
    img.pixels().iter().flatten().map(|v| v.to_bits()).collect()
}

fn determinism_and_calls() -> Outcome {
    let job = toy_job(8, 8, TransferConfig::default());
    let a = colorize(&job, &ToyAttentionBackend::new(7)).map_err(|e| e.to_string())?;
    let b = colorize(&job, &ToyAttentionBackend::new(7)).map_err(|e| e.to_string())?;
    check(bits(&a.image) == bits(&b.image), "outputs differ between runs")?;
    check(a.latent.values == b.latent.values, "latents differ between runs")?;

    let counting = Counting::new(ToyAttentionBackend::new(1));
    let out = colorize(&job, &counting).map_err(|e| e.to_string())?;
    let want = CallCounts {
        inversion: 15,
        sampling: vec![10, 10, 10],
        reinversion: vec![5, 5],
    };
    check(out.calls == want, format!("reported {:?}", out.calls))?;
    check(counting.count() == 15 + 3 * 10 + 2 * 5, format!("observed {} calls", counting.count()))?;
    Ok(format!("bitwise identical; {} calls (15 + 3x10 + 2x5)", counting.count()))
}

fn toy_sanity() -> Outcome {
    let out = colorize(&toy_job(16, 8, TransferConfig::default()), &ToyAttentionBackend::new(4))
        .map_err(|e| e.to_string())?;
    check(out.image.dims() == (16, 8) && out.latent.is_finite(), "bad toy output")?;

    let cfg = TransferConfig {
        toggles: Toggles::all_off(),
        postprocess: PostprocessMode::Off,
        ..Default::default()
    };
    let job = toy_job(8, 8, cfg);
    let toy = ToyAttentionBackend::new(5);
    let got = colorize(&job, &toy).map_err(|e| e.to_string())?;
    let z0 = toy.encode(&job.input.to_rgb()).unwrap();
    let want = plain_round_trip(&toy, &z0, 50, 50);
    check(got.latent.values == want.values, "toy run differs from a plain round trip")?;

    // With early stopping off the round trip spans all 50 steps; the bound
    // is pinned at about twice the measured 5.1e-6.
    let pinned = 1e-5;
    let constant = ConstantNoiseBackend::new(8);
    let got = colorize(&job, &constant).map_err(|e| e.to_string())?;
    let z0 = constant.encode(&job.input.to_rgb()).unwrap();
    let err = max_abs3(&got.latent.values, &z0.values);
    check(err <= pinned, format!("constant-noise latent error {err:e}"))?;
    let decoded = constant.decode(&z0).unwrap();
    let px = got
        .image
        .pixels()
        .iter()
        .flatten()
        .zip(decoded.pixels().iter().flatten())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    check(px <= pinned, format!("decoded input differs by {px:e}"))?;
    Ok(format!(
        "completes; toggles off equals plain round trip; constant-noise latent error {err:.2e}, image {px:.2e} (bound {pinned:e})"
    ))
}

/// Needs `REFCOLOR_CHECKPOINT_DIR` and `REFCOLOR_PAIRS_MANIFEST` (a pair
/// manifest with at least five entries).
fn pretrained_pairs() -> Option<Outcome> {
    let dir = refcolor_sd::SdBackend::checkpoint_dir_from_env()?;
    let manifest = std::env::var_os("REFCOLOR_PAIRS_MANIFEST").map(PathBuf::from)?;
    Some((|| {
        let manifest = PairManifest::load(&manifest).map_err(|e| e.to_string())?;
        check(manifest.pairs.len() >= 5, "manifest has fewer than 5 pairs")?;
        let cfg = refcolor_cli::CliConfig {
            checkpoint_dir: Some(dir),
            ..Default::default()
        };
        let backend = refcolor_cli::build_backend(&cfg).map_err(|e| e.to_string())?;
        let out_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut lines = Vec::new();
        for pair in manifest.pairs.iter().take(5) {
            let out = out_dir.path().join(format!("{}.png", pair.id));
            refcolor_cli::colorize_files(&cfg, &*backend, &pair.input, &pair.reference, &out, None)
                .map_err(|e| format!("{}: {e}", pair.id))?;
            let reference = refcolor_core::io::load_rgb(&pair.reference).map_err(|e| e.to_string())?;
            let colored = refcolor_core::io::load_rgb(&out).map_err(|e| e.to_string())?;
            let gray = refcolor_core::io::load_gray(&pair.input).map_err(|e| e.to_string())?.to_rgb();
            let (h_out, h_gray) = (his(&colored, &reference, 64).unwrap(), his(&gray, &reference, 64).unwrap());
            check(h_out > h_gray, format!("{}: HIS {h_out:.3} <= gray {h_gray:.3}", pair.id))?;
            lines.push(format!("{} {h_out:.3}>{h_gray:.3}", pair.id));
        }
        Ok(lines.join(", "))
    })())
}

#[test]
fn acceptance() {
    let criteria: Vec<Criterion> = vec![
        ("1 attention oracle equivalence", Box::new(|| Some(timed(Duration::from_secs(5), attention_oracles)))),
        ("2 ablation algebra", Box::new(|| Some(timed(Duration::from_secs(1), ablation_algebra)))),
        ("3 row-stochasticity", Box::new(|| Some(row_stochasticity()))),
        ("4 DDIM round trip", Box::new(|| Some(ddim_round_trip()))),
        ("5 post-processing exactness", Box::new(|| Some(postprocess_exactness()))),
        ("6 AdaIN", Box::new(|| Some(adain()))),
        ("7 HIS properties", Box::new(|| Some(his_properties()))),
        ("8 determinism and call accounting", Box::new(|| Some(determinism_and_calls()))),
        ("9 end-to-end toy sanity", Box::new(|| Some(toy_sanity()))),
        ("10 pretrained pairs beat grayscale HIS", Box::new(pretrained_pairs)),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let (verdict, detail) = match run() {
            Some(Ok(d)) => (Verdict::Pass, d),
            Some(Err(d)) => (Verdict::Fail, d),
            None => (Verdict::Skip, "REFCOLOR_CHECKPOINT_DIR or REFCOLOR_PAIRS_MANIFEST not set".into()),
        };
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed.push(name);
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} criterion {name}: {detail}");
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
