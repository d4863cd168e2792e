//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code, clippy::approx_constant, clippy::needless_range_loop)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refcolor_core::attention::PlainAttention;
use refcolor_core::backend::DenoiserBackend;
use refcolor_core::colorspace::{GrayImage, RgbImage};
use refcolor_core::diffusion::{ddim_invert_step, ddim_sample_step, make_schedule, Latent};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in [-1, 1).
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0f32..1.0))
}

/// Projection weights with the usual `1/sqrt(fan_in)` scale.
pub fn random_weights(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    random_matrix(rng, rows, cols) / (rows as f32).sqrt()
}

/// Smooth color image: low-frequency sinusoids with seeded phases.
pub fn smooth_image(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let phase: [f32; 6] = std::array::from_fn(|_| r.random_range(0.0f32..6.28));
    RgbImage::from_fn(w, h, |x, y| {
        let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
        std::array::from_fn(|c| {
            0.5 + 0.35 * (3.0 * u + phase[2 * c]).sin() * (2.0 * v + phase[2 * c + 1]).cos()
        })
    })
}

pub fn smooth_gray(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut r = rng(seed);
    let phase: f32 = r.random_range(0.0f32..6.28);
    GrayImage::from_fn(w, h, |x, y| {
        0.5 + 0.4 * ((x as f32 * 0.7 + y as f32 * 0.3) / 3.0 + phase).sin()
    })
}

// ---- attention oracles: explicit loops, no ndarray products ----

pub fn brute_logits(q: &Array2<f32>, k: &Array2<f32>) -> Vec<Vec<f64>> {
    let d = q.ncols() as f64;
    (0..q.nrows())
        .map(|i| {
            (0..k.nrows())
                .map(|j| {
                    let mut s = 0.0f64;
                    for c in 0..q.ncols() {
                        s += q[[i, c]] as f64 * k[[j, c]] as f64;
                    }
                    s / d.sqrt()
                })
                .collect()
        })
        .collect()
}

pub fn brute_softmax(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|e| e / sum).collect()
        })
        .collect()
}

pub fn brute_apply(a: &[Vec<f64>], v: &Array2<f32>) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..v.ncols())
                .map(|c| row.iter().enumerate().map(|(j, w)| w * v[[j, c]] as f64).sum())
                .collect()
        })
        .collect()
}

pub fn brute_matmul(x: &Array2<f32>, w: &Array2<f32>) -> Array2<f32> {
    let mut out = Array2::zeros((x.nrows(), w.ncols()));
    for i in 0..x.nrows() {
        for j in 0..w.ncols() {
            let mut s = 0.0f64;
            for k in 0..x.ncols() {
                s += x[[i, k]] as f64 * w[[k, j]] as f64;
            }
            out[[i, j]] = s as f32;
        }
    }
    out
}

pub fn max_diff(a: &Array2<f32>, b: &[Vec<f64>]) -> f64 {
    let mut m = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((a[[i, j]] as f64 - v).abs());
        }
    }
    m
}

pub fn max_abs(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs3(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

// ---- colorimetry oracle: matrix derived from primaries and white ----

fn xyz_of(x: f64, y: f64) -> [f64; 3] {
    [x / y, 1.0, (1.0 - x - y) / y]
}

fn inv3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            out[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    out
}

/// sRGB -> Lab built from the Rec.709 primaries and the D65 chromaticity.
pub fn oracle_lab(rgb: [f64; 3]) -> [f64; 3] {
    let prim = [xyz_of(0.64, 0.33), xyz_of(0.30, 0.60), xyz_of(0.15, 0.06)];
    let white = xyz_of(0.3127, 0.3290);
    // columns are primaries
    let p = [
        [prim[0][0], prim[1][0], prim[2][0]],
        [prim[0][1], prim[1][1], prim[2][1]],
        [prim[0][2], prim[1][2], prim[2][2]],
    ];
    let pi = inv3(p);
    let s: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| pi[i][j] * white[j]).sum());
    let lin = rgb.map(|c| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    let xyz: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| p[i][j] * s[j] * lin[j]).sum());
    let eps: f64 = 216.0 / 24389.0;
    let kappa: f64 = 24389.0 / 27.0;
    let f = |t: f64| if t > eps { t.cbrt() } else { (kappa * t + 16.0) / 116.0 };
    let [fx, fy, fz] = [f(xyz[0] / white[0]), f(xyz[1] / white[1]), f(xyz[2] / white[2])];
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

// ---- scheduler oracle: DDIM in predicted-x0 form ----

/// `z_{t-1} = sqrt(a_prev) * x0 + sqrt(1 - a_prev) * eps` with
/// `x0 = (z_t - sqrt(1 - a_t) eps) / sqrt(a_t)`, returned as (c1, c2).
pub fn x0_form_coeffs(a_prev: f64, a_t: f64) -> (f64, f64) {
    let c1 = a_prev.sqrt() / a_t.sqrt();
    let c2 = (1.0 - a_prev).sqrt() - a_prev.sqrt() * (1.0 - a_t).sqrt() / a_t.sqrt();
    (c1, c2)
}

/// Relative L2 error of plain DDIM inversion followed by sampling, T steps
/// of a 50-step schedule.
pub fn round_trip_error<B: DenoiserBackend>(backend: &B, img: &RgbImage, steps: usize) -> (f64, f64) {
    let sched = make_schedule(50, backend.native_alphas()).unwrap();
    let z0 = backend.encode(img).unwrap();
    let mut z: Latent = z0.clone();
    for t in 0..steps {
        let eps = backend
            .predict_noise(&z, sched.native_timestep(t + 1), &mut PlainAttention)
            .unwrap();
        z = ddim_invert_step(&z, &eps, &sched, steps).unwrap();
    }
    for t in (1..=steps).rev() {
        let eps = backend
            .predict_noise(&z, sched.native_timestep(t), &mut PlainAttention)
            .unwrap();
        z = ddim_sample_step(&z, &eps, &sched).unwrap();
    }
    let num: f64 = z.values.iter().zip(z0.values.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    let den: f64 = z0.values.iter().map(|v| (*v as f64).powi(2)).sum();
    ((num / den).sqrt(), max_abs3(&z.values, &z0.values))
}

// ---- call counting, independent of the pipeline's own bookkeeping ----

use refcolor_core::attention::AttentionHook;
use refcolor_core::backend::AttentionSite;
use refcolor_core::diffusion::NoisePrediction;
use std::cell::RefCell;

pub struct Counting<B> {
    pub inner: B,
    /// Native timestep of every predict_noise call, in order.
    pub calls: RefCell<Vec<usize>>,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, calls: RefCell::new(Vec::new()) }
    }

    pub fn count(&self) -> usize {
        self.calls.borrow().len()
    }
}

impl<B: DenoiserBackend> DenoiserBackend for Counting<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn downsample_factor(&self) -> usize {
        self.inner.downsample_factor()
    }
    fn latent_channels(&self) -> usize {
        self.inner.latent_channels()
    }
    fn attention_sites(&self) -> &[AttentionSite] {
        self.inner.attention_sites()
    }
    fn native_alphas(&self) -> &[f64] {
        self.inner.native_alphas()
    }
    fn encode(&self, img: &RgbImage) -> refcolor_core::Result<Latent> {
        self.inner.encode(img)
    }
    fn decode(&self, z: &Latent) -> refcolor_core::Result<RgbImage> {
        self.inner.decode(z)
    }
    fn predict_noise(
        &self,
        z: &Latent,
        timestep: usize,
        hook: &mut dyn AttentionHook,
    ) -> refcolor_core::Result<NoisePrediction> {
        self.calls.borrow_mut().push(timestep);
        self.inner.predict_noise(z, timestep, hook)
    }
}

/// Plain invert-then-sample of `z0` over `steps` of a `t_max` schedule.
pub fn plain_round_trip<B: DenoiserBackend>(backend: &B, z0: &Latent, steps: usize, t_max: usize) -> Latent {
    let sched = make_schedule(t_max, backend.native_alphas()).unwrap();
    let mut z = z0.clone();
    for t in 0..steps {
        let eps = backend
            .predict_noise(&z, sched.native_timestep(t + 1), &mut PlainAttention)
            .unwrap();
        z = ddim_invert_step(&z, &eps, &sched, steps).unwrap();
    }
    for t in (1..=steps).rev() {
        let eps = backend
            .predict_noise(&z, sched.native_timestep(t), &mut PlainAttention)
            .unwrap();
        z = ddim_sample_step(&z, &eps, &sched).unwrap();
    }
    z
}
