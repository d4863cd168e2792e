//! The denoiser contract and two deterministic toy denoisers.
//!
//! [`ConstantNoiseBackend`] ignores its input and returns a fixed seeded
//! noise grid, which isolates the scheduler. [`ToyAttentionBackend`] is a
//! tiny network with three genuine self-attention sites (one at full latent
//! resolution, two after a 2x2 pooling) so every attention-control path runs
//! at desk scale.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::attention::{AttentionHook, Projections};
use crate::colorspace::RgbImage;
use crate::diffusion::{sd_alphas_cumprod, Latent, NoisePrediction};
use crate::error::{Error, Result};

/// Which transfer settings a site receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    Deep,
    Shallow,
    Untouched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttentionSiteId {
    pub layer_index: usize,
    pub group: LayerGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSite {
    pub id: AttentionSiteId,
    pub heads: usize,
}

/// A latent diffusion denoiser with an encoder/decoder pair and hookable
/// self-attention sites. The unconditional (empty) condition is implied.
pub trait DenoiserBackend {
    fn name(&self) -> &str;

    /// Spatial factor between image and latent.
    fn downsample_factor(&self) -> usize;

    fn latent_channels(&self) -> usize;

    /// Self-attention sites in forward order. Stable across calls.
    fn attention_sites(&self) -> &[AttentionSite];

    /// Cumulative alpha products of the native training schedule.
    fn native_alphas(&self) -> &[f64];

    fn encode(&self, img: &RgbImage) -> Result<Latent>;

    fn decode(&self, z: &Latent) -> Result<RgbImage>;

    /// Noise prediction at native timestep `timestep`. Every attention site
    /// is routed through `hook` exactly once.
    fn predict_noise(
        &self,
        z: &Latent,
        timestep: usize,
        hook: &mut dyn AttentionHook,
    ) -> Result<NoisePrediction>;
}

impl<B: DenoiserBackend + ?Sized> DenoiserBackend for &B {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn downsample_factor(&self) -> usize {
        (**self).downsample_factor()
    }
    fn latent_channels(&self) -> usize {
        (**self).latent_channels()
    }
    fn attention_sites(&self) -> &[AttentionSite] {
        (**self).attention_sites()
    }
    fn native_alphas(&self) -> &[f64] {
        (**self).native_alphas()
    }
    fn encode(&self, img: &RgbImage) -> Result<Latent> {
        (**self).encode(img)
    }
    fn decode(&self, z: &Latent) -> Result<RgbImage> {
        (**self).decode(z)
    }
    fn predict_noise(
        &self,
        z: &Latent,
        timestep: usize,
        hook: &mut dyn AttentionHook,
    ) -> Result<NoisePrediction> {
        (**self).predict_noise(z, timestep, hook)
    }
}

/// Checks that image dimensions are divisible by the downsampling factor.
pub fn check_divisible(img: &RgbImage, factor: usize) -> Result<()> {
    let (w, h) = img.dims();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::InvalidDimensions(format!(
            "{w}x{h} image is not divisible by the latent factor {factor}"
        )));
    }
    Ok(())
}

/// Average-pool encoder: each latent cell is the mean of a `factor x factor`
/// block of RGB values.
fn pool_encode(img: &RgbImage, factor: usize) -> Result<Latent> {
    check_divisible(img, factor)?;
    let (w, h) = img.dims();
    let (lw, lh) = (w / factor, h / factor);
    let mut z = Array3::<f32>::zeros((3, lh, lw));
    let norm = (factor * factor) as f64;
    for ly in 0..lh {
        for lx in 0..lw {
            let mut acc = [0.0f64; 3];
            for y in ly * factor..(ly + 1) * factor {
                for x in lx * factor..(lx + 1) * factor {
                    let px = img.get(x, y);
                    for c in 0..3 {
                        acc[c] += px[c] as f64;
                    }
                }
            }
            for c in 0..3 {
                z[[c, ly, lx]] = (acc[c] / norm) as f32;
            }
        }
    }
    Ok(Latent::new(z, 0))
}

/// Nearest-neighbour decoder; values are clamped into [0,1].
fn upsample_decode(z: &Latent, factor: usize, backend: &str) -> Result<RgbImage> {
    if z.channels() != 3 {
        return Err(Error::shape("toy decode channels", &[3], &[z.channels()]));
    }
    if z.timestep != 0 {
        warn!(backend, timestep = z.timestep, "decoding a latent that is not at timestep 0");
    }
    let v = &z.values;
    Ok(RgbImage::from_fn(z.width() * factor, z.height() * factor, |x, y| {
        let (lx, ly) = (x / factor, y / factor);
        [v[[0, ly, lx]], v[[1, ly, lx]], v[[2, ly, lx]]]
    }))
}

/// Ignores its input and returns the same seeded standard-normal grid (shaped
/// like the latent) on every call.
#[derive(Debug, Clone)]
pub struct ConstantNoiseBackend {
    seed: u64,
    factor: usize,
    alphas: Vec<f64>,
}

impl ConstantNoiseBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            factor: 1,
            alphas: sd_alphas_cumprod(),
        }
    }

    pub fn with_factor(mut self, factor: usize) -> Self {
        self.factor = factor.max(1);
        self
    }
}

impl DenoiserBackend for ConstantNoiseBackend {
    fn name(&self) -> &str {
        "toy-const"
    }

    fn downsample_factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        3
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        &[]
    }

    fn native_alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn encode(&self, img: &RgbImage) -> Result<Latent> {
        pool_encode(img, self.factor)
    }

    fn decode(&self, z: &Latent) -> Result<RgbImage> {
        upsample_decode(z, self.factor, self.name())
    }

    fn predict_noise(
        &self,
        z: &Latent,
        _timestep: usize,
        _hook: &mut dyn AttentionHook,
    ) -> Result<NoisePrediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let [c, h, w] = z.shape();
        Ok(Array3::from_shape_simple_fn((c, h, w), || {
            StandardNormal.sample(&mut rng)
        }))
    }
}

const TOY_HIDDEN: usize = 8;
const TOY_TIME_FEATURES: usize = 4;

#[derive(Debug, Clone)]
struct ToySite {
    site: AttentionSite,
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
}

/// Small attention denoiser with seeded random weights.
///
/// Per latent pixel: `h = tanh(z W_in + b + time(t) W_t)`, then site A
/// (layer 10, shallow, 2 heads) at full resolution. The result is 2x2
/// average pooled and passed through site B (layer 7, deep) and site C
/// (layer 4, untouched), upsampled, added back, and projected to the noise
/// channels. Every site adds its output projection residually.
#[derive(Debug, Clone)]
pub struct ToyAttentionBackend {
    factor: usize,
    alphas: Vec<f64>,
    sites: Vec<AttentionSite>,
    w_in: Array2<f32>,
    b_in: Array1<f32>,
    w_time: Array2<f32>,
    blocks: Vec<ToySite>,
    w_out: Array2<f32>,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f32 = StandardNormal.sample(rng);
        v * scale
    })
}

impl ToyAttentionBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = TOY_HIDDEN;
        let fan = 1.0 / (d as f32).sqrt();
        let w_in = random_matrix(&mut rng, 3, d, 0.7);
        let b_in = Array1::from_shape_simple_fn(d, || {
            let v: f32 = StandardNormal.sample(&mut rng);
            0.1 * v
        });
        let w_time = random_matrix(&mut rng, TOY_TIME_FEATURES, d, 0.5);
        let layout = [
            (10, LayerGroup::Shallow, 2),
            (7, LayerGroup::Deep, 2),
            (4, LayerGroup::Untouched, 1),
        ];
        let blocks: Vec<ToySite> = layout
            .iter()
            .map(|&(layer_index, group, heads)| ToySite {
                site: AttentionSite {
                    id: AttentionSiteId { layer_index, group },
                    heads,
                },
                wq: random_matrix(&mut rng, d, d, fan),
                wk: random_matrix(&mut rng, d, d, fan),
                wv: random_matrix(&mut rng, d, d, fan),
                wo: random_matrix(&mut rng, d, d, fan),
            })
            .collect();
        let w_out = random_matrix(&mut rng, d, 3, 0.5 * fan);
        Self {
            factor: 1,
            alphas: sd_alphas_cumprod(),
            sites: blocks.iter().map(|b| b.site).collect(),
            w_in,
            b_in,
            w_time,
            blocks,
            w_out,
        }
    }

    pub fn with_factor(mut self, factor: usize) -> Self {
        self.factor = factor.max(1);
        self
    }

    fn time_features(&self, timestep: usize) -> Array1<f32> {
        let t = timestep as f32 / 1000.0;
        let feats = [
            (t * 1.0).sin(),
            (t * 1.0).cos(),
            (t * 8.0).sin(),
            (t * 8.0).cos(),
        ];
        Array1::from(feats.to_vec()).dot(&self.w_time)
    }

    fn run_block(
        block: &ToySite,
        h: &Array2<f32>,
        hook: &mut dyn AttentionHook,
    ) -> Result<Array2<f32>> {
        let proj = Projections {
            wq: block.wq.view(),
            wk: block.wk.view(),
            wv: block.wv.view(),
            heads: block.site.heads,
        };
        let att = hook.attend(&block.site, h.view(), &proj)?;
        if att.dim() != h.dim() {
            return Err(Error::shape(
                "toy attention output",
                &[h.nrows(), h.ncols()],
                &[att.nrows(), att.ncols()],
            ));
        }
        Ok(h + &att.dot(&block.wo))
    }
}

/// 2x2 average pooling of row-major `(h*w) x d` features; odd borders
/// average the available cells.
fn pool2(x: ArrayView2<f32>, h: usize, w: usize) -> (Array2<f32>, usize, usize) {
    let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array2::<f32>::zeros((ph * pw, x.ncols()));
    let mut count = vec![0.0f32; ph * pw];
    for y in 0..h {
        for xx in 0..w {
            let p = (y / 2) * pw + xx / 2;
            let mut row = out.row_mut(p);
            row += &x.row(y * w + xx);
            count[p] += 1.0;
        }
    }
    for (mut row, n) in out.rows_mut().into_iter().zip(count) {
        row /= n;
    }
    (out, ph, pw)
}

impl DenoiserBackend for ToyAttentionBackend {
    fn name(&self) -> &str {
        "toy-attn"
    }

    fn downsample_factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        3
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    fn native_alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn encode(&self, img: &RgbImage) -> Result<Latent> {
        pool_encode(img, self.factor)
    }

    fn decode(&self, z: &Latent) -> Result<RgbImage> {
        upsample_decode(z, self.factor, self.name())
    }

    fn predict_noise(
        &self,
        z: &Latent,
        timestep: usize,
        hook: &mut dyn AttentionHook,
    ) -> Result<NoisePrediction> {
        let [c, h, w] = z.shape();
        if c != 3 {
            return Err(Error::shape("toy latent channels", &[3], &[c]));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidDimensions("empty latent".to_string()));
        }
        let pixels = z
            .values
            .view()
            .into_shape_with_order((c, h * w))
            .map_err(|e| Error::InvalidDimensions(e.to_string()))?
            .reversed_axes();
        let mut x = pixels.dot(&self.w_in);
        let bias = &self.b_in + &self.time_features(timestep);
        x += &bias.insert_axis(Axis(0));
        x.mapv_inplace(f32::tanh);

        let full = Self::run_block(&self.blocks[0], &x, hook)?;
        let (pooled, ph, pw) = pool2(full.view(), h, w);
        let mid = Self::run_block(&self.blocks[1], &pooled, hook)?;
        let mut low = Self::run_block(&self.blocks[2], &mid, hook)?;
        low.mapv_inplace(f32::tanh);

        let mut merged = full;
        for y in 0..h {
            for xx in 0..w {
                let mut row = merged.row_mut(y * w + xx);
                row += &low.row((y / 2) * pw + xx / 2);
            }
        }
        debug_assert_eq!(low.nrows(), ph * pw);
        let eps = merged.dot(&self.w_out);
        let eps = eps
            .reversed_axes()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h, w))
            .map_err(|e| Error::InvalidDimensions(e.to_string()))?;
        Ok(eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PlainAttention;

    fn gradient(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            [x as f32 / w as f32, y as f32 / h as f32, 0.5]
        })
    }

    #[test]
    fn identity_encoder_round_trips() {
        let b = ToyAttentionBackend::new(1);
        let img = gradient(5, 3);
        let z = b.encode(&img).unwrap();
        assert_eq!(z.shape(), [3, 3, 5]);
        assert_eq!(z.values[[0, 1, 2]], img.get(2, 1)[0]);
        assert_eq!(b.decode(&z).unwrap(), img);
    }

    #[test]
    fn pooled_encoder_checks_divisibility() {
        let b = ConstantNoiseBackend::new(0).with_factor(2);
        assert!(b.encode(&gradient(5, 4)).is_err());
        let z = b.encode(&gradient(4, 4)).unwrap();
        assert_eq!(z.shape(), [3, 2, 2]);
        assert_eq!(b.decode(&z).unwrap().dims(), (4, 4));
    }

    #[test]
    fn constant_noise_ignores_latent() {
        let b = ConstantNoiseBackend::new(42);
        let z1 = b.encode(&gradient(4, 4)).unwrap();
        let z2 = Latent::new(Array3::zeros((3, 4, 4)), 3);
        let e1 = b.predict_noise(&z1, 1, &mut PlainAttention).unwrap();
        let e2 = b.predict_noise(&z2, 500, &mut PlainAttention).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn toy_attention_is_deterministic_and_handles_odd_sizes() {
        let b = ToyAttentionBackend::new(3);
        let z = b.encode(&gradient(5, 7)).unwrap();
        let e1 = b.predict_noise(&z, 100, &mut PlainAttention).unwrap();
        let e2 = ToyAttentionBackend::new(3)
            .predict_noise(&z, 100, &mut PlainAttention)
            .unwrap();
        assert_eq!(e1.shape(), &[3, 7, 5]);
        assert_eq!(e1, e2);
        assert!(e1.iter().all(|v| v.is_finite()));
        let e3 = b.predict_noise(&z, 900, &mut PlainAttention).unwrap();
        assert_ne!(e1, e3);
    }

    #[test]
    fn toy_sites_are_distinct() {
        let b = ToyAttentionBackend::new(0);
        let layers: Vec<_> = b.attention_sites().iter().map(|s| s.id.layer_index).collect();
        assert_eq!(layers, vec![10, 7, 4]);
    }

    #[test]
    fn pooling_averages_partial_blocks() {
        let x = Array2::from_shape_fn((3, 1), |(i, _)| i as f32);
        let (p, ph, pw) = pool2(x.view(), 1, 3);
        assert_eq!((ph, pw), (1, 2));
        assert_eq!(p[[0, 0]], 0.5);
        assert_eq!(p[[1, 0]], 2.0);
    }
}
