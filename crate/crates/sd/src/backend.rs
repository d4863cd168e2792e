//! [`DenoiserBackend`] over a Stable Diffusion 1.x checkpoint: the hooked
//! UNet, the KL autoencoder and a fixed empty-prompt condition.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Shape, Tensor};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use candle_transformers::models::stable_diffusion::clip::{ClipTextTransformer, Config as ClipConfig};
use candle_transformers::models::stable_diffusion::unet_2d::UNet2DConditionModelConfig;
use candle_transformers::models::stable_diffusion::vae::{AutoEncoderKL, AutoEncoderKLConfig};
use ndarray::Array3;
use refcolor_core::attention::AttentionHook;
use refcolor_core::backend::{check_divisible, AttentionSite, DenoiserBackend};
use refcolor_core::colorspace::RgbImage;
use refcolor_core::diffusion::{sd_alphas_cumprod, Latent, NoisePrediction};
use refcolor_core::{Error, Result};

use crate::sites::SiteTable;
use crate::unet::{model_err, sd14_unet_config, HookedUNet};

/// Environment variable naming a diffusers-layout checkpoint directory.
pub const CHECKPOINT_ENV: &str = "REFCOLOR_CHECKPOINT_DIR";

/// SD 1.x latent scaling.
pub const LATENT_SCALE: f64 = 0.18215;

const BOS: u32 = 49406;
const EOS: u32 = 49407;
const CONTEXT_LEN: usize = 77;

pub fn sd14_vae_config() -> AutoEncoderKLConfig {
    AutoEncoderKLConfig {
        block_out_channels: vec![128, 256, 512, 512],
        layers_per_block: 2,
        latent_channels: 4,
        norm_num_groups: 32,
        use_quant_conv: true,
        use_post_quant_conv: true,
    }
}

/// Token ids of the empty prompt: start, end, then end-token padding.
pub fn empty_prompt_tokens() -> Vec<u32> {
    let mut t = vec![EOS; CONTEXT_LEN];
    t[0] = BOS;
    t
}

pub fn empty_prompt_embedding(clip: &ClipTextTransformer, device: &Device) -> Result<Tensor> {
    let tokens = Tensor::new(empty_prompt_tokens().as_slice(), device)
        .and_then(|t| t.unsqueeze(0))
        .map_err(model_err)?;
    clip.forward(&tokens).map_err(model_err)
}

/// Reads variables through `inner` but forces the posterior log-variance to
/// a huge negative value, so sampling the encoder posterior returns its mean.
struct MeanPosterior<'a> {
    inner: Box<dyn SimpleBackend + 'a>,
    latent_channels: usize,
}

impl MeanPosterior<'_> {
    fn patch(&self, name: &str, t: Tensor) -> candle_core::Result<Tensor> {
        let lc = self.latent_channels;
        match name {
            "quant_conv.weight" => {
                let mean = t.narrow(0, 0, lc)?;
                Tensor::cat(&[&mean, &mean.zeros_like()?], 0)
            }
            "quant_conv.bias" => {
                let mean = t.narrow(0, 0, lc)?;
                let logvar = (mean.ones_like()? * -1.0e4)?;
                Tensor::cat(&[&mean, &logvar], 0)
            }
            _ => Ok(t),
        }
    }
}

impl SimpleBackend for MeanPosterior<'_> {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let t = self.inner.get(s, name, h, dtype, dev)?;
        self.patch(name, t)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let t = self.inner.get_unchecked(name, dtype, dev)?;
        self.patch(name, t)
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.contains_tensor(name)
    }
}

/// Builds the autoencoder so that `encode` is deterministic.
pub fn mean_posterior_vae<'a>(
    weights: Box<dyn SimpleBackend + 'a>,
    config: AutoEncoderKLConfig,
    device: &Device,
) -> Result<AutoEncoderKL> {
    if !config.use_quant_conv {
        return Err(Error::InvalidConfig(
            "autoencoder without quant_conv is not supported".into(),
        ));
    }
    let vs = VarBuilder::from_backend(
        Box::new(MeanPosterior {
            inner: weights,
            latent_channels: config.latent_channels,
        }),
        DType::F32,
        device.clone(),
    );
    AutoEncoderKL::new(vs, 3, 3, config).map_err(model_err)
}

fn mmap(path: &Path) -> Result<Box<dyn SimpleBackend>> {
    if !path.is_file() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing weight file"),
        });
    }
    // The file is only read, and only while this process holds the map.
    let st = unsafe { candle_core::safetensors::MmapedSafetensors::new(path) }.map_err(model_err)?;
    Ok(Box::new(st))
}

pub struct SdBackend {
    name: String,
    unet: HookedUNet,
    vae: AutoEncoderKL,
    context: Tensor,
    alphas: Vec<f64>,
    device: Device,
}

impl std::fmt::Debug for SdBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdBackend")
            .field("name", &self.name)
            .field("sites", &self.unet.sites().len())
            .finish()
    }
}

impl SdBackend {
    /// Assembles a backend from already-built parts. `context` is the
    /// `(1, tokens, dim)` condition used for every prediction.
    pub fn from_parts(name: impl Into<String>, unet: HookedUNet, vae: AutoEncoderKL, context: Tensor) -> Result<Self> {
        let (b, _, dim) = context.dims3().map_err(model_err)?;
        if b != 1 || dim != unet.config().cross_attention_dim {
            return Err(Error::shape(
                "condition",
                &[1, unet.config().cross_attention_dim],
                &[b, dim],
            ));
        }
        let device = context.device().clone();
        Ok(Self {
            name: name.into(),
            unet,
            vae,
            context,
            alphas: sd_alphas_cumprod(),
            device,
        })
    }

    /// Loads `unet/`, `vae/` and `text_encoder/` safetensors from a
    /// diffusers-layout SD 1.4 directory, on the CPU in f32.
    pub fn from_checkpoint_dir(dir: &Path, table: &SiteTable) -> Result<Self> {
        let device = Device::Cpu;
        let unet_vs = VarBuilder::from_backend(
            mmap(&dir.join("unet/diffusion_pytorch_model.safetensors"))?,
            DType::F32,
            device.clone(),
        );
        let unet = HookedUNet::new(unet_vs, 4, 4, sd14_unet_config(), table)?;
        let vae = mean_posterior_vae(
            mmap(&dir.join("vae/diffusion_pytorch_model.safetensors"))?,
            sd14_vae_config(),
            &device,
        )?;
        let clip_vs = VarBuilder::from_backend(mmap(&dir.join("text_encoder/model.safetensors"))?, DType::F32, device.clone());
        let clip = ClipTextTransformer::new(clip_vs, &ClipConfig::v1_5()).map_err(model_err)?;
        let context = empty_prompt_embedding(&clip, &device)?;
        Self::from_parts("sd14", unet, vae, context)
    }

    /// Checkpoint directory from [`CHECKPOINT_ENV`], if set.
    pub fn checkpoint_dir_from_env() -> Option<PathBuf> {
        std::env::var_os(CHECKPOINT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    }

    pub fn from_env(table: &SiteTable) -> Result<Self> {
        let dir = Self::checkpoint_dir_from_env()
            .ok_or_else(|| Error::InvalidConfig(format!("{CHECKPOINT_ENV} is not set")))?;
        Self::from_checkpoint_dir(&dir, table)
    }

    pub fn unet_config(&self) -> &UNet2DConditionModelConfig {
        self.unet.config()
    }

    fn latent_to_tensor(&self, z: &Latent) -> Result<Tensor> {
        let [c, h, w] = z.shape();
        let v: Vec<f32> = z.values.iter().copied().collect();
        Tensor::from_vec(v, (1, c, h, w), &self.device).map_err(model_err)
    }

    fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
        let t = t.squeeze(0).and_then(|t| t.to_dtype(DType::F32)).map_err(model_err)?;
        let (c, h, w) = t.dims3().map_err(model_err)?;
        let v = t.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(model_err)?;
        Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::InvalidDimensions(e.to_string()))
    }
}

impl DenoiserBackend for SdBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn downsample_factor(&self) -> usize {
        1 << (self.vae.config.block_out_channels.len() - 1)
    }

    fn latent_channels(&self) -> usize {
        self.vae.config.latent_channels
    }

    fn attention_sites(&self) -> &[AttentionSite] {
        self.unet.sites()
    }

    fn native_alphas(&self) -> &[f64] {
        &self.alphas
    }

    fn encode(&self, img: &RgbImage) -> Result<Latent> {
        check_divisible(img, self.downsample_factor())?;
        let (w, h) = img.dims();
        let px = img.pixels();
        let mut v = vec![0f32; 3 * h * w];
        for (i, p) in px.iter().enumerate() {
            for c in 0..3 {
                v[c * h * w + i] = p[c] * 2.0 - 1.0;
            }
        }
        let x = Tensor::from_vec(v, (1, 3, h, w), &self.device).map_err(model_err)?;
        let z = self
            .vae
            .encode(&x)
            .and_then(|d| d.sample())
            .and_then(|z| z * LATENT_SCALE)
            .map_err(model_err)?;
        Ok(Latent::new(Self::tensor_to_array3(&z)?, 0))
    }

    fn decode(&self, z: &Latent) -> Result<RgbImage> {
        let x = (self.latent_to_tensor(z)? / LATENT_SCALE)
            .and_then(|t| self.vae.decode(&t))
            .map_err(model_err)?;
        let x = Self::tensor_to_array3(&x)?;
        let (_, h, w) = x.dim();
        Ok(RgbImage::from_fn(w, h, |xx, y| {
            [0, 1, 2].map(|c| (x[[c, y, xx]] + 1.0) / 2.0)
        }))
    }

    fn predict_noise(&self, z: &Latent, timestep: usize, hook: &mut dyn AttentionHook) -> Result<NoisePrediction> {
        if z.channels() != self.latent_channels() {
            return Err(Error::shape("latent channels", &[self.latent_channels()], &[z.channels()]));
        }
        let x = self.latent_to_tensor(z)?;
        let eps = self.unet.forward(&x, timestep as f64, &self.context, hook)?;
        Self::tensor_to_array3(&eps)
    }
}
