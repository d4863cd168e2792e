//! A conditional UNet with the same weight layout as the diffusers SD 1.x
//! UNet, whose decoder self-attention layers run through an
//! [`AttentionHook`]. Encoder and middle blocks are candle's own modules.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn as nn;
use candle_transformers::models::stable_diffusion::attention::{
    CrossAttention, SpatialTransformerConfig,
};
use candle_transformers::models::stable_diffusion::embeddings::{TimestepEmbedding, Timesteps};
use candle_transformers::models::stable_diffusion::unet_2d::{
    BlockConfig, UNet2DConditionModelConfig,
};
use candle_transformers::models::stable_diffusion::unet_2d_blocks::{
    CrossAttnDownBlock2D, CrossAttnDownBlock2DConfig, DownBlock2D, DownBlock2DConfig,
    UNetMidBlock2DCrossAttn, UNetMidBlock2DCrossAttnConfig, UpBlock2D, UpBlock2DConfig,
};
use ndarray::Array2;
use refcolor_core::attention::{AttentionHook, Projections};
use refcolor_core::backend::{AttentionSite, AttentionSiteId};
use refcolor_core::Error;

use crate::sites::SiteTable;

type CResult<T> = candle_core::Result<T>;

/// The SD 1.4/1.5 UNet configuration.
pub fn sd14_unet_config() -> UNet2DConditionModelConfig {
    let bc = |out_channels, use_cross_attn, attention_head_dim| BlockConfig {
        out_channels,
        use_cross_attn,
        attention_head_dim,
    };
    UNet2DConditionModelConfig {
        blocks: vec![
            bc(320, Some(1), 8),
            bc(640, Some(1), 8),
            bc(1280, Some(1), 8),
            bc(1280, None, 8),
        ],
        center_input_sample: false,
        cross_attention_dim: 768,
        downsample_padding: 1,
        flip_sin_to_cos: true,
        freq_shift: 0.,
        layers_per_block: 2,
        mid_block_scale_factor: 1.,
        norm_eps: 1e-5,
        norm_num_groups: 32,
        sliced_attention_size: None,
        use_linear_projection: false,
    }
}

fn tensor_to_array2(t: &Tensor) -> CResult<Array2<f32>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((r, c), v).map_err(candle_core::Error::wrap)
}

fn array2_to_tensor(a: &Array2<f32>, dtype: DType, dev: &Device) -> CResult<Tensor> {
    let v: Vec<f32> = a.iter().copied().collect();
    Tensor::from_vec(v, a.dim(), dev)?.to_dtype(dtype)
}

/// Linear weight `(out, in)` as a right-multiplied `(in, out)` matrix.
fn projection(vs: &nn::VarBuilder, dim: usize, inner: usize) -> CResult<Array2<f32>> {
    let w = vs.get((inner, dim), "weight")?;
    tensor_to_array2(&w.t()?)
}

#[derive(Debug)]
struct GeGlu {
    proj: nn::Linear,
}

impl GeGlu {
    fn new(vs: nn::VarBuilder, dim_in: usize, dim_out: usize) -> CResult<Self> {
        Ok(Self {
            proj: nn::linear(dim_in, dim_out * 2, vs.pp("proj"))?,
        })
    }

    fn forward(&self, xs: &Tensor) -> CResult<Tensor> {
        let parts = self.proj.forward(xs)?.chunk(2, D::Minus1)?;
        &parts[0] * parts[1].gelu()?
    }
}

#[derive(Debug)]
struct FeedForward {
    project_in: GeGlu,
    linear: nn::Linear,
}

impl FeedForward {
    fn new(vs: nn::VarBuilder, dim: usize) -> CResult<Self> {
        let vs = vs.pp("net");
        Ok(Self {
            project_in: GeGlu::new(vs.pp("0"), dim, dim * 4)?,
            linear: nn::linear(dim * 4, dim, vs.pp("2"))?,
        })
    }

    fn forward(&self, xs: &Tensor) -> CResult<Tensor> {
        self.linear.forward(&self.project_in.forward(xs)?)
    }
}

/// Self-attention whose core is delegated to the hook.
#[derive(Debug)]
struct HookedSelfAttention {
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    to_out: nn::Linear,
    site: AttentionSite,
}

impl HookedSelfAttention {
    fn new(vs: nn::VarBuilder, dim: usize, heads: usize, d_head: usize, id: AttentionSiteId) -> CResult<Self> {
        let inner = heads * d_head;
        Ok(Self {
            wq: projection(&vs.pp("to_q"), dim, inner)?,
            wk: projection(&vs.pp("to_k"), dim, inner)?,
            wv: projection(&vs.pp("to_v"), dim, inner)?,
            to_out: nn::linear(inner, dim, vs.pp("to_out.0"))?,
            site: AttentionSite { id, heads },
        })
    }

    fn forward(&self, xs: &Tensor, ctx: &mut HookCtx<'_>) -> CResult<Tensor> {
        let (b, n, dim) = xs.dims3()?;
        let mut outs = Vec::with_capacity(b);
        for i in 0..b {
            let phi = tensor_to_array2(&xs.get(i)?)?;
            let proj = Projections {
                wq: self.wq.view(),
                wk: self.wk.view(),
                wv: self.wv.view(),
                heads: self.site.heads,
            };
            let out = match ctx.hook.attend(&self.site, phi.view(), &proj) {
                Ok(out) => out,
                Err(e) => {
                    ctx.failure = Some(e);
                    return Err(candle_core::Error::Msg("attention hook failed".into()));
                }
            };
            if out.dim() != (n, self.wq.ncols()) {
                return Err(candle_core::Error::Msg(format!(
                    "hook returned {:?} at layer {}, expected ({n}, {})",
                    out.dim(),
                    self.site.id.layer_index,
                    self.wq.ncols()
                )));
            }
            outs.push(array2_to_tensor(&out, xs.dtype(), xs.device())?);
        }
        debug_assert_eq!(dim, self.wq.nrows());
        self.to_out.forward(&Tensor::stack(&outs, 0)?)
    }
}

/// The hook plus the first core error it raised, so that error survives the
/// trip through candle's error type.
struct HookCtx<'h> {
    hook: &'h mut dyn AttentionHook,
    failure: Option<Error>,
}

#[derive(Debug)]
enum BlockAttn {
    Hooked(HookedSelfAttention),
    Native(CrossAttention),
}

#[derive(Debug)]
struct TransformerBlock {
    attn1: BlockAttn,
    ff: FeedForward,
    attn2: CrossAttention,
    norm1: nn::LayerNorm,
    norm2: nn::LayerNorm,
    norm3: nn::LayerNorm,
}

impl TransformerBlock {
    fn new(
        vs: nn::VarBuilder,
        dim: usize,
        heads: usize,
        d_head: usize,
        context_dim: Option<usize>,
        site: Option<AttentionSiteId>,
    ) -> CResult<Self> {
        let attn1 = match site {
            Some(id) => BlockAttn::Hooked(HookedSelfAttention::new(vs.pp("attn1"), dim, heads, d_head, id)?),
            None => BlockAttn::Native(CrossAttention::new(vs.pp("attn1"), dim, None, heads, d_head, None, false)?),
        };
        Ok(Self {
            attn1,
            ff: FeedForward::new(vs.pp("ff"), dim)?,
            attn2: CrossAttention::new(vs.pp("attn2"), dim, context_dim, heads, d_head, None, false)?,
            norm1: nn::layer_norm(dim, 1e-5, vs.pp("norm1"))?,
            norm2: nn::layer_norm(dim, 1e-5, vs.pp("norm2"))?,
            norm3: nn::layer_norm(dim, 1e-5, vs.pp("norm3"))?,
        })
    }

    fn forward(&self, xs: &Tensor, context: &Tensor, ctx: &mut HookCtx<'_>) -> CResult<Tensor> {
        let normed = self.norm1.forward(xs)?;
        let a = match &self.attn1 {
            BlockAttn::Hooked(h) => h.forward(&normed, ctx)?,
            BlockAttn::Native(c) => c.forward(&normed, None)?,
        };
        let xs = (a + xs)?;
        let xs = (self.attn2.forward(&self.norm2.forward(&xs)?, Some(context))? + xs)?;
        self.ff.forward(&self.norm3.forward(&xs)?)? + xs
    }
}

#[derive(Debug)]
enum Proj {
    Conv2d(nn::Conv2d),
    Linear(nn::Linear),
}

#[derive(Debug)]
struct Transformer2D {
    norm: nn::GroupNorm,
    proj_in: Proj,
    blocks: Vec<TransformerBlock>,
    proj_out: Proj,
}

impl Transformer2D {
    fn new(
        vs: nn::VarBuilder,
        channels: usize,
        heads: usize,
        cfg: SpatialTransformerConfig,
        sites: &[Option<AttentionSiteId>],
    ) -> CResult<Self> {
        let d_head = channels / heads;
        let inner = heads * d_head;
        let norm = nn::group_norm(cfg.num_groups, channels, 1e-6, vs.pp("norm"))?;
        let (proj_in, proj_out) = if cfg.use_linear_projection {
            (
                Proj::Linear(nn::linear(channels, inner, vs.pp("proj_in"))?),
                Proj::Linear(nn::linear(inner, channels, vs.pp("proj_out"))?),
            )
        } else {
            (
                Proj::Conv2d(nn::conv2d(channels, inner, 1, Default::default(), vs.pp("proj_in"))?),
                Proj::Conv2d(nn::conv2d(inner, channels, 1, Default::default(), vs.pp("proj_out"))?),
            )
        };
        let vs_tb = vs.pp("transformer_blocks");
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(vs_tb.pp(i.to_string()), inner, heads, d_head, cfg.context_dim, sites[i]))
            .collect::<CResult<Vec<_>>>()?;
        Ok(Self {
            norm,
            proj_in,
            blocks,
            proj_out,
        })
    }

    fn forward(&self, xs: &Tensor, context: &Tensor, ctx: &mut HookCtx<'_>) -> CResult<Tensor> {
        let (b, _, h, w) = xs.dims4()?;
        let residual = xs;
        let xs = self.norm.forward(xs)?;
        let to_tokens = |t: &Tensor| -> CResult<Tensor> {
            let c = t.dim(1)?;
            t.transpose(1, 2)?.t()?.reshape((b, h * w, c))
        };
        let xs = match &self.proj_in {
            Proj::Conv2d(p) => to_tokens(&p.forward(&xs)?)?,
            Proj::Linear(p) => p.forward(&to_tokens(&xs)?)?,
        };
        let inner = xs.dim(2)?;
        let mut xs = xs;
        for block in &self.blocks {
            xs = block.forward(&xs, context, ctx)?;
        }
        let xs = match &self.proj_out {
            Proj::Conv2d(p) => p.forward(&xs.reshape((b, h, w, inner))?.t()?.transpose(1, 2)?)?,
            Proj::Linear(p) => {
                let c = p.forward(&xs)?;
                let c_out = c.dim(2)?;
                c.reshape((b, h, w, c_out))?.t()?.transpose(1, 2)?
            }
        };
        xs + residual
    }
}

#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
enum UpBlock {
    Basic(UpBlock2D),
    CrossAttn {
        /// Resnets only; the upsampler lives in `upsampler`.
        resnets: UpBlock2D,
        attentions: Vec<Transformer2D>,
        upsampler: Option<UpBlock2D>,
    },
}

#[derive(Debug)]
enum DownBlock {
    Basic(DownBlock2D),
    CrossAttn(CrossAttnDownBlock2D),
}

/// UNet whose decoder self-attention sites are listed in a [`SiteTable`].
#[derive(Debug)]
pub struct HookedUNet {
    conv_in: nn::Conv2d,
    time_proj: Timesteps,
    time_embedding: TimestepEmbedding,
    down_blocks: Vec<DownBlock>,
    mid_block: UNetMidBlock2DCrossAttn,
    up_blocks: Vec<UpBlock>,
    conv_norm_out: nn::GroupNorm,
    conv_out: nn::Conv2d,
    config: UNet2DConditionModelConfig,
    sites: Vec<AttentionSite>,
}

impl HookedUNet {
    /// Builds the network. Every site in `table` must name an existing
    /// decoder transformer block; blocks not in the table run natively.
    pub fn new(
        vs: nn::VarBuilder,
        in_channels: usize,
        out_channels: usize,
        config: UNet2DConditionModelConfig,
        table: &SiteTable,
    ) -> refcolor_core::Result<Self> {
        let unet = Self::build(vs, in_channels, out_channels, config, table).map_err(model_err)?;
        if unet.sites.len() != table.sites.len() {
            let found: Vec<_> = unet.sites.iter().map(|s| s.id.layer_index).collect();
            let missing: Vec<_> = table
                .sites
                .iter()
                .filter(|s| !found.contains(&s.layer_index))
                .map(|s| s.layer_index)
                .collect();
            return Err(Error::InvalidConfig(format!(
                "site table layers {missing:?} do not exist in this network"
            )));
        }
        Ok(unet)
    }

    fn build(
        vs: nn::VarBuilder,
        in_channels: usize,
        out_channels: usize,
        config: UNet2DConditionModelConfig,
        table: &SiteTable,
    ) -> CResult<Self> {
        let n_blocks = config.blocks.len();
        let b_channels = config.blocks[0].out_channels;
        let bl_channels = config.blocks[n_blocks - 1].out_channels;
        let time_embed_dim = b_channels * 4;
        let conv_cfg = nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let conv_in = nn::conv2d(in_channels, b_channels, 3, conv_cfg, vs.pp("conv_in"))?;
        let time_proj = Timesteps::new(b_channels, config.flip_sin_to_cos, config.freq_shift);
        let time_embedding = TimestepEmbedding::new(vs.pp("time_embedding"), b_channels, time_embed_dim)?;

        let vs_db = vs.pp("down_blocks");
        let mut down_blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let bc = config.blocks[i];
            let block_in = if i > 0 { config.blocks[i - 1].out_channels } else { b_channels };
            let db_cfg = DownBlock2DConfig {
                num_layers: config.layers_per_block,
                resnet_eps: config.norm_eps,
                resnet_groups: config.norm_num_groups,
                add_downsample: i < n_blocks - 1,
                downsample_padding: config.downsample_padding,
                ..Default::default()
            };
            let block = match bc.use_cross_attn {
                Some(depth) => DownBlock::CrossAttn(CrossAttnDownBlock2D::new(
                    vs_db.pp(i.to_string()),
                    block_in,
                    bc.out_channels,
                    Some(time_embed_dim),
                    false,
                    CrossAttnDownBlock2DConfig {
                        downblock: db_cfg,
                        attn_num_head_channels: bc.attention_head_dim,
                        cross_attention_dim: config.cross_attention_dim,
                        sliced_attention_size: None,
                        use_linear_projection: config.use_linear_projection,
                        transformer_layers_per_block: depth,
                    },
                )?),
                None => DownBlock::Basic(DownBlock2D::new(
                    vs_db.pp(i.to_string()),
                    block_in,
                    bc.out_channels,
                    Some(time_embed_dim),
                    db_cfg,
                )?),
            };
            down_blocks.push(block);
        }

        let last = config.blocks[n_blocks - 1];
        let mid_block = UNetMidBlock2DCrossAttn::new(
            vs.pp("mid_block"),
            bl_channels,
            Some(time_embed_dim),
            false,
            UNetMidBlock2DCrossAttnConfig {
                resnet_eps: config.norm_eps,
                output_scale_factor: config.mid_block_scale_factor,
                cross_attn_dim: config.cross_attention_dim,
                attn_num_head_channels: last.attention_head_dim,
                resnet_groups: Some(config.norm_num_groups),
                use_linear_projection: config.use_linear_projection,
                transformer_layers_per_block: last.use_cross_attn.unwrap_or(1),
                ..Default::default()
            },
        )?;

        let vs_ub = vs.pp("up_blocks");
        let mut up_blocks = Vec::with_capacity(n_blocks);
        let mut sites = Vec::new();
        for i in 0..n_blocks {
            let bc = config.blocks[n_blocks - 1 - i];
            let prev_out = if i > 0 { config.blocks[n_blocks - i].out_channels } else { bl_channels };
            let block_in = config.blocks[if i == n_blocks - 1 { 0 } else { n_blocks - i - 2 }].out_channels;
            let ub_cfg = UpBlock2DConfig {
                num_layers: config.layers_per_block + 1,
                resnet_eps: config.norm_eps,
                resnet_groups: config.norm_num_groups,
                add_upsample: i < n_blocks - 1,
                ..Default::default()
            };
            let vs_i = vs_ub.pp(i.to_string());
            let block = match bc.use_cross_attn {
                None => UpBlock::Basic(UpBlock2D::new(vs_i, block_in, prev_out, bc.out_channels, Some(time_embed_dim), ub_cfg)?),
                Some(depth) => {
                    let resnets = UpBlock2D::new(
                        vs_i.clone(),
                        block_in,
                        prev_out,
                        bc.out_channels,
                        Some(time_embed_dim),
                        UpBlock2DConfig {
                            add_upsample: false,
                            ..ub_cfg
                        },
                    )?;
                    let upsampler = if ub_cfg.add_upsample {
                        Some(UpBlock2D::new(
                            vs_i.clone(),
                            bc.out_channels,
                            bc.out_channels,
                            bc.out_channels,
                            None,
                            UpBlock2DConfig {
                                num_layers: 0,
                                ..ub_cfg
                            },
                        )?)
                    } else {
                        None
                    };
                    let heads = bc.attention_head_dim;
                    let st_cfg = SpatialTransformerConfig {
                        depth,
                        num_groups: config.norm_num_groups,
                        context_dim: Some(config.cross_attention_dim),
                        sliced_attention_size: None,
                        use_linear_projection: config.use_linear_projection,
                    };
                    let vs_attn = vs_i.pp("attentions");
                    let mut attentions = Vec::with_capacity(ub_cfg.num_layers);
                    for a in 0..ub_cfg.num_layers {
                        let ids: Vec<Option<AttentionSiteId>> = (0..depth)
                            .map(|blk| {
                                table.find(i, a, blk).map(|e| AttentionSiteId {
                                    layer_index: e.layer_index,
                                    group: e.group,
                                })
                            })
                            .collect();
                        for id in ids.iter().flatten() {
                            sites.push(AttentionSite { id: *id, heads });
                        }
                        attentions.push(Transformer2D::new(vs_attn.pp(a.to_string()), bc.out_channels, heads, st_cfg, &ids)?);
                    }
                    UpBlock::CrossAttn {
                        resnets,
                        attentions,
                        upsampler,
                    }
                }
            };
            up_blocks.push(block);
        }

        let conv_norm_out = nn::group_norm(config.norm_num_groups, b_channels, config.norm_eps, vs.pp("conv_norm_out"))?;
        let conv_out = nn::conv2d(b_channels, out_channels, 3, conv_cfg, vs.pp("conv_out"))?;
        Ok(Self {
            conv_in,
            time_proj,
            time_embedding,
            down_blocks,
            mid_block,
            up_blocks,
            conv_norm_out,
            conv_out,
            config,
            sites,
        })
    }

    /// Hooked sites in forward order.
    pub fn sites(&self) -> &[AttentionSite] {
        &self.sites
    }

    pub fn config(&self) -> &UNet2DConditionModelConfig {
        &self.config
    }

    /// Noise prediction for `xs` of shape `(b, c, h, w)`.
    pub fn forward(
        &self,
        xs: &Tensor,
        timestep: f64,
        context: &Tensor,
        hook: &mut dyn AttentionHook,
    ) -> refcolor_core::Result<Tensor> {
        let mut ctx = HookCtx {
            hook,
            failure: None,
        };
        let out = self.forward_inner(xs, timestep, context, &mut ctx);
        match (out, ctx.failure) {
            (_, Some(e)) => Err(e),
            (out, None) => out.map_err(model_err),
        }
    }

    fn forward_inner(&self, xs: &Tensor, timestep: f64, context: &Tensor, ctx: &mut HookCtx<'_>) -> CResult<Tensor> {
        let (bsize, _, height, width) = xs.dims4()?;
        let n_blocks = self.config.blocks.len();
        let up_factor = 1usize << (n_blocks - 1);
        let forward_upsample_size = height % up_factor != 0 || width % up_factor != 0;
        let xs = if self.config.center_input_sample {
            ((xs * 2.0)? - 1.0)?
        } else {
            xs.clone()
        };
        let emb = (Tensor::ones(bsize, xs.dtype(), xs.device())? * timestep)?;
        let emb = self.time_embedding.forward(&self.time_proj.forward(&emb)?)?;
        let xs = self.conv_in.forward(&xs)?;

        let mut res = vec![xs.clone()];
        let mut xs = xs;
        for block in &self.down_blocks {
            let (out, skips) = match block {
                DownBlock::Basic(b) => b.forward(&xs, Some(&emb))?,
                DownBlock::CrossAttn(b) => b.forward(&xs, Some(&emb), Some(context))?,
            };
            res.extend(skips);
            xs = out;
        }
        let mut xs = self.mid_block.forward(&xs, Some(&emb), Some(context))?;

        let mut upsample_size = None;
        for (i, block) in self.up_blocks.iter().enumerate() {
            let n_res = match block {
                UpBlock::Basic(b) => b.resnets.len(),
                UpBlock::CrossAttn { resnets, .. } => resnets.resnets.len(),
            };
            let skips = res.split_off(res.len() - n_res);
            if i < n_blocks - 1 && forward_upsample_size {
                let (_, _, h, w) = res[res.len() - 1].dims4()?;
                upsample_size = Some((h, w));
            }
            xs = match block {
                UpBlock::Basic(b) => b.forward(&xs, &skips, Some(&emb), upsample_size)?,
                UpBlock::CrossAttn {
                    resnets,
                    attentions,
                    upsampler,
                } => {
                    for (idx, resnet) in resnets.resnets.iter().enumerate() {
                        xs = Tensor::cat(&[&xs, &skips[skips.len() - idx - 1]], 1)?.contiguous()?;
                        xs = resnet.forward(&xs, Some(&emb))?;
                        xs = attentions[idx].forward(&xs, context, ctx)?;
                    }
                    match upsampler {
                        Some(u) => u.forward(&xs, &[], None, upsample_size)?,
                        None => xs,
                    }
                }
            };
        }
        let xs = nn::ops::silu(&self.conv_norm_out.forward(&xs)?)?;
        self.conv_out.forward(&xs)
    }
}

pub(crate) fn model_err(e: candle_core::Error) -> Error {
    Error::Model(e.to_string())
}
