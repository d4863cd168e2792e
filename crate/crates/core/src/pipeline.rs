//! End-to-end colorization: encode, invert three streams while recording
//! attention features, sample with color transfer and guidance, repeat,
//! decode, post-process.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::attention::{
    AttentionDirectives, AttentionFeatureCache, AttentionObserver, CacheAccess, SiteDirective,
    SiteDispatcher, SiteMode, Stream,
};
use crate::backend::{AttentionSite, DenoiserBackend, LayerGroup};
use crate::colorspace::{
    extract_luminance, postprocess_planes, ColorPlanes, ColorSpace, GrayImage, RgbImage,
};
use crate::diffusion::{
    ddim_invert_step, ddim_sample_step, initial_latent_adain, make_schedule, Latent,
    NoisePrediction, Schedule,
};
use crate::error::{Error, Result};
use crate::guidance::{guide, GuidanceConfig};

/// Attention weights applied to one layer group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSettings {
    pub gamma: f32,
    pub beta: f32,
}

impl GroupSettings {
    pub const DEEP: GroupSettings = GroupSettings {
        gamma: 1.0,
        beta: 0.0,
    };
    pub const SHALLOW: GroupSettings = GroupSettings {
        gamma: 0.5,
        beta: 0.5,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    #[default]
    Dual,
    G2g,
    C2c,
    G2c,
    Presoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PostprocessMode {
    /// Luminance replacement and chroma moment matching.
    #[default]
    Full,
    /// Luminance replacement only.
    LuminanceOnly,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Attention-guided color transfer during sampling. Off means plain
    /// sampling, no recording and no guidance.
    pub transfer: bool,
    pub injection: bool,
    pub guidance: bool,
    pub early_stop: bool,
    pub adain: bool,
    /// Re-apply the initial latent AdaIN at the start of every round.
    pub adain_every_round: bool,
    pub repetition: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            transfer: true,
            injection: true,
            guidance: true,
            early_stop: true,
            adain: true,
            adain_every_round: true,
            repetition: true,
        }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Self {
            transfer: false,
            injection: false,
            guidance: false,
            early_stop: false,
            adain: false,
            adain_every_round: false,
            repetition: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Layers 6-8 of the decoder.
    pub deep: GroupSettings,
    /// Layers 9-11 of the decoder.
    pub shallow: GroupSettings,
    pub guidance_scale: f32,
    /// Inversion depth `T` (early stop).
    pub steps: usize,
    /// Length of the DDIM schedule.
    pub t_max: usize,
    /// Repetition count `N`.
    pub rounds: usize,
    pub mode: TransferMode,
    pub toggles: Toggles,
    pub postprocess: PostprocessMode,
    pub color_space: ColorSpace,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            deep: GroupSettings::DEEP,
            shallow: GroupSettings::SHALLOW,
            guidance_scale: 10.0,
            steps: 5,
            t_max: 50,
            rounds: 3,
            mode: TransferMode::Dual,
            toggles: Toggles::default(),
            postprocess: PostprocessMode::Full,
            color_space: ColorSpace::Lab,
            seed: 0,
        }
    }
}

/// Attention map builder after normalizing the single-attention modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolvedMode {
    Dual,
    G2c,
    Presoftmax,
}

/// The settings that actually drive a run, with every toggle and mode
/// folded into plain parameters. Two configs that resolve equal produce the
/// same computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedConfig {
    pub transfer: bool,
    pub deep: GroupSettings,
    pub shallow: GroupSettings,
    pub mode: ResolvedMode,
    pub guidance_scale: f32,
    pub steps: usize,
    pub t_max: usize,
    pub rounds: usize,
    pub adain: bool,
    pub adain_every_round: bool,
    pub postprocess: PostprocessMode,
    pub color_space: ColorSpace,
    pub seed: u64,
}

impl ResolvedConfig {
    /// Whether each sampling step runs the plain pass as well.
    pub fn guided(&self) -> bool {
        self.transfer && self.guidance_scale != 1.0
    }
}

fn check_group(name: &str, g: GroupSettings) -> Result<()> {
    for (what, v) in [("gamma", g.gamma), ("beta", g.beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!("{name}.{what}={v} outside [0, 1]")));
        }
    }
    Ok(())
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        check_group("deep", self.deep)?;
        check_group("shallow", self.shallow)?;
        GuidanceConfig::new(self.guidance_scale)?;
        if self.t_max == 0 {
            return Err(Error::InvalidConfig("t_max must be >= 1".into()));
        }
        if self.steps == 0 || self.steps > self.t_max {
            return Err(Error::InvalidConfig(format!(
                "steps={} must lie in 1..={}",
                self.steps, self.t_max
            )));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolved(&self) -> Result<ResolvedConfig> {
        self.validate()?;
        let t = &self.toggles;
        let (mut deep, mut shallow) = (self.deep, self.shallow);
        if !t.injection {
            deep.beta = 0.0;
            shallow.beta = 0.0;
        }
        let mode = match self.mode {
            TransferMode::Dual => ResolvedMode::Dual,
            TransferMode::G2g => {
                deep.gamma = 1.0;
                shallow.gamma = 1.0;
                ResolvedMode::Dual
            }
            TransferMode::C2c => {
                deep.gamma = 0.0;
                shallow.gamma = 0.0;
                ResolvedMode::Dual
            }
            TransferMode::G2c => {
                deep.gamma = 1.0;
                shallow.gamma = 1.0;
                ResolvedMode::G2c
            }
            TransferMode::Presoftmax => {
                let endpoint = |g: f32| g == 0.0 || g == 1.0;
                if endpoint(deep.gamma) && endpoint(shallow.gamma) {
                    ResolvedMode::Dual
                } else {
                    ResolvedMode::Presoftmax
                }
            }
        };
        Ok(ResolvedConfig {
            transfer: t.transfer,
            deep,
            shallow,
            mode,
            guidance_scale: if t.guidance { self.guidance_scale } else { 1.0 },
            steps: if t.early_stop { self.steps } else { self.t_max },
            t_max: self.t_max,
            rounds: if t.repetition { self.rounds } else { 1 },
            adain: t.adain,
            adain_every_round: t.adain_every_round,
            postprocess: self.postprocess,
            color_space: self.color_space,
            seed: self.seed,
        })
    }
}

/// Ablation variants. Each is a mutation of a [`TransferConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    G2g,
    C2c,
    G2c,
    NoGuidance,
    Presoftmax,
    NoInjection,
    NoEarlystop,
    NoPostprocess,
    NoRepetition,
    NoAdain,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::G2g,
        Variant::C2c,
        Variant::G2c,
        Variant::NoGuidance,
        Variant::Presoftmax,
        Variant::NoInjection,
        Variant::NoEarlystop,
        Variant::NoPostprocess,
        Variant::NoRepetition,
        Variant::NoAdain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::G2g => "g2g",
            Variant::C2c => "c2c",
            Variant::G2c => "g2c",
            Variant::NoGuidance => "no_guidance",
            Variant::Presoftmax => "presoftmax",
            Variant::NoInjection => "no_injection",
            Variant::NoEarlystop => "no_earlystop",
            Variant::NoPostprocess => "no_postprocess",
            Variant::NoRepetition => "no_repetition",
            Variant::NoAdain => "no_adain",
        }
    }

    pub fn apply(self, base: &TransferConfig) -> TransferConfig {
        let mut cfg = *base;
        match self {
            Variant::G2g => cfg.mode = TransferMode::G2g,
            Variant::C2c => cfg.mode = TransferMode::C2c,
            Variant::G2c => cfg.mode = TransferMode::G2c,
            Variant::NoGuidance => cfg.toggles.guidance = false,
            Variant::Presoftmax => cfg.mode = TransferMode::Presoftmax,
            Variant::NoInjection => cfg.toggles.injection = false,
            Variant::NoEarlystop => cfg.toggles.early_stop = false,
            // the lightness is still replaced, only chroma matching is dropped
            Variant::NoPostprocess => cfg.postprocess = PostprocessMode::LuminanceOnly,
            Variant::NoRepetition => cfg.toggles.repetition = false,
            Variant::NoAdain => cfg.toggles.adain = false,
        }
        cfg
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct ColorizationJob {
    pub input: GrayImage,
    pub reference: RgbImage,
    pub config: TransferConfig,
}

/// Denoiser invocations per phase.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CallCounts {
    /// Round-1 inversion of the input, reference and reference-lightness
    /// latents.
    pub inversion: usize,
    /// Sampling calls, one entry per round.
    pub sampling: Vec<usize>,
    /// Re-inversion calls, one entry per round after the first.
    pub reinversion: Vec<usize>,
}

impl CallCounts {
    pub fn total(&self) -> usize {
        self.inversion + self.sampling.iter().sum::<usize>() + self.reinversion.iter().sum::<usize>()
    }

    /// The expected counts for `steps`, `rounds`, and whether sampling runs
    /// the plain pass.
    pub fn expected(steps: usize, rounds: usize, guided: bool) -> Self {
        Self {
            inversion: 3 * steps,
            sampling: vec![(1 + guided as usize) * steps; rounds],
            reinversion: vec![steps; rounds.saturating_sub(1)],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ColorizationOutput {
    /// Final image.
    pub image: RgbImage,
    /// Decoded image before post-processing.
    pub decoded: RgbImage,
    /// Post-processed planes before clamping; `None` when post-processing
    /// is off.
    pub planes: Option<ColorPlanes>,
    /// Final clean latent.
    pub latent: Latent,
    pub calls: CallCounts,
}

struct Runner<'a, 'o, B: DenoiserBackend + ?Sized> {
    backend: &'a B,
    sched: Schedule,
    cfg: ResolvedConfig,
    targets: Vec<AttentionSite>,
    observer: Option<&'o mut dyn AttentionObserver>,
}

impl<B: DenoiserBackend + ?Sized> Runner<'_, '_, B> {
    fn call(
        &mut self,
        z: &Latent,
        step: usize,
        directives: &AttentionDirectives,
        cache: CacheAccess<'_>,
        phase: &'static str,
        round: usize,
    ) -> Result<NoisePrediction> {
        let wrap = |source: Error| Error::Backend {
            backend: self.backend.name().to_string(),
            phase,
            round,
            step,
            source: Box::new(source),
        };
        let native = self.sched.native_timestep(step);
        debug!(phase, round, step, native, "denoiser call");
        let observer = self.observer.as_deref_mut().map(|o| o as &mut dyn AttentionObserver);
        let mut dispatcher = SiteDispatcher::new(directives, cache).with_observer(observer);
        let eps = self
            .backend
            .predict_noise(z, native, &mut dispatcher)
            .map_err(&wrap)?;
        dispatcher.finish().map_err(&wrap)?;
        if eps.shape() != z.values.shape() {
            return Err(wrap(Error::shape("noise prediction", z.values.shape(), eps.shape())));
        }
        Ok(eps)
    }

    fn record_directives(&self, step: usize, stream: Option<Stream>) -> Result<AttentionDirectives> {
        let mut d = AttentionDirectives::new(1, step);
        if let Some(stream) = stream {
            for site in &self.targets {
                d.set(
                    site.id.layer_index,
                    SiteDirective {
                        mode: SiteMode::Record(stream),
                        ..SiteDirective::PLAIN
                    },
                )?;
            }
        }
        Ok(d)
    }

    fn transfer_directives(&self, step: usize) -> Result<AttentionDirectives> {
        let mut d = AttentionDirectives::new(1, step);
        let mode = match self.cfg.mode {
            ResolvedMode::Dual => SiteMode::DualTransfer,
            ResolvedMode::G2c => SiteMode::G2cOnly,
            ResolvedMode::Presoftmax => SiteMode::PresoftmaxDual,
        };
        for site in &self.targets {
            let g = match site.id.group {
                LayerGroup::Deep => self.cfg.deep,
                LayerGroup::Shallow => self.cfg.shallow,
                LayerGroup::Untouched => continue,
            };
            d.set(
                site.id.layer_index,
                SiteDirective {
                    mode,
                    gamma: g.gamma,
                    beta: g.beta,
                },
            )?;
        }
        Ok(d)
    }

    /// Inverts `z` from timestep 0 to `steps`. The step `t -> t+1` evaluates
    /// the denoiser at step `t+1` and records features under that key, so
    /// sampling from `t+1` reads what inversion saw at the same noise level.
    fn invert(
        &mut self,
        mut z: Latent,
        stream: Option<Stream>,
        cache: &mut AttentionFeatureCache,
        phase: &'static str,
        round: usize,
    ) -> Result<(Latent, usize)> {
        let steps = self.cfg.steps;
        let mut calls = 0;
        for t in 0..steps {
            let directives = self.record_directives(t + 1, stream)?;
            let access = if stream.is_some() {
                CacheAccess::Write(cache)
            } else {
                CacheAccess::None
            };
            let eps = self.call(&z, t + 1, &directives, access, phase, round)?;
            calls += 1;
            z = ddim_invert_step(&z, &eps, &self.sched, steps)?;
        }
        Ok((z, calls))
    }

    fn sample(
        &mut self,
        mut z: Latent,
        cache: &AttentionFeatureCache,
        round: usize,
    ) -> Result<(Latent, usize)> {
        let guidance = GuidanceConfig::new(self.cfg.guidance_scale)?;
        let plain = |t| AttentionDirectives::plain(t);
        let mut calls = 0;
        for t in (1..=self.cfg.steps).rev() {
            let eps = if self.cfg.transfer {
                let directives = self.transfer_directives(t)?;
                let eps_col =
                    self.call(&z, t, &directives, CacheAccess::Read(cache), "sampling", round)?;
                calls += 1;
                if self.cfg.guided() {
                    let eps_plain =
                        self.call(&z, t, &plain(t), CacheAccess::None, "sampling", round)?;
                    calls += 1;
                    guide(&eps_col, &eps_plain, guidance)?
                } else {
                    eps_col
                }
            } else {
                calls += 1;
                self.call(&z, t, &plain(t), CacheAccess::None, "sampling", round)?
            };
            z = ddim_sample_step(&z, &eps, &self.sched)?;
        }
        Ok((z, calls))
    }
}

fn check_finite(z: &Latent, phase: &str) -> Result<()> {
    if !z.is_finite() {
        return Err(Error::Model(format!("non-finite latent after {phase}")));
    }
    Ok(())
}

/// Runs the full method. See [`colorize_with`] for an attention observer.
pub fn colorize<B: DenoiserBackend + ?Sized>(
    job: &ColorizationJob,
    backend: &B,
) -> Result<ColorizationOutput> {
    colorize_with(job, backend, None)
}

pub fn colorize_with<B: DenoiserBackend + ?Sized>(
    job: &ColorizationJob,
    backend: &B,
    observer: Option<&mut dyn AttentionObserver>,
) -> Result<ColorizationOutput> {
    let cfg = job.config.resolved()?;
    if job.input.dims() != job.reference.dims() {
        let (a, b) = (job.input.dims(), job.reference.dims());
        return Err(Error::shape("input vs reference size", &[a.0, a.1], &[b.0, b.1]));
    }
    let sched = make_schedule(cfg.t_max, backend.native_alphas())?;
    let targets: Vec<AttentionSite> = if cfg.transfer {
        backend
            .attention_sites()
            .iter()
            .filter(|s| s.id.group != LayerGroup::Untouched)
            .copied()
            .collect()
    } else {
        Vec::new()
    };
    info!(
        backend = backend.name(),
        steps = cfg.steps,
        rounds = cfg.rounds,
        sites = targets.len(),
        "colorize"
    );
    let mut runner = Runner {
        backend,
        sched,
        cfg,
        targets,
        observer,
    };

    let input_rgb = job.input.to_rgb();
    let ref_l_rgb = extract_luminance(&job.reference).to_rgb();
    let z_in = backend.encode(&input_rgb)?;
    let z_ref = backend.encode(&job.reference)?;
    let z_ref_l = backend.encode(&ref_l_rgb)?;

    let record = |s: Stream| cfg.transfer.then_some(s);
    let mut cache = AttentionFeatureCache::new();
    let mut calls = CallCounts::default();
    let (z_t_in, n) = runner.invert(z_in, record(Stream::Input), &mut cache, "inversion", 1)?;
    calls.inversion += n;
    let (z_t_ref, n) = runner.invert(z_ref, record(Stream::Ref), &mut cache, "inversion", 1)?;
    calls.inversion += n;
    let (_, n) = runner.invert(z_ref_l, record(Stream::RefL), &mut cache, "inversion", 1)?;
    calls.inversion += n;
    cache.freeze();
    check_finite(&z_t_in, "inversion")?;

    let mut z_out = z_t_in;
    let mut scratch = AttentionFeatureCache::new();
    for round in 1..=cfg.rounds {
        if round > 1 {
            let (z, n) = runner.invert(z_out, None, &mut scratch, "reinversion", round)?;
            calls.reinversion.push(n);
            z_out = z;
        }
        if cfg.adain && (round == 1 || cfg.adain_every_round) {
            z_out = initial_latent_adain(&z_out, &z_t_ref)?;
        }
        let (z, n) = runner.sample(z_out, &cache, round)?;
        calls.sampling.push(n);
        check_finite(&z, "sampling")?;
        z_out = z;
    }

    let decoded = backend.decode(&z_out)?;
    let (image, planes) = match cfg.postprocess {
        PostprocessMode::Off => (decoded.clone(), None),
        mode => {
            let reference = (mode == PostprocessMode::Full).then_some(&job.reference);
            let planes = postprocess_planes(&decoded, &job.input, reference, cfg.color_space)?;
            (planes.to_rgb(), Some(planes))
        }
    };
    Ok(ColorizationOutput {
        image,
        decoded,
        planes,
        latent: z_out,
        calls,
    })
}

/// [`colorize`] with the config mutated by `variant`.
pub fn ablation_run<B: DenoiserBackend + ?Sized>(
    job: &ColorizationJob,
    backend: &B,
    variant: &str,
) -> Result<ColorizationOutput> {
    let variant: Variant = variant.parse()?;
    let job = ColorizationJob {
        config: variant.apply(&job.config),
        ..job.clone()
    };
    colorize(&job, backend)
}
