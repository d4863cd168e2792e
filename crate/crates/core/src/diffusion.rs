//! Deterministic DDIM stepping over a subsampled noise schedule, plus the
//! initial-latent AdaIN used before colorization sampling.

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::colorspace::MIN_STD;
use crate::error::{Error, Result};

/// Noise prediction with the same (channels, height, width) layout as a latent.
pub type NoisePrediction = Array3<f32>;

/// A latent grid of shape (channels, height, width) tagged with the DDIM
/// step index it currently sits at.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Array3<f32>,
    pub timestep: usize,
}

impl Latent {
    pub fn new(values: Array3<f32>, timestep: usize) -> Self {
        Self { values, timestep }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.values.dim();
        [c, h, w]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Cumulative alpha products of the scaled-linear beta schedule used by
/// Stable Diffusion (`beta_start = 0.00085`, `beta_end = 0.012`, 1000 steps).
pub fn scaled_linear_alphas_cumprod(steps: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
    let mut acc = 1.0;
    (0..steps)
        .map(|i| {
            let frac = if steps > 1 {
                i as f64 / (steps - 1) as f64
            } else {
                0.0
            };
            let beta = (lo + (hi - lo) * frac).powi(2);
            acc *= 1.0 - beta;
            acc
        })
        .collect()
}

pub fn sd_alphas_cumprod() -> Vec<f64> {
    scaled_linear_alphas_cumprod(1000, 0.00085, 0.012)
}

/// `alphas[t]` for step indices `0..=t_max`, strictly decreasing.
/// `native[t]` is the training-schedule timestep fed to the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    alphas: Vec<f64>,
    native: Vec<usize>,
}

impl Schedule {
    /// Builds a schedule from explicit alphas for steps `0..=t_max`. Native
    /// timesteps default to the step indices.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        let native = (0..alphas.len()).collect();
        Self::with_native(alphas, native)
    }

    fn with_native(alphas: Vec<f64>, native: Vec<usize>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::InvalidSchedule(
                "need alphas for at least steps 0 and 1".into(),
            ));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidSchedule(format!("alpha {a} outside (0, 1]")));
        }
        if let Some(i) = alphas.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule(format!(
                "alphas must strictly decrease in t, but alpha[{}]={} <= alpha[{}]={}",
                i,
                alphas[i],
                i + 1,
                alphas[i + 1]
            )));
        }
        Ok(Self { alphas, native })
    }

    pub fn t_max(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Training-schedule timestep of step index `t`.
    pub fn native_timestep(&self, t: usize) -> usize {
        self.native[t]
    }
}

/// Subsamples a backend's native cumulative-alpha schedule into `t_max`
/// DDIM steps with uniform stride ("leading" spacing, offset 1): step `t`
/// uses native timestep `(t - 1) * stride + 1`, and step 0 uses native 0.
pub fn make_schedule(t_max: usize, native_alphas: &[f64]) -> Result<Schedule> {
    if t_max == 0 {
        return Err(Error::InvalidSchedule("T_max must be >= 1".into()));
    }
    let n = native_alphas.len();
    let stride = n / t_max;
    if stride == 0 || (t_max - 1) * stride + 1 >= n {
        return Err(Error::InvalidSchedule(format!(
            "native schedule of {n} steps is too short for T_max={t_max}"
        )));
    }
    let mut native = vec![0];
    native.extend((1..=t_max).map(|t| (t - 1) * stride + 1));
    let alphas = native.iter().map(|&i| native_alphas[i]).collect();
    Schedule::with_native(alphas, native)
}

/// Scalars of one deterministic DDIM update `z' = c1 * z + c2 * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub c1: f64,
    pub c2: f64,
}

fn coeffs_between(alpha_from: f64, alpha_to: f64) -> StepCoeffs {
    StepCoeffs {
        c1: (alpha_to / alpha_from).sqrt(),
        c2: alpha_to.sqrt() * ((1.0 / alpha_to - 1.0).sqrt() - (1.0 / alpha_from - 1.0).sqrt()),
    }
}

/// Coefficients of the sampling step `t -> t-1`.
pub fn sampling_coeffs(sched: &Schedule, t: usize) -> Result<StepCoeffs> {
    if t == 0 || t > sched.t_max() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: sched.t_max(),
            context: "sampling step",
        });
    }
    Ok(coeffs_between(sched.alpha(t), sched.alpha(t - 1)))
}

/// Coefficients of the inversion step `t -> t+1`.
pub fn inversion_coeffs(sched: &Schedule, t: usize) -> Result<StepCoeffs> {
    if t >= sched.t_max() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: sched.t_max(),
            context: "inversion step",
        });
    }
    Ok(coeffs_between(sched.alpha(t), sched.alpha(t + 1)))
}

fn apply(z: &Array3<f32>, eps: &Array3<f32>, k: StepCoeffs) -> Result<Array3<f32>> {
    if z.dim() != eps.dim() {
        let (a, b, c) = z.dim();
        let (x, y, w) = eps.dim();
        return Err(Error::shape("ddim step noise", &[a, b, c], &[x, y, w]));
    }
    let (c1, c2) = (k.c1 as f32, k.c2 as f32);
    let mut out = Array3::zeros(z.dim());
    Zip::from(&mut out)
        .and(z)
        .and(eps)
        .for_each(|o, &zv, &ev| *o = c1 * zv + c2 * ev);
    Ok(out)
}

/// One DDIM sampling step from `z.timestep` to `z.timestep - 1`.
pub fn ddim_sample_step(z: &Latent, eps: &NoisePrediction, sched: &Schedule) -> Result<Latent> {
    let k = sampling_coeffs(sched, z.timestep)?;
    Ok(Latent::new(apply(&z.values, eps, k)?, z.timestep - 1))
}

/// One DDIM inversion step from `z.timestep` to `z.timestep + 1`. `stop` is
/// the early-stopping bound: stepping from `stop` or beyond is an error.
pub fn ddim_invert_step(
    z: &Latent,
    eps: &NoisePrediction,
    sched: &Schedule,
    stop: usize,
) -> Result<Latent> {
    if z.timestep >= stop {
        return Err(Error::TimestepOutOfRange {
            t: z.timestep,
            max: stop,
            context: "inversion past early-stop bound",
        });
    }
    let k = inversion_coeffs(sched, z.timestep)?;
    Ok(Latent::new(apply(&z.values, eps, k)?, z.timestep + 1))
}

/// Per-channel (mean, population std) over spatial positions, in f64.
pub fn channel_moments(values: &Array3<f32>) -> Vec<(f64, f64)> {
    values
        .axis_iter(Axis(0))
        .map(|chan| {
            let n = chan.len() as f64;
            let mean = chan.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = chan
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Replaces the per-channel mean and standard deviation of `z_out` with
/// those of `z_ref`.
pub fn initial_latent_adain(z_out: &Latent, z_ref: &Latent) -> Result<Latent> {
    if z_out.shape() != z_ref.shape() {
        return Err(Error::shape("initial latent adain", &z_ref.shape(), &z_out.shape()));
    }
    if z_out.timestep != z_ref.timestep {
        return Err(Error::TimestepOutOfRange {
            t: z_out.timestep,
            max: z_ref.timestep,
            context: "adain latents at different timesteps",
        });
    }
    let src = channel_moments(&z_out.values);
    let dst = channel_moments(&z_ref.values);
    let mut values = z_out.values.clone();
    for (c, mut chan) in values.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = src[c];
        let (rm, rs) = dst[c];
        if s < MIN_STD {
            warn!(channel = c, "zero-variance latent channel, applying mean shift only");
            chan.mapv_inplace(|v| (v as f64 - m + rm) as f32);
        } else {
            chan.mapv_inplace(|v| ((v as f64 - m) / s * rs + rm) as f32);
        }
    }
    Ok(Latent::new(values, z_out.timestep))
}
