//! Color conversions and the Lab/YUV post-processing applied to colorized
//! outputs.
//!
//! Lab follows the sRGB (D65, 2°) pipeline: piecewise sRGB transfer
//! function, the IEC 61966-2-1 RGB→XYZ matrix, then CIE Lab. The white point
//! is taken as the XYZ image of RGB (1,1,1) so that white maps to a=b=0
//! without rounding drift. YUV is BT.601 full range with chroma centered on 0.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

// CIE constants: delta = 6/29.
const LAB_DELTA: f64 = 6.0 / 29.0;

/// Standard deviations below this are treated as zero when matching moments.
pub const MIN_STD: f64 = 1e-12;

fn white_point() -> [f64; 3] {
    [
        RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
        RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
        RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
    ]
}

/// sRGB transfer function, encoded value to linear light.
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse sRGB transfer function, linear light to encoded value.
pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_DELTA * LAB_DELTA * LAB_DELTA {
        t.cbrt()
    } else {
        t / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > LAB_DELTA {
        t * t * t
    } else {
        3.0 * LAB_DELTA * LAB_DELTA * (t - 4.0 / 29.0)
    }
}

/// Converts one sRGB triple in [0,1] to (L, a, b).
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let white = white_point();
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let xyz = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(xyz / white[i]);
    }
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

/// Converts (L, a, b) to sRGB without clamping; out-of-gamut colors fall
/// outside [0,1].
pub fn lab_pixel_to_rgb_unclamped(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let white = white_point();
    let xyz = [
        white[0] * lab_f_inv(fx),
        white[1] * lab_f_inv(fy),
        white[2] * lab_f_inv(fz),
    ];
    let mut rgb = [0.0; 3];
    for (i, row) in XYZ_TO_RGB.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        // negative linear light has no sRGB encoding; keep the sign for clamping
        rgb[i] = if lin < 0.0 { lin * 12.92 } else { linear_to_srgb(lin) };
    }
    rgb
}

/// Converts (L, a, b) to sRGB clamped to [0,1].
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    lab_pixel_to_rgb_unclamped(lab).map(|c| c.clamp(0.0, 1.0))
}

/// Neutral sRGB level (r = g = b) whose Lab lightness is `lightness`.
pub fn lightness_to_gray_level(lightness: f64) -> f64 {
    let y = lab_f_inv((lightness + 16.0) / 116.0);
    linear_to_srgb(y).clamp(0.0, 1.0)
}

/// BT.601 full-range luma/chroma of an sRGB triple.
pub fn rgb_pixel_to_yuv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b,
        0.5 * r - 0.418_688 * g - 0.081_312 * b,
    ]
}

pub fn yuv_pixel_to_rgb_unclamped(yuv: [f64; 3]) -> [f64; 3] {
    let [y, u, v] = yuv;
    [
        y + 1.402 * v,
        y - 0.344_136 * u - 0.714_136 * v,
        y + 1.772 * u,
    ]
}

/// An sRGB image with values in [0,1], stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::shape("RgbImage::new", &[width * height], &[data.len()]));
        }
        if data.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidDimensions(
                "rgb values must lie in [0,1]".to_string(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)`; values are clamped to [0,1].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        assert!(width > 0 && height > 0, "image must be at least 1x1");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).map(|c| c.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// A single-channel lightness image: each value is Lab L / 100.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::shape("GrayImage::new", &[width * height], &[data.len()]));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidDimensions(
                "gray values must lie in [0,1]".to_string(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "image must be at least 1x1");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Replicates the lightness into a neutral 3-channel image (r = g = b)
    /// with the same Lab L.
    pub fn to_rgb(&self) -> RgbImage {
        let data = self
            .data
            .iter()
            .map(|&l| {
                let level = lightness_to_gray_level(l as f64 * 100.0) as f32;
                [level; 3]
            })
            .collect();
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// 8-bit quantization of the lightness, `round(255 * L / 100)`.
    pub fn quantized(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_unit(v as f64)).collect()
    }
}

pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    #[default]
    Lab,
    Yuv,
}

impl std::str::FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lab" => Ok(ColorSpace::Lab),
            "yuv" => Ok(ColorSpace::Yuv),
            other => Err(Error::InvalidConfig(format!("unknown color space `{other}`"))),
        }
    }
}

/// Per-pixel planes of a luminance/chrominance color space (Lab or YUV),
/// kept in f64 and unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorPlanes {
    pub space: ColorSpace,
    pub width: usize,
    pub height: usize,
    pub luma: Vec<f64>,
    pub chroma: [Vec<f64>; 2],
}

/// Lab image: L in [0,100], a and b nominally in [-128,127].
pub type LabImage = ColorPlanes;

impl ColorPlanes {
    pub fn from_rgb(img: &RgbImage, space: ColorSpace) -> Self {
        let n = img.data.len();
        let mut luma = Vec::with_capacity(n);
        let mut c1 = Vec::with_capacity(n);
        let mut c2 = Vec::with_capacity(n);
        for px in &img.data {
            let rgb = px.map(f64::from);
            let [l, a, b] = match space {
                ColorSpace::Lab => rgb_pixel_to_lab(rgb),
                ColorSpace::Yuv => rgb_pixel_to_yuv(rgb),
            };
            luma.push(l);
            c1.push(a);
            c2.push(b);
        }
        Self {
            space,
            width: img.width,
            height: img.height,
            luma,
            chroma: [c1, c2],
        }
    }

    /// Converts back to sRGB; out-of-gamut values are clamped to [0,1].
    pub fn to_rgb(&self) -> RgbImage {
        let data = (0..self.luma.len())
            .map(|i| {
                let px = [self.luma[i], self.chroma[0][i], self.chroma[1][i]];
                let rgb = match self.space {
                    ColorSpace::Lab => lab_pixel_to_rgb_unclamped(px),
                    ColorSpace::Yuv => yuv_pixel_to_rgb_unclamped(px),
                };
                rgb.map(|c| c.clamp(0.0, 1.0) as f32)
            })
            .collect();
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.luma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.luma.is_empty()
    }
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    ColorPlanes::from_rgb(img, ColorSpace::Lab)
}

/// Inverse of [`rgb_to_lab`]; out-of-gamut colors clamp to [0,1].
pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    debug_assert_eq!(img.space, ColorSpace::Lab);
    img.to_rgb()
}

/// Lab lightness of `img`, rescaled to [0,1].
pub fn extract_luminance(img: &RgbImage) -> GrayImage {
    let data = img
        .data
        .iter()
        .map(|px| (rgb_pixel_to_lab(px.map(f64::from))[0] / 100.0).clamp(0.0, 1.0) as f32)
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Population mean and standard deviation.
pub fn moments(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Affinely maps `values` so their mean and standard deviation become
/// `target`. A zero-variance channel only gets its mean shifted.
pub fn match_moments(values: &mut [f64], target: (f64, f64), label: &str) {
    let (mean, std) = moments(values);
    let (t_mean, t_std) = target;
    if std < MIN_STD {
        warn!(channel = label, "zero-variance channel, applying mean shift only");
        for v in values.iter_mut() {
            *v = *v - mean + t_mean;
        }
        return;
    }
    let scale = t_std / std;
    for v in values.iter_mut() {
        *v = (*v - mean) * scale + t_mean;
    }
}

fn input_luma(input: &GrayImage, space: ColorSpace) -> Vec<f64> {
    input
        .data
        .iter()
        .map(|&g| match space {
            ColorSpace::Lab => g as f64 * 100.0,
            // luma of the neutral replica, which is its r = g = b level
            ColorSpace::Yuv => lightness_to_gray_level(g as f64 * 100.0),
        })
        .collect()
}

fn check_dims(context: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, &[a.0, a.1], &[b.0, b.1]));
    }
    Ok(())
}

/// Replaces the luminance of `out` with `input` and, when a reference is
/// given, matches each chroma channel's global mean and standard deviation
/// to the reference's. Returns unclamped planes.
pub fn postprocess_planes(
    out: &RgbImage,
    input: &GrayImage,
    reference: Option<&RgbImage>,
    space: ColorSpace,
) -> Result<ColorPlanes> {
    check_dims("postprocess input", out.dims(), input.dims())?;
    let ref_planes = match reference {
        Some(r) => {
            check_dims("postprocess reference", out.dims(), r.dims())?;
            Some(ColorPlanes::from_rgb(r, space))
        }
        None => None,
    };
    postprocess_color_planes(ColorPlanes::from_rgb(out, space), input, ref_planes.as_ref())
}

/// [`postprocess_planes`] on planes that are already converted.
pub fn postprocess_color_planes(
    mut planes: ColorPlanes,
    input: &GrayImage,
    reference: Option<&ColorPlanes>,
) -> Result<ColorPlanes> {
    check_dims(
        "postprocess input",
        (planes.width, planes.height),
        input.dims(),
    )?;
    planes.luma = input_luma(input, planes.space);
    if let Some(reference) = reference {
        if reference.space != planes.space || reference.len() != planes.len() {
            return Err(Error::shape(
                "postprocess reference planes",
                &[planes.len()],
                &[reference.len()],
            ));
        }
        let labels = match planes.space {
            ColorSpace::Lab => ["a", "b"],
            ColorSpace::Yuv => ["u", "v"],
        };
        for ((chan, ref_chan), label) in planes
            .chroma
            .iter_mut()
            .zip(reference.chroma.iter())
            .zip(labels)
        {
            match_moments(chan, moments(ref_chan), label);
        }
    }
    Ok(planes)
}

/// Luminance replacement followed by chroma moment matching against the
/// reference.
pub fn postprocess(
    out: &RgbImage,
    input: &GrayImage,
    reference: &RgbImage,
    space: ColorSpace,
) -> Result<RgbImage> {
    Ok(postprocess_planes(out, input, Some(reference), space)?.to_rgb())
}

/// Luminance replacement only; chroma is left as produced.
pub fn replace_luminance(out: &RgbImage, input: &GrayImage, space: ColorSpace) -> Result<RgbImage> {
    Ok(postprocess_planes(out, input, None, space)?.to_rgb())
}
