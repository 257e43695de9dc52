//! Atmospheric scattering model: haze synthesis, exact inversion, and the
//! classical restorations used to manufacture consensual negatives.
//!
//! Images are stored channel-first as `[1, 3, H, W]` tensors.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Default transmission floor.
pub const T_MIN: f64 = 0.05;

pub const MIN_SIDE: usize = 8;

/// RGB image with every intensity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let [n, c, h, w] = data.shape();
        if n != 1 || c != 3 {
            return Err(invalid(format!("image tensor must be [1, 3, H, W], got {:?}", data.shape())));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(invalid(format!("image {h}x{w} smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if let Some(bad) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("image intensity {bad} outside [0, 1]")));
        }
        Ok(ImageTensor(data))
    }

    /// Builds an image from `f(channel, row, col)`, clamping into range.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new(Tensor::from_fn([1, 3, height, width], |[_, c, y, x]| f(c, y, x).clamp(0.0, 1.0)))
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    /// Clamps an arbitrary `[1, 3, H, W]` tensor into a valid image.
    pub fn clamped(data: Tensor) -> Result<Self> {
        Self::new(data.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.at([0, c, y, x])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height() || left + w > self.width() {
            return Err(invalid("crop window outside image"));
        }
        Self::new(self.0.crop(top, left, h, w))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| quantize(self.at(c, y as usize, x as usize))))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

/// `round(v * 255)` clamped to a byte.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Per-pixel transmission in `(0, 1]`, stored as `[1, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap(Tensor);

impl TransmissionMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.batch() != 1 || data.channels() != 1 {
            return Err(invalid(format!("transmission must be [1, 1, H, W], got {:?}", data.shape())));
        }
        if let Some(bad) = data.data().iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(invalid(format!("transmission value {bad} outside (0, 1]")));
        }
        Ok(TransmissionMap(data))
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full([1, 1, height, width], value))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.0.at([0, 0, y, x])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Multiplies every value by `factor`, keeping the result in `[floor, 1]`.
    pub fn perturbed(&self, factor: f64, floor: f64) -> Result<Self> {
        Self::new(self.0.map(|t| (t * factor).clamp(floor, 1.0)))
    }
}

/// Global atmospheric light, one value per RGB channel in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtmosphericLight(pub [f64; 3]);

impl AtmosphericLight {
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(invalid(format!("atmospheric light {rgb:?} outside (0, 1]")));
        }
        Ok(AtmosphericLight(rgb))
    }

    pub fn gray(v: f64) -> Result<Self> {
        Self::new([v; 3])
    }

    /// Uniform draw from `[0.7, 1.0]`; `tied` draws one value for all channels.
    pub fn sample<R: Rng>(rng: &mut R, tied: bool) -> Self {
        if tied {
            AtmosphericLight([rng.gen_range(0.7..=1.0); 3])
        } else {
            AtmosphericLight(std::array::from_fn(|_| rng.gen_range(0.7..=1.0)))
        }
    }
}

/// One synthetic training pair with the physical parameters that produced it.
#[derive(Clone, Debug)]
pub struct HazeSample {
    pub clear: ImageTensor,
    pub hazy: ImageTensor,
    pub transmission: TransmissionMap,
    pub airlight: AtmosphericLight,
    pub beta: f64,
}

impl HazeSample {
    pub fn synthesize(clear: ImageTensor, depth: &Tensor, beta: f64, airlight: AtmosphericLight) -> Result<Self> {
        let transmission = beer_lambert_transmission(depth, beta, T_MIN)?;
        let hazy = synthesize_haze(&clear, &transmission, airlight)?;
        Ok(HazeSample { clear, hazy, transmission, airlight, beta })
    }
}

/// Samples the scattering coefficient from `[0.4, 1.6]`.
pub fn sample_beta<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(0.4..=1.6)
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// `T = max(exp(-beta * depth), t_min)`.
pub fn beer_lambert_transmission(depth: &Tensor, beta: f64, t_min: f64) -> Result<TransmissionMap> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("scattering coefficient {beta} must be positive")));
    }
    if let Some(bad) = depth.data().iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(invalid(format!("depth value {bad} is not a finite nonnegative number")));
    }
    TransmissionMap::new(depth.map(|d| (-beta * d).exp().max(t_min).min(1.0)))
}

/// `I = T * J + (1 - T) * A`, clamped to `[0, 1]`.
pub fn synthesize_haze(clear: &ImageTensor, t: &TransmissionMap, a: AtmosphericLight) -> Result<ImageTensor> {
    check_dims(clear.dims(), t.dims(), "synthesize_haze")?;
    ImageTensor::from_fn(clear.height(), clear.width(), |c, y, x| {
        let tv = t.at(y, x);
        tv * clear.at(c, y, x) + (1.0 - tv) * a.0[c]
    })
}

/// Exact inverse of the scattering model, `J = (I - A) / T + A`, clamped to `[0, 1]`.
pub fn invert_haze(hazy: &ImageTensor, t: &TransmissionMap, a: AtmosphericLight, t_min: f64) -> Result<ImageTensor> {
    check_dims(hazy.dims(), t.dims(), "invert_haze")?;
    if let Some((index, &value)) = t.tensor().data().iter().enumerate().find(|(_, v)| **v < t_min) {
        return Err(Error::Singularity { value, floor: t_min, index });
    }
    ImageTensor::from_fn(hazy.height(), hazy.width(), |c, y, x| {
        (hazy.at(c, y, x) - a.0[c]) / t.at(y, x) + a.0[c]
    })
}

/// Clipped-window minimum filter over a `[1, 1, H, W]` map.
fn min_filter(map: &Tensor, patch: usize) -> Tensor {
    let (h, w) = (map.height(), map.width());
    let r = patch / 2;
    // Separable: rows then columns.
    let rows = Tensor::from_fn(map.shape(), |[_, _, y, x]| {
        (x.saturating_sub(r)..(x + r + 1).min(w)).map(|xx| map.at([0, 0, y, xx])).fold(f64::INFINITY, f64::min)
    });
    Tensor::from_fn(map.shape(), |[_, _, y, x]| {
        (y.saturating_sub(r)..(y + r + 1).min(h)).map(|yy| rows.at([0, 0, yy, x])).fold(f64::INFINITY, f64::min)
    })
}

/// Clipped-window mean filter over a `[1, 1, H, W]` map.
fn box_filter(map: &Tensor, patch: usize) -> Tensor {
    let (h, w) = (map.height(), map.width());
    let r = patch / 2;
    let rows = Tensor::from_fn(map.shape(), |[_, _, y, x]| {
        let span = x.saturating_sub(r)..(x + r + 1).min(w);
        let n = span.len() as f64;
        span.map(|xx| map.at([0, 0, y, xx])).sum::<f64>() / n
    });
    Tensor::from_fn(map.shape(), |[_, _, y, x]| {
        let span = y.saturating_sub(r)..(y + r + 1).min(h);
        let n = span.len() as f64;
        span.map(|yy| rows.at([0, 0, yy, x])).sum::<f64>() / n
    })
}

fn check_patch(patch: usize) -> Result<()> {
    if patch == 0 || patch.is_multiple_of(2) {
        return Err(invalid(format!("patch size {patch} must be odd and positive")));
    }
    Ok(())
}

/// Per-pixel channel minimum followed by a `patch × patch` minimum filter.
pub fn dark_channel(img: &Tensor, patch: usize) -> Result<Tensor> {
    check_patch(patch)?;
    let [_, c, h, w] = img.shape();
    let mins = Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| {
        (0..c).map(|ch| img.at([0, ch, y, x])).fold(f64::INFINITY, f64::min)
    });
    Ok(min_filter(&mins, patch))
}

/// Mean colour of the hazy image over the brightest 0.1% of dark-channel pixels.
pub fn estimate_airlight(hazy: &ImageTensor, dark: &Tensor) -> Result<AtmosphericLight> {
    let n = dark.len();
    let take = (n as f64 * 0.001).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dark.data()[b].total_cmp(&dark.data()[a]).then(a.cmp(&b)));
    let w = hazy.width();
    let mut sum = [0.0; 3];
    for &i in &order[..take] {
        for (c, s) in sum.iter_mut().enumerate() {
            *s += hazy.at(c, i / w, i % w);
        }
    }
    // A black image has no airlight; keep the estimate strictly positive.
    AtmosphericLight::new(sum.map(|s| (s / take as f64).max(1e-3)))
}

/// Transmission and airlight estimated by the dark channel prior, with the raw
/// transmission smoothed by a box filter and floored at `t_min`.
pub fn dcp_estimate(hazy: &ImageTensor, omega: f64, patch: usize, t_min: f64) -> Result<(TransmissionMap, AtmosphericLight)> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(invalid(format!("omega {omega} outside (0, 1]")));
    }
    let dark = dark_channel(hazy.tensor(), patch)?;
    let a = estimate_airlight(hazy, &dark)?;
    let normalized = Tensor::from_fn(hazy.tensor().shape(), |[_, c, y, x]| hazy.at(c, y, x) / a.0[c]);
    let raw = dark_channel(&normalized, patch)?.map(|d| 1.0 - omega * d);
    let t = box_filter(&raw, patch).map(|v| v.clamp(t_min, 1.0));
    Ok((TransmissionMap::new(t)?, a))
}

pub fn dcp_restore(hazy: &ImageTensor, omega: f64, patch: usize) -> Result<ImageTensor> {
    let (t, a) = dcp_estimate(hazy, omega, patch, T_MIN)?;
    invert_haze(hazy, &t, a, T_MIN)
}

/// `alpha * clear + (1 - alpha) * hazy`.
pub fn blend_restore(hazy: &ImageTensor, clear: &ImageTensor, alpha: f64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("blend alpha {alpha} outside [0, 1]")));
    }
    check_dims(hazy.dims(), clear.dims(), "blend_restore")?;
    ImageTensor::new(hazy.tensor().zip_map(clear.tensor(), |h, c| alpha * c + (1.0 - alpha) * h))
}

/// Shape of a synthetic depth map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthKind {
    LinearRamp,
    Radial,
    SmoothField,
}

impl DepthKind {
    pub const ALL: [DepthKind; 3] = [DepthKind::LinearRamp, DepthKind::Radial, DepthKind::SmoothField];
}

/// Synthetic depth in `[0, 1]` as a `[1, 1, H, W]` tensor.
pub fn synthetic_depth<R: Rng>(kind: DepthKind, height: usize, width: usize, rng: &mut R) -> Tensor {
    let (hf, wf) = (height as f64, width as f64);
    let raw = match kind {
        DepthKind::LinearRamp => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = angle.sin_cos();
            Tensor::from_fn([1, 1, height, width], |[_, _, y, x]| dy * y as f64 / hf + dx * x as f64 / wf)
        }
        DepthKind::Radial => {
            let cy = rng.gen_range(0.2..0.8) * hf;
            let cx = rng.gen_range(0.2..0.8) * wf;
            let inverted: bool = rng.gen();
            Tensor::from_fn([1, 1, height, width], |[_, _, y, x]| {
                let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if inverted { -r } else { r }
            })
        }
        DepthKind::SmoothField => {
            let noise = Tensor::from_fn([1, 1, height, width], |_| rng.gen_range(0.0..1.0));
            let patch = (height.min(width) / 4) | 1;
            box_filter(&box_filter(&box_filter(&noise, patch), patch), patch)
        }
    };
    normalize_unit(&raw)
}

fn normalize_unit(t: &Tensor) -> Tensor {
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / span)
}
