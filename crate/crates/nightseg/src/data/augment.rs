//! Paired image/label augmentation: random scale, crop (with padding),
//! horizontal flip, and channel normalization. Labels travel through the
//! same geometry with nearest-neighbor resampling and an ignore-value pad,
//! so no class id is ever invented by interpolation.

use super::{DataError, LabelMap, Result, IGNORE_LABEL};
use crate::netcore::bilinear_resize;
use crate::tensor::TensorImage;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    pub hflip_probability: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Channel normalization constants on the 0..1 pixel scale.
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_height: 512,
            crop_width: 512,
            hflip_probability: 0.5,
            scale_min: 0.75,
            scale_max: 1.25,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_height == 0 || self.crop_height % 32 != 0 || self.crop_width == 0 || self.crop_width % 32 != 0 {
            return Err(DataError::InvalidConfig(format!(
                "crop {}x{} must be a positive multiple of 32",
                self.crop_height, self.crop_width
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(DataError::InvalidConfig("hflip_probability must be in [0,1]".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(DataError::InvalidConfig(format!(
                "scale range [{}, {}] invalid",
                self.scale_min, self.scale_max
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(DataError::InvalidConfig("std entries must be positive".into()));
        }
        Ok(())
    }

    /// `(raw_pixel/255 − mean)/std`, the pipeline's final step.
    pub fn normalize_pixel(&self, channel: usize, value: f32) -> f32 {
        (value / 255.0 - self.mean[channel]) / self.std[channel]
    }
}

/// Half-pixel-center nearest-neighbor resampling for categorical rasters.
pub(crate) fn nearest_resize(labels: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (in_h, in_w) = labels.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return labels.clone();
    }
    let pick = |o: usize, out_n: usize, in_n: usize| -> usize {
        let src = (o as f64 + 0.5) * in_n as f64 / out_n as f64;
        (src.floor() as usize).min(in_n - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        labels[[pick(y, out_h, in_h), pick(x, out_w, in_w)]]
    })
}

/// Applies the augmentation pipeline to an aligned (image, label) pair.
///
/// The image arrives on the raw 0..=255 pixel scale as a (1, 3, H, W)
/// tensor and leaves normalized. Exactly four random draws are consumed —
/// scale, crop row, crop column, flip — in that order regardless of
/// branch outcomes, so a given `seed` always yields the same result.
pub fn augment(
    image: &TensorImage<f32>,
    label: &LabelMap,
    cfg: &AugConfig,
    seed: u64,
) -> Result<(TensorImage<f32>, LabelMap)> {
    cfg.validate()?;
    let (b, c, h, w) = image.dim();
    if b != 1 || c != 3 {
        return Err(DataError::InvalidConfig(format!(
            "augment expects a single (1,3,H,W) image, got ({b},{c},..)"
        )));
    }
    if (h, w) != label.dim() {
        return Err(DataError::Alignment {
            image: None,
            image_dims: (h, w),
            label_dims: label.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // 1. Random scale: bilinear for the image, nearest for the label.
    let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let mut img = bilinear_resize(image, sh, sw);
    let mut lab = nearest_resize(label.data(), sh, sw);

    // 2. Pad bottom/right up to the crop size if needed: the image with the
    //    per-channel mean (zero after normalization), the label with ignore.
    let ph = sh.max(cfg.crop_height);
    let pw = sw.max(cfg.crop_width);
    if (ph, pw) != (sh, sw) {
        let mut padded = TensorImage::<f32>::zeros((1, 3, ph, pw));
        for ch in 0..3 {
            padded.slice_mut(s![.., ch, .., ..]).fill(cfg.mean[ch] * 255.0);
        }
        padded.slice_mut(s![.., .., ..sh, ..sw]).assign(&img);
        img = padded;
        let mut lpad = Array2::from_elem((ph, pw), IGNORE_LABEL);
        lpad.slice_mut(s![..sh, ..sw]).assign(&lab);
        lab = lpad;
    }

    // 3. Random crop to exactly (crop_height, crop_width).
    let oy = rng.gen_range(0..=ph - cfg.crop_height);
    let ox = rng.gen_range(0..=pw - cfg.crop_width);
    let mut img = img
        .slice(s![.., .., oy..oy + cfg.crop_height, ox..ox + cfg.crop_width])
        .to_owned();
    let mut lab = lab
        .slice(s![oy..oy + cfg.crop_height, ox..ox + cfg.crop_width])
        .to_owned();

    // 4. Horizontal flip, applied to both or neither.
    if rng.gen_bool(cfg.hflip_probability) {
        img.invert_axis(ndarray::Axis(3));
        lab.invert_axis(ndarray::Axis(1));
        img = img.as_standard_layout().to_owned();
        lab = lab.as_standard_layout().to_owned();
    }

    // 5. Normalization.
    for ch in 0..3 {
        img.slice_mut(s![.., ch, .., ..])
            .mapv_inplace(|v| cfg.normalize_pixel(ch, v));
    }

    let lab = LabelMap::new(lab).expect("resampling and padding preserve the label range");
    Ok((img, lab))
}

/// Deterministic evaluation-time preparation: no scaling, no flip, center
/// crop to the configured size (padding undersized inputs like `augment`),
/// then normalization. Consumes no randomness.
pub fn center_prepare(
    image: &TensorImage<f32>,
    label: &LabelMap,
    cfg: &AugConfig,
) -> Result<(TensorImage<f32>, LabelMap)> {
    cfg.validate()?;
    let (b, c, h, w) = image.dim();
    if b != 1 || c != 3 {
        return Err(DataError::InvalidConfig(format!(
            "center_prepare expects a single (1,3,H,W) image, got ({b},{c},..)"
        )));
    }
    if (h, w) != label.dim() {
        return Err(DataError::Alignment {
            image: None,
            image_dims: (h, w),
            label_dims: label.dim(),
        });
    }

    let ph = h.max(cfg.crop_height);
    let pw = w.max(cfg.crop_width);
    let img;
    let lab;
    if (ph, pw) != (h, w) {
        let mut padded = TensorImage::<f32>::zeros((1, 3, ph, pw));
        for ch in 0..3 {
            padded.slice_mut(s![.., ch, .., ..]).fill(cfg.mean[ch] * 255.0);
        }
        padded.slice_mut(s![.., .., ..h, ..w]).assign(image);
        img = padded;
        let mut lpad = Array2::from_elem((ph, pw), IGNORE_LABEL);
        lpad.slice_mut(s![..h, ..w]).assign(label.data());
        lab = lpad;
    } else {
        img = image.clone();
        lab = label.data().clone();
    }

    let oy = (ph - cfg.crop_height) / 2;
    let ox = (pw - cfg.crop_width) / 2;
    let mut img = img
        .slice(s![.., .., oy..oy + cfg.crop_height, ox..ox + cfg.crop_width])
        .to_owned();
    let lab = lab
        .slice(s![oy..oy + cfg.crop_height, ox..ox + cfg.crop_width])
        .to_owned();

    for ch in 0..3 {
        img.slice_mut(s![.., ch, .., ..])
            .mapv_inplace(|v| cfg.normalize_pixel(ch, v));
    }
    let lab = LabelMap::new(lab).expect("cropping and padding preserve the label range");
    Ok((img, lab))
}
