//! Region-of-interest cropping and per-clip normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ROI: usize = 96;
pub const CROP: usize = 88;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    /// Square crop size; `None` keeps the full frame.
    pub crop: Option<usize>,
    pub normalize: bool,
    /// Random horizontal flips in training. Off by default: flipping swaps
    /// the left and right views.
    pub hflip: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            crop: Some(CROP),
            normalize: true,
            hflip: false,
        }
    }
}

/// Top-left corner of the crop: uniform over valid offsets in training,
/// centred otherwise.
pub fn crop_offset(h: usize, w: usize, crop: usize, train: bool, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if h < crop || w < crop {
        return Err(Error::dim("preprocess", format!("frame {h}x{w} smaller than crop {crop}")));
    }
    Ok(if train {
        (rng.random_range(0..=h - crop), rng.random_range(0..=w - crop))
    } else {
        ((h - crop) / 2, (w - crop) / 2)
    })
}

/// Same window from every frame of `[T, H, W]`.
pub fn crop(frames: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let s = frames.shape();
    if s.len() != 3 || top + size > s[1] || left + size > s[2] {
        return Err(Error::dim(
            "crop",
            format!("window {size} at ({top}, {left}) outside {s:?}"),
        ));
    }
    let (t, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(t * size * size);
    for f in 0..t {
        for i in top..top + size {
            let row = (f * h + i) * w + left;
            out.extend_from_slice(&frames.data()[row..row + size]);
        }
    }
    Tensor::new(vec![t, size, size], out)
}

/// Zero mean, unit variance over the whole clip. A constant clip maps to zeros.
pub fn normalize(frames: &Tensor<f32>) -> Tensor<f32> {
    let n = frames.len() as f64;
    let mean = frames.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = frames.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    frames.map(|v| ((v as f64 - mean) * inv) as f32)
}

/// Crop (random in training, centred otherwise), optional flip, then
/// normalization.
pub fn preprocess(frames: &Tensor<f32>, cfg: &Preprocess, train: bool, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if frames.rank() != 3 {
        return Err(Error::dim("preprocess", format!("need [T, H, W], got {:?}", frames.shape())));
    }
    let mut out = match cfg.crop {
        Some(size) => {
            let (top, left) = crop_offset(frames.shape()[1], frames.shape()[2], size, train, rng)?;
            crop(frames, top, left, size)?
        }
        None => frames.clone(),
    };
    if train && cfg.hflip && rng.random::<bool>() {
        out = out.flip_last();
    }
    if cfg.normalize {
        out = normalize(&out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(t: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::new(vec![t, h, w], (0..t * h * w).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap()
    }

    #[test]
    fn eval_crop_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(crop_offset(ROI, ROI, CROP, false, &mut rng).unwrap(), (4, 4));
    }

    #[test]
    fn train_crops_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let (a, b) = crop_offset(ROI, ROI, CROP, true, &mut rng).unwrap();
            assert!(a <= 8 && b <= 8);
        }
    }

    #[test]
    fn small_frames_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = preprocess(&ramp(2, 80, 96), &Preprocess::default(), false, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn crop_shares_window_across_frames() {
        let x = ramp(3, 10, 10);
        let c = crop(&x, 2, 3, 4).unwrap();
        for f in 0..3 {
            assert_eq!(c.at(&[f, 0, 0]), x.at(&[f, 2, 3]));
            assert_eq!(c.at(&[f, 3, 3]), x.at(&[f, 5, 6]));
        }
    }

    #[test]
    fn normalized_clip_has_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = preprocess(&ramp(4, ROI, ROI), &Preprocess::default(), true, &mut rng).unwrap();
        assert_eq!(y.shape(), &[4, CROP, CROP]);
        let n = y.len() as f64;
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "{mean}");
        assert!((std - 1.0).abs() < 1e-6, "{std}");
    }

    #[test]
    fn eval_path_is_deterministic() {
        let x = ramp(2, ROI, ROI);
        let a = preprocess(&x, &Preprocess::default(), false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = preprocess(&x, &Preprocess::default(), false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }
}
