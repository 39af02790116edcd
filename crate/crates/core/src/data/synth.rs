//! Synthetic mouth clips whose class lives partly in left/right asymmetry.
//!
//! Every clip shows a mirror-symmetric ellipse "mouth" opening and closing.
//! Classes come in pairs `(2k, 2k+1)`: both members of a pair share the
//! opening rhythm of pair `k`, and differ only through a class-specific
//! bright spot on the right half of the frame whose amplitude is
//! `asymmetry_strength`. Background clutter is mirrored about the centre
//! line, so at zero asymmetry every frame is exactly symmetric and the two
//! members of a pair are identically distributed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, SequenceSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    #[serde(rename = "t")]
    pub frames: usize,
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
    pub asymmetry_strength: f64,
    pub redundancy_noise_level: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            frames: 8,
            height: 32,
            width: 32,
            asymmetry_strength: 0.6,
            redundancy_noise_level: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::contract("synth_spec", d));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} (need at least 2)", self.num_classes));
        }
        if self.frames == 0 || self.height < 8 || self.width < 8 {
            return bad(format!(
                "clip extent {}x{}x{} too small (need T >= 1, H, W >= 8)",
                self.frames, self.height, self.width
            ));
        }
        if !(0.0..=1.0).contains(&self.asymmetry_strength) {
            return bad(format!("asymmetry_strength {} outside [0, 1]", self.asymmetry_strength));
        }
        if !(self.redundancy_noise_level >= 0.0 && self.redundancy_noise_level.is_finite()) {
            return bad(format!("redundancy_noise_level {} must be >= 0", self.redundancy_noise_level));
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.55;
const MOUTH_DEPTH: f64 = 0.4;
const SPOT_PEAK: f64 = 0.45;

/// Where class `c`'s spot sits, as fractions of (height, width) measured
/// from the centre; the column offset is always positive (right half).
fn spot_centre(class: usize) -> (f64, f64) {
    let rows = [-0.22, 0.22, -0.08, 0.08];
    let cols = [0.22, 0.22, 0.36, 0.36];
    let i = class % 4;
    let band = (class / 4) as f64 * 0.05;
    (rows[i], (cols[i] - band).max(0.1))
}

/// Cycles per clip of pair `k`'s opening rhythm.
fn rhythm(pair: usize) -> f64 {
    1.0 + 0.75 * pair as f64
}

/// Clip `index` of the dataset. Its random stream depends only on
/// `(spec.seed, index)`.
pub fn generate_one(spec: &SynthSpec, index: usize, label: usize) -> Result<SequenceSample> {
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let clutter = Normal::new(0.0, spec.redundancy_noise_level).expect("validated std");

    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let semi_x = 0.3 * w as f64;
    let (spot_r, spot_c) = spot_centre(label);
    let spot_y = cy + spot_r * h as f64;
    let spot_x = cx + spot_c * w as f64;
    let spot_sigma = 0.07 * w as f64;
    let amp = spec.asymmetry_strength * SPOT_PEAK;
    let half = w.div_ceil(2);

    let mut data = vec![0f32; t_len * h * w];
    for t in 0..t_len {
        let open = 0.5 + 0.5 * (std::f64::consts::TAU * rhythm(label / 2) * t as f64 / t_len as f64 + phase).sin();
        let semi_y = h as f64 * (0.05 + 0.13 * open);
        let frame = &mut data[t * h * w..(t + 1) * h * w];
        for i in 0..h {
            let dy = (i as f64 - cy) / semi_y;
            for j in 0..half {
                let dx = (j as f64 - cx) / semi_x;
                let r = (dx * dx + dy * dy).sqrt();
                let mouth = 1.0 / (1.0 + ((r - 1.0) / 0.12).exp());
                // Clutter lives outside the mouth and is mirrored.
                let noise = if spec.redundancy_noise_level > 0.0 {
                    clutter.sample(&mut rng) * (1.0 - mouth)
                } else {
                    0.0
                };
                let v = BACKGROUND - MOUTH_DEPTH * mouth + noise;
                frame[i * w + j] = v as f32;
                frame[i * w + (w - 1 - j)] = v as f32;
            }
            if amp > 0.0 {
                for j in 0..w {
                    let d2 = ((i as f64 - spot_y).powi(2) + (j as f64 - spot_x).powi(2)) / (2.0 * spot_sigma * spot_sigma);
                    let spot = amp * (0.5 + 0.5 * open) * (-d2).exp();
                    frame[i * w + j] = (frame[i * w + j] as f64 + spot) as f32;
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    SequenceSample::new(Tensor::new(vec![t_len, h, w], data)?, label)
}

/// `n` clips with labels cycling through the classes.
pub fn generate(spec: &SynthSpec, n: usize) -> Result<Vec<SequenceSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::contract("generate", "sample count must be at least 1"));
    }
    (0..n)
        .into_par_iter()
        .map(|i| generate_one(spec, i, i % spec.num_classes))
        .collect()
}

/// One pool of `n_train + n_val` clips split in order, so the validation
/// clips never overlap the training clips.
pub fn synth_splits(spec: &SynthSpec, n_train: usize, n_val: usize) -> Result<(Dataset, Dataset)> {
    let mut all = generate(spec, n_train + n_val)?;
    let val = all.split_off(n_train);
    Ok((Dataset::new(all, spec.num_classes)?, Dataset::new(val, spec.num_classes)?))
}

/// Accuracy of a nearest-centroid classifier in pixel space: class means are
/// taken over `train`, each `test` clip goes to the closest mean.
pub fn nearest_centroid_accuracy(train: &[SequenceSample], test: &[SequenceSample], num_classes: usize) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract("nearest_centroid", "empty sample set"));
    }
    let len = train[0].frames.len();
    let mut sums = vec![vec![0f64; len]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for s in train {
        if s.frames.len() != len {
            return Err(Error::dim("nearest_centroid", "clips differ in size"));
        }
        counts[s.label] += 1;
        for (a, &v) in sums[s.label].iter_mut().zip(s.frames.data()) {
            *a += v as f64;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let mut correct = 0;
    for s in test {
        let best = centroids
            .iter()
            .enumerate()
            .filter_map(|(c, m)| {
                m.as_ref().map(|m| {
                    let d: f64 = m.iter().zip(s.frames.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                    (c, d)
                })
            })
            .fold((usize::MAX, f64::INFINITY), |b, (c, d)| if d < b.1 { (c, d) } else { b });
        if best.0 == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(asym: f64, noise: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            asymmetry_strength: asym,
            redundancy_noise_level: noise,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_asymmetry_is_mirror_symmetric() {
        for s in generate(&spec(0.0, 0.3, 1), 8).unwrap() {
            assert_eq!(s.frames, s.frames.flip_last());
        }
    }

    #[test]
    fn positive_asymmetry_breaks_symmetry() {
        let s = &generate(&spec(0.6, 0.3, 1), 1).unwrap()[0];
        assert_ne!(s.frames, s.frames.flip_last());
    }

    #[test]
    fn same_seed_same_clips() {
        assert_eq!(generate(&spec(0.6, 0.3, 5), 6).unwrap(), generate(&spec(0.6, 0.3, 5), 6).unwrap());
        assert_ne!(generate(&spec(0.6, 0.3, 5), 2).unwrap(), generate(&spec(0.6, 0.3, 6), 2).unwrap());
    }

    #[test]
    fn prefix_does_not_depend_on_count() {
        let a = generate(&spec(0.6, 0.3, 5), 3).unwrap();
        let b = generate(&spec(0.6, 0.3, 5), 7).unwrap();
        assert_eq!(a[..], b[..3]);
    }

    #[test]
    fn pixels_in_unit_range_and_labels_balanced() {
        let clips = generate(&spec(1.0, 1.0, 2), 16).unwrap();
        for (i, s) in clips.iter().enumerate() {
            assert_eq!(s.label, i % 4);
            assert!(s.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(generate(&spec(1.5, 0.0, 0), 1).is_err());
        assert!(generate(&spec(0.5, -1.0, 0), 1).is_err());
        assert!(generate(&spec(0.5, 0.0, 0), 0).is_err());
    }

    #[test]
    fn centroid_oracle_calibrates_difficulty() {
        let acc = |asym, noise| {
            let train = generate(&spec(asym, noise, 10), 256).unwrap();
            let test = generate(&spec(asym, noise, 11), 256).unwrap();
            nearest_centroid_accuracy(&train, &test, 4).unwrap()
        };
        let sym = acc(0.0, 0.3);
        let clean = acc(1.0, 0.0);
        assert!(sym <= 0.55, "{sym}");
        assert!(clean >= 0.90, "{clean}");
    }
}
