//! Clips, datasets, the synthetic generator and the on-disk layout.

pub mod preprocess;
pub mod ralt;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use preprocess::{preprocess, Preprocess};
pub use ralt::{ingest_lrw_layout, read_ralt, write_layout, write_ralt, IngestedDataset};
pub use synth::{generate, nearest_centroid_accuracy, synth_splits, SynthSpec};

/// One grayscale clip `[T, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Tensor<f32>,
    pub label: usize,
    pub length: usize,
}

impl SequenceSample {
    pub fn new(frames: Tensor<f32>, label: usize) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::dim("sample", format!("frames must be [T, H, W], got {:?}", frames.shape())));
        }
        let length = frames.shape()[0];
        Ok(Self { frames, label, length })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Equal-sized clips with labels below `num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SequenceSample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<SequenceSample>, num_classes: usize) -> Result<Self> {
        if let Some(first) = samples.first() {
            let dims = first.dims();
            for s in &samples {
                if s.dims() != dims {
                    return Err(Error::dim(
                        "dataset",
                        format!("clip {:?} differs from {:?}", s.dims(), dims),
                    ));
                }
                if s.label >= num_classes {
                    return Err(Error::Label {
                        label: s.label,
                        num_classes,
                    });
                }
            }
        }
        Ok(Self { samples, num_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the chosen clips into `[B, 1, T, H, W]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::contract("batch", "no indices"));
        }
        let [t, h, w] = self.samples[indices[0]].dims();
        let mut data = Vec::with_capacity(indices.len() * t * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| {
                Error::contract("batch", format!("index {i} beyond {} samples", self.samples.len()))
            })?;
            data.extend_from_slice(s.frames.data());
            labels.push(s.label);
        }
        Ok((Tensor::new(vec![indices.len(), 1, t, h, w], data)?, labels))
    }

    pub fn map_frames(&self, mut f: impl FnMut(usize, &Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| SequenceSample::new(f(i, &s.frames)?, s.label))
            .collect::<Result<_>>()?;
        Dataset::new(samples, self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_stacks_in_order() {
        let mk = |v: f32, label| SequenceSample::new(Tensor::full(vec![2, 1, 1], v), label).unwrap();
        let ds = Dataset::new(vec![mk(1.0, 0), mk(2.0, 1), mk(3.0, 0)], 2).unwrap();
        let (x, y) = ds.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 1, 1]);
        assert_eq!(x.data(), &[3.0, 3.0, 1.0, 1.0]);
        assert_eq!(y, vec![0, 0]);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let s = SequenceSample::new(Tensor::zeros(vec![1, 1, 1]), 3).unwrap();
        assert!(matches!(Dataset::new(vec![s], 3), Err(Error::Label { .. })));
    }
}
