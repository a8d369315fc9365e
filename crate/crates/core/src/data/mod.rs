//! Samples, the synthetic scene generator and on-disk datasets.

mod io;
mod synth;

pub use io::{load_dataset, read_ppm, save_dataset, write_ppm, ANNOTATIONS_FILE};
pub use synth::{synth_generate, SynthConfig, STYLE_COUNT};

use crate::bbox::GtBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image, shaped `(1, 3, H, W)` with values in `[0, 1]`, and its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub boxes: Vec<GtBox>,
}

impl Sample {
    /// Mirror image about the vertical axis.
    pub fn hflip(&self) -> Sample {
        let [_, _, _, w] = self.image.dims();
        let image = Tensor::from_fn(self.image.dims(), |[n, c, y, x]| self.image.at([n, c, y, w - 1 - x]));
        let boxes = self
            .boxes
            .iter()
            .map(|b| {
                let mut b = *b;
                b.bbox.cx = w as f64 - b.bbox.cx;
                b
            })
            .collect();
        Sample { image, boxes }
    }
}

/// Stacks the images of `samples[idx]` into one batch.
pub fn stack_images(samples: &[Sample], idx: &[usize]) -> Result<Tensor<f32>> {
    let first = idx
        .first()
        .map(|&i| samples[i].image.dims())
        .ok_or_else(|| Error::Usage("empty batch".into()))?;
    let mut data = Vec::with_capacity(idx.len() * first.iter().product::<usize>());
    for &i in idx {
        let d = samples[i].image.dims();
        if d != first {
            return Err(Error::Data(format!("image {i} is {d:?}, batch expects {first:?}")));
        }
        data.extend_from_slice(samples[i].image.data());
    }
    Tensor::from_vec([idx.len(), first[1], first[2], first[3]], data)
}
