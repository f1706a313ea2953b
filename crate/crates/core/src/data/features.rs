use std::collections::HashMap;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::VisualEncoder;
use crate::tensor::{Scalar, Tensor};

/// Encoder output for every sample of every split. The encoder is frozen,
/// so features are computed once and shared by teacher and student.
#[derive(Clone, Debug)]
pub struct Features<S: Scalar = f64> {
    splits: HashMap<Split, Vec<Tensor<S>>>,
}

const ENCODE_CHUNK: usize = 128;

impl<S: Scalar> Features<S> {
    pub fn build(encoder: &VisualEncoder<S>, dataset: &Dataset) -> Result<Self> {
        let size = dataset.config().image_size;
        if size != encoder.config().image_size {
            return Err(Error::Config(format!(
                "dataset renders {size}px images, encoder expects {}px",
                encoder.config().image_size
            )));
        }
        let mut splits = HashMap::new();
        for split in Split::ALL {
            let mut out = Vec::with_capacity(dataset.split(split).len());
            for chunk in dataset.split(split).chunks(ENCODE_CHUNK) {
                let images = chunk
                    .iter()
                    .map(|s| s.grid.render(size))
                    .collect::<Result<Vec<_>>>()?;
                out.extend(encoder.encode_batch(&images)?);
            }
            splits.insert(split, out);
        }
        Ok(Features { splits })
    }

    pub fn split(&self, split: Split) -> &[Tensor<S>] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }
}
