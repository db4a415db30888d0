//! Dataset loading, synthetic scenes, augmentation and batching.
//!
//! On-disk layout: `root/images/<stem>.png` with a matching
//! `root/labels/<stem>.json` (`{"image": ..., "points": [[x, y], ...]}`) or
//! `root/labels/<stem>.txt` (one `x y` pair per line).

mod augment;
mod batch;
mod io;
mod synth;

pub use augment::{augment, hflip, AugmentationConfig};
pub use batch::{batch_iter, epoch_order};
pub use io::{load_annotation, load_dataset, load_image, save_image, write_dataset, LabelFile};
pub use synth::{synth_dataset, synth_generate, SyntheticSceneSpec};

use crate::error::Result;
use crate::groundtruth::{HeadAnnotation, Point};
use crate::tensor::Tensor;

/// An image (`[3,H,W]`, values in `[0,1]`) with its head points.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub name: String,
    pub image: Tensor<f32>,
    pub points: Vec<Point>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn annotation(&self) -> Result<HeadAnnotation> {
        HeadAnnotation::new(self.points.clone(), self.height(), self.width())
    }
}
