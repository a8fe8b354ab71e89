//! Cases, modalities, boxes and the on-disk dataset layout.

mod boxes;
mod case;
mod index;
mod modality;
mod preprocess;
pub mod synthetic;

pub use boxes::{box_from_mask, tight_box, BoundingBox};
pub use case::{load_case, sub_volume, write_case, CaseImage, CaseRecord};
pub use index::{build_index, build_index_with, CaseDescriptor, DatasetIndex, Manifest, MANIFEST_FILE};
pub use modality::{ModalityId, ModalityRegistry, DEFAULT_MODALITIES};
pub use preprocess::{
    normalize_minmax, preprocess_gray, preprocess_slice, resize_bilinear, resize_bilinear_2d,
    resize_nearest,
};

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::Result;

/// Default model input side length.
pub const IMG_SIZE: usize = 256;
/// Default box perturbation for training samples, in model-frame pixels.
pub const DEFAULT_BOX_JITTER: u32 = 5;

/// One training/evaluation sample in the model frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInstance {
    /// `S x S x 3` preprocessed image.
    pub slice: Array3<f32>,
    /// `S x S` ground truth of the selected label.
    pub mask: Array2<bool>,
    pub bbox: BoundingBox,
    pub modality: ModalityId,
}

impl SampleInstance {
    /// Builds a sample from slice `z`, label `label` of `case`, resized to
    /// `img_size` with a box derived from the resized mask.
    pub fn from_case<R: Rng + ?Sized>(
        case: &CaseRecord,
        z: usize,
        label: u16,
        img_size: usize,
        jitter: u32,
        rng: &mut R,
    ) -> Result<Self> {
        let raw = case.slice(z)?;
        let slice = preprocess_slice(raw.view(), img_size)?;
        let mask = resize_nearest(case.label_mask(z, label)?.view(), img_size, img_size);
        let mask = if mask.iter().any(|&v| v) {
            mask
        } else {
            // A sliver lost to nearest-neighbour downsampling: fall back to
            // any-overlap resampling so the sample keeps a target.
            any_overlap_resize(&case.label_mask(z, label)?, img_size)
        };
        let bbox = box_from_mask(mask.view(), jitter, rng)?;
        Ok(Self {
            slice,
            mask,
            bbox,
            modality: case.modality.clone(),
        })
    }
}

fn any_overlap_resize(mask: &Array2<bool>, size: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((size, size), false);
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            out[[(y * size / h).min(size - 1), (x * size / w).min(size - 1)]] = true;
        }
    }
    out
}
