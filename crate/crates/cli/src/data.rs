//! Turning cohorts into training and evaluation batches.

use fedhet_core::nnet::NnError;
use fedhet_core::synthdata::extract_patches;
use fedhet_core::{Batch, Cohort};
use rayon::prelude::*;

use crate::RunError;

/// Whole images with binary labels (1 = contains a malignant lesion), in
/// cohort order.
pub fn image_batch(cohort: &Cohort) -> Result<Batch, NnError> {
    let mut images = cohort.images().peekable();
    let Some(first) = images.peek() else {
        return Err(NnError::InvalidBatch("cohort has no images".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut inputs = Vec::with_capacity(cohort.image_count() * h * w);
    let mut labels = Vec::with_capacity(cohort.image_count());
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(NnError::InvalidBatch(format!(
                "image {} is {}x{}, expected {h}x{w}",
                im.image_id, im.height, im.width
            )));
        }
        inputs.extend(im.pixels.iter().map(|&v| v as f64));
        labels.push(usize::from(im.label));
    }
    Batch::new(h, w, inputs, labels)
}

/// Five-way labelled patches from every image, in cohort order. Patch
/// placement for an image depends only on `(seed, image_id)`.
pub fn patch_batch(cohort: &Cohort, patch_size: usize, seed: u64) -> Result<Batch, RunError> {
    let images: Vec<_> = cohort.images().collect();
    let per_image = images
        .par_iter()
        .map(|im| extract_patches(im, patch_size, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for p in per_image.iter().flatten() {
        inputs.extend(p.pixels.iter().map(|&v| v as f64));
        labels.push(p.label.index());
    }
    Ok(Batch::new(patch_size, patch_size, inputs, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedhet_core::synthdata::generate_cohort;
    use fedhet_core::GeneratorConfig;

    #[test]
    fn batches_cover_every_image() {
        let cfg = GeneratorConfig {
            n_patients: 12,
            ..GeneratorConfig::default()
        };
        let cohort = generate_cohort(&cfg, 1).unwrap();
        let images = image_batch(&cohort).unwrap();
        assert_eq!(images.len(), cohort.image_count());
        assert_eq!(images.sample_len(), 64 * 64);
        let patches = patch_batch(&cohort, 16, 3).unwrap();
        assert!(patches.len() >= cohort.image_count());
        assert_eq!(patches, patch_batch(&cohort, 16, 3).unwrap());
        assert!(image_batch(&Cohort::default()).is_err());
    }
}
