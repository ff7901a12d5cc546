//! Datasets and stimuli: IDX digit files, natural-image patches with PCA
//! whitening, and drifting gratings with a tuning probe.

pub mod grating;
pub mod idx;
pub mod images;
pub mod whiten;

pub use grating::{grating, tuning_probe, GratingSpec, ProbeOptions, UnitTuning};
pub use idx::{load_idx, load_idx_dataset, read_idx, write_idx, IdxArray};
pub use images::{extract_patches, load_image_dir};
pub use whiten::{fit_whitening, whiten, WhiteningDescriptor};

use crate::numerics::Tensor;

/// Samples one per row, with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Option<Vec<usize>>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetMeta {
    pub source: String,
    /// Side length of square samples, if they are images.
    pub side: Option<usize>,
    pub whitening: Option<WhiteningDescriptor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// The rows `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        Dataset {
            samples: self.samples.select_rows(&idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            meta: self.meta.clone(),
        }
    }
}

fn patch_stream(seed: u64, split: u64) -> crate::numerics::RngStream {
    crate::numerics::RngStream::for_step(seed, split, 0, crate::numerics::Purpose::Patches)
}

/// Whitened training and test patches from every image in `dir`. The
/// whitening is fit on the training patches and reused for the test set.
pub fn natural_patches(
    dir: impl AsRef<std::path::Path>,
    patch: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> crate::Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let images = load_image_dir(dir)?;
    let train = extract_patches(&images, patch, n_train, &mut patch_stream(seed, 0))?;
    let test = extract_patches(&images, patch, n_test, &mut patch_stream(seed, 1))?;
    let (train_w, desc) = whiten(&train)?;
    let test_w = desc.apply(&test)?;
    let meta = DatasetMeta {
        source: dir.display().to_string(),
        side: Some(patch),
        whitening: Some(desc),
    };
    Ok((
        Dataset { samples: train_w, labels: None, meta: meta.clone() },
        Dataset { samples: test_w, labels: None, meta },
    ))
}

/// The test split of [`natural_patches`], whitened with a stored descriptor.
pub fn natural_test_patches(
    dir: impl AsRef<std::path::Path>,
    patch: usize,
    n_test: usize,
    seed: u64,
    whitening: &WhiteningDescriptor,
) -> crate::Result<Dataset> {
    let dir = dir.as_ref();
    let images = load_image_dir(dir)?;
    let test = extract_patches(&images, patch, n_test, &mut patch_stream(seed, 1))?;
    Ok(Dataset {
        samples: whitening.apply(&test)?,
        labels: None,
        meta: DatasetMeta {
            source: dir.display().to_string(),
            side: Some(patch),
            whitening: Some(whitening.clone()),
        },
    })
}
