use std::collections::BTreeMap;

use image::RgbImage;
use rayon::prelude::*;

use super::preprocess::resize_to;
use super::{preprocess, DataError, DatasetManifest, PreprocessPolicy, Result};

/// Segmented images keyed by sample id, decoded and preprocessed in parallel.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    images: BTreeMap<String, RgbImage>,
}

impl ImageStore {
    /// Loads and preprocesses every sample of the manifest.
    pub fn load(manifest: &DatasetManifest, policy: &PreprocessPolicy) -> Result<Self> {
        let ids: Vec<&str> = manifest.samples().iter().map(|s| s.id.as_str()).collect();
        Self::load_ids(manifest, &ids, policy)
    }

    pub fn load_ids(manifest: &DatasetManifest, ids: &[&str], policy: &PreprocessPolicy) -> Result<Self> {
        policy.validate()?;
        let images = ids
            .par_iter()
            .map(|&id| {
                let sample = manifest
                    .sample(id)
                    .ok_or_else(|| DataError::InvalidParameter(format!("unknown sample id {id}")))?;
                let pixels = sample.load_pixels()?;
                Ok((id.to_string(), preprocess(&pixels, policy)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { images })
    }

    pub fn from_images(images: BTreeMap<String, RgbImage>) -> Self {
        Self { images }
    }

    pub fn get(&self, id: &str) -> Option<&RgbImage> {
        self.images.get(id)
    }

    /// The stored image resized to `(height, width)`.
    pub fn resized(&self, id: &str, size: (u32, u32)) -> Option<RgbImage> {
        self.images.get(id).map(|img| resize_to(img, size))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }
}
