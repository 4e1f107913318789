//! Synthetic salient-object data, image IO and manifests.

mod manifest;
pub mod pnm;
pub mod synth;

use std::path::Path;

pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use synth::{generate_one, GeneratorParams, Sample};

use crate::error::{Error, Result};
use crate::grid::{GroundTruthMask, Image};

#[derive(Debug, Clone)]
pub struct DataItem {
    pub id: String,
    pub image: Image,
    pub mask: GroundTruthMask,
}

/// An in-memory split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: Split,
    pub items: Vec<DataItem>,
}

impl Dataset {
    pub fn synthetic(split: Split, seed: u64, count: usize, size: usize, params: &GeneratorParams) -> Result<Self> {
        let samples = synth::generate(seed, split.stream_base(), count, size, params)?;
        let items = samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| DataItem {
                id: format!("{split}_{i:04}"),
                image: s.image,
                mask: s.mask,
            })
            .collect();
        Ok(Self { split, items })
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let items = manifest
            .entries
            .iter()
            .map(|e| {
                let image = pnm::read_image(&base.join(&e.image_path))?;
                let mask = pnm::read_mask(&base.join(&e.mask_path))?;
                if (image.height(), image.width()) != (mask.height(), mask.width()) {
                    return Err(Error::shape(
                        format!("{}x{} mask", image.height(), image.width()),
                        format!("{}x{}", mask.height(), mask.width()),
                    ));
                }
                Ok(DataItem {
                    id: e.image_id.clone(),
                    image,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::InvalidInput(format!("{} lists no images", manifest_path.display())));
        }
        Ok(Self {
            split: manifest.split,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.items.first().map_or(3, |i| i.image.channels())
    }

    /// Writes images, masks and `<split>.tsv` under `dir`.
    pub fn write(&self, dir: &Path, seed: Option<u64>, params: Option<&GeneratorParams>) -> Result<DatasetManifest> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        for d in [&images, &masks] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut entries = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let ext = if item.image.channels() == 1 { "pgm" } else { "ppm" };
            let image_path = Path::new("images").join(format!("{}.{ext}", item.id));
            let mask_path = Path::new("masks").join(format!("{}.pgm", item.id));
            pnm::write_image(&item.image, &dir.join(&image_path))?;
            pnm::write_mask(&item.mask, &dir.join(&mask_path))?;
            entries.push(ManifestEntry {
                image_id: item.id.clone(),
                image_path,
                mask_path,
            });
        }
        let manifest = DatasetManifest {
            split: self.split,
            entries,
            generator_seed: seed,
            generator_params: params.cloned(),
            image_size: self.items.first().map(|i| i.image.height()),
        };
        manifest.write(&dir.join(format!("{}.tsv", self.split)))?;
        Ok(manifest)
    }
}

/// Generates a split and writes it under `dir`.
pub fn generate_synthetic(
    dir: &Path,
    split: Split,
    seed: u64,
    count: usize,
    size: usize,
    params: &GeneratorParams,
) -> Result<DatasetManifest> {
    Dataset::synthetic(split, seed, count, size, params)?.write(dir, Some(seed), Some(params))
}
