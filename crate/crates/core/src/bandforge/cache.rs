use std::fs;
use std::path::{Path, PathBuf};

use super::{engineer_stack, BandSelection};
use crate::data::{read_image_h5, read_sample, write_image_h5, BandStack, DatasetIndex, PATCH_SIZE};
use crate::error::{Error, Result};

/// `<root>/engineered/<selection-hash>`.
pub fn engineered_dir(root: &Path, selection: &BandSelection) -> PathBuf {
    root.join("engineered").join(selection.cache_key())
}

#[derive(serde::Serialize)]
struct CacheManifest<'a> {
    selection: &'a str,
    channels: usize,
    samples: usize,
}

/// Engineers every sample of `index` and stores the stacks under [`engineered_dir`].
///
/// The cache is built in a sibling `.partial` directory and renamed into place once
/// complete. An existing cache is only replaced when `overwrite` is set.
pub fn prepare_engineered_cache(
    index: &DatasetIndex,
    selection: &BandSelection,
    overwrite: bool,
) -> Result<PathBuf> {
    let dir = engineered_dir(index.root_path(), selection);
    if dir.exists() {
        if !overwrite {
            return Err(Error::WouldClobber(dir));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let partial = dir.with_extension("partial");
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    for id in index.sample_ids() {
        let sample = read_sample(index, id)?;
        let stack = engineer_stack(sample.image(), selection)?;
        write_image_h5(&partial.join(format!("image_{id}.h5")), stack.pixels())?;
    }
    let manifest = CacheManifest {
        selection: &selection.describe(),
        channels: selection.output_channels(),
        samples: index.len(),
    };
    let manifest_path = partial.join("selection.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    fs::rename(&partial, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Reads an engineered stack from the cache; an empty selection reads the original image.
pub fn read_engineered_image(index: &DatasetIndex, selection: &BandSelection, id: &str) -> Result<BandStack> {
    if selection.is_empty() {
        return read_sample(index, id).map(|s| s.into_parts().0);
    }
    if !index.contains(id) {
        return Err(Error::UnknownId(id.to_string()));
    }
    let path = engineered_dir(index.root_path(), selection).join(format!("image_{id}.h5"));
    let pixels = read_image_h5(&path)?;
    let expected = (PATCH_SIZE, PATCH_SIZE, selection.output_channels());
    if pixels.dim() != expected {
        return Err(Error::shape(expected, pixels.dim()));
    }
    let mut meta = crate::data::BandId::originals();
    meta.extend(selection.specs().iter().map(|s| s.output));
    BandStack::new(pixels, meta, id)
}
