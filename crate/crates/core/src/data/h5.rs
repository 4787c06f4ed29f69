use std::path::Path;

use hdf5_metno as hdf5;
use ndarray::{Array2, Array3, ArrayView2, Ix2, Ix3};

use crate::error::{Error, Result};

fn corrupt(path: &Path, err: impl std::fmt::Display) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: err.to_string(),
    }
}

fn write_err(path: &Path, err: hdf5::Error) -> Error {
    Error::Hdf5 {
        path: path.to_path_buf(),
        message: err.to_string(),
    }
}

fn open_dataset(path: &Path, name: &str) -> Result<hdf5::Dataset> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let file = hdf5::File::open(path).map_err(|e| corrupt(path, e))?;
    file.dataset(name)
        .map_err(|e| corrupt(path, format!("dataset `{name}`: {e}")))
}

/// Reads the `img` dataset of an image patch file as float32 `[H, W, C]`.
pub fn read_image_h5(path: &Path) -> Result<Array3<f32>> {
    let ds = open_dataset(path, "img")?;
    let shape = ds.shape();
    if shape.len() != 3 {
        return Err(Error::shape("[H, W, C]", shape));
    }
    ds.read::<f32, Ix3>().map_err(|e| corrupt(path, e))
}

/// Writes `pixels` as float32 dataset `img`, replacing any existing file.
pub fn write_image_h5(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let file = hdf5::File::create(path).map_err(|e| write_err(path, e))?;
    file.new_dataset_builder()
        .with_data(&pixels.as_standard_layout())
        .create("img")
        .map_err(|e| write_err(path, e))?;
    Ok(())
}

/// Raw mask values, read wide so that out-of-range labels can be reported.
pub(crate) fn read_mask_values(path: &Path) -> Result<Array2<f64>> {
    let ds = open_dataset(path, "mask")?;
    let shape = ds.shape();
    if shape.len() != 2 {
        return Err(Error::shape("[H, W]", shape));
    }
    ds.read::<f64, Ix2>().map_err(|e| corrupt(path, e))
}

pub(crate) fn write_mask_h5(path: &Path, labels: ArrayView2<'_, u8>) -> Result<()> {
    let file = hdf5::File::create(path).map_err(|e| write_err(path, e))?;
    file.new_dataset_builder()
        .with_data(&labels.as_standard_layout())
        .create("mask")
        .map_err(|e| write_err(path, e))?;
    Ok(())
}
