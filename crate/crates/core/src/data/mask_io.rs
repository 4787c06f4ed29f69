use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::h5;
use crate::error::{Error, Result};

/// On-disk encoding of a predicted or ground-truth mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFormat {
    /// HDF5 file with a uint8 dataset named `mask`.
    H5,
    /// 8-bit grayscale PNG, 0 ↦ 0 and 1 ↦ 255.
    Png8,
}

impl MaskFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MaskFormat::H5 => "h5",
            MaskFormat::Png8 => "png",
        }
    }
}

fn png_err(path: &Path, err: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: err.to_string(),
    }
}

/// Writes a binary mask. Values outside {0, 1} are rejected before anything is written.
pub fn write_mask(mask: ArrayView2<'_, u8>, path: &Path, format: MaskFormat) -> Result<()> {
    if let Some(v) = mask.iter().find(|v| **v > 1) {
        return Err(Error::NonBinaryMask {
            id: path.display().to_string(),
            value: *v as f64,
        });
    }
    match format {
        MaskFormat::H5 => h5::write_mask_h5(path, mask),
        MaskFormat::Png8 => {
            let (h, w) = mask.dim();
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
            encoder.set_color(png::ColorType::Grayscale);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
            let data: Vec<u8> = mask.iter().map(|v| v * 255).collect();
            writer.write_image_data(&data).map_err(|e| png_err(path, e))?;
            writer.finish().map_err(|e| png_err(path, e))
        }
    }
}

/// Reads a mask written by [`write_mask`] (or a dataset mask file) back as {0, 1} labels.
pub fn read_mask(path: &Path, format: MaskFormat) -> Result<Array2<u8>> {
    let id = || path.display().to_string();
    match format {
        MaskFormat::H5 => {
            let raw = h5::read_mask_values(path)?;
            if let Some(v) = raw.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::NonBinaryMask { id: id(), value: *v });
            }
            Ok(raw.mapv(|v| v as u8))
        }
        MaskFormat::Png8 => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let decoder = png::Decoder::new(BufReader::new(file));
            let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
            let size = reader
                .output_buffer_size()
                .ok_or_else(|| png_err(path, "image too large"))?;
            let mut buf = vec![0u8; size];
            let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
            if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
                return Err(png_err(path, "expected 8-bit grayscale"));
            }
            let (w, h) = (info.width as usize, info.height as usize);
            buf.truncate(info.buffer_size());
            let labels = buf
                .into_iter()
                .map(|v| match v {
                    0 => Ok(0u8),
                    255 => Ok(1u8),
                    other => Err(Error::NonBinaryMask {
                        id: id(),
                        value: other as f64,
                    }),
                })
                .collect::<Result<Vec<u8>>>()?;
            Array2::from_shape_vec((h, w), labels).map_err(|e| png_err(path, e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn checkerboard(n: usize) -> Array2<u8> {
        Array2::from_shape_fn((n, n), |(i, j)| ((i + j) % 2) as u8)
    }

    #[test]
    fn zero_mask_roundtrip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let zeros = Array2::<u8>::zeros((128, 128));
        for fmt in [MaskFormat::H5, MaskFormat::Png8] {
            let p = dir.path().join(format!("z.{}", fmt.extension()));
            write_mask(zeros.view(), &p, fmt).unwrap();
            let back = read_mask(&p, fmt).unwrap();
            assert_eq!(back.iter().map(|v| *v as u32).sum::<u32>(), 0);
            assert_eq!(back.dim(), (128, 128));
        }
    }

    #[test]
    fn checkerboard_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cb = checkerboard(128);
        for fmt in [MaskFormat::H5, MaskFormat::Png8] {
            let p = dir.path().join(format!("cb.{}", fmt.extension()));
            write_mask(cb.view(), &p, fmt).unwrap();
            assert_eq!(read_mask(&p, fmt).unwrap(), cb);
        }
    }

    #[test]
    fn png_uses_0_and_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_mask(checkerboard(4).view(), &p, MaskFormat::Png8).unwrap();
        let decoder = png::Decoder::new(BufReader::new(File::open(&p).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        assert_eq!(&buf[..4], &[0, 255, 0, 255]);
    }

    #[test]
    fn non_binary_mask_is_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Array2::<u8>::zeros((4, 4));
        m[[2, 2]] = 3;
        let p = dir.path().join("bad.h5");
        assert!(matches!(
            write_mask(m.view(), &p, MaskFormat::H5),
            Err(Error::NonBinaryMask { .. })
        ));
        assert!(!p.exists());
    }
}
