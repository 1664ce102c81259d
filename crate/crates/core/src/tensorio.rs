//! On-disk formats: the `GCPB` binary tensor container and 16-bit PNG.
//!
//! `GCPB` layout (all little-endian):
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 4            | magic `GCPB`                     |
//! | 2            | format version, `u16` (= 1)      |
//! | 1            | rank, `u8`                       |
//! | 4 * rank     | dims, `u32` each                 |
//! | 4 * prod(dims) | payload, `f32`, row-major      |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{ImageBuffer, Rgb};
use ndarray::{Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"GCPB";
pub const TENSOR_VERSION: u16 = 1;

pub fn write_tensor<W: Write>(w: &mut W, shape: &[usize], data: &[f32]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} values, payload has {}",
            data.len()
        )));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::Shape(format!("rank {} too large", shape.len())));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_u16::<LittleEndian>(TENSOR_VERSION)?;
    w.write_u8(shape.len() as u8)?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} too large")))?;
        w.write_u32::<LittleEndian>(d)?;
    }
    let mut buf = Vec::with_capacity(4 * data.len());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor; `origin` is only used in error messages.
pub fn read_tensor<R: Read>(r: &mut R, origin: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad(format!("expected magic GCPB, found {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != TENSOR_VERSION {
        return Err(bad(format!("unsupported tensor version {version}")));
    }
    let rank = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

pub fn save_array(path: &Path, a: &ArrayD<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data: Vec<f32> = a.iter().copied().collect();
    write_tensor(&mut w, a.shape(), &data)?;
    w.flush()?;
    Ok(())
}

pub fn load_array(path: &Path) -> Result<ArrayD<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let (shape, data) = read_tensor(&mut r, path)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "trailing bytes after tensor payload".into(),
        });
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Shape(e.to_string()))
}

/// Writes an sRGB image in [0, 1] as 16-bit RGB PNG (`v -> round(v * 65535)`).
pub fn write_png16(path: &Path, srgb: &Array3<f32>) -> Result<()> {
    let (h, w, c) = srgb.dim();
    if c != 3 {
        return Err(Error::Shape(format!("PNG export needs 3 channels, got {c}")));
    }
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |k| (srgb[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 65535.0).round() as u16;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads any PNG as RGB in [0, 1]; 8-bit files are scaled by 1/255, 16-bit
/// by 1/65535.
pub fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 65535.0
    }))
}
