//! T32 binary tensor files and P6 PPM image emission.
//!
//! T32 layout: magic `54 33 32 00`, u32-LE rank, rank u32-LE dims, then
//! row-major IEEE-754 f32-LE data. Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const T32_MAGIC: [u8; 4] = [0x54, 0x33, 0x32, 0x00];

#[derive(Debug, thiserror::Error)]
pub enum T32Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a T32 file)")]
    BadMagic { path: String },
    #[error("{path}: truncated (wanted {wanted} bytes, got {got})")]
    Truncated {
        path: String,
        wanted: usize,
        got: usize,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> T32Error {
    T32Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_t32(path: &Path, data: &[f32], shape: &[usize]) -> Result<(), T32Error> {
    assert_eq!(
        shape.iter().product::<usize>(),
        data.len(),
        "shape/data mismatch"
    );
    let mut buf = Vec::with_capacity(8 + shape.len() * 4 + data.len() * 4);
    buf.extend_from_slice(&T32_MAGIC);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn read_t32(path: &Path) -> Result<(Vec<f32>, Vec<usize>), T32Error> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let pstr = || path.display().to_string();
    if bytes.len() < 8 {
        return Err(T32Error::Truncated {
            path: pstr(),
            wanted: 8,
            got: bytes.len(),
        });
    }
    if bytes[0..4] != T32_MAGIC {
        return Err(T32Error::BadMagic { path: pstr() });
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + rank * 4;
    if bytes.len() < header {
        return Err(T32Error::Truncated {
            path: pstr(),
            wanted: header,
            got: bytes.len(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for k in 0..rank {
        let off = 8 + k * 4;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let wanted = header + n * 4;
    if bytes.len() < wanted {
        return Err(T32Error::Truncated {
            path: pstr(),
            wanted,
            got: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(n);
    for k in 0..n {
        let off = header + k * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Ok((data, shape))
}

/// 8-bit P6 PPM from [h·w·3] values in [0,1] (clamped).
pub fn write_ppm(path: &Path, rgb: &[f32], h: usize, w: usize) -> Result<(), T32Error> {
    assert_eq!(rgb.len(), h * w * 3);
    let mut buf = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    buf.extend(rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Grayscale convenience: replicate one channel into a P6 file.
pub fn write_ppm_gray(path: &Path, gray: &[f32], h: usize, w: usize) -> Result<(), T32Error> {
    let mut rgb = Vec::with_capacity(h * w * 3);
    for v in gray {
        rgb.extend_from_slice(&[*v, *v, *v]);
    }
    write_ppm(path, &rgb, h, w)
}

/// Read a P6 PPM back to [h·w·3] floats in [0,1].
pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize, usize), T32Error> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let pstr = || path.display().to_string();
    let bad = || T32Error::BadMagic { path: pstr() };
    // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> data.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
        let mut start = pos;
        while start < bytes.len() && bytes[start].is_ascii_whitespace() {
            start += 1;
        }
        let mut end = start;
        while end < bytes.len() && !bytes[end].is_ascii_whitespace() {
            end += 1;
        }
        pos = end;
        Some((start, end))
    };
    let (s, e) = token(&bytes).ok_or_else(bad)?;
    if &bytes[s..e] != b"P6" {
        return Err(bad());
    }
    let mut nums = [0usize; 3];
    for slot in nums.iter_mut() {
        let (s, e) = token(&bytes).ok_or_else(bad)?;
        *slot = std::str::from_utf8(&bytes[s..e])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(bad)?;
    }
    let (w, h, maxval) = (nums[0], nums[1], nums[2]);
    if maxval != 255 {
        return Err(bad());
    }
    let data_start = pos + 1;
    let wanted = data_start + h * w * 3;
    if bytes.len() < wanted {
        return Err(T32Error::Truncated {
            path: pstr(),
            wanted,
            got: bytes.len(),
        });
    }
    let rgb = bytes[data_start..wanted]
        .iter()
        .map(|b| *b as f32 / 255.0)
        .collect();
    Ok((rgb, h, w))
}
