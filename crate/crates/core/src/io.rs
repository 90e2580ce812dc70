//! File formats: PFM depth maps, 8-bit PNG images/labels/masks, JSON
//! configuration and CSV tables. All writes go to a temporary file in the
//! destination directory and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Mask};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| format_err(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path)(e)
    })
}

/// Little-endian PFM with scale −1. One-channel grids become `Pf`, three-channel
/// grids `PF`. Rows are stored bottom-to-top as the format requires.
pub fn encode_pfm(grid: &Grid) -> std::result::Result<Vec<u8>, String> {
    let tag = match grid.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(format!("PFM holds 1 or 3 channels, not {c}")),
    };
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for row in (0..h).rev() {
        for v in &grid.data()[row * w * c..(row + 1) * w * c] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<Grid, String> {
    // Header: three whitespace-separated tokens after the tag, then a single
    // whitespace byte before the raster.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PFM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII PFM header")?);
    }
    pos += 1;
    let channels = match fields[0] {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(format!("unknown PFM tag `{t}`")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PFM dimension `{s}`"));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    let scale: f64 = fields[3]
        .parse()
        .map_err(|_| format!("bad PFM scale `{}`", fields[3]))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("PFM scale must be non-zero".into());
    }
    let little = scale < 0.0;
    let n = w * h * channels;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < n * 4 {
        return Err(format!("PFM raster holds {} bytes, expected {}", raster.len(), n * 4));
    }
    let mut data = vec![0.0; n];
    for (i, chunk) in raster[..n * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let file_row = i / (w * channels);
        let rest = i % (w * channels);
        data[(h - 1 - file_row) * w * channels + rest] = v as f64;
    }
    Grid::from_vec(h, w, channels, data).map_err(|e| e.to_string())
}

pub fn write_pfm(path: &Path, grid: &Grid) -> Result<()> {
    let bytes = encode_pfm(grid).map_err(|m| format_err(path, m))?;
    atomic_write(path, &bytes)
}

pub fn read_pfm(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pfm(&bytes).map_err(|m| format_err(path, m))
}

/// Reads an 8-bit PNG into `[0, 1]`. Grey images give one channel; colour
/// images give three (alpha is dropped).
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => format_err(path, other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Grid::from_vec(h, w, 3, data)
    } else {
        let g = img.to_luma8();
        let data = g.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Grid::from_vec(h, w, 1, data)
    }
}

fn encode_png(
    bytes: Vec<u8>,
    w: usize,
    h: usize,
    color: image::ExtendedColorType,
) -> std::result::Result<Vec<u8>, String> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&bytes, w as u32, h as u32, color)
        .map_err(|e| e.to_string())?;
    Ok(out)
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a one- or three-channel image in `[0, 1]` as 8-bit PNG.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let color = match image.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(format_err(path, format!("PNG export needs 1 or 3 channels, not {c}"))),
    };
    let bytes = image.data().iter().map(|&v| to_u8(v)).collect();
    let png = encode_png(bytes, image.width(), image.height(), color).map_err(|m| format_err(path, m))?;
    atomic_write(path, &png)
}

/// Single-channel PNG whose pixel values are class indices.
pub fn write_label_png(path: &Path, labels: &[usize], height: usize, width: usize) -> Result<()> {
    if labels.len() != height * width {
        return Err(format_err(path, "label count does not match image size"));
    }
    let bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| format_err(path, format!("class index {l} exceeds 255"))))
        .collect::<Result<Vec<u8>>>()?;
    let png = encode_png(bytes, width, height, image::ExtendedColorType::L8).map_err(|m| format_err(path, m))?;
    atomic_write(path, &png)
}

/// Single-channel PNG with 255 on set pixels.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let bytes = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let png = encode_png(bytes, mask.width(), mask.height(), image::ExtendedColorType::L8)
        .map_err(|m| format_err(path, m))?;
    atomic_write(path, &png)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// `step,loss` table.
pub fn write_loss_curve(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    atomic_write(path, text.as_bytes())
}

pub fn write_metrics_csv(path: &Path, rows: &[(String, crate::metrics::MetricsRecord)]) -> Result<()> {
    let mut buf = Vec::new();
    crate::metrics::write_csv(rows, &mut buf).map_err(io_err(path))?;
    atomic_write(path, &buf)
}
