//! Netpbm-family raster codecs: binary PGM (8/16-bit), binary PPM (8-bit)
//! and grayscale PFM.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `channels × height × width` image with values in `[0, 1]`, stored planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRaster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl ImageRaster {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        let img = ImageRaster {
            height,
            width,
            channels,
            values,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "image has {} channels; expected 1 or 3",
                self.channels
            )));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "image {}x{} is smaller than the 32x32 minimum",
                self.height, self.width
            )));
        }
        if self.values.len() != self.channels * self.height * self.width {
            return Err(Error::Config("image payload size does not match dimensions".into()));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("image value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

/// Per-pixel integer class ids plus their names.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl SemanticLabelMap {
    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapFormat {
    /// Min-max normalized 16-bit PGM; a constant map writes all zeros.
    Pgm16,
    /// Raw little-endian 32-bit floats.
    Pfm,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm16" => Ok(HeatmapFormat::Pgm16),
            "pfm" => Ok(HeatmapFormat::Pfm),
            other => Err(Error::Argument(format!("unknown heatmap format {other:?}"))),
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a row-major `height × width` map.
///
/// `pgm16`: header `P5\n{w} {h}\n65535\n`, then big-endian u16 pixels equal
/// to `round((v - min) / (max - min) * 65535)`.
/// `pfm`: header `Pf\n{w} {h}\n-1.0\n`, then little-endian f32 rows from the
/// bottom row up, as the PFM format prescribes.
pub fn write_heatmap(map: &[f32], height: usize, width: usize, path: &Path, format: HeatmapFormat) -> Result<()> {
    if map.len() != height * width {
        return Err(Error::dim(
            "write_heatmap",
            format!("{} values for {height}x{width}", map.len()),
        ));
    }
    if let Some(v) = map.iter().find(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("heatmap contains non-finite value {v}")));
    }
    let mut out = Vec::new();
    match format {
        HeatmapFormat::Pgm16 => {
            out.extend_from_slice(format!("P5\n{width} {height}\n65535\n").as_bytes());
            let lo = map.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let range = hi - lo;
            for &v in map {
                let q = if range > 0.0 {
                    (((v as f64 - lo) / range) * 65535.0).round() as u16
                } else {
                    0
                };
                out.extend_from_slice(&q.to_be_bytes());
            }
        }
        HeatmapFormat::Pfm => {
            out.extend_from_slice(format!("Pf\n{width} {height}\n-1.0\n").as_bytes());
            for row in map.chunks(width).rev() {
                for &v in row {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    write_bytes(path, &out)
}

/// Reads a grayscale PFM written by [`write_heatmap`] (either endianness).
pub fn read_pfm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = read_bytes(path)?;
    let (tokens, offset) = header_tokens(&bytes, 4, path)?;
    if tokens[0] != "Pf" {
        return Err(Error::format(path, "not a grayscale PFM"));
    }
    let width = parse_dim(&tokens[1], path)?;
    let height = parse_dim(&tokens[2], path)?;
    let scale: f64 = tokens[3].parse().map_err(|_| Error::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let payload = &bytes[offset..];
    if payload.len() != 4 * width * height {
        return Err(Error::format(path, "PFM payload size mismatch"));
    }
    let mut map = vec![0.0f32; width * height];
    for (r, row) in payload.chunks(4 * width).enumerate() {
        let y = height - 1 - r;
        for (x, b) in row.chunks_exact(4).enumerate() {
            let b: [u8; 4] = b.try_into().expect("4 bytes");
            map[y * width + x] = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    Ok((map, height, width))
}

/// Writes a PGM (1 channel) or PPM (3 channels) at 8 bits per sample.
pub fn write_image(img: &ImageRaster, path: &Path) -> Result<()> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.height * img.width;
    for p in 0..plane {
        for c in 0..img.channels {
            let v = img.values[c * plane + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_bytes(path, &out)
}

/// Reads binary PGM/PPM with maxval up to 65535, scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageRaster> {
    let bytes = read_bytes(path)?;
    let (tokens, offset) = header_tokens(&bytes, 4, path)?;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(path, format!("unsupported raster magic {other}"))),
    };
    let width = parse_dim(&tokens[1], path)?;
    let height = parse_dim(&tokens[2], path)?;
    let maxval = parse_dim(&tokens[3], path)?;
    let samples = decode_samples(&bytes[offset..], width * height * channels, maxval, path)?;
    let plane = width * height;
    let mut values = vec![0.0f32; samples.len()];
    for p in 0..plane {
        for c in 0..channels {
            values[c * plane + p] = samples[p * channels + c] as f32 / maxval as f32;
        }
    }
    ImageRaster::new(height, width, channels, values).map_err(|e| Error::format(path, e.to_string()))
}

/// Width and height from a PGM/PPM header without decoding the payload.
pub fn read_image_dims(path: &Path) -> Result<(usize, usize)> {
    let bytes = read_bytes(path)?;
    let (tokens, _) = header_tokens(&bytes, 4, path)?;
    if tokens[0] != "P5" && tokens[0] != "P6" {
        return Err(Error::format(path, format!("unsupported raster magic {}", tokens[0])));
    }
    Ok((parse_dim(&tokens[2], path)?, parse_dim(&tokens[1], path)?))
}

/// Label maps are PGMs whose sample values are the label ids.
pub fn write_label_map(map: &SemanticLabelMap, path: &Path) -> Result<()> {
    let maxval = map.labels.iter().copied().max().unwrap_or(0).max(1);
    let mut out = format!("P5\n{} {}\n{}\n", map.width, map.height, maxval).into_bytes();
    for &l in &map.labels {
        if maxval < 256 {
            out.push(l as u8);
        } else {
            out.extend_from_slice(&l.to_be_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_label_map(path: &Path) -> Result<SemanticLabelMap> {
    let bytes = read_bytes(path)?;
    let (tokens, offset) = header_tokens(&bytes, 4, path)?;
    if tokens[0] != "P5" {
        return Err(Error::format(path, "label maps must be binary PGM"));
    }
    let width = parse_dim(&tokens[1], path)?;
    let height = parse_dim(&tokens[2], path)?;
    let maxval = parse_dim(&tokens[3], path)?;
    let labels = decode_samples(&bytes[offset..], width * height, maxval, path)?;
    Ok(SemanticLabelMap { height, width, labels })
}

fn decode_samples(payload: &[u8], count: usize, maxval: usize, path: &Path) -> Result<Vec<u16>> {
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("maxval {maxval} out of range")));
    }
    if maxval < 256 {
        if payload.len() != count {
            return Err(Error::format(path, "payload size mismatch"));
        }
        Ok(payload.iter().map(|&b| b as u16).collect())
    } else {
        if payload.len() != 2 * count {
            return Err(Error::format(path, "payload size mismatch"));
        }
        Ok(payload
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect())
    }
}

fn parse_dim(tok: &str, path: &Path) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::format(path, format!("bad header number {tok:?}")))
}

/// Splits the first `n` whitespace-separated header tokens (skipping `#`
/// comments) and returns the payload offset just past the single whitespace
/// byte that follows the last token.
fn header_tokens(bytes: &[u8], n: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::format(path, "missing payload"));
    }
    Ok((tokens, i + 1))
}
