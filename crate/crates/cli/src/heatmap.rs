//! 16-bit binary graymap export with a plain-text sidecar and a raw grid.
//!
//! For `out.pgm` three files are written: the image itself, `out.meta`
//! (`key=value` lines) and `out.grid` (the unnormalized values in the raw
//! grid format).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::grid::Grid;

pub const MAXVAL: u32 = 65535;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: Grid,
    pub target_patch: Option<usize>,
    pub sample_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub pixels: Vec<u16>,
    pub min: f32,
    pub max: f32,
    pub constant: bool,
}

/// `round(65535 · (v − min) / (max − min))`; a constant map becomes all
/// zeros.
pub fn normalize(values: &[f32]) -> Result<Normalized> {
    if values.is_empty() {
        bail!("cannot normalize an empty map");
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        bail!("map contains a non-finite value ({bad})");
    }
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let constant = min == max;
    let span = max as f64 - min as f64;
    let pixels = values
        .iter()
        .map(|&v| if constant { 0 } else { (MAXVAL as f64 * (v as f64 - min as f64) / span).round() as u16 })
        .collect();
    Ok(Normalized { pixels, min, max, constant })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{MAXVAL}\n").into_bytes();
    out.extend(pixels.iter().flat_map(|p| p.to_be_bytes()));
    out
}

/// Reads a binary graymap into `(width, height, maxval, samples)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, u32, Vec<u16>)> {
    let (header, body) = crate::images::split_netpbm_header(bytes, b"P5")?;
    let [w, h, maxval] = header;
    let wide = maxval > 255;
    let need = w * h * if wide { 2 } else { 1 };
    if body.len() != need {
        bail!("graymap body has {} bytes, expected {need}", body.len());
    }
    let samples = if wide {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        body.iter().map(|&b| b as u16).collect()
    };
    Ok((w, h, maxval as u32, samples))
}

pub fn sidecar_path(image: &Path, ext: &str) -> PathBuf {
    image.with_extension(ext)
}

impl Heatmap {
    pub fn meta_text(&self, n: &Normalized) -> String {
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        format!(
            "width={}\nheight={}\nmin={}\nmax={}\nconstant={}\ntarget_patch={}\nsample_count={}\n",
            self.grid.width,
            self.grid.height,
            n.min,
            n.max,
            n.constant,
            opt(self.target_patch),
            opt(self.sample_count)
        )
    }

    /// Writes the graymap and both sidecars; returns the normalization.
    pub fn write(&self, path: &Path) -> Result<Normalized> {
        let n = normalize(&self.grid.values)?;
        let write =
            |p: PathBuf, bytes: Vec<u8>| fs::write(&p, bytes).with_context(|| format!("cannot write {}", p.display()));
        write(path.to_path_buf(), encode_pgm(self.grid.width, self.grid.height, &n.pixels))?;
        write(sidecar_path(path, "meta"), self.meta_text(&n).into_bytes())?;
        write(sidecar_path(path, "grid"), self.grid.to_text().into_bytes())?;
        Ok(n)
    }
}

/// Parses a `key=value` sidecar.
pub fn parse_meta(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .with_context(|| format!("sidecar line {}: expected key=value", i + 1))
        })
        .collect()
}

/// Raw values of an exported graymap, rebuilt from its pixels and the
/// sidecar's min/max when present.
pub fn read_heatmap_values(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let (w, h, maxval, samples) =
        decode_pgm(&bytes).with_context(|| format!("{} is not a binary graymap", path.display()))?;
    let meta = sidecar_path(path, "meta");
    let (min, max) = if meta.exists() {
        let text = fs::read_to_string(&meta).with_context(|| format!("cannot read {}", meta.display()))?;
        let kv = parse_meta(&text)?;
        let get = |k: &str| -> Result<f64> {
            kv.iter()
                .find(|(key, _)| key == k)
                .with_context(|| format!("{} lacks {k}", meta.display()))?
                .1
                .parse()
                .with_context(|| format!("{} has a non-numeric {k}", meta.display()))
        };
        (get("min")?, get("max")?)
    } else {
        (0.0, 1.0)
    };
    let values = samples.iter().map(|&s| (min + (max - min) * s as f64 / maxval as f64) as f32).collect();
    Grid::new(h, w, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes_map_to_full_range() {
        let n = normalize(&[0.5, 1.5, 1.0]).unwrap();
        assert_eq!(n.pixels, vec![0, 65535, 32768]);
        assert!(!n.constant);
    }

    #[test]
    fn constant_map_is_flagged() {
        let n = normalize(&[2.0; 4]).unwrap();
        assert_eq!(n.pixels, vec![0; 4]);
        assert!(n.constant);
    }

    #[test]
    fn pgm_round_trip() {
        let bytes = encode_pgm(3, 2, &[0, 1, 2, 300, 65535, 7]);
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), (3, 2, 65535, vec![0, 1, 2, 300, 65535, 7]));
    }
}
