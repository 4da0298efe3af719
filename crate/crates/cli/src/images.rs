//! ERF input images: a seeded noise generator or a directory of binary
//! netpbm files (`P6` color, `P5` gray).

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use gablab_core::autodiff::Tensor;
use gablab_core::erf::noise_images;

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Noise { seed: u64, count: usize },
    Directory(PathBuf),
}

impl FromStr for ImageSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("noise:") {
            Some(rest) => {
                let (seed, count) =
                    rest.split_once(':').ok_or_else(|| anyhow!("expected noise:<seed>:<count>, got {s:?}"))?;
                let seed = seed.parse().with_context(|| format!("bad noise seed {seed:?}"))?;
                let count: usize = count.parse().with_context(|| format!("bad noise count {count:?}"))?;
                if count == 0 {
                    bail!("noise image count must be at least 1");
                }
                Ok(Self::Noise { seed, count })
            }
            None => Ok(Self::Directory(PathBuf::from(s))),
        }
    }
}

impl ImageSource {
    /// Every image, checked against `shape` (`[H, W, C]`).
    pub fn load(&self, shape: [usize; 3]) -> Result<Vec<Tensor>> {
        match self {
            Self::Noise { seed, count } => Ok(noise_images(*seed, *count, shape).collect()),
            Self::Directory(dir) => {
                let mut files: Vec<PathBuf> = fs::read_dir(dir)
                    .with_context(|| format!("cannot read image directory {}", dir.display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
                    .collect();
                files.sort();
                if files.is_empty() {
                    bail!("no .ppm or .pgm images in {}", dir.display());
                }
                files.iter().map(|f| read_netpbm(f, shape)).collect()
            }
        }
    }
}

/// Splits `magic w h maxval <one whitespace byte>` from the sample bytes,
/// skipping `#` comments.
pub fn split_netpbm_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<([usize; 3], &'a [u8])> {
    if !bytes.starts_with(magic) {
        bail!("expected magic {}", String::from_utf8_lossy(magic));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])?.parse().context("truncated header")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        bail!("header must end with a single whitespace byte");
    }
    if fields[2] == 0 || fields[2] > 65535 {
        bail!("maxval {} outside 1..=65535", fields[2]);
    }
    Ok((fields, &bytes[pos + 1..]))
}

/// Reads one image scaled to `[0, 1]`.
pub fn read_netpbm(path: &Path, shape: [usize; 3]) -> Result<Tensor> {
    let ctx = || format!("unreadable image {}", path.display());
    let bytes = fs::read(path).with_context(ctx)?;
    let (magic, channels) = match bytes.get(..2) {
        Some(b"P6") => (b"P6", 3),
        Some(b"P5") => (b"P5", 1),
        _ => bail!("{}: not a binary P5/P6 netpbm file", path.display()),
    };
    let ([w, h, maxval], body) = split_netpbm_header(&bytes, magic).with_context(ctx)?;
    if [h, w, channels] != shape {
        bail!("{}: image is {h}x{w}x{channels}, model expects {}x{}x{}", path.display(), shape[0], shape[1], shape[2]);
    }
    let wide = maxval > 255;
    let need = w * h * channels * if wide { 2 } else { 1 };
    if body.len() != need {
        bail!("{}: {} sample bytes, expected {need}", path.display(), body.len());
    }
    let maxval = maxval as f32;
    let data: Vec<f32> = if wide {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval).collect()
    } else {
        body.iter().map(|&b| b as f32 / maxval).collect()
    };
    Ok(Tensor::new(&shape, data)?)
}
