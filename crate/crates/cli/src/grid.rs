//! Raw grid interchange: a `grid h w` header line followed by `h·w`
//! whitespace-separated decimal values, one row per line.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            bail!("{height}x{width} grid cannot hold {} values", values.len());
        }
        Ok(Self { height, width, values })
    }

    /// Shortest round-trip decimal form of every value.
    pub fn to_text(&self) -> String {
        let mut out = format!("grid {} {}\n", self.height, self.width);
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        if tokens.next() != Some("grid") {
            bail!("raw grid must start with `grid <h> <w>`");
        }
        let mut dim = |what: &str| -> Result<usize> {
            tokens.next().with_context(|| format!("missing {what}"))?.parse().with_context(|| format!("bad {what}"))
        };
        let (h, w) = (dim("height")?, dim("width")?);
        let values = tokens
            .enumerate()
            .map(|(i, t)| t.parse::<f32>().with_context(|| format!("value {} ({t:?}) is not a number", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != h * w {
            bail!("grid header says {h}x{w} = {} values, found {}", h * w, values.len());
        }
        Self::new(h, w, values)
    }
}
