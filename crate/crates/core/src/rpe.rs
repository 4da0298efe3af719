//! Relative position bias providers.
//!
//! Both providers produce one `N x N` bias per head and layer whose entry
//! for (query n, key m) depends only on the grid offset between the two
//! patches. The table form stores one learnable value per offset bucket;
//! the MLP form evaluates a small perceptron at the normalized offset.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Session, Tensor, Var};
use crate::error::{Error, Result};
use crate::init;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RpeKind {
    #[default]
    None,
    RelPosBias,
    RelPosMlp,
}

impl std::str::FromStr for RpeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "relposbias" => Ok(Self::RelPosBias),
            "relposmlp" => Ok(Self::RelPosMlp),
            other => Err(Error::Config(format!("unknown rpe kind {other:?} (expected none, relposbias, relposmlp)"))),
        }
    }
}

/// Maps every (query, key) pair of a patch grid to its offset bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelativeCoordinateIndex {
    grid_h: usize,
    grid_w: usize,
    table: Vec<usize>,
}

impl RelativeCoordinateIndex {
    pub fn build(grid_h: usize, grid_w: usize) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::Invalid(format!("grid must be at least 1x1, got {grid_h}x{grid_w}")));
        }
        let n = grid_h * grid_w;
        let span_w = 2 * grid_w - 1;
        let mut table = Vec::with_capacity(n * n);
        for q in 0..n {
            let (qr, qc) = (q / grid_w, q % grid_w);
            for k in 0..n {
                let (kr, kc) = (k / grid_w, k % grid_w);
                let dr = kr + grid_h - 1 - qr;
                let dc = kc + grid_w - 1 - qc;
                table.push(dr * span_w + dc);
            }
        }
        Ok(Self { grid_h, grid_w, table })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_buckets(&self) -> usize {
        (2 * self.grid_h - 1) * (2 * self.grid_w - 1)
    }

    pub fn zero_offset_bucket(&self) -> usize {
        (self.grid_h - 1) * (2 * self.grid_w - 1) + (self.grid_w - 1)
    }

    pub fn bucket(&self, query: usize, key: usize) -> usize {
        self.table[query * self.num_patches() + key]
    }

    /// Row-major `N x N` bucket table.
    pub fn table(&self) -> &[usize] {
        &self.table
    }

    /// (Δrow, Δcol) of a bucket, key minus query.
    pub fn offset(&self, bucket: usize) -> (isize, isize) {
        let span_w = 2 * self.grid_w - 1;
        let dr = (bucket / span_w) as isize - (self.grid_h as isize - 1);
        let dc = (bucket % span_w) as isize - (self.grid_w as isize - 1);
        (dr, dc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelPosMlpLayer {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RpeParams {
    /// Per layer, a `[num_heads x num_buckets]` table.
    Table(Vec<Tensor>),
    Mlp(Vec<RelPosMlpLayer>),
}

/// Relative position bias for every layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct RpeProvider {
    index: RelativeCoordinateIndex,
    num_heads: usize,
    hidden: usize,
    params: RpeParams,
}

impl RpeProvider {
    /// Returns `None` for [`RpeKind::None`].
    pub fn new(
        kind: RpeKind,
        grid_h: usize,
        grid_w: usize,
        num_layers: usize,
        num_heads: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Option<Self>> {
        let index = RelativeCoordinateIndex::build(grid_h, grid_w)?;
        let buckets = index.num_buckets();
        let params = match kind {
            RpeKind::None => return Ok(None),
            RpeKind::RelPosBias => {
                RpeParams::Table((0..num_layers).map(|_| init::zeros(&[num_heads, buckets])).collect())
            }
            RpeKind::RelPosMlp => {
                if hidden == 0 {
                    return Err(Error::Config("rpe_mlp_hidden must be positive".into()));
                }
                RpeParams::Mlp((0..num_layers).map(|l| mlp_layer(l, hidden, num_heads, seed)).collect())
            }
        };
        Ok(Some(Self { index, num_heads, hidden, params }))
    }

    pub fn kind(&self) -> RpeKind {
        match self.params {
            RpeParams::Table(_) => RpeKind::RelPosBias,
            RpeParams::Mlp(_) => RpeKind::RelPosMlp,
        }
    }

    pub fn index(&self) -> &RelativeCoordinateIndex {
        &self.index
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn num_layers(&self) -> usize {
        match &self.params {
            RpeParams::Table(t) => t.len(),
            RpeParams::Mlp(m) => m.len(),
        }
    }

    pub fn params(&self) -> &RpeParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut RpeParams {
        &mut self.params
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match &self.params {
            RpeParams::Table(tables) => tables.iter().enumerate().map(|(l, t)| (format!("rpe.{l}.table"), t)).collect(),
            RpeParams::Mlp(layers) => layers
                .iter()
                .enumerate()
                .flat_map(|(l, m)| {
                    [("w1", &m.w1), ("b1", &m.b1), ("w2", &m.w2), ("b2", &m.b2)]
                        .into_iter()
                        .map(move |(n, t)| (format!("rpe.{l}.mlp.{n}"), t))
                })
                .collect(),
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match &mut self.params {
            RpeParams::Table(tables) => {
                tables.iter_mut().enumerate().map(|(l, t)| (format!("rpe.{l}.table"), t)).collect()
            }
            RpeParams::Mlp(layers) => layers
                .iter_mut()
                .enumerate()
                .flat_map(|(l, m)| {
                    [("w1", &mut m.w1), ("b1", &mut m.b1), ("w2", &mut m.w2), ("b2", &mut m.b2)]
                        .into_iter()
                        .map(move |(n, t)| (format!("rpe.{l}.mlp.{n}"), t))
                })
                .collect(),
        }
    }

    /// Builds the `[num_heads x N x N]` bias of layer `layer` on the
    /// session's tape; differentiable with respect to the provider's
    /// parameters.
    pub fn materialize(&self, s: &mut Session, layer: usize) -> Result<Var> {
        if layer >= self.num_layers() {
            return Err(Error::Invalid(format!("layer {layer} out of range (model has {})", self.num_layers())));
        }
        let n = self.index.num_patches();
        let heads = self.num_heads;
        let buckets = self.index.num_buckets();
        let (values, per_bucket_stride, per_head_stride) = match &self.params {
            RpeParams::Table(tables) => (s.param(&tables[layer]), 1, buckets),
            RpeParams::Mlp(layers) => {
                let m = &layers[layer];
                let coords = s.tape.constant(&[buckets, 2], self.normalized_offsets())?;
                let w1 = s.param(&m.w1);
                let b1 = s.param(&m.b1);
                let w2 = s.param(&m.w2);
                let b2 = s.param(&m.b2);
                let h = s.tape.matmul(coords, w1)?;
                let b1 = s.tape.tile_rows(b1, buckets)?;
                let h = s.tape.add(h, b1)?;
                let h = s.tape.gelu(h);
                let out = s.tape.matmul(h, w2)?;
                let b2 = s.tape.tile_rows(b2, buckets)?;
                (s.tape.add(out, b2)?, heads, 1)
            }
        };
        let mut indices = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            indices.extend(self.index.table().iter().map(|&b| b * per_bucket_stride + h * per_head_stride));
        }
        s.tape.gather(values, indices, &[heads, n, n])
    }

    /// Evaluates [`RpeProvider::materialize`] without recording gradients.
    pub fn materialize_tensor(&self, layer: usize) -> Result<Tensor> {
        let mut s = Session::inference();
        let v = self.materialize(&mut s, layer)?;
        Ok(s.tape.to_tensor(v))
    }

    /// Offsets scaled linearly to [-1, 1] per axis; a one-cell axis maps to 0.
    fn normalized_offsets(&self) -> Vec<f32> {
        let (gh, gw) = self.index.grid();
        let scale = |d: isize, g: usize| if g > 1 { d as f32 / (g - 1) as f32 } else { 0.0 };
        (0..self.index.num_buckets())
            .flat_map(|b| {
                let (dr, dc) = self.index.offset(b);
                [scale(dr, gh), scale(dc, gw)]
            })
            .collect()
    }

    /// Same provider with parameters redrawn from the construction
    /// distribution using `seed`.
    pub fn reinitialize(&self, seed: u64) -> Self {
        let (gh, gw) = self.index.grid();
        Self::new(self.kind(), gh, gw, self.num_layers(), self.num_heads, self.hidden, seed)
            .expect("provider was valid at construction")
            .expect("kind is not none")
    }
}

fn mlp_layer(l: usize, hidden: usize, heads: usize, seed: u64) -> RelPosMlpLayer {
    RelPosMlpLayer {
        w1: init::normal(&[2, hidden], (1.0f32 / 2.0).sqrt(), seed, &format!("rpe.{l}.mlp.w1")),
        b1: init::zeros(&[hidden]),
        w2: init::normal(&[hidden, heads], (1.0 / hidden as f32).sqrt(), seed, &format!("rpe.{l}.mlp.w2")),
        b2: init::zeros(&[heads]),
    }
}

/// Row `patch` of the head-averaged bias, laid out on the patch grid.
pub fn extract_rpe_slice(bias: &Tensor, patch: usize, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    let n = grid_h * grid_w;
    let [heads, rows, cols] = *bias.shape() else {
        return Err(Error::Shape(format!("expected [heads x N x N] bias, got {:?}", bias.shape())));
    };
    if rows != n || cols != n {
        return Err(Error::Shape(format!("bias is {rows}x{cols} but the grid has {n} patches")));
    }
    if patch >= n {
        return Err(Error::Invalid(format!("patch {patch} out of range 0..{n}")));
    }
    let mut out = vec![0.0f32; n];
    for h in 0..heads {
        let row = &bias.data()[(h * n + patch) * n..(h * n + patch + 1) * n];
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= heads as f32);
    Tensor::new(&[grid_h, grid_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_grid() {
        let idx = RelativeCoordinateIndex::build(1, 1).unwrap();
        assert_eq!(idx.num_buckets(), 1);
        assert_eq!(idx.table(), &[0]);
        assert!(RelativeCoordinateIndex::build(0, 3).is_err());
    }

    #[test]
    fn two_by_two_zero_offset() {
        let idx = RelativeCoordinateIndex::build(2, 2).unwrap();
        assert_eq!(idx.num_buckets(), 9);
        for n in 0..4 {
            assert_eq!(idx.bucket(n, n), idx.zero_offset_bucket());
        }
        assert_eq!(idx.offset(idx.zero_offset_bucket()), (0, 0));
    }

    #[test]
    fn three_by_three_matches_enumeration() {
        let idx = RelativeCoordinateIndex::build(3, 3).unwrap();
        // enumerate the 25 offsets in row-major (dr, dc) order
        let offsets: Vec<(isize, isize)> = (-2..=2).flat_map(|dr| (-2..=2).map(move |dc| (dr, dc))).collect();
        for q in 0..9usize {
            for k in 0..9usize {
                let dr = (k / 3) as isize - (q / 3) as isize;
                let dc = (k % 3) as isize - (q % 3) as isize;
                let expected = offsets.iter().position(|&o| o == (dr, dc)).unwrap();
                assert_eq!(idx.bucket(q, k), expected, "pair ({q},{k})");
            }
        }
    }

    fn table_provider(heads: usize) -> RpeProvider {
        RpeProvider::new(RpeKind::RelPosBias, 2, 3, 2, heads, 0, 1).unwrap().unwrap()
    }

    #[test]
    fn zero_table_gives_zero_bias() {
        let p = table_provider(2);
        let b = p.materialize_tensor(1).unwrap();
        assert_eq!(b.shape(), &[2, 6, 6]);
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_offset_bucket_lands_on_diagonal() {
        let mut p = table_provider(1);
        let zero = p.index().zero_offset_bucket();
        if let RpeParams::Table(t) = p.params_mut() {
            t[0].data_mut()[zero] = 5.0;
        }
        let b = p.materialize_tensor(0).unwrap();
        for q in 0..6 {
            for k in 0..6 {
                assert_eq!(b.data()[q * 6 + k], if q == k { 5.0 } else { 0.0 });
            }
        }
        let slice = extract_rpe_slice(&b, 0, 2, 3).unwrap();
        assert_eq!(slice.data(), &[5.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(extract_rpe_slice(&b, 6, 2, 3).is_err());
    }

    #[test]
    fn perturbing_one_bucket_touches_only_its_entries() {
        let base = table_provider(2);
        let before = base.materialize_tensor(0).unwrap();
        for bucket in 0..base.index().num_buckets() {
            let mut p = base.clone();
            if let RpeParams::Table(t) = p.params_mut() {
                t[0].data_mut()[base.index().num_buckets() + bucket] += 1.0;
            }
            let after = p.materialize_tensor(0).unwrap();
            for h in 0..2 {
                for q in 0..6 {
                    for k in 0..6 {
                        let i = (h * 6 + q) * 6 + k;
                        let changed = after.data()[i] != before.data()[i];
                        assert_eq!(changed, h == 1 && base.index().bucket(q, k) == bucket);
                    }
                }
            }
        }
    }

    #[test]
    fn mlp_bias_is_shift_invariant() {
        let p = RpeProvider::new(RpeKind::RelPosMlp, 2, 2, 1, 3, 16, 9).unwrap().unwrap();
        let b = p.materialize_tensor(0).unwrap();
        let idx = p.index();
        for h in 0..3 {
            for (q, k) in (0..4).flat_map(|q| (0..4).map(move |k| (q, k))) {
                for (q2, k2) in (0..4).flat_map(|q| (0..4).map(move |k| (q, k))) {
                    if idx.bucket(q, k) == idx.bucket(q2, k2) {
                        let a = b.data()[(h * 4 + q) * 4 + k];
                        let c = b.data()[(h * 4 + q2) * 4 + k2];
                        assert!((a - c).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn reinitialize_is_seed_deterministic() {
        let p = RpeProvider::new(RpeKind::RelPosMlp, 3, 3, 2, 2, 8, 0).unwrap().unwrap();
        assert_eq!(p.reinitialize(4), p.reinitialize(4));
        assert_ne!(p.reinitialize(4), p.reinitialize(5));
        let t = table_provider(2);
        assert_eq!(t.reinitialize(4), t);
    }

    #[test]
    fn slice_places_zero_offset_at_own_cell() {
        let mut p = RpeProvider::new(RpeKind::RelPosBias, 3, 4, 1, 2, 0, 0).unwrap().unwrap();
        let zero = p.index().zero_offset_bucket();
        let buckets = p.index().num_buckets();
        if let RpeParams::Table(t) = p.params_mut() {
            for (i, v) in t[0].data_mut().iter_mut().enumerate() {
                *v = if i % buckets == zero { 10.0 } else { (i % 7) as f32 * 0.1 };
            }
        }
        let b = p.materialize_tensor(0).unwrap();
        for n in 0..12 {
            let s = extract_rpe_slice(&b, n, 3, 4).unwrap();
            assert_eq!(s.data()[n], 10.0);
        }
    }
}
