//! Checkerboard partitions of tensor positions into a conditioning half A
//! and a transformed half B.
//!
//! Two kinds exist: a spatial parity pattern that is shared by every channel,
//! and a permuted pattern over the full (C, H, W) volume whose split comes
//! from a seeded shuffle of the flattened indices.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Spatial2D,
    Permuted3D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    A,
    B,
}

impl Half {
    pub fn other(self) -> Half {
        match self {
            Half::A => Half::B,
            Half::B => Half::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckerboardMask {
    kind: MaskKind,
    /// Channel extent; 1 for spatial masks.
    channels: usize,
    height: usize,
    width: usize,
    /// `true` marks half A.
    bits: Vec<bool>,
    /// Parity offset for spatial masks, shuffle seed for permuted ones.
    phase_or_seed: u64,
}

pub fn make_mask_2d(height: usize, width: usize, phase: u8) -> CheckerboardMask {
    let phase = (phase % 2) as usize;
    let bits = (0..height)
        .flat_map(|i| (0..width).map(move |j| (i + j + phase) % 2 == 0))
        .collect();
    CheckerboardMask {
        kind: MaskKind::Spatial2D,
        channels: 1,
        height,
        width,
        bits,
        phase_or_seed: phase as u64,
    }
}

pub fn make_mask_3d(channels: usize, height: usize, width: usize, seed: u64) -> Result<CheckerboardMask> {
    let n = channels * height * width;
    if n < 2 {
        return Err(Error::Config(format!("3D mask needs at least 2 elements, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut bits = vec![false; n];
    for &k in &order[..n.div_ceil(2)] {
        bits[k] = true;
    }
    Ok(CheckerboardMask {
        kind: MaskKind::Permuted3D,
        channels,
        height,
        width,
        bits,
        phase_or_seed: seed,
    })
}

/// Rectangular tiling of an (H, W) grid into `rows × cols` equal patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    /// Square grid with `n` patches; `n` must be a perfect square.
    pub fn square(n: usize) -> Result<Self> {
        let side = (n as f64).sqrt().round() as usize;
        if side == 0 || side * side != n {
            return Err(Error::Config(format!("patch count {n} is not a perfect square")));
        }
        Ok(PatchGrid {
            rows: side,
            cols: side,
        })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Patch extents for an (H, W) grid.
    pub fn patch_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.rows == 0 || self.cols == 0 || height % self.rows != 0 || width % self.cols != 0 {
            return Err(Error::Config(format!(
                "patch grid {}x{} does not tile {height}x{width}",
                self.rows, self.cols
            )));
        }
        Ok((height / self.rows, width / self.cols))
    }
}

impl CheckerboardMask {
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn phase_or_seed(&self) -> u64 {
        self.phase_or_seed
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self, half: Half) -> usize {
        let a = self.bits.iter().filter(|&&b| b).count();
        match half {
            Half::A => a,
            Half::B => self.bits.len() - a,
        }
    }

    /// Whether element `(c, i, j)` belongs to `half`.
    pub fn contains(&self, half: Half, c: usize, i: usize, j: usize) -> bool {
        let bit = match self.kind {
            MaskKind::Spatial2D => self.bits[i * self.width + j],
            MaskKind::Permuted3D => self.bits[(c * self.height + i) * self.width + j],
        };
        bit == (half == Half::A)
    }

    fn check(&self, shape: Shape) -> Result<()> {
        let ok = shape.h() == self.height
            && shape.w() == self.width
            && (self.kind == MaskKind::Spatial2D || shape.c() == self.channels);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "mask",
                left: shape,
                right: Shape::new(1, self.channels, self.height, self.width),
            });
        }
        Ok(())
    }

    /// 0/1 indicator of `half`, shaped to broadcast against (B, C, H, W).
    pub fn indicator(&self, half: Half) -> Tensor {
        let shape = Shape::new(1, self.channels, self.height, self.width);
        let data = self
            .bits
            .iter()
            .map(|&b| if b == (half == Half::A) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(shape, data).expect("mask indicator shape")
    }

    /// Positions `(i, j)` of `half`, row-major. Spatial masks only. With a
    /// patch, restricted to patch `index` of `grid`.
    pub fn positions(&self, half: Half, patch: Option<(PatchGrid, usize)>) -> Result<Vec<(usize, usize)>> {
        if self.kind != MaskKind::Spatial2D {
            return Err(Error::Config("position lists require a spatial mask".into()));
        }
        let (i0, i1, j0, j1) = match patch {
            None => (0, self.height, 0, self.width),
            Some((grid, index)) => {
                let (ph, pw) = grid.patch_dims(self.height, self.width)?;
                if index >= grid.count() {
                    return Err(Error::Config(format!("patch {index} out of {}", grid.count())));
                }
                let (pr, pc) = (index / grid.cols, index % grid.cols);
                (pr * ph, (pr + 1) * ph, pc * pw, (pc + 1) * pw)
            }
        };
        Ok((i0..i1)
            .flat_map(|i| (j0..j1).map(move |j| (i, j)))
            .filter(|&(i, j)| self.contains(half, 0, i, j))
            .collect())
    }
}

/// Zero every entry outside `half`.
pub fn apply_mask(x: &Tensor, m: &CheckerboardMask, half: Half) -> Result<Tensor> {
    m.check(x.shape())?;
    let s = x.shape();
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let [_, c, i, j] = s.unravel(k);
        if !m.contains(half, c, i, j) {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Flat offsets of the (positions × channels) block of one batch entry.
pub fn half_index(shape: Shape, batch: usize, positions: &[(usize, usize)], channels: std::ops::Range<usize>) -> Vec<usize> {
    positions
        .iter()
        .flat_map(|&(i, j)| channels.clone().map(move |c| shape.offset(batch, c, i, j)))
        .collect()
}

/// Rows are the half's positions in canonical order, columns are channels.
pub fn gather_half(
    x: &Tensor,
    m: &CheckerboardMask,
    half: Half,
    patch: Option<(PatchGrid, usize)>,
    batch: usize,
) -> Result<Matrix> {
    m.check(x.shape())?;
    let pos = m.positions(half, patch)?;
    let idx = half_index(x.shape(), batch, &pos, 0..x.shape().c());
    Ok(Matrix::from_rows(
        pos.len(),
        x.shape().c(),
        idx.iter().map(|&k| x.data()[k]).collect(),
    ))
}

/// Write a gathered block back into a zero tensor of `shape`.
pub fn scatter_half(
    block: &Matrix,
    shape: Shape,
    m: &CheckerboardMask,
    half: Half,
    patch: Option<(PatchGrid, usize)>,
    batch: usize,
) -> Result<Tensor> {
    m.check(shape)?;
    let pos = m.positions(half, patch)?;
    if block.rows != pos.len() || block.cols != shape.c() {
        return Err(Error::ShapeMismatch {
            op: "scatter_half",
            left: Shape::matrix(block.rows, block.cols),
            right: Shape::matrix(pos.len(), shape.c()),
        });
    }
    let mut out = Tensor::zeros(shape);
    for (&k, &v) in half_index(shape, batch, &pos, 0..shape.c()).iter().zip(&block.data) {
        out.data_mut()[k] = v;
    }
    Ok(out)
}

/// Shared index table, for tape gathers.
pub fn index_table(idx: Vec<usize>) -> Arc<[usize]> {
    idx.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn parity_patterns() {
        let m = make_mask_2d(2, 2, 0);
        assert_eq!(m.bits(), &[true, false, false, true]);
        let m = make_mask_2d(2, 2, 1);
        assert_eq!(m.bits(), &[false, true, true, false]);
        let m = make_mask_2d(3, 3, 0);
        assert_eq!((m.count(Half::A), m.count(Half::B)), (5, 4));
    }

    #[test]
    fn permuted_masks() {
        for seed in 0..20 {
            let m = make_mask_3d(2, 2, 2, seed).unwrap();
            assert_eq!((m.count(Half::A), m.count(Half::B)), (4, 4));
            assert_eq!(m, make_mask_3d(2, 2, 2, seed).unwrap());
        }
        let odd = make_mask_3d(1, 3, 3, 4).unwrap();
        assert_eq!((odd.count(Half::A), odd.count(Half::B)), (5, 4));
        let a = make_mask_3d(2, 4, 4, 0).unwrap();
        let b = make_mask_3d(2, 4, 4, 1).unwrap();
        assert!(a.bits().iter().zip(b.bits()).any(|(x, y)| x != y));
        assert!(make_mask_3d(1, 1, 1, 0).is_err());
    }

    #[test]
    fn apply_partition_and_projection() {
        let x = Tensor::randn(Shape::new(2, 3, 4, 4), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let m = make_mask_2d(4, 4, 0);
        let a = apply_mask(&x, &m, Half::A).unwrap();
        let b = apply_mask(&x, &m, Half::B).unwrap();
        assert_eq!(a.zip_map(&b, |p, q| p + q).unwrap(), x);
        assert_eq!(apply_mask(&a, &m, Half::A).unwrap(), a);

        let ones = Tensor::ones(Shape::new(1, 2, 2, 2));
        let a = apply_mask(&ones, &make_mask_2d(2, 2, 0), Half::A).unwrap();
        assert_eq!(a.sum(), 4.0);
        assert!(apply_mask(&x, &make_mask_2d(3, 4, 0), Half::A).is_err());
    }

    #[test]
    fn gather_counts() {
        let x = Tensor::randn(Shape::new(1, 3, 2, 2), 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let m = make_mask_2d(2, 2, 0);
        assert_eq!(gather_half(&x, &m, Half::A, None, 0).unwrap().rows, 2);

        let m = make_mask_2d(4, 4, 0);
        let grid = PatchGrid::square(4).unwrap();
        for p in 0..4 {
            assert_eq!(m.positions(Half::A, Some((grid, p))).unwrap().len(), 2);
        }
        assert!(PatchGrid::square(3).is_err());
        assert!(m.positions(Half::A, Some((PatchGrid::square(9).unwrap(), 0))).is_err());
    }

    proptest! {
        #[test]
        fn gather_scatter_reconstructs(seed in 0u64..10_000, h in 1usize..6, w in 1usize..6, c in 1usize..4, phase in 0u8..2, b in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(Shape::new(b, c, h, w), 1.0, &mut rng);
            let m = make_mask_2d(h, w, phase);
            let batch = rng.gen_range(0..b);
            let half = if rng.gen::<bool>() { Half::A } else { Half::B };
            let g = gather_half(&x, &m, half, None, batch).unwrap();
            let back = scatter_half(&g, x.shape(), &m, half, None, batch).unwrap();
            let other = apply_mask(&x.batch_slice(batch, 1), &m, half.other()).unwrap();
            let sample = back.batch_slice(batch, 1).zip_map(&other, |p, q| p + q).unwrap();
            prop_assert_eq!(sample, x.batch_slice(batch, 1));
        }

        #[test]
        fn halves_partition(seed in 0u64..10_000, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
            prop_assume!(c * h * w >= 2);
            let m = make_mask_3d(c, h, w, seed).unwrap();
            let a = m.count(Half::A);
            let bcount = m.count(Half::B);
            prop_assert_eq!(a + bcount, c * h * w);
            prop_assert!(a == bcount || a == bcount + 1);
            for cc in 0..c { for i in 0..h { for j in 0..w {
                prop_assert!(m.contains(Half::A, cc, i, j) != m.contains(Half::B, cc, i, j));
            }}}
        }
    }
}
