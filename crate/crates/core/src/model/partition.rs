//! Window partitions for multi-axis attention. Both variants are pure index
//! permutations, so the forward pass is a gather and the inverse is exact.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// Contiguous `P x P` windows.
    Block,
    /// `G x G` dilated lattices with stride `H/G`, `W/G`.
    Grid,
}

/// Source offsets for partitioning an NCHW tensor of `shape` into tokens
/// `[B * (H/p) * (W/p), p * p, C]`; `out[i] = x[index[i]]`.
pub fn partition_index(shape: [usize; 4], p: usize, kind: Partition) -> Result<Vec<u32>> {
    let [b, c, h, w] = shape;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Geometry(format!("{h}x{w} extent is not divisible by window {p}")));
    }
    let numel = b * c * h * w;
    if numel > u32::MAX as usize {
        return Err(Error::Shape(format!("{numel} values exceed the index range")));
    }
    let (nh, nw) = (h / p, w / p);
    let mut index = Vec::with_capacity(numel);
    for bi in 0..b {
        for r in 0..nh {
            for col in 0..nw {
                for i in 0..p {
                    for j in 0..p {
                        let (y, x) = match kind {
                            Partition::Block => (r * p + i, col * p + j),
                            Partition::Grid => (r + i * nh, col + j * nw),
                        };
                        for ch in 0..c {
                            index.push((((bi * c + ch) * h + y) * w + x) as u32);
                        }
                    }
                }
            }
        }
    }
    Ok(index)
}

fn invert(index: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; index.len()];
    for (i, &src) in index.iter().enumerate() {
        inv[src as usize] = i as u32;
    }
    inv
}

fn rank4<T: Scalar>(g: &Graph<T>, x: Var) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::Shape(format!("partition expects NCHW, got {s:?}"))),
    }
}

pub fn partition<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize, kind: Partition) -> Result<Var> {
    let shape = rank4(g, x)?;
    let index = partition_index(shape, p, kind)?;
    let [b, c, h, w] = shape;
    g.permute(x, index.into(), &[b * (h / p) * (w / p), p * p, c])
}

/// Inverse of [`partition`] back to `shape`.
pub fn unpartition<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    shape: [usize; 4],
    p: usize,
    kind: Partition,
) -> Result<Var> {
    let index: Rc<[u32]> = invert(&partition_index(shape, p, kind)?).into();
    g.permute(tokens, index, &shape)
}
