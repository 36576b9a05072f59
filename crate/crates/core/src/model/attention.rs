use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamSpec, ParamVars, Scalar, Var};

/// Projection weights `[C, C]` of one attention sublayer, applied as
/// `tokens x W`. No biases, no positional terms.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttentionVars {
    pub fn lookup(p: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: p.get(&format!("{prefix}.wq"))?,
            wk: p.get(&format!("{prefix}.wk"))?,
            wv: p.get(&format!("{prefix}.wv"))?,
            wo: p.get(&format!("{prefix}.wo"))?,
        })
    }
}

pub fn attention_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    ["wq", "wk", "wv", "wo"]
        .iter()
        .map(|w| ParamSpec::kaiming(format!("{prefix}.{w}"), &[c, c], c))
        .collect()
}

/// `[B, T, H*D]` to `[B*H, T, D]`, or `[B*H, D, T]` when `transposed`.
fn head_split_index(b: usize, t: usize, heads: usize, d: usize, transposed: bool) -> Vec<u32> {
    let c = heads * d;
    let mut index = vec![0u32; b * t * c];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                for di in 0..d {
                    let src = (bi * t + ti) * c + h * d + di;
                    let dst = if transposed {
                        ((bi * heads + h) * d + di) * t + ti
                    } else {
                        ((bi * heads + h) * t + ti) * d + di
                    };
                    index[dst] = src as u32;
                }
            }
        }
    }
    index
}

fn head_merge_index(b: usize, t: usize, heads: usize, d: usize) -> Vec<u32> {
    let split = head_split_index(b, t, heads, d, false);
    let mut index = vec![0u32; split.len()];
    for (i, &src) in split.iter().enumerate() {
        index[src as usize] = i as u32;
    }
    index
}

/// Multi-head self-attention over windows of tokens `[B, T, C]`.
pub fn mhsa<T: Scalar>(g: &mut Graph<T>, w: &AttentionVars, tokens: Var, head_dim: usize) -> Result<Var> {
    let (b, t, c) = match *g.shape(tokens) {
        [b, t, c] => (b, t, c),
        ref s => return Err(Error::Shape(format!("mhsa expects [B, T, C], got {s:?}"))),
    };
    if head_dim == 0 || c % head_dim != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by head_dim {head_dim}")));
    }
    let heads = c / head_dim;
    let q = g.matmul(tokens, w.wq)?;
    let k = g.matmul(tokens, w.wk)?;
    let v = g.matmul(tokens, w.wv)?;
    let split: Rc<[u32]> = head_split_index(b, t, heads, head_dim, false).into();
    let q = g.permute(q, split.clone(), &[b * heads, t, head_dim])?;
    let v = g.permute(v, split, &[b * heads, t, head_dim])?;
    let kt = g.permute(k, head_split_index(b, t, heads, head_dim, true).into(), &[b * heads, head_dim, t])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (head_dim as f64).sqrt()));
    let attn = g.softmax_lastdim(scores)?;
    let o = g.matmul(attn, v)?;
    let o = g.permute(o, head_merge_index(b, t, heads, head_dim).into(), &[b, t, c])?;
    g.matmul(o, w.wo)
}
