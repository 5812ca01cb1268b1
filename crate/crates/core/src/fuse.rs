//! Historical-path fusion and block stacking.
//!
//! Two causal convolutions over `[Z, H]` are multiplied element-wise; the
//! product becomes the input of the next decoupling block.

use rand::Rng;

use crate::decouple::{decouple_block, AttentionParams, DecoupleConfig, Decoupled};
use crate::error::{Error, Result};
use crate::extrapolate::glorot_pair;
use crate::tape::{Graph, ParamId, ParamStore, Tensor, Var};

/// Kernels `w[k, d, 12 d]` and optional biases `[d]` of both branches.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub b1: Option<ParamId>,
    pub b2: Option<ParamId>,
    pub k: usize,
}

impl FusionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, k: usize, d_z: usize, bias: bool, rng: &mut impl Rng) -> Self {
        assert!(k >= 1, "kernel size must be at least 1");
        let (w1, w2) = glorot_pair(&[k, d_z, 12 * d_z], rng);
        Self {
            w1: store.insert(format!("{prefix}.w1"), w1),
            w2: store.insert(format!("{prefix}.w2"), w2),
            b1: bias.then(|| store.insert(format!("{prefix}.b1"), Tensor::zeros(&[d_z]))),
            b2: bias.then(|| store.insert(format!("{prefix}.b2"), Tensor::full(&[d_z], 1.0))),
            k,
        }
    }
}

/// `S_t = (Σ_j W1_j x_{t-j} + b1) ⊗ (Σ_j W2_j x_{t-j} + b2)` with
/// `x = [Z, H]`. Taps before the first step repeat it.
pub fn fuse(g: &mut Graph, x: Var, store: &ParamStore, p: &FusionParams) -> Result<Var> {
    let w1 = g.param(store, p.w1);
    let w2 = g.param(store, p.w2);
    let mut a = g.causal_conv(x, w1)?;
    let mut b = g.causal_conv(x, w2)?;
    if let Some(b1) = p.b1 {
        let v = g.param(store, b1);
        a = g.add(a, v)?;
    }
    if let Some(b2) = p.b2 {
        let v = g.param(store, b2);
        b = g.add(b, v)?;
    }
    Ok(g.mul(a, b)?)
}

/// Parameters of one stacked block. The last block of a network has no
/// fusion stage since nothing consumes its output.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub fusion: Option<FusionParams>,
}

#[derive(Debug, Clone)]
pub struct Stacked {
    /// Decoupling output of every block, first to last.
    pub blocks: Vec<Decoupled>,
    /// Fused state of every block that has a fusion stage.
    pub states: Vec<Var>,
}

impl Stacked {
    /// The deepest decomposition, which feeds extrapolation.
    pub fn last(&self) -> &Decoupled {
        self.blocks.last().expect("at least one block")
    }
}

/// Runs the blocks in order; block `l` decouples the fused state of block
/// `l - 1`, the first block the embedded input.
pub fn stack_blocks(
    g: &mut Graph,
    input: Var,
    blocks: &[BlockParams],
    store: &ParamStore,
    cfg: &DecoupleConfig,
) -> Result<Stacked> {
    if blocks.is_empty() {
        return Err(Error::config("at least one block is required"));
    }
    let mut out = Stacked {
        blocks: Vec::with_capacity(blocks.len()),
        states: Vec::with_capacity(blocks.len()),
    };
    let mut s = input;
    for (l, bp) in blocks.iter().enumerate() {
        let alpha = g.param(store, bp.attention.alpha);
        let d = decouple_block(g, s, alpha, cfg)?;
        out.blocks.push(d);
        match bp.fusion {
            Some(f) => {
                s = fuse(g, d.zh, store, &f)?;
                out.states.push(s);
            }
            None if l + 1 < blocks.len() => {
                return Err(Error::config(format!("block {l} has no fusion stage but is not last")));
            }
            None => {}
        }
    }
    Ok(out)
}
