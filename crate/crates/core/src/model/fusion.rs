//! Long-term pooling and fusion of the long- and short-term vectors.

use crate::autograd::{Tape, Var};
use crate::config::Fusion;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attention pooling of subset rows `g` (`[n × d]`) with query `e_u`
/// (`[1 × d]`). `None` stands for an empty subset and pools to zeros.
pub fn pool_subset(tape: &Tape, g: Option<Var>, e_u: Var) -> Result<Var> {
    let d = tape.shape(e_u)[1];
    let Some(g) = g else {
        return Ok(tape.constant(Tensor::zeros(&[1, d])));
    };
    let n = tape.shape(g)[0];
    let logits = tape.reshape(tape.matmul_t(g, e_u)?, &[1, n])?;
    let alpha = tape.softmax_rows(logits)?;
    tape.matmul(alpha, g)
}

/// `p = tanh(concat(z_f) · W^pᵀ + b)` over pooled per-feature vectors.
pub fn encode_long_term(tape: &Tape, pooled: &[Var], w_dense: Var, bias: Var) -> Result<Var> {
    let z = match pooled {
        [] => return Err(Error::InvalidArgument("no long-term features".into())),
        [one] => *one,
        many => tape.concat_cols(many)?,
    };
    tape.tanh(tape.add_row(tape.matmul_t(z, w_dense)?, bias)?)
}

#[derive(Clone, Copy, Debug)]
pub struct GateWeights {
    pub w_profile: Var,
    pub w_short: Var,
    pub w_long: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum FusionWeights {
    Gated(GateWeights),
    Concat { w: Var, bias: Var },
    None,
}

/// Combines short-term rows `s` (`[t × d]`) with the long-term vector `p`
/// and profile vector `e_u` (both `[1 × d]`, broadcast over rows).
/// Returns the fused rows and, in gated mode, the gate.
pub fn fuse(tape: &Tape, mode: Fusion, e_u: Var, s: Var, p: Var, w: FusionWeights) -> Result<(Var, Option<Var>)> {
    let t = tape.shape(s)[0];
    let broadcast = |v: Var| if t == 1 { Ok(v) } else { tape.repeat_rows(v, t) };
    match (mode, w) {
        (Fusion::ShortOnly, _) => Ok((s, None)),
        (Fusion::Add, _) => Ok((tape.add(s, broadcast(p)?)?, None)),
        (Fusion::Multiply, _) => Ok((tape.mul(s, broadcast(p)?)?, None)),
        (Fusion::Concat, FusionWeights::Concat { w, bias }) => {
            let both = tape.concat_cols(&[s, broadcast(p)?])?;
            Ok((tape.add_row(tape.matmul_t(both, w)?, bias)?, None))
        }
        (Fusion::Gated, FusionWeights::Gated(g)) => {
            let pb = broadcast(p)?;
            let pre = tape.add(
                tape.add(
                    tape.matmul_t(broadcast(e_u)?, g.w_profile)?,
                    tape.matmul_t(s, g.w_short)?,
                )?,
                tape.matmul_t(pb, g.w_long)?,
            )?;
            let gate = tape.sigmoid(tape.add_row(pre, g.bias)?)?;
            let long = tape.mul(tape.one_minus(gate)?, pb)?;
            let short = tape.mul(gate, s)?;
            Ok((tape.add(long, short)?, Some(gate)))
        }
        (mode, _) => Err(Error::Config(format!("fusion mode {mode:?} is missing its weights"))),
    }
}
