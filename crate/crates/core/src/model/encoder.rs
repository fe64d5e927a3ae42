//! Short-term session encoder: stacked LSTM, causal multi-head
//! self-attention and user attention, all over a `[t × d]` sequence.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Weights of one LSTM layer. Gate blocks are stacked in the order input,
/// forget, output, candidate: `w_input` and `w_recurrent` are `[4d × d]`,
/// `bias` is `[4d]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub w_input: Var,
    pub w_recurrent: Var,
    pub bias: Var,
}

/// Runs one LSTM layer from `h_0 = c_0 = 0` over the rows of `x`.
pub fn lstm_layer(tape: &Tape, x: Var, w: LstmWeights) -> Result<Var> {
    let shape = tape.shape(x);
    let (t, d) = (shape[0], shape[1]);
    let input_part = tape.add_row(tape.matmul_t(x, w.w_input)?, w.bias)?;
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut outputs = Vec::with_capacity(t);
    for k in 0..t {
        let mut pre = tape.row(input_part, k)?;
        if let Some(h_prev) = h {
            pre = tape.add(pre, tape.matmul_t(h_prev, w.w_recurrent)?)?;
        }
        let i = tape.sigmoid(tape.slice_cols(pre, 0, d)?)?;
        let f = tape.sigmoid(tape.slice_cols(pre, d, d)?)?;
        let o = tape.sigmoid(tape.slice_cols(pre, 2 * d, d)?)?;
        let cand = tape.tanh(tape.slice_cols(pre, 3 * d, d)?)?;
        let mut c_new = tape.mul(i, cand)?;
        if let Some(c_prev) = c {
            c_new = tape.add(tape.mul(f, c_prev)?, c_new)?;
        }
        let h_new = tape.mul(o, tape.tanh(c_new)?)?;
        outputs.push(h_new);
        h = Some(h_new);
        c = Some(c_new);
    }
    tape.concat_rows(&outputs)
}

/// Stacked LSTM with residual connections between layers. Layer 1 reads
/// the embeddings; every later layer reads the previous output, passed
/// through `dropout`, and adds that input back to its own output.
pub fn lstm_stack(
    tape: &Tape,
    x: Var,
    layers: &[LstmWeights],
    mut dropout: impl FnMut(&Tape, Var) -> Result<Var>,
) -> Result<Var> {
    if tape.shape(x)[0] == 0 {
        return Err(Error::InvalidArgument("LSTM over an empty sequence".into()));
    }
    let (first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("LSTM needs at least one layer".into()))?;
    let mut out = lstm_layer(tape, x, *first)?;
    for w in rest {
        let input = dropout(tape, out)?;
        out = tape.add(lstm_layer(tape, input, *w)?, input)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub w_out: Var,
}

/// Per-head attention followed by the output projection, before the
/// residual and layer norm. Head `i` uses columns `i·d_k..(i+1)·d_k` of
/// the projected queries, keys and values. Returns the projected output and
/// each head's `[t × t]` weight matrix.
pub fn multi_head_attention(
    tape: &Tape,
    x: Var,
    w: AttentionWeights,
    heads: usize,
    scaled: bool,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dk = d / heads;
    let q = tape.matmul_t(x, w.w_query)?;
    let k = tape.matmul_t(x, w.w_key)?;
    let v = tape.matmul_t(x, w.w_value)?;
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * dk, dk)?;
        let kh = tape.slice_cols(k, head * dk, dk)?;
        let vh = tape.slice_cols(v, head * dk, dk)?;
        let mut scores = tape.matmul_t(qh, kh)?;
        if scaled {
            scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        }
        let a = if causal {
            tape.causal_softmax_rows(scores)?
        } else {
            tape.softmax_rows(scores)?
        };
        outputs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let concat = if heads == 1 { outputs[0] } else { tape.concat_cols(&outputs)? };
    Ok((tape.matmul_t(concat, w.w_out)?, weights))
}

/// `LN(x + MHA(x))`, returning the per-head weights as well.
pub fn attention_block(
    tape: &Tape,
    x: Var,
    w: AttentionWeights,
    ln_gain: Var,
    ln_bias: Var,
    heads: usize,
    scaled: bool,
) -> Result<(Var, Vec<Var>)> {
    let (proj, weights) = multi_head_attention(tape, x, w, heads, scaled, true)?;
    Ok((tape.layer_norm(tape.add(x, proj)?, ln_gain, ln_bias)?, weights))
}

/// For every position `k`, pools rows `1..=k` of `xhat` with softmax weights
/// `ĥ_jᵀ e_u`. `e_u` is `[1 × d]`; returns `[t × d]` and the `[t × t]`
/// weight matrix.
pub fn user_attention(tape: &Tape, xhat: Var, e_u: Var) -> Result<(Var, Var)> {
    let t = tape.shape(xhat)[0];
    let logits = tape.reshape(tape.matmul_t(xhat, e_u)?, &[1, t])?;
    let grid = if t == 1 { logits } else { tape.repeat_rows(logits, t)? };
    let a = tape.causal_softmax_rows(grid)?;
    Ok((tape.matmul(a, xhat)?, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::init::rng_for;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, 0);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn lstm_weights(tape: &Tape, d: usize, seed: u64) -> LstmWeights {
        LstmWeights {
            w_input: tape.constant(random(4 * d, d, seed)),
            w_recurrent: tape.constant(random(4 * d, d, seed + 1)),
            bias: tape.constant(random(1, 4 * d, seed + 2).reshape(&[4 * d]).unwrap()),
        }
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let tape = Tape::new();
        let d = 3;
        let w = LstmWeights {
            w_input: tape.constant(Tensor::zeros(&[4 * d, d])),
            w_recurrent: tape.constant(Tensor::zeros(&[4 * d, d])),
            bias: tape.constant(Tensor::zeros(&[4 * d])),
        };
        let x = tape.constant(random(4, d, 1));
        let out = lstm_stack(&tape, x, &[w, w], |_, v| Ok(v)).unwrap();
        // layer 2 adds its input back, and layer 1 emits zeros
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_lstm_step_by_hand() {
        let tape = Tape::new();
        let (wi, wf, wo, wc) = (0.5, -0.3, 0.8, 1.2);
        let (bi, bf, bo, bc) = (0.1, 0.2, -0.1, 0.05);
        let w = LstmWeights {
            w_input: tape.constant(Tensor::matrix(4, 1, vec![wi, wf, wo, wc]).unwrap()),
            w_recurrent: tape.constant(Tensor::matrix(4, 1, vec![0.7, 0.7, 0.7, 0.7]).unwrap()),
            bias: tape.constant(Tensor::vector(vec![bi, bf, bo, bc])),
        };
        let x = 0.9;
        let out = lstm_layer(&tape, tape.constant(Tensor::matrix(1, 1, vec![x]).unwrap()), w).unwrap();
        let i = sigmoid(wi * x + bi);
        let o = sigmoid(wo * x + bo);
        let c = i * (wc * x + bc).tanh();
        let h = o * c.tanh();
        assert!((tape.value(out).item() - h).abs() < 1e-15);
    }

    #[test]
    fn lstm_is_causal() {
        let d = 4;
        let run = |x: Tensor| {
            let tape = Tape::new();
            let w = [lstm_weights(&tape, d, 10), lstm_weights(&tape, d, 20)];
            let out = lstm_stack(&tape, tape.constant(x), &w, |_, v| Ok(v)).unwrap();
            tape.value(out).as_ref().clone()
        };
        let a = random(5, d, 3);
        let mut b = a.clone();
        for v in b.row_mut(4) {
            *v += 1.0;
        }
        let (ya, yb) = (run(a), run(b));
        assert_eq!(ya.data()[..4 * d], yb.data()[..4 * d]);
        assert_ne!(ya.row(4), yb.row(4));
    }

    #[test]
    fn zero_query_key_gives_running_mean() {
        let tape = Tape::new();
        let d = 3;
        let x = random(4, d, 5);
        let w = AttentionWeights {
            w_query: tape.constant(Tensor::zeros(&[d, d])),
            w_key: tape.constant(Tensor::zeros(&[d, d])),
            w_value: tape.constant(Tensor::identity(d)),
            w_out: tape.constant(Tensor::identity(d)),
        };
        let (out, _) = multi_head_attention(&tape, tape.constant(x.clone()), w, 1, false, true).unwrap();
        let out = tape.value(out);
        for j in 0..4 {
            for c in 0..d {
                let mean = (0..=j).map(|k| x.at(k, c)).sum::<f64>() / (j + 1) as f64;
                assert!((out.at(j, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let tape = Tape::new();
        let d = 4;
        let (wv, wo) = (random(d, d, 7), random(d, d, 8));
        let x = random(1, d, 9);
        let w = AttentionWeights {
            w_query: tape.constant(random(d, d, 1)),
            w_key: tape.constant(random(d, d, 2)),
            w_value: tape.constant(wv.clone()),
            w_out: tape.constant(wo.clone()),
        };
        let (out, _) = multi_head_attention(&tape, tape.constant(x.clone()), w, 2, false, true).unwrap();
        let want = x.matmul_t(&wv).unwrap().matmul_t(&wo).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let tape = Tape::new();
        let (d, t) = (64, 6);
        let w = AttentionWeights {
            w_query: tape.constant(random(d, d, 11)),
            w_key: tape.constant(random(d, d, 12)),
            w_value: tape.constant(random(d, d, 13)),
            w_out: tape.constant(random(d, d, 14)),
        };
        let x = tape.constant(random(t, d, 15).map(|v| v * 0.1));
        let (_, weights) = multi_head_attention(&tape, x, w, 4, false, true).unwrap();
        assert_eq!(weights.len(), 4);
        for a in weights {
            let a = tape.value(a);
            for j in 0..t {
                let row = a.row(j);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!(row[j + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn permuting_heads_leaves_output_unchanged() {
        let (d, t, heads) = (8, 4, 2);
        let dk = d / heads;
        let (wq, wk, wv, wo) = (random(d, d, 21), random(d, d, 22), random(d, d, 23), random(d, d, 24));
        let x = random(t, d, 25);
        let swap_rows = |w: &Tensor| {
            let mut out = w.clone();
            for r in 0..d {
                let src = (r + dk) % d;
                out.row_mut(r).copy_from_slice(w.row(src));
            }
            out
        };
        let swap_cols = |w: &Tensor| swap_rows(&w.transpose()).transpose();
        let run = |wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor| {
            let tape = Tape::new();
            let w = AttentionWeights {
                w_query: tape.constant(wq.clone()),
                w_key: tape.constant(wk.clone()),
                w_value: tape.constant(wv.clone()),
                w_out: tape.constant(wo.clone()),
            };
            let (out, _) = multi_head_attention(&tape, tape.constant(x.clone()), w, heads, false, true).unwrap();
            tape.value(out).as_ref().clone()
        };
        let a = run(&wq, &wk, &wv, &wo);
        let b = run(&swap_rows(&wq), &swap_rows(&wk), &swap_rows(&wv), &swap_cols(&wo));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn one_head_identity_matches_plain_attention() {
        let d = 3;
        let x = random(4, d, 31);
        let tape = Tape::new();
        let w = AttentionWeights {
            w_query: tape.constant(Tensor::identity(d)),
            w_key: tape.constant(Tensor::identity(d)),
            w_value: tape.constant(Tensor::identity(d)),
            w_out: tape.constant(Tensor::identity(d)),
        };
        let (out, _) = multi_head_attention(&tape, tape.constant(x.clone()), w, 1, false, true).unwrap();
        let scores = x.matmul_t(&x).unwrap();
        let a = crate::autograd::softmax_rows(&scores, true).unwrap();
        let want = a.matmul(&x).unwrap();
        for (p, q) in tape.value(out).data().iter().zip(want.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn user_attention_examples() {
        let tape = Tape::new();
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let (s, _) = user_attention(&tape, tape.constant(v), tape.constant(random(1, 2, 1))).unwrap();
        for r in 0..3 {
            assert!((tape.value(s).at(r, 0) - 1.0).abs() < 1e-15);
            assert!((tape.value(s).at(r, 1) - 2.0).abs() < 1e-15);
        }

        let x = random(3, 2, 2);
        let (s, _) = user_attention(&tape, tape.constant(x.clone()), tape.constant(Tensor::zeros(&[1, 2]))).unwrap();
        let last = tape.value(s);
        for c in 0..2 {
            let mean = (0..3).map(|k| x.at(k, c)).sum::<f64>() / 3.0;
            assert!((last.at(2, c) - mean).abs() < 1e-15);
        }

        let e = 3f64.ln() / 2.0;
        let xhat = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let eu = Tensor::matrix(1, 1, vec![e]).unwrap();
        let (s, a) = user_attention(&tape, tape.constant(xhat), tape.constant(eu)).unwrap();
        let (l1, l2) = (e, 3.0 * e);
        let w1 = l1.exp() / (l1.exp() + l2.exp());
        assert!((tape.value(a).at(1, 0) - w1).abs() < 1e-15);
        assert!((tape.value(a).at(1, 0) - 0.25).abs() < 1e-12);
        assert!((tape.value(s).at(1, 0) - (w1 + 3.0 * (1.0 - w1))).abs() < 1e-12);
        assert_eq!(tape.value(s).at(0, 0), 1.0);
    }
}
