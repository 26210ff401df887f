use crate::error::{Error, Result};
use crate::tape::{Mask, Tape, Var};
use crate::tensor::Real;

/// Fused multi-head projections. Each `d×d` matrix holds all heads side by
/// side; head `k` owns columns `k·d/h .. (k+1)·d/h`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub w_q: P,
    pub b_q: P,
    pub w_k: P,
    pub b_k: P,
    pub w_v: P,
    pub b_v: P,
    pub w_o: P,
    pub b_o: P,
}

impl<P> AttentionParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            w_q: f(&self.w_q),
            b_q: f(&self.b_q),
            w_k: f(&self.w_k),
            b_k: f(&self.b_k),
            w_v: f(&self.w_v),
            b_v: f(&self.b_v),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &P)) {
        for (n, p) in self.named() {
            f(format!("{prefix}.{n}"), p);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        let Self {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
        } = self;
        for (n, p) in [
            ("w_q", w_q),
            ("b_q", b_q),
            ("w_k", w_k),
            ("b_k", b_k),
            ("w_v", w_v),
            ("b_v", b_v),
            ("w_o", w_o),
            ("b_o", b_o),
        ] {
            f(format!("{prefix}.{n}"), p);
        }
    }

    fn named(&self) -> [(&'static str, &P); 8] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ]
    }
}

/// Multi-head self-attention over the rows of `z` (`T×d`).
///
/// Scores are `q·k / sqrt(d/h)`; `mask` decides which keys each query sees.
pub fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    p: &AttentionParams<Var>,
    heads: usize,
    mask: Mask,
) -> Result<Var> {
    let d = tape.shape(z)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = tape.matmul(z, p.w_q)?;
    let q = tape.add_bias(q, p.b_q)?;
    let k = tape.matmul(z, p.w_k)?;
    let k = tape.add_bias(k, p.b_k)?;
    let v = tape.matmul(z, p.w_v)?;
    let v = tape.add_bias(v, p.b_v)?;

    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_masked(scores, mask)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let o = tape.matmul(joined, p.w_o)?;
    tape.add_bias(o, p.b_o)
}

pub fn causal_self_attention<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    p: &AttentionParams<Var>,
    heads: usize,
) -> Result<Var> {
    self_attention(tape, z, p, heads, Mask::Causal)
}
