use crate::error::Result;
use crate::layers::attention::{self_attention, AttentionParams};
use crate::tape::{Mask, Tape, Var};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gain: P,
    pub bias: P,
}

impl<P> LayerNormParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LayerNormParams<Q> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

/// One post-norm Transformer block: attention sublayer then a two-matrix
/// feed-forward sublayer (`d → d_ff → d`), each wrapped in a residual and
/// a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayerParams<P> {
    pub attn: AttentionParams<P>,
    pub ln1: LayerNormParams<P>,
    pub ff_in: P,
    pub ff_in_bias: P,
    pub ff_out: P,
    pub ff_out_bias: P,
    pub ln2: LayerNormParams<P>,
}

impl<P> TransformerLayerParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> TransformerLayerParams<Q> {
        TransformerLayerParams {
            attn: self.attn.map(f),
            ln1: self.ln1.map(f),
            ff_in: f(&self.ff_in),
            ff_in_bias: f(&self.ff_in_bias),
            ff_out: f(&self.ff_out),
            ff_out_bias: f(&self.ff_out_bias),
            ln2: self.ln2.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &P)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln1.gain"), &self.ln1.gain);
        f(format!("{prefix}.ln1.bias"), &self.ln1.bias);
        f(format!("{prefix}.ff.w_in"), &self.ff_in);
        f(format!("{prefix}.ff.b_in"), &self.ff_in_bias);
        f(format!("{prefix}.ff.w_out"), &self.ff_out);
        f(format!("{prefix}.ff.b_out"), &self.ff_out_bias);
        f(format!("{prefix}.ln2.gain"), &self.ln2.gain);
        f(format!("{prefix}.ln2.bias"), &self.ln2.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ln1.gain"), &mut self.ln1.gain);
        f(format!("{prefix}.ln1.bias"), &mut self.ln1.bias);
        f(format!("{prefix}.ff.w_in"), &mut self.ff_in);
        f(format!("{prefix}.ff.b_in"), &mut self.ff_in_bias);
        f(format!("{prefix}.ff.w_out"), &mut self.ff_out);
        f(format!("{prefix}.ff.b_out"), &mut self.ff_out_bias);
        f(format!("{prefix}.ln2.gain"), &mut self.ln2.gain);
        f(format!("{prefix}.ln2.bias"), &mut self.ln2.bias);
    }
}

/// `x = LN(attn(z) + z)`, `y = x + W_out·ReLU(W_in·x)`, output `LN(y)`.
pub fn transformer_layer<T: Real>(
    tape: &mut Tape<T>,
    z_prev: Var,
    p: &TransformerLayerParams<Var>,
    heads: usize,
    mask: Mask,
) -> Result<Var> {
    let attn = self_attention(tape, z_prev, &p.attn, heads, mask)?;
    let res = tape.add(attn, z_prev)?;
    let x = tape.layer_norm(res, p.ln1.gain, p.ln1.bias)?;

    let hidden = tape.matmul(x, p.ff_in)?;
    let hidden = tape.add_bias(hidden, p.ff_in_bias)?;
    let hidden = tape.relu(hidden);
    let ff = tape.matmul(hidden, p.ff_out)?;
    let ff = tape.add_bias(ff, p.ff_out_bias)?;
    let y = tape.add(x, ff)?;
    tape.layer_norm(y, p.ln2.gain, p.ln2.bias)
}
