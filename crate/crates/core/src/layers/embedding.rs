use crate::error::{Error, Result};
use crate::layers::PositionalEncoder;
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Token embedding matrix (`V×d`). When `tied_output` is set the same
/// matrix, transposed, produces the output logits.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<P> {
    pub weights: P,
    pub tied_output: bool,
}

impl<P> EmbeddingTable<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> EmbeddingTable<Q> {
        EmbeddingTable {
            weights: f(&self.weights),
            tied_output: self.tied_output,
        }
    }
}

/// Row `t` is `scale · weights[tokens[t]]` plus the position-`t` encoding
/// when an encoder is supplied.
pub fn embed<T: Real>(
    tape: &mut Tape<T>,
    table: &EmbeddingTable<Var>,
    tokens: &[usize],
    positional: Option<&PositionalEncoder>,
    scale: T,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Data("embedding an empty token sequence".into()));
    }
    let rows = tape.gather(table.weights, tokens)?;
    let mut out = if scale == T::one() {
        rows
    } else {
        tape.scale(rows, scale)
    };
    if let Some(pe) = positional {
        let d = tape.shape(out)[1];
        if pe.dim() != d {
            return Err(Error::Shape {
                op: "embed",
                left: vec![tokens.len(), d],
                right: vec![pe.dim()],
            });
        }
        let enc = pe.rows(tokens.len()).into_iter().map(T::of).collect();
        let enc = tape.constant(&[tokens.len(), d], enc)?;
        out = tape.add(out, enc)?;
    }
    Ok(out)
}

/// Projects hidden rows to vocabulary logits, either through the tied
/// embedding (`O · Wᵀ`) or through a separate `d×V` matrix.
pub fn output_logits<T: Real>(
    tape: &mut Tape<T>,
    hidden: Var,
    table: &EmbeddingTable<Var>,
    untied_proj: Option<Var>,
) -> Result<Var> {
    match (table.tied_output, untied_proj) {
        (true, None) => tape.matmul_bt(hidden, table.weights),
        (false, Some(p)) => tape.matmul(hidden, p),
        (true, Some(_)) => Err(Error::Config(
            "tied embedding and an untied projection are both configured".into(),
        )),
        (false, None) => Err(Error::Config("no output projection configured".into())),
    }
}
