use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// LSTM weights with gates packed in the order input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams<P> {
    /// `d_in × 4h`
    pub w_x: P,
    /// `h × 4h`
    pub w_h: P,
    /// `4h`
    pub b: P,
}

impl<P> LstmLayerParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LstmLayerParams<Q> {
        LstmLayerParams {
            w_x: f(&self.w_x),
            w_h: f(&self.w_h),
            b: f(&self.b),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &P)) {
        f(format!("{prefix}.w_x"), &self.w_x);
        f(format!("{prefix}.w_h"), &self.w_h);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.w_x"), &mut self.w_x);
        f(format!("{prefix}.w_h"), &mut self.w_h);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Runs the recurrence over the rows of `x` (`T×d_in`).
///
/// `state0` is `(h0, c0)`, each `1×h`; zeros when absent. Returns all hidden
/// rows (`T×h`) and the final `(h, c)`.
pub fn lstm_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LstmLayerParams<Var>,
    state0: Option<(Var, Var)>,
) -> Result<(Var, (Var, Var))> {
    let steps = tape.shape(x)[0];
    let four_h = tape.shape(p.w_h)[1];
    let h = four_h / 4;
    if tape.shape(p.w_h) != [h, four_h] || four_h % 4 != 0 {
        return Err(Error::Shape {
            op: "lstm_forward",
            left: tape.shape(p.w_h).to_vec(),
            right: vec![h, 4 * h],
        });
    }
    let (mut h_prev, mut c_prev) = match state0 {
        Some((h0, c0)) => {
            for s in [h0, c0] {
                if tape.shape(s) != [1, h] {
                    return Err(Error::State(format!(
                        "initial state shape {:?}, expected [1, {h}]",
                        tape.shape(s)
                    )));
                }
            }
            (h0, c0)
        }
        None => (
            tape.constant(&[1, h], vec![T::zero(); h])?,
            tape.constant(&[1, h], vec![T::zero(); h])?,
        ),
    };

    let xw = tape.matmul(x, p.w_x)?;
    let xw = tape.add_bias(xw, p.b)?;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = tape.slice_rows(xw, t, 1)?;
        let hw = tape.matmul(h_prev, p.w_h)?;
        let pre = tape.add(xt, hw)?;
        let i = tape.slice_cols(pre, 0, h)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(pre, h, h)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(pre, 2 * h, h)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(pre, 3 * h, h)?;
        let o = tape.sigmoid(o);

        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        let h_t = tape.mul(o, squashed)?;
        outputs.push(h_t);
        h_prev = h_t;
        c_prev = c;
    }
    let all = tape.concat_rows(&outputs)?;
    Ok((all, (h_prev, c_prev)))
}
