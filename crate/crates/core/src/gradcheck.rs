//! Central-difference gradient oracle and a whole-model gradient check.

use crate::error::Result;
use crate::model::LanguageModel;
use crate::tape::{OpKind, Tape};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Largest accepted elementwise relative error.
pub const GRAD_TOLERANCE: f64 = 1e-3;

/// Estimates `∂f/∂x_i` as `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate, in 64-bit.
pub fn finite_difference_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), out).expect("same shape as x")
}

/// `|a - b| / max(1e-4, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

/// Smallest step tried when a probe straddles a ReLU kink.
pub const MIN_STEP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    /// Coordinates whose `±step` probe crossed a ReLU kink and were
    /// re-probed with a smaller step.
    pub reprobed: usize,
    /// Coordinates sitting on a kink even at [`MIN_STEP`]; not compared.
    pub skipped: usize,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Deliberately break one backward rule (harness self-test).
    pub corrupt: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            corrupt: None,
        }
    }
}

/// Compares the tape's gradient of the all-positions loss on `tokens`
/// against central differences, tensor by tensor.
///
/// A central difference only estimates the derivative when the loss is
/// smooth on `[x - h, x + h]`. Where a probe changes the sign of any ReLU
/// input, the step is divided by ten until it no longer does.
pub fn check_model_gradients(
    model: &LanguageModel<f64>,
    tokens: &[usize],
    opts: GradCheckOptions,
) -> Result<Vec<TensorCheck>> {
    assert!(opts.step > 0.0, "finite-difference step must be positive");
    let analytic = analytic_grads(model, tokens, opts.corrupt)?;
    let (_, base_pattern) = loss_and_pattern(model, tokens)?;

    let mut tensors = Vec::new();
    model.params().visit(|n, t| tensors.push((n, t.clone())));

    let mut probe = model.clone();
    let mut report = Vec::with_capacity(tensors.len());
    for (idx, (name, tensor)) in tensors.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            numel: tensor.len(),
            max_rel_err: 0.0,
            reprobed: 0,
            skipped: 0,
        };
        let mut x = tensor.clone();
        for i in 0..x.len() {
            let orig = x.data()[i];
            let mut h = opts.step;
            let numeric = loop {
                x.data_mut()[i] = orig + h;
                set_tensor(&mut probe, idx, &x);
                let (up, p_up) = loss_and_pattern(&probe, tokens)?;
                x.data_mut()[i] = orig - h;
                set_tensor(&mut probe, idx, &x);
                let (down, p_down) = loss_and_pattern(&probe, tokens)?;
                if p_up == base_pattern && p_down == base_pattern {
                    break Some((up - down) / (2.0 * h));
                }
                if h == opts.step {
                    check.reprobed += 1;
                }
                h /= 10.0;
                if h < MIN_STEP {
                    break None;
                }
            };
            x.data_mut()[i] = orig;
            match numeric {
                Some(n) => {
                    check.max_rel_err = check.max_rel_err.max(relative_error(analytic[idx][i], n))
                }
                None => check.skipped += 1,
            }
        }
        set_tensor(&mut probe, idx, tensor);
        report.push(check);
    }
    Ok(report)
}

fn loss_and_pattern(model: &LanguageModel<f64>, tokens: &[usize]) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let bound = model.bind_constant(&mut tape);
    let (logits, _) = model.forward_on(&mut tape, &bound, &tokens[..tokens.len() - 1], None)?;
    let loss = tape.cross_entropy(logits, &tokens[1..])?;
    Ok((tape.value(loss)[0], tape.relu_pattern()))
}

/// Gradient of the all-positions loss for every parameter, in visit order.
pub fn analytic_grads(
    model: &LanguageModel<f64>,
    tokens: &[usize],
    corrupt: Option<OpKind>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    if let Some(kind) = corrupt {
        tape.corrupt_rule(kind, 1.5);
    }
    let bound = model.bind(&mut tape);
    let (logits, _) = model.forward_on(&mut tape, &bound, &tokens[..tokens.len() - 1], None)?;
    let loss = tape.cross_entropy(logits, &tokens[1..])?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    bound.visit(|_, v| out.push(*v));
    let mut sizes = Vec::new();
    model.params().visit(|_, t| sizes.push(t.len()));
    Ok(out
        .into_iter()
        .zip(sizes)
        .map(|(v, n)| grads.get(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
        .collect())
}

fn set_tensor(model: &mut LanguageModel<f64>, idx: usize, value: &Tensor<f64>) {
    let mut i = 0;
    model.params_mut().visit_mut(|_, t| {
        if i == idx {
            t.data_mut().copy_from_slice(value.data());
        }
        i += 1;
    });
}
