//! The three model families: a Transformer stack, an LSTM stack, and a
//! Transformer stack cascaded into an LSTM stack.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Family, InferenceMode, ModelConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    embed, lstm_forward, output_logits, transformer_layer, AttentionParams, EmbeddingTable,
    LayerNormParams, LstmLayerParams, PositionalEncoder, TransformerLayerParams,
};
use crate::tape::{Gradients, Mask, Tape, Var};
use crate::tensor::{log_softmax_row, Real, Tensor};

/// Precomputed positions; longer windows fall back to direct evaluation.
const POSITION_TABLE_LEN: usize = 1024;

/// Half-width of the uniform weight initialization.
pub const INIT_RANGE: f64 = 0.1;

/// All parameters of a model, generic over the leaf type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub embedding: EmbeddingTable<P>,
    pub transformer: Vec<TransformerLayerParams<P>>,
    pub lstm: Vec<LstmLayerParams<P>>,
    /// `output_dim × V`, present only when the output is untied.
    pub output: Option<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            embedding: self.embedding.map(&mut f),
            transformer: self.transformer.iter().map(|l| l.map(&mut f)).collect(),
            lstm: self.lstm.iter().map(|l| l.map(&mut f)).collect(),
            output: self.output.as_ref().map(&mut f),
        }
    }

    /// Visits every leaf with its dotted name, in checkpoint order.
    pub fn visit(&self, mut f: impl FnMut(String, &P)) {
        f("embedding.weight".into(), &self.embedding.weights);
        for (i, l) in self.transformer.iter().enumerate() {
            l.visit(&format!("transformer.{i}"), &mut f);
        }
        for (i, l) in self.lstm.iter().enumerate() {
            l.visit(&format!("lstm.{i}"), &mut f);
        }
        if let Some(p) = &self.output {
            f("output.weight".into(), p);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut P)) {
        f("embedding.weight".into(), &mut self.embedding.weights);
        for (i, l) in self.transformer.iter_mut().enumerate() {
            l.visit_mut(&format!("transformer.{i}"), &mut f);
        }
        for (i, l) in self.lstm.iter_mut().enumerate() {
            l.visit_mut(&format!("lstm.{i}"), &mut f);
        }
        if let Some(p) = &mut self.output {
            f("output.weight".into(), p);
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zeros,
    Ones,
    /// LSTM bias: forget-gate block set to one, the rest zero.
    ForgetBias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(shape: &[usize], init: Init) -> Self {
        Self {
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Shapes and initializers for every tensor a config implies, without
/// allocating any of them.
pub fn param_specs(cfg: &ModelConfig) -> Result<ModelParams<ParamSpec>> {
    cfg.validate()?;
    let (v, d, f, h) = (cfg.vocab_size, cfg.d, cfg.d_ff, cfg.lstm_hidden);
    let w = |s: &[usize]| ParamSpec::new(s, Init::Uniform);
    let zero = |n: usize| ParamSpec::new(&[n], Init::Zeros);
    let norm = || LayerNormParams {
        gain: ParamSpec::new(&[d], Init::Ones),
        bias: zero(d),
    };
    let transformer = (0..cfg.n_layers)
        .map(|_| TransformerLayerParams {
            attn: AttentionParams {
                w_q: w(&[d, d]),
                b_q: zero(d),
                w_k: w(&[d, d]),
                b_k: zero(d),
                w_v: w(&[d, d]),
                b_v: zero(d),
                w_o: w(&[d, d]),
                b_o: zero(d),
            },
            ln1: norm(),
            ff_in: w(&[d, f]),
            ff_in_bias: zero(f),
            ff_out: w(&[f, d]),
            ff_out_bias: zero(d),
            ln2: norm(),
        })
        .collect();
    let lstm = (0..cfg.m_layers)
        .map(|l| {
            let d_in = if l == 0 { d } else { h };
            LstmLayerParams {
                w_x: w(&[d_in, 4 * h]),
                w_h: w(&[h, 4 * h]),
                b: ParamSpec::new(&[4 * h], Init::ForgetBias),
            }
        })
        .collect();
    Ok(ModelParams {
        embedding: EmbeddingTable {
            weights: w(&[v, d]),
            tied_output: cfg.tied,
        },
        transformer,
        lstm,
        output: (!cfg.tied).then(|| w(&[cfg.output_dim(), v])),
    })
}

/// Recurrent state carried between consecutive windows of one stream:
/// `(h, c)` per LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<T: Real = f32> {
    config: ModelConfig,
    params: ModelParams<Tensor<T>>,
    positional: Option<PositionalEncoder>,
}

impl<T: Real> LanguageModel<T> {
    /// Uniform(-0.1, 0.1) weights from `config.seed`; norms start at unit
    /// gain, biases at zero except the LSTM forget gate (one).
    pub fn new(config: ModelConfig) -> Result<Self> {
        let specs = param_specs(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = specs.map(|s| {
            let n = s.numel();
            let data: Vec<T> = match s.init {
                Init::Uniform => (0..n)
                    .map(|_| T::of(rng.gen_range(-INIT_RANGE..INIT_RANGE)))
                    .collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::ForgetBias => {
                    let h = n / 4;
                    (0..n)
                        .map(|i| if (h..2 * h).contains(&i) { T::one() } else { T::zero() })
                        .collect()
                }
            };
            Tensor::new(&s.shape, data)
                .expect("spec shape")
                .with_requires_grad(true)
        });
        Ok(Self::assemble(config, params))
    }

    /// Every tensor zero, norm gains one. Produces uniform predictions.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let specs = param_specs(&config)?;
        let params = specs.map(|s| {
            let fill = if s.init == Init::Ones { T::one() } else { T::zero() };
            Tensor::full(&s.shape, fill).with_requires_grad(true)
        });
        Ok(Self::assemble(config, params))
    }

    /// Wraps explicit parameters after checking every shape against the
    /// config.
    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        let specs = param_specs(&config)?;
        let mut expected = Vec::new();
        specs.visit(|n, s| expected.push((n, s.shape.clone())));
        let mut found = Vec::new();
        params.visit(|n, t| found.push((n, t.shape().to_vec())));
        if expected != found || params.embedding.tied_output != config.tied {
            return Err(Error::Config(format!(
                "parameter layout does not match config: expected {expected:?}, found {found:?}"
            )));
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Self {
        let positional = config
            .use_pos
            .then(|| PositionalEncoder::new(config.d, POSITION_TABLE_LEN));
        Self {
            config,
            params,
            positional,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<Tensor<T>> {
        &mut self.params
    }

    /// Counts scalars by walking the allocated tensors.
    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.params.visit(|_, t| n += t.len());
        n
    }

    pub fn cast<U: Real>(&self) -> LanguageModel<U> {
        LanguageModel {
            config: self.config.clone(),
            params: self.params.map(|t| t.cast()),
            positional: self.positional.clone(),
        }
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.params.map(|t| tape.param(t))
    }

    /// Adds the gradients of the bound leaves into each tensor's buffer.
    pub fn accumulate_grads(&mut self, bound: &ModelParams<Var>, grads: &Gradients<T>) {
        let mut vars = Vec::new();
        bound.visit(|_, v| vars.push(*v));
        let mut i = 0;
        self.params.visit_mut(|_, t| {
            if let Some(g) = grads.get(vars[i]) {
                t.accumulate_grad(g);
            }
            i += 1;
        });
    }

    pub fn zero_grad(&mut self) {
        self.params.visit_mut(|_, t| t.zero_grad());
    }

    /// An all-zero recurrent state, or `None` for the Transformer family.
    pub fn initial_carry(&self) -> Option<Carry<T>> {
        (self.config.m_layers > 0).then(|| Carry {
            layers: (0..self.config.m_layers)
                .map(|_| {
                    let h = self.config.lstm_hidden;
                    (vec![T::zero(); h], vec![T::zero(); h])
                })
                .collect(),
        })
    }

    fn check_carry(&self, carry: &Carry<T>) -> Result<()> {
        if carry.layers.len() != self.config.m_layers {
            return Err(Error::State(format!(
                "carry has {} layers, model has {} recurrent layers",
                carry.layers.len(),
                self.config.m_layers
            )));
        }
        let h = self.config.lstm_hidden;
        if carry.layers.iter().any(|(a, b)| a.len() != h || b.len() != h) {
            return Err(Error::State(format!("carry width differs from {h}")));
        }
        Ok(())
    }

    /// Builds the forward graph for one window. Row `t` of the returned
    /// `T×V` logits predicts the token after `tokens[t]`.
    ///
    /// The Transformer stack sees only this window. The LSTM stack starts
    /// from `carry` (as constants, so no gradient crosses the window edge)
    /// and the returned carry is its final state.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        bound: &ModelParams<Var>,
        tokens: &[usize],
        carry: Option<&Carry<T>>,
    ) -> Result<(Var, Option<Carry<T>>)> {
        self.forward_on_masked(tape, bound, tokens, carry, Mask::Causal)
    }

    pub(crate) fn forward_on_masked(
        &self,
        tape: &mut Tape<T>,
        bound: &ModelParams<Var>,
        tokens: &[usize],
        carry: Option<&Carry<T>>,
        mask: Mask,
    ) -> Result<(Var, Option<Carry<T>>)> {
        if tokens.is_empty() {
            return Err(Error::Data("forward on an empty window".into()));
        }
        if let Some(c) = carry {
            if self.config.m_layers == 0 && !c.layers.is_empty() {
                return Err(Error::State(
                    "transformer family carries no recurrent state".into(),
                ));
            }
            self.check_carry(c)?;
        }
        let z = self.encode(tape, bound, tokens, mask)?;
        self.recur_and_project(tape, bound, z, carry)
    }

    /// Embedding plus the Transformer stack.
    fn encode(
        &self,
        tape: &mut Tape<T>,
        bound: &ModelParams<Var>,
        tokens: &[usize],
        mask: Mask,
    ) -> Result<Var> {
        let cfg = &self.config;
        let scale = if cfg.scale_embed {
            T::of((cfg.d as f64).sqrt())
        } else {
            T::one()
        };
        let mut z = embed(
            tape,
            &bound.embedding,
            tokens,
            self.positional.as_ref(),
            scale,
        )?;
        for layer in &bound.transformer {
            z = transformer_layer(tape, z, layer, cfg.heads, mask)?;
        }
        Ok(z)
    }

    /// LSTM stack (if any) from `carry`, then the output projection.
    fn recur_and_project(
        &self,
        tape: &mut Tape<T>,
        bound: &ModelParams<Var>,
        mut z: Var,
        carry: Option<&Carry<T>>,
    ) -> Result<(Var, Option<Carry<T>>)> {
        let mut new_carry = Vec::with_capacity(bound.lstm.len());
        for (l, layer) in bound.lstm.iter().enumerate() {
            let state0 = match carry {
                Some(c) => {
                    let (h, cell) = &c.layers[l];
                    let w = h.len();
                    Some((
                        tape.constant(&[1, w], h.clone())?,
                        tape.constant(&[1, w], cell.clone())?,
                    ))
                }
                None => None,
            };
            let (out, (h, c)) = lstm_forward(tape, z, layer, state0)?;
            new_carry.push((tape.value(h).to_vec(), tape.value(c).to_vec()));
            z = out;
        }
        let logits = output_logits(tape, z, &bound.embedding, bound.output)?;
        let carry = (self.config.m_layers > 0).then_some(Carry { layers: new_carry });
        Ok((logits, carry))
    }

    /// Next-token logits after `context`, for step-by-step decoding.
    ///
    /// The Transformer stack reads the whole context; only its final row
    /// enters the LSTM stack, which advances one step from `carry`. For the
    /// Transformer family this is the last row of [`forward`](Self::forward).
    pub fn forward_last(
        &self,
        context: &[usize],
        carry: Option<&Carry<T>>,
    ) -> Result<(Vec<T>, Option<Carry<T>>)> {
        if context.is_empty() {
            return Err(Error::Data("forward on an empty window".into()));
        }
        if let Some(c) = carry {
            self.check_carry(c)?;
        }
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let z = self.encode(&mut tape, &bound, context, Mask::Causal)?;
        let rows = context.len();
        let z = tape.slice_rows(z, rows - 1, 1)?;
        let (logits, carry) = self.recur_and_project(&mut tape, &bound, z, carry)?;
        Ok((tape.value(logits).to_vec(), carry))
    }

    /// Logits for one window on a throwaway tape.
    pub fn forward(
        &self,
        tokens: &[usize],
        carry: Option<&Carry<T>>,
    ) -> Result<(Tensor<T>, Option<Carry<T>>)> {
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let (logits, carry) = self.forward_on(&mut tape, &bound, tokens, carry)?;
        Ok((tape.tensor(logits), carry))
    }

    /// Parameters as non-differentiable leaves, for inference.
    pub fn bind_constant(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.params
            .map(|t| tape.constant(t.shape(), t.data().to_vec()).expect("valid shape"))
    }

    /// Mean cross-entropy over every position: inputs `tokens[..T]`,
    /// targets `tokens[1..]`.
    pub fn loss_all_positions(&self, tokens: &[usize]) -> Result<T> {
        if tokens.len() < 2 {
            return Err(Error::Data(
                "loss needs at least one input and one target token".into(),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.bind_constant(&mut tape);
        let (logits, _) = self.forward_on(&mut tape, &bound, &tokens[..tokens.len() - 1], None)?;
        let loss = tape.cross_entropy(logits, &tokens[1..])?;
        Ok(tape.value(loss)[0])
    }

    /// `-log P(next | context)` read from the last row only.
    pub fn nll_final_position(
        &self,
        context: &[usize],
        next: usize,
        carry: Option<&Carry<T>>,
    ) -> Result<f64> {
        if next >= self.config.vocab_size {
            return Err(Error::Index {
                index: next,
                limit: self.config.vocab_size,
            });
        }
        let (logits, _) = self.forward(context, carry)?;
        let last = logits.row(logits.rows() - 1);
        Ok(-log_softmax_row(last)[next])
    }
}
