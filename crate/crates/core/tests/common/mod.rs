//! Brute-force 64-bit reference implementations used by the integration
//! tests. Each is written as plainly as possible, loop by loop.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfrn_core::layers::{AttentionParams, LayerNormParams, LstmLayerParams, TransformerLayerParams};
use tfrn_core::{Family, LanguageModel, ModelConfig, Tape, Tensor, Var};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.gen_range(-scale..scale)).collect())
        .collect()
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

pub fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(v.to_vec())
}

pub fn from_tensor(t: &[f64], cols: usize) -> Mat {
    t.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn add_row(m: &Mat, b: &[f64]) -> Mat {
    m.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * gain[j] + bias[j])
        .collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub struct AttnWeights {
    pub w_q: Mat,
    pub b_q: Vec<f64>,
    pub w_k: Mat,
    pub b_k: Vec<f64>,
    pub w_v: Mat,
    pub b_v: Vec<f64>,
    pub w_o: Mat,
    pub b_o: Vec<f64>,
}

impl AttnWeights {
    pub fn random(r: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            w_q: rand_mat(r, d, d, 0.5),
            b_q: rand_vec(r, d, 0.5),
            w_k: rand_mat(r, d, d, 0.5),
            b_k: rand_vec(r, d, 0.5),
            w_v: rand_mat(r, d, d, 0.5),
            b_v: rand_vec(r, d, 0.5),
            w_o: rand_mat(r, d, d, 0.5),
            b_o: rand_vec(r, d, 0.5),
        }
    }

    pub fn bind(&self, tape: &mut Tape<f64>) -> AttentionParams<Var> {
        AttentionParams {
            w_q: tape.param(&to_tensor(&self.w_q)),
            b_q: tape.param(&vec_tensor(&self.b_q)),
            w_k: tape.param(&to_tensor(&self.w_k)),
            b_k: tape.param(&vec_tensor(&self.b_k)),
            w_v: tape.param(&to_tensor(&self.w_v)),
            b_v: tape.param(&vec_tensor(&self.b_v)),
            w_o: tape.param(&to_tensor(&self.w_o)),
            b_o: tape.param(&vec_tensor(&self.b_o)),
        }
    }
}

/// Causal multi-head attention one query position at a time.
pub fn attention(z: &Mat, w: &AttnWeights, heads: usize) -> Mat {
    let d = z[0].len();
    let dh = d / heads;
    let q = add_row(&matmul(z, &w.w_q), &w.b_q);
    let k = add_row(&matmul(z, &w.w_k), &w.b_k);
    let v = add_row(&matmul(z, &w.w_v), &w.b_v);
    let mut joined = vec![vec![0.0; d]; z.len()];
    for t in 0..z.len() {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..=t)
                .map(|i| {
                    cols.clone().map(|c| q[t][c] * k[i][c]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in cols.clone() {
                joined[t][c] = (0..=t).map(|i| e[i] / total * v[i][c]).sum();
            }
        }
    }
    add_row(&matmul(&joined, &w.w_o), &w.b_o)
}

pub struct LayerWeights {
    pub attn: AttnWeights,
    pub ln1: (Vec<f64>, Vec<f64>),
    pub w_in: Mat,
    pub b_in: Vec<f64>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
    pub ln2: (Vec<f64>, Vec<f64>),
}

impl LayerWeights {
    pub fn random(r: &mut ChaCha8Rng, d: usize, d_ff: usize) -> Self {
        let attn = AttnWeights::random(r, d);
        let ln1 = (
            (0..d).map(|_| r.gen_range(0.5..1.5)).collect(),
            rand_vec(r, d, 0.5),
        );
        let w_in = rand_mat(r, d, d_ff, 0.5);
        let b_in = rand_vec(r, d_ff, 0.5);
        let w_out = rand_mat(r, d_ff, d, 0.5);
        let b_out = rand_vec(r, d, 0.5);
        let ln2 = (
            (0..d).map(|_| r.gen_range(0.5..1.5)).collect(),
            rand_vec(r, d, 0.5),
        );
        Self {
            attn,
            ln1,
            w_in,
            b_in,
            w_out,
            b_out,
            ln2,
        }
    }

    pub fn bind(&self, tape: &mut Tape<f64>) -> TransformerLayerParams<Var> {
        TransformerLayerParams {
            attn: self.attn.bind(tape),
            ln1: LayerNormParams {
                gain: tape.param(&vec_tensor(&self.ln1.0)),
                bias: tape.param(&vec_tensor(&self.ln1.1)),
            },
            ff_in: tape.param(&to_tensor(&self.w_in)),
            ff_in_bias: tape.param(&vec_tensor(&self.b_in)),
            ff_out: tape.param(&to_tensor(&self.w_out)),
            ff_out_bias: tape.param(&vec_tensor(&self.b_out)),
            ln2: LayerNormParams {
                gain: tape.param(&vec_tensor(&self.ln2.0)),
                bias: tape.param(&vec_tensor(&self.ln2.1)),
            },
        }
    }
}

/// Post-norm layer composed in straight-line form.
pub fn transformer_layer(z: &Mat, w: &LayerWeights, heads: usize) -> Mat {
    let a = attention(z, &w.attn, heads);
    let mut out = Vec::with_capacity(z.len());
    for t in 0..z.len() {
        let res: Vec<f64> = (0..z[t].len()).map(|j| a[t][j] + z[t][j]).collect();
        let x = layer_norm_row(&res, &w.ln1.0, &w.ln1.1);
        let hidden: Vec<f64> = (0..w.b_in.len())
            .map(|f| {
                let s: f64 = (0..x.len()).map(|j| x[j] * w.w_in[j][f]).sum::<f64>() + w.b_in[f];
                s.max(0.0)
            })
            .collect();
        let y: Vec<f64> = (0..x.len())
            .map(|j| {
                x[j] + (0..hidden.len()).map(|f| hidden[f] * w.w_out[f][j]).sum::<f64>()
                    + w.b_out[j]
            })
            .collect();
        out.push(layer_norm_row(&y, &w.ln2.0, &w.ln2.1));
    }
    out
}

pub struct LstmWeights {
    pub w_x: Mat,
    pub w_h: Mat,
    pub b: Vec<f64>,
}

impl LstmWeights {
    pub fn random(r: &mut ChaCha8Rng, d_in: usize, h: usize) -> Self {
        Self {
            w_x: rand_mat(r, d_in, 4 * h, 0.5),
            w_h: rand_mat(r, h, 4 * h, 0.5),
            b: rand_vec(r, 4 * h, 0.5),
        }
    }

    pub fn bind(&self, tape: &mut Tape<f64>) -> LstmLayerParams<Var> {
        LstmLayerParams {
            w_x: tape.param(&to_tensor(&self.w_x)),
            w_h: tape.param(&to_tensor(&self.w_h)),
            b: tape.param(&vec_tensor(&self.b)),
        }
    }
}

/// Scalar-loop LSTM, gates in order input, forget, cell, output. Returns
/// the hidden rows and the final `(h, c)`.
pub fn lstm(x: &Mat, w: &LstmWeights, h0: &[f64], c0: &[f64]) -> (Mat, Vec<f64>, Vec<f64>) {
    let hsz = h0.len();
    let (mut h, mut c) = (h0.to_vec(), c0.to_vec());
    let mut out = Vec::with_capacity(x.len());
    for row in x {
        let pre = |g: usize, j: usize| {
            let col = g * hsz + j;
            let mut s = w.b[col];
            for (i, xv) in row.iter().enumerate() {
                s += xv * w.w_x[i][col];
            }
            for (i, hv) in h.iter().enumerate() {
                s += hv * w.w_h[i][col];
            }
            s
        };
        let mut nh = vec![0.0; hsz];
        let mut nc = vec![0.0; hsz];
        for j in 0..hsz {
            let i_g = sigmoid(pre(0, j));
            let f_g = sigmoid(pre(1, j));
            let g_g = pre(2, j).tanh();
            let o_g = sigmoid(pre(3, j));
            nc[j] = f_g * c[j] + i_g * g_g;
            nh[j] = o_g * nc[j].tanh();
        }
        h = nh;
        c = nc;
        out.push(h.clone());
    }
    (out, h, c)
}

/// Every `(edits, insertions + deletions)` pair reachable by some
/// alignment, minimized lexicographically by exhaustive recursion.
pub fn best_alignment(r: &[&str], h: &[&str]) -> (usize, usize) {
    fn go(r: &[&str], h: &[&str]) -> (usize, usize) {
        match (r.split_first(), h.split_first()) {
            (None, None) => (0, 0),
            (Some(_), None) => (r.len(), r.len()),
            (None, Some(_)) => (h.len(), h.len()),
            (Some((a, rr)), Some((b, hh))) => {
                let mut options = Vec::new();
                let (e, i) = go(rr, hh);
                options.push((e + usize::from(a != b), i));
                let (e, i) = go(rr, h);
                options.push((e + 1, i + 1));
                let (e, i) = go(r, hh);
                options.push((e + 1, i + 1));
                options.into_iter().min().unwrap()
            }
        }
    }
    go(r, h)
}

/// All sequences of length `0..=max_len` over `alphabet`.
pub fn all_sequences<'a>(alphabet: &[&'a str], max_len: usize) -> Vec<Vec<&'a str>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<&str>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in alphabet {
                let mut t = s.clone();
                t.push(*a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// A randomly initialized small model in 64-bit.
pub fn small_model(family: Family, vocab: usize, d: usize, seed: u64) -> LanguageModel<f64> {
    let mut c = ModelConfig::for_family(family, vocab, d, 1, 1);
    if family == Family::Transformer {
        c.n_layers = 2;
    }
    c.heads = 2;
    c.d_ff = 2 * d;
    c.seed = seed;
    let mut m = LanguageModel::<f64>::new(c).unwrap();
    // Larger weights than the default init so predictions are far from
    // uniform and oracle mismatches are visible.
    let mut r = rng(seed ^ 0xabcdef);
    m.params_mut().visit_mut(|_, t| {
        for x in t.data_mut() {
            *x += r.gen_range(-0.3..0.3);
        }
    });
    m
}

/// `-log P(ids[t] | context)` from the last row of a fresh forward pass.
pub fn nll_last(model: &LanguageModel<f64>, context: &[usize], target: usize) -> f64 {
    let (logits, _) = model.forward(context, None).unwrap();
    -log_softmax(logits.row(logits.rows() - 1))[target]
}

fn mat_of(t: &Tensor<f64>) -> Mat {
    from_tensor(t.data(), t.cols())
}

/// Weights of a model copied out into plain matrices.
pub struct ModelWeights {
    pub embedding: Mat,
    pub tied: bool,
    pub scale: f64,
    pub use_pos: bool,
    pub heads: usize,
    pub layers: Vec<LayerWeights>,
    pub lstm: Vec<LstmWeights>,
    pub output: Option<Mat>,
}

impl ModelWeights {
    pub fn of(model: &LanguageModel<f64>) -> Self {
        let p = model.params();
        let c = model.config();
        let layers = p
            .transformer
            .iter()
            .map(|l| LayerWeights {
                attn: AttnWeights {
                    w_q: mat_of(&l.attn.w_q),
                    b_q: l.attn.b_q.data().to_vec(),
                    w_k: mat_of(&l.attn.w_k),
                    b_k: l.attn.b_k.data().to_vec(),
                    w_v: mat_of(&l.attn.w_v),
                    b_v: l.attn.b_v.data().to_vec(),
                    w_o: mat_of(&l.attn.w_o),
                    b_o: l.attn.b_o.data().to_vec(),
                },
                ln1: (l.ln1.gain.data().to_vec(), l.ln1.bias.data().to_vec()),
                w_in: mat_of(&l.ff_in),
                b_in: l.ff_in_bias.data().to_vec(),
                w_out: mat_of(&l.ff_out),
                b_out: l.ff_out_bias.data().to_vec(),
                ln2: (l.ln2.gain.data().to_vec(), l.ln2.bias.data().to_vec()),
            })
            .collect();
        let lstm = p
            .lstm
            .iter()
            .map(|l| LstmWeights {
                w_x: mat_of(&l.w_x),
                w_h: mat_of(&l.w_h),
                b: l.b.data().to_vec(),
            })
            .collect();
        Self {
            embedding: mat_of(&p.embedding.weights),
            tied: p.embedding.tied_output,
            scale: if c.scale_embed { (c.d as f64).sqrt() } else { 1.0 },
            use_pos: c.use_pos,
            heads: c.heads,
            layers,
            lstm,
            output: p.output.as_ref().map(mat_of),
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.first().map_or(0, |l| l.w_h.len())
    }

    pub fn zero_state(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.lstm
            .iter()
            .map(|l| (vec![0.0; l.w_h.len()], vec![0.0; l.w_h.len()]))
            .collect()
    }

    /// Embedding plus the Transformer stack over `tokens`.
    pub fn encode(&self, tokens: &[usize]) -> Mat {
        let d = self.embedding[0].len();
        let mut z: Mat = tokens
            .iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|j| {
                        let pe = if self.use_pos {
                            let angle =
                                pos as f64 / 10000f64.powf((j / 2 * 2) as f64 / d as f64);
                            if j % 2 == 0 {
                                angle.sin()
                            } else {
                                angle.cos()
                            }
                        } else {
                            0.0
                        };
                        self.scale * self.embedding[id][j] + pe
                    })
                    .collect()
            })
            .collect();
        for layer in &self.layers {
            z = transformer_layer(&z, layer, self.heads);
        }
        z
    }

    /// LSTM stack from `state` (updated in place) and the output projection.
    pub fn recur_and_project(&self, z: Mat, state: &mut [(Vec<f64>, Vec<f64>)]) -> Mat {
        let mut z = z;
        for (l, w) in self.lstm.iter().enumerate() {
            let (out, h, c) = lstm(&z, w, &state[l].0, &state[l].1);
            state[l] = (h, c);
            z = out;
        }
        z.iter()
            .map(|row| match &self.output {
                Some(o) => (0..o[0].len())
                    .map(|v| (0..row.len()).map(|j| row[j] * o[j][v]).sum())
                    .collect(),
                None => self
                    .embedding
                    .iter()
                    .map(|e| (0..row.len()).map(|j| row[j] * e[j]).sum())
                    .collect(),
            })
            .collect()
    }

    pub fn logits(&self, tokens: &[usize], state: &mut [(Vec<f64>, Vec<f64>)]) -> Mat {
        self.recur_and_project(self.encode(tokens), state)
    }

    /// Summed NLL scoring every position of consecutive windows.
    pub fn nll_all(&self, ids: &[usize], window: usize) -> f64 {
        let mut state = self.zero_state();
        let mut nll = 0.0;
        let mut pos = 0;
        while pos + 1 < ids.len() {
            let end = (pos + window).min(ids.len() - 1);
            let logits = self.logits(&ids[pos..end], &mut state);
            for (r, t) in (pos + 1..=end).enumerate() {
                nll -= log_softmax(&logits[r])[ids[t]];
            }
            pos = end;
        }
        nll
    }

    /// Summed NLL scoring only the last position of a sliding window; the
    /// LSTM stack sees one Transformer row per token.
    pub fn nll_final(&self, ids: &[usize], window: usize) -> f64 {
        let mut state = self.zero_state();
        let mut nll = 0.0;
        for t in 1..ids.len() {
            let z = self.encode(&ids[t.saturating_sub(window)..t]);
            let last = vec![z[z.len() - 1].clone()];
            let logits = self.recur_and_project(last, &mut state);
            nll -= log_softmax(&logits[0])[ids[t]];
        }
        nll
    }
}
