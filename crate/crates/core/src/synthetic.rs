//! Generated corpora and hand-wired models for tests and demos.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Vocabulary, BOS_ID, EOS_ID};
use crate::error::Result;
use crate::eval::{sentence_logprob, Hypothesis, NBestList};
use crate::model::{Family, LanguageModel, ModelConfig};
use crate::tensor::Tensor;

/// A third-order Markov source over `symbols` words named `w0`, `w1`, ….
///
/// Each word has a fixed set of `branching` possible successors. The two
/// words before it pick which successor is favoured, so a model that
/// conditions on more history predicts better.
#[derive(Clone, Debug)]
pub struct MarkovGrammar {
    successors: Vec<Vec<usize>>,
    favoured: f64,
}

impl MarkovGrammar {
    pub fn new(symbols: usize, branching: usize, seed: u64) -> Self {
        assert!(branching >= 1 && branching <= symbols);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successors = (0..symbols)
            .map(|_| {
                let mut s = Vec::with_capacity(branching);
                while s.len() < branching {
                    let c = rng.gen_range(0..symbols);
                    if !s.contains(&c) {
                        s.push(c);
                    }
                }
                s
            })
            .collect();
        Self {
            successors,
            favoured: 0.7,
        }
    }

    /// Probability mass of the favoured successor, in `(0, 1]`.
    pub fn with_favoured(mut self, p: f64) -> Self {
        assert!(p > 0.0 && p <= 1.0);
        self.favoured = p;
        self
    }

    pub fn symbols(&self) -> usize {
        self.successors.len()
    }

    pub fn word(i: usize) -> String {
        format!("w{i}")
    }

    fn favoured_slot(&self, a: usize, b: usize, c: usize) -> usize {
        let h = a.wrapping_mul(73_856_093) ^ b.wrapping_mul(19_349_663) ^ c.wrapping_mul(83_492_791);
        h % self.successors[c].len()
    }

    /// `P(next | a, b, c)`.
    pub fn prob(&self, a: usize, b: usize, c: usize, next: usize) -> f64 {
        let succ = &self.successors[c];
        let Some(slot) = succ.iter().position(|&s| s == next) else {
            return 0.0;
        };
        if succ.len() == 1 {
            return 1.0;
        }
        if slot == self.favoured_slot(a, b, c) {
            self.favoured
        } else {
            (1.0 - self.favoured) / (succ.len() - 1) as f64
        }
    }

    /// A stream of `len` symbol indices.
    pub fn sample(&self, len: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.symbols();
        let mut out: Vec<usize> = (0..3.min(len)).map(|_| rng.gen_range(0..n)).collect();
        while out.len() < len {
            let k = out.len();
            let (a, b, c) = (out[k - 3], out[k - 2], out[k - 1]);
            let succ = &self.successors[c];
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = *succ.last().expect("non-empty");
            for &s in succ {
                acc += self.prob(a, b, c, s);
                if u < acc {
                    pick = s;
                    break;
                }
            }
            out.push(pick);
        }
        out
    }

    /// The stream as text, `per_line` words to a line.
    pub fn text(&self, len: usize, per_line: usize, seed: u64) -> String {
        let mut s = String::new();
        for (i, w) in self.sample(len, seed).into_iter().enumerate() {
            s.push_str(&Self::word(w));
            s.push(if (i + 1) % per_line == 0 { '\n' } else { ' ' });
        }
        if !s.ends_with('\n') {
            s.push('\n');
        }
        s
    }

    /// Exact per-token perplexity of `stream` under the source, skipping the
    /// first three tokens.
    pub fn oracle_perplexity(&self, stream: &[usize]) -> f64 {
        let nll: f64 = stream
            .windows(4)
            .map(|w| -self.prob(w[0], w[1], w[2], w[3]).ln())
            .sum();
        (nll / (stream.len() - 3) as f64).exp()
    }
}

const GATE_OPEN: f32 = 10.0;
const CELL_GAIN: f32 = 3.0;
const BIGRAM_LOGIT: f32 = 20.0;

/// A one-layer LSTM that scores each bigram seen in `sentences` (with
/// `<bos>`/`<eos>` boundaries) far above any unseen one.
///
/// Embeddings are one-hot, the forget gate is shut and the input and output
/// gates are wide open, so the hidden state is a scaled copy of the current
/// token. The untied output matrix then reads off which successors were
/// observed.
pub fn bigram_memorizer(
    vocab: &Vocabulary,
    sentences: &[Vec<String>],
) -> Result<LanguageModel<f32>> {
    let v = vocab.len();
    let mut cfg = ModelConfig::for_family(Family::Lstm, v, v, 0, 1);
    cfg.lstm_hidden = v;
    cfg.tied = false;
    let mut m = LanguageModel::<f32>::zeros(cfg)?;
    let p = m.params_mut();
    p.embedding.weights = Tensor::identity(v).with_requires_grad(true);
    let lstm = &mut p.lstm[0];
    {
        let w = lstm.w_x.data_mut();
        let cols = 4 * v;
        for i in 0..v {
            w[i * cols + 2 * v + i] = CELL_GAIN;
        }
    }
    {
        let b = lstm.b.data_mut();
        for j in 0..v {
            b[j] = GATE_OPEN;
            b[v + j] = -GATE_OPEN;
            b[3 * v + j] = GATE_OPEN;
        }
    }
    let out = p.output.as_mut().expect("untied output");
    let table = out.data_mut();
    for (a, b) in seen_bigrams(vocab, sentences) {
        table[a * v + b] = BIGRAM_LOGIT;
    }
    Ok(m)
}

fn seen_bigrams(vocab: &Vocabulary, sentences: &[Vec<String>]) -> HashSet<(usize, usize)> {
    let mut set = HashSet::new();
    for s in sentences {
        let mut prev = BOS_ID;
        for w in s {
            let id = vocab.id(w);
            set.insert((prev, id));
            prev = id;
        }
        set.insert((prev, EOS_ID));
    }
    set
}

/// Reference sentences, an N-best fixture and the memorizing model that
/// goes with them.
pub struct RescoringFixture {
    pub vocab: Vocabulary,
    pub references: Vec<(String, Vec<String>)>,
    pub nbest: Vec<NBestList>,
    pub model: LanguageModel<f32>,
}

/// `utterances` N-best lists of three hypotheses each:
///
/// 0. one word substituted, best acoustic score;
/// 1. the reference, best LM score;
/// 2. two words substituted, worse than the reference on both scores.
///
/// The acoustic margin of hypothesis 0 over the reference is set to a
/// fraction of its LM deficit, with fractions spread over `(0, 1)`, so the
/// interpolation weight at which utterance `k` flips to the reference is
/// `(k + 0.5) / utterances`.
pub fn rescoring_fixture(utterances: usize, seed: u64) -> Result<RescoringFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..30).map(|i| format!("v{i}")).collect();
    let sentences: Vec<Vec<String>> = (0..utterances)
        .map(|_| {
            let len = rng.gen_range(5..9);
            (0..len)
                .map(|_| lexicon[rng.gen_range(0..lexicon.len())].clone())
                .collect()
        })
        .collect();
    let vocab = Vocabulary::build(lexicon.iter().map(String::as_str), lexicon.len() + 3)?;
    let model = bigram_memorizer(&vocab, &sentences)?;
    let seen = seen_bigrams(&vocab, &sentences);

    let fresh_word = |prev: usize, next: usize, rng: &mut ChaCha8Rng| loop {
        let cand = &lexicon[rng.gen_range(0..lexicon.len())];
        let id = vocab.id(cand);
        if !seen.contains(&(prev, id)) && !seen.contains(&(id, next)) {
            return cand.clone();
        }
    };
    let substitute = |s: &[String], pos: usize, rng: &mut ChaCha8Rng| {
        let prev = if pos == 0 { BOS_ID } else { vocab.id(&s[pos - 1]) };
        let next = s.get(pos + 1).map_or(EOS_ID, |w| vocab.id(w));
        let mut out = s.to_vec();
        out[pos] = fresh_word(prev, next, rng);
        out
    };

    let mut references = Vec::new();
    let mut nbest = Vec::new();
    for (k, s) in sentences.iter().enumerate() {
        let id = format!("utt{k:03}");
        let p = rng.gen_range(0..s.len());
        let one_off = substitute(s, p, &mut rng);
        let mut two_off = substitute(s, p, &mut rng);
        let q = (p + 1 + rng.gen_range(0..s.len() - 1)) % s.len();
        two_off = substitute(&two_off, q, &mut rng);

        let lm_ref = sentence_logprob(&model, &vocab, s)?;
        let lm_one = sentence_logprob(&model, &vocab, &one_off)?;
        let gap = lm_ref - lm_one;
        let flip = (k as f64 + 0.5) / utterances as f64;
        let base = -10.0 * s.len() as f64;
        let hyps = vec![
            Hypothesis {
                words: one_off,
                acoustic: base + flip * gap,
            },
            Hypothesis {
                words: s.clone(),
                acoustic: base,
            },
            Hypothesis {
                words: two_off,
                acoustic: base - 1.0,
            },
        ];
        references.push((id.clone(), s.clone()));
        nbest.push(NBestList {
            id,
            hypotheses: hyps,
        });
    }
    Ok(RescoringFixture {
        vocab,
        references,
        nbest,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{lm_scores, Rescorer};

    #[test]
    fn grammar_probabilities_sum_to_one() {
        let g = MarkovGrammar::new(12, 4, 3);
        for a in 0..12 {
            for c in 0..12 {
                let total: f64 = (0..12).map(|n| g.prob(a, 5, c, n)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_is_deterministic() {
        let g = MarkovGrammar::new(50, 4, 1);
        assert_eq!(g.sample(300, 9), g.sample(300, 9));
        assert_ne!(g.sample(300, 9), g.sample(300, 10));
        let s = g.sample(3000, 2);
        let ppl = g.oracle_perplexity(&s);
        assert!(ppl > 1.5 && ppl < 4.0, "{ppl}");
    }

    #[test]
    fn memorizer_prefers_seen_bigrams() {
        let sents = vec![vec!["a".to_string(), "b".to_string()]];
        let vocab = Vocabulary::build(["a b c"], 10).unwrap();
        let m = bigram_memorizer(&vocab, &sents).unwrap();
        let good = sentence_logprob(&m, &vocab, &sents[0]).unwrap();
        let bad = sentence_logprob(&m, &vocab, &["a".to_string(), "c".to_string()]).unwrap();
        assert!(good > -0.1, "{good}");
        assert!(good - bad > 10.0);
    }

    #[test]
    fn fixture_shape() {
        let f = rescoring_fixture(20, 7).unwrap();
        assert_eq!(f.nbest.len(), 20);
        for list in &f.nbest {
            let lm = lm_scores(&f.model, &f.vocab, list).unwrap();
            assert!(lm[1] > lm[0] && lm[1] > lm[2]);
            let h = &list.hypotheses;
            assert!(h[0].acoustic > h[1].acoustic && h[1].acoustic > h[2].acoustic);
        }
        let r = Rescorer::new(&f.model, &f.vocab, &f.references, f.nbest.clone()).unwrap();
        let sweep = r.sweep();
        assert_eq!(sweep[0].1.substitutions, 20);
        assert_eq!(sweep[10].1.errors(), 0);
    }
}
