//! Perplexity, word error rate and N-best rescoring.

use std::collections::HashMap;
use std::fmt;
use std::ops::AddAssign;

use crate::data::{Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{InferenceMode, LanguageModel};
use crate::tensor::{log_softmax_row, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PplReport {
    pub ppl: f64,
    /// Summed negative log-likelihood in nats.
    pub nll: f64,
    /// Number of predicted tokens.
    pub tokens: usize,
}

/// Perplexity of `ids` under `model`. Every token after the first is
/// predicted exactly once.
///
/// `All` cuts the stream into consecutive windows of `window` inputs and
/// scores every position, carrying recurrent state across windows. `Final`
/// slides the window one token at a time and scores only its last position,
/// so each prediction sees up to `window` tokens of context.
pub fn perplexity<T: Real>(
    model: &LanguageModel<T>,
    ids: &[usize],
    mode: InferenceMode,
    window: usize,
) -> Result<PplReport> {
    if ids.len() < 2 {
        return Err(Error::Data("perplexity needs at least two tokens".into()));
    }
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let vocab = model.config().vocab_size;
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Index {
            index: bad,
            limit: vocab,
        });
    }
    let mut nll = 0.0;
    match mode {
        InferenceMode::All => {
            let mut carry = model.initial_carry();
            let mut pos = 0;
            while pos + 1 < ids.len() {
                let end = (pos + window).min(ids.len() - 1);
                let (logits, next) = model.forward(&ids[pos..end], carry.as_ref())?;
                for (r, &target) in ids[pos + 1..=end].iter().enumerate() {
                    nll -= log_softmax_row(logits.row(r))[target];
                }
                carry = next;
                pos = end;
            }
        }
        InferenceMode::Final => {
            let mut carry = model.initial_carry();
            for t in 1..ids.len() {
                let context = &ids[t.saturating_sub(window)..t];
                let (logits, next) = model.forward_last(context, carry.as_ref())?;
                nll -= log_softmax_row(&logits)[ids[t]];
                carry = next;
            }
        }
    }
    let tokens = ids.len() - 1;
    Ok(PplReport {
        ppl: (nll / tokens as f64).exp(),
        nll,
        tokens,
    })
}

/// Add-one smoothed unigram perplexity of `eval_ids` with counts from
/// `train_ids`. Every token of `eval_ids` is scored.
pub fn unigram_perplexity(train_ids: &[usize], eval_ids: &[usize], vocab_size: usize) -> f64 {
    let mut counts = vec![0usize; vocab_size];
    for &id in train_ids {
        counts[id] += 1;
    }
    let total = (train_ids.len() + vocab_size) as f64;
    let nll: f64 = eval_ids
        .iter()
        .map(|&id| -((counts[id] + 1) as f64 / total).ln())
        .sum();
    (nll / eval_ids.len() as f64).exp()
}

/// Natural-log probability of `<bos> words <eos>` from a fresh state.
pub fn sentence_logprob<T: Real>(
    model: &LanguageModel<T>,
    vocab: &Vocabulary,
    words: &[String],
) -> Result<f64> {
    let mut ids = Vec::with_capacity(words.len() + 2);
    ids.push(BOS_ID);
    ids.extend(words.iter().map(|w| vocab.id(w)));
    ids.push(EOS_ID);
    let (logits, _) = model.forward(&ids[..ids.len() - 1], None)?;
    Ok(ids[1..]
        .iter()
        .enumerate()
        .map(|(r, &t)| log_softmax_row(logits.row(r))[t])
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<String>,
    pub acoustic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub id: String,
    pub hypotheses: Vec<Hypothesis>,
}

/// Index maximizing `acoustic[i] + lm_weight * lm[i]`; ties go to the
/// earliest hypothesis.
pub fn pick_best(acoustic: &[f64], lm: &[f64], lm_weight: f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (&a, &l)) in acoustic.iter().zip(lm).enumerate() {
        let s = a + lm_weight * l;
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// LM log-probability of each hypothesis in the list.
pub fn lm_scores<T: Real>(
    model: &LanguageModel<T>,
    vocab: &Vocabulary,
    nbest: &NBestList,
) -> Result<Vec<f64>> {
    nbest
        .hypotheses
        .iter()
        .map(|h| sentence_logprob(model, vocab, &h.words))
        .collect()
}

pub fn rerank<T: Real>(
    model: &LanguageModel<T>,
    vocab: &Vocabulary,
    nbest: &NBestList,
    lm_weight: f64,
) -> Result<usize> {
    check_weight(lm_weight)?;
    if nbest.hypotheses.is_empty() {
        return Err(Error::Data(format!("utterance {} has no hypotheses", nbest.id)));
    }
    let lm = lm_scores(model, vocab, nbest)?;
    let acoustic: Vec<f64> = nbest.hypotheses.iter().map(|h| h.acoustic).collect();
    Ok(pick_best(&acoustic, &lm, lm_weight))
}

fn check_weight(w: f64) -> Result<()> {
    if w >= 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("lm_weight must be finite and non-negative, got {w}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors over reference words.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_words as f64
    }
}

impl AddAssign for WerStats {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.reference_words += o.reference_words;
    }
}

/// Minimum-edit alignment of `hyp` against `reference`. Among alignments
/// with the fewest edits, the one with the fewest insertions plus deletions
/// is reported.
pub fn wer<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> Result<WerStats> {
    if reference.is_empty() {
        return Err(Error::Data("word error rate is undefined for an empty reference".into()));
    }
    let (n, m) = (reference.len(), hyp.len());
    // (edits, indels, subs, ins, del)
    type Cell = (usize, usize, usize, usize, usize);
    let mut dp: Vec<Cell> = vec![(0, 0, 0, 0, 0); (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        dp[at(i, 0)] = (i, i, 0, 0, i);
    }
    for j in 1..=m {
        dp[at(0, j)] = (j, j, 0, j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hyp[j - 1].as_ref();
            let d = dp[at(i - 1, j - 1)];
            let diag = if same {
                d
            } else {
                (d.0 + 1, d.1, d.2 + 1, d.3, d.4)
            };
            let u = dp[at(i - 1, j)];
            let del = (u.0 + 1, u.1 + 1, u.2, u.3, u.4 + 1);
            let l = dp[at(i, j - 1)];
            let ins = (l.0 + 1, l.1 + 1, l.2, l.3 + 1, l.4);
            dp[at(i, j)] = [diag, del, ins]
                .into_iter()
                .min_by_key(|c| (c.0, c.1))
                .expect("three candidates");
        }
    }
    let c = dp[at(n, m)];
    Ok(WerStats {
        substitutions: c.2,
        insertions: c.3,
        deletions: c.4,
        reference_words: n,
    })
}

/// `<utt_id> <word>...` per line; blank lines are skipped.
pub fn parse_references(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        if seen.insert(id.to_string(), i + 1).is_some() {
            return Err(Error::Format {
                line: i + 1,
                msg: format!("duplicate utterance id {id}"),
            });
        }
        out.push((id.to_string(), parts.map(str::to_string).collect()));
    }
    Ok(out)
}

/// `<utt_id> <acoustic_score> <word>...` per line. Hypotheses of one
/// utterance must be contiguous.
pub fn parse_nbest(text: &str) -> Result<Vec<NBestList>> {
    let mut out: Vec<NBestList> = Vec::new();
    let mut closed: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Format { line: i + 1, msg };
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        let score = parts
            .next()
            .ok_or_else(|| err("missing acoustic score".into()))?;
        let acoustic: f64 = score
            .parse()
            .map_err(|_| err(format!("bad acoustic score {score:?}")))?;
        if !acoustic.is_finite() {
            return Err(err(format!("non-finite acoustic score {score}")));
        }
        let hyp = Hypothesis {
            words: parts.map(str::to_string).collect(),
            acoustic,
        };
        match out.last_mut() {
            Some(last) if last.id == id => last.hypotheses.push(hyp),
            _ => {
                if let Some(first) = closed.get(id) {
                    return Err(err(format!(
                        "hypotheses for {id} are not contiguous (first seen on line {first})"
                    )));
                }
                closed.insert(id.to_string(), i + 1);
                out.push(NBestList {
                    id: id.to_string(),
                    hypotheses: vec![hyp],
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UttResult {
    pub id: String,
    pub chosen: usize,
    pub stats: WerStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WerReport {
    pub lm_weight: f64,
    pub utterances: Vec<UttResult>,
    pub total: WerStats,
}

impl fmt::Display for WerReport {
    /// `<id>\t<chosen>\t<wer>` per utterance, then `TOTAL\t<wer>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for u in &self.utterances {
            writeln!(f, "{}\t{}\t{:.4}", u.id, u.chosen, u.stats.rate())?;
        }
        write!(f, "TOTAL\t{:.4}", self.total.rate())
    }
}

/// N-best lists paired with their references and pre-computed LM scores,
/// so many interpolation weights can be tried without re-running the model.
pub struct Rescorer {
    lists: Vec<NBestList>,
    references: Vec<Vec<String>>,
    lm: Vec<Vec<f64>>,
}

impl Rescorer {
    pub fn new<T: Real>(
        model: &LanguageModel<T>,
        vocab: &Vocabulary,
        references: &[(String, Vec<String>)],
        lists: Vec<NBestList>,
    ) -> Result<Self> {
        let by_id: HashMap<&str, &Vec<String>> =
            references.iter().map(|(id, w)| (id.as_str(), w)).collect();
        let mut refs = Vec::with_capacity(lists.len());
        let mut lm = Vec::with_capacity(lists.len());
        for list in &lists {
            if list.hypotheses.is_empty() {
                return Err(Error::Data(format!("utterance {} has no hypotheses", list.id)));
            }
            let r = by_id
                .get(list.id.as_str())
                .ok_or_else(|| Error::Data(format!("no reference for utterance {}", list.id)))?;
            if r.is_empty() {
                return Err(Error::Data(format!("empty reference for utterance {}", list.id)));
            }
            refs.push((*r).clone());
            lm.push(lm_scores(model, vocab, list)?);
        }
        Ok(Self {
            lists,
            references: refs,
            lm,
        })
    }

    pub fn report(&self, lm_weight: f64) -> Result<WerReport> {
        check_weight(lm_weight)?;
        let mut total = WerStats::default();
        let mut utterances = Vec::with_capacity(self.lists.len());
        for ((list, reference), lm) in self.lists.iter().zip(&self.references).zip(&self.lm) {
            let acoustic: Vec<f64> = list.hypotheses.iter().map(|h| h.acoustic).collect();
            let chosen = pick_best(&acoustic, lm, lm_weight);
            let stats = wer(reference, &list.hypotheses[chosen].words)?;
            total += stats;
            utterances.push(UttResult {
                id: list.id.clone(),
                chosen,
                stats,
            });
        }
        Ok(WerReport {
            lm_weight,
            utterances,
            total,
        })
    }

    /// Corpus WER at `lm_weight ∈ {0, 0.1, …, 1.0}`.
    pub fn sweep(&self) -> Vec<(f64, WerStats)> {
        sweep_weights()
            .into_iter()
            .map(|w| (w, self.report(w).expect("grid weights are valid").total))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

pub fn sweep_weights() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}
