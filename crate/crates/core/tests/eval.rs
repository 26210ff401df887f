mod common;

use common::{all_sequences, best_alignment};
use tfrn_core::data::{Vocabulary, BOS_ID, EOS_ID};
use tfrn_core::eval::{
    parse_nbest, parse_references, perplexity, rerank, sentence_logprob, wer, Hypothesis,
    NBestList, Rescorer,
};
use tfrn_core::synthetic::{bigram_memorizer, rescoring_fixture};
use tfrn_core::{Error, Family, InferenceMode, LanguageModel, ModelConfig};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn uniform(family: Family, vocab: usize) -> LanguageModel<f32> {
    let mut c = ModelConfig::for_family(family, vocab, 8, 1, 1);
    c.heads = 2;
    c.d_ff = 8;
    LanguageModel::zeros(c).unwrap()
}

fn small_vocab(n_words: usize) -> Vocabulary {
    let lexicon: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
    Vocabulary::build(lexicon.iter().map(String::as_str), n_words + 3).unwrap()
}

#[test]
fn zero_model_has_vocabulary_perplexity() {
    let ids: Vec<usize> = (0..60).map(|i| (i * 7919) % 10_000).collect();
    for family in [Family::Transformer, Family::Lstm, Family::TransfoRnn] {
        let m = uniform(family, 10_000);
        for mode in [InferenceMode::All, InferenceMode::Final] {
            let r = perplexity(&m, &ids, mode, 16).unwrap();
            assert!((r.ppl - 10_000.0).abs() < 0.1, "{family} {mode:?}: {}", r.ppl);
            assert_eq!(r.tokens, 59);
        }
    }
}

#[test]
fn perplexity_needs_two_tokens() {
    let m = uniform(Family::Transformer, 10);
    assert!(matches!(
        perplexity(&m, &[], InferenceMode::All, 4),
        Err(Error::Data(_))
    ));
    assert!(perplexity(&m, &[3], InferenceMode::Final, 4).is_err());
}

#[test]
fn empty_hypothesis_scores_end_after_begin() {
    let vocab = small_vocab(7);
    let mut c = ModelConfig::transfornn(vocab.len(), 8, 1, 1);
    c.heads = 2;
    c.d_ff = 8;
    let m = LanguageModel::<f32>::new(c).unwrap();
    let got = sentence_logprob(&m, &vocab, &[]).unwrap();
    let want = -m.nll_final_position(&[BOS_ID], EOS_ID, None).unwrap();
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn uniform_sentence_score() {
    let vocab = small_vocab(7);
    assert_eq!(vocab.len(), 10);
    let m = uniform(Family::TransfoRnn, 10);
    let got = sentence_logprob(&m, &vocab, &words("w1 w2 w3")).unwrap();
    assert!((got - 4.0 * (0.1f64).ln()).abs() < 1e-5);
}

#[test]
fn sentence_score_is_sum_of_final_positions() {
    let vocab = small_vocab(9);
    let mut c = ModelConfig::transfornn(vocab.len(), 8, 2, 1);
    c.heads = 2;
    c.d_ff = 16;
    c.seed = 4;
    let m = LanguageModel::<f32>::new(c).unwrap();
    let hyp = words("w3 w1 w4 w1 w5");
    let mut ids = vec![BOS_ID];
    ids.extend(hyp.iter().map(|w| vocab.id(w)));
    ids.push(EOS_ID);
    let by_position: f64 = (1..ids.len())
        .map(|t| m.nll_final_position(&ids[..t], ids[t], None).unwrap())
        .sum();
    let got = sentence_logprob(&m, &vocab, &hyp).unwrap();
    assert!((got + by_position).abs() < 1e-4, "{got} vs {}", -by_position);
}

#[test]
fn rerank_basic_cases() {
    let vocab = small_vocab(5);
    let m = uniform(Family::Lstm, vocab.len());
    let list = NBestList {
        id: "u".into(),
        hypotheses: vec![
            Hypothesis { words: words("w1"), acoustic: -3.0 },
            Hypothesis { words: words("w1 w2"), acoustic: -1.0 },
            Hypothesis { words: words("w2"), acoustic: -1.0 },
        ],
    };
    assert_eq!(rerank(&m, &vocab, &list, 0.0).unwrap(), 1);
    // The uniform model prefers the shorter tie.
    assert_eq!(rerank(&m, &vocab, &list, 1.0).unwrap(), 2);
    let single = NBestList { id: "s".into(), hypotheses: vec![list.hypotheses[0].clone()] };
    assert_eq!(rerank(&m, &vocab, &single, 0.7).unwrap(), 0);
    let empty = NBestList { id: "e".into(), hypotheses: vec![] };
    assert!(matches!(rerank(&m, &vocab, &empty, 0.5), Err(Error::Data(_))));
    assert!(rerank(&m, &vocab, &list, -0.1).is_err());
}

#[test]
fn memorizer_breaks_acoustic_tie() {
    let vocab = small_vocab(6);
    let seen = vec![words("w1 w2 w3")];
    let m = bigram_memorizer(&vocab, &seen).unwrap();
    for order in [[0, 1], [1, 0]] {
        let cands = [words("w1 w2 w3"), words("w1 w4 w3")];
        let list = NBestList {
            id: "u".into(),
            hypotheses: order
                .iter()
                .map(|&i| Hypothesis { words: cands[i].clone(), acoustic: -5.0 })
                .collect(),
        };
        let best = rerank(&m, &vocab, &list, 0.5).unwrap();
        assert_eq!(list.hypotheses[best].words, cands[0]);
    }
}

#[test]
fn wer_examples() {
    let s = wer(&words("a b c"), &words("a b c")).unwrap();
    assert_eq!((s.substitutions, s.insertions, s.deletions), (0, 0, 0));
    let s = wer(&words("a b c"), &words("a x c")).unwrap();
    assert_eq!(s.substitutions, 1);
    assert!((s.rate() - 1.0 / 3.0).abs() < 1e-12);
    let s = wer(&words("a b c d"), &words("b c d e")).unwrap();
    assert_eq!(s.errors(), 2);
    assert!((s.rate() - 0.5).abs() < 1e-12);
    let empty: Vec<String> = vec![];
    assert!(matches!(wer(&empty, &words("a")), Err(Error::Data(_))));
}

#[test]
fn wer_matches_exhaustive_alignment() {
    let seqs = all_sequences(&["a", "b", "c"], 5);
    let mut pairs = 0;
    for r in seqs.iter().filter(|s| !s.is_empty()) {
        for h in &seqs {
            let s = wer(r, h).unwrap();
            let (edits, indels) = best_alignment(r, h);
            assert_eq!(s.errors(), edits, "{r:?} / {h:?}");
            assert_eq!(s.insertions + s.deletions, indels, "{r:?} / {h:?}");
            assert_eq!(h.len() + s.deletions, r.len() + s.insertions);
            pairs += 1;
        }
    }
    assert_eq!(pairs, 363 * 364);
}

fn fixture_text() -> (&'static str, &'static str) {
    (
        "u1\tw1 w2 w3\nu2\tw4 w5\n",
        "u1\t-1.0\tw1 w2 w3\nu1\t-2.0\tw1 w3\nu2\t-0.5\tw4 w5\nu2\t-0.6\tw4\n",
    )
}

#[test]
fn perfect_first_best_scores_zero() {
    let (refs, nbest) = fixture_text();
    let vocab = small_vocab(6);
    let m = uniform(Family::Transformer, vocab.len());
    let r = Rescorer::new(&m, &vocab, &parse_references(refs).unwrap(), parse_nbest(nbest).unwrap())
        .unwrap();
    let rep = r.report(0.0).unwrap();
    assert_eq!(rep.total.errors(), 0);
    assert_eq!(rep.total.reference_words, 5);
    assert!(rep.to_string().ends_with("TOTAL\t0.0000"));
}

#[test]
fn missing_reference_names_the_utterance() {
    let (_, nbest) = fixture_text();
    let vocab = small_vocab(6);
    let m = uniform(Family::Transformer, vocab.len());
    let refs = parse_references("u1\tw1 w2 w3\n").unwrap();
    match Rescorer::new(&m, &vocab, &refs, parse_nbest(nbest).unwrap()) {
        Err(Error::Data(msg)) => assert!(msg.contains("u2"), "{msg}"),
        other => panic!("expected a data error, got {:?}", other.map(|r| r.len())),
    }
}

#[test]
fn parse_errors_carry_line_numbers() {
    let bad_score = "u1\t-1.0\ta\nu1\tnope\tb\n";
    assert!(matches!(parse_nbest(bad_score), Err(Error::Format { line: 2, .. })));
    let split = "u1\t-1\ta\nu2\t-1\tb\nu1\t-2\tc\n";
    assert!(matches!(parse_nbest(split), Err(Error::Format { line: 3, .. })));
    let missing = "u1\n";
    assert!(matches!(parse_nbest(missing), Err(Error::Format { line: 1, .. })));
    let dup = "u1\ta\n\nu1\tb\n";
    assert!(matches!(parse_references(dup), Err(Error::Format { line: 3, .. })));
}

#[test]
fn sweep_strictly_improves_on_memorized_set() {
    let fx = rescoring_fixture(20, 3).unwrap();
    let rescorer = Rescorer::new(&fx.model, &fx.vocab, &fx.references, fx.nbest.clone()).unwrap();
    // Independent baseline: the acoustically best hypothesis per utterance.
    let mut baseline = 0;
    let mut ref_words = 0;
    for list in &fx.nbest {
        let (i, _) = list
            .hypotheses
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bs), (i, h)| {
                if h.acoustic > bs { (i, h.acoustic) } else { (bi, bs) }
            });
        let reference = &fx.references.iter().find(|(id, _)| *id == list.id).unwrap().1;
        assert_ne!(&list.hypotheses[i].words, reference);
        baseline += wer(reference, &list.hypotheses[i].words).unwrap().errors();
        ref_words += reference.len();
    }
    let sweep = rescorer.sweep();
    assert_eq!(sweep.len(), 11);
    assert_eq!(sweep[0].1.errors(), baseline);
    assert_eq!(sweep[0].1.reference_words, ref_words);
    for w in sweep.windows(2) {
        assert!(w[1].1.errors() < w[0].1.errors(), "{sweep:?}");
    }
    assert_eq!(sweep[10].1.errors(), 0);
}
