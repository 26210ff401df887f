//! SGD with gradient clipping, new-bob learning-rate control, and
//! sliding-window batching over parallel streams.

use std::fmt;

use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{Carry, InferenceMode, LanguageModel};
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewBobConfig {
    /// Multiplier applied to the learning rate on each halving.
    pub factor: f64,
    /// Minimum relative validation improvement that counts as progress.
    pub threshold: f64,
    /// Stalled epochs tolerated after the first halving.
    pub patience: usize,
}

impl Default for NewBobConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            threshold: 0.001,
            patience: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainerConfig {
    pub lr0: f64,
    pub batch: usize,
    pub window: usize,
    pub clip: f64,
    pub newbob: NewBobConfig,
    pub max_epochs: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            batch: 16,
            window: 64,
            clip: 5.0,
            newbob: NewBobConfig::default(),
            max_epochs: 20,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.window < 2 {
            return Err(Error::Config("window must be at least 2".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        let nb = &self.newbob;
        if !(nb.factor > 0.0 && nb.factor < 1.0) || nb.threshold < 0.0 {
            return Err(Error::Config(
                "new-bob factor must lie in (0, 1) and threshold be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewBobState {
    pub current_lr: f64,
    pub best_val_ppl: f64,
    pub epochs_without_improvement: usize,
    /// Set once the first halving has happened.
    pub ramping: bool,
    pub halted: bool,
}

impl NewBobState {
    pub fn new(lr0: f64) -> Self {
        Self {
            current_lr: lr0,
            best_val_ppl: f64::INFINITY,
            epochs_without_improvement: 0,
            ramping: false,
            halted: false,
        }
    }
}

/// One epoch's worth of new-bob control.
///
/// When the relative improvement over the best validation perplexity falls
/// below the threshold the rate is halved. Once halving has begun, `patience`
/// consecutive stalled epochs stop training instead of halving again.
pub fn new_bob_update(state: NewBobState, val_ppl: f64, cfg: &NewBobConfig) -> NewBobState {
    let mut s = state;
    if s.halted {
        return s;
    }
    let improvement = if s.best_val_ppl.is_finite() {
        (s.best_val_ppl - val_ppl) / s.best_val_ppl
    } else {
        f64::INFINITY
    };
    if val_ppl < s.best_val_ppl {
        s.best_val_ppl = val_ppl;
    }
    if improvement >= cfg.threshold {
        s.epochs_without_improvement = 0;
        return s;
    }
    if s.ramping {
        s.epochs_without_improvement += 1;
        if s.epochs_without_improvement >= cfg.patience {
            s.halted = true;
            return s;
        }
    }
    s.ramping = true;
    s.current_lr *= cfg.factor;
    s
}

/// `B` parallel windows of `W` inputs with next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    /// Stream `b` starts fresh at this batch; its recurrent carry must be
    /// dropped.
    pub reset: Vec<bool>,
}

/// Splits the corpus into `batch` contiguous streams and cuts each into
/// consecutive windows of `window` tokens. Window `k` of a stream is
/// immediately followed by window `k + 1`, so recurrent state can be carried
/// between them. Tokens that do not fill a full window in every stream are
/// dropped.
pub fn batchify(corpus: &[usize], batch: usize, window: usize) -> Result<Vec<Batch>> {
    if batch == 0 || window == 0 {
        return Err(Error::Config("batch and window must be positive".into()));
    }
    let per_stream = corpus.len().saturating_sub(1) / (batch * window);
    if per_stream == 0 {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than one window of {window} per stream for {batch} streams",
            corpus.len()
        )));
    }
    let stream_len = per_stream * window;
    Ok((0..per_stream)
        .map(|k| {
            let mut inputs = Vec::with_capacity(batch);
            let mut targets = Vec::with_capacity(batch);
            for b in 0..batch {
                let start = b * stream_len + k * window;
                inputs.push(corpus[start..start + window].to_vec());
                targets.push(corpus[start + 1..start + window + 1].to_vec());
            }
            Batch {
                inputs,
                targets,
                reset: vec![k == 0; batch],
            }
        })
        .collect())
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm(model: &LanguageModel<f32>) -> Result<f64> {
    let mut sq = 0.0f64;
    let mut bad = None;
    model.params().visit(|name, t| {
        if let Some(g) = t.grad() {
            for &x in g {
                if !x.is_finite() && bad.is_none() {
                    bad = Some(name.clone());
                }
                sq += (x as f64) * (x as f64);
            }
        }
    });
    match bad {
        Some(name) => Err(Error::NonFinite(name)),
        None => Ok(sq.sqrt()),
    }
}

/// Scale factor that brings a gradient of norm `norm` within `clip`.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// Clips the global gradient norm to `clip`, applies `θ ← θ − lr·g`, then
/// clears the gradients. Returns the pre-clip norm.
pub fn sgd_step(model: &mut LanguageModel<f32>, lr: f64, clip: f64) -> Result<f64> {
    let norm = grad_norm(model)?;
    let step = (lr * clip_factor(norm, clip)) as f32;
    model.params_mut().visit_mut(|_, t| {
        let Some(g) = t.grad().map(<[f32]>::to_vec) else {
            return;
        };
        for (w, gv) in t.data_mut().iter_mut().zip(g) {
            *w -= step * gv;
        }
        t.zero_grad();
    });
    Ok(norm)
}

/// Forward and backward over one batch; gradients land in the model's
/// buffers and the per-stream carries advance. Returns the mean loss.
pub fn accumulate_batch(
    model: &mut LanguageModel<f32>,
    batch: &Batch,
    carries: &mut [Option<Carry<f32>>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut losses = Vec::with_capacity(batch.inputs.len());
    for (b, (inputs, targets)) in batch.inputs.iter().zip(&batch.targets).enumerate() {
        if batch.reset[b] {
            carries[b] = None;
        }
        let (logits, carry) = model.forward_on(&mut tape, &bound, inputs, carries[b].as_ref())?;
        carries[b] = carry;
        losses.push(tape.cross_entropy(logits, targets)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / losses.len() as f32);
    let value = tape.value(loss)[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = tape.backward(loss)?;
    model.accumulate_grads(&bound, &grads);
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ppl: f64,
    pub valid_ppl: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    /// `epoch<TAB>train_ppl<TAB>valid_ppl<TAB>lr`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.4}\t{:.4}\t{}",
            self.epoch, self.train_ppl, self.valid_ppl, self.lr
        )
    }
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation perplexity.
    pub model: LanguageModel<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Runs epochs until new-bob halts or `max_epochs` is reached, calling
/// `on_epoch` after each. Validation uses the all-positions protocol.
pub fn train(
    mut model: LanguageModel<f32>,
    train_ids: &[usize],
    valid_ids: &[usize],
    cfg: &TrainerConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ids.is_empty() || valid_ids.len() < 2 {
        return Err(Error::Data("training and validation corpora must be non-empty".into()));
    }
    let vocab = model.config().vocab_size;
    if let Some(&bad) = train_ids.iter().chain(valid_ids).find(|&&id| id >= vocab) {
        return Err(Error::Index {
            index: bad,
            limit: vocab,
        });
    }
    let batches = batchify(train_ids, cfg.batch, cfg.window)?;
    model.zero_grad();

    let mut state = NewBobState::new(cfg.lr0);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, LanguageModel<f32>)> = None;

    for epoch in 1..=cfg.max_epochs {
        let lr = state.current_lr;
        let mut carries: Vec<Option<Carry<f32>>> = vec![None; cfg.batch];
        let mut loss_sum = 0.0;
        for batch in &batches {
            loss_sum += accumulate_batch(&mut model, batch, &mut carries)?;
            sgd_step(&mut model, lr, cfg.clip)?;
        }
        let train_ppl = (loss_sum / batches.len() as f64).exp();
        let valid_ppl = perplexity(&model, valid_ids, InferenceMode::All, cfg.window)?.ppl;
        if !valid_ppl.is_finite() {
            return Err(Error::NonFinite("validation perplexity".into()));
        }
        let record = EpochRecord {
            epoch,
            train_ppl,
            valid_ppl,
            lr,
        };
        on_epoch(&record);
        log.push(record);

        if best.as_ref().map_or(true, |(b, _, _)| valid_ppl < *b) {
            best = Some((valid_ppl, epoch, model.clone()));
        }
        state = new_bob_update(state, valid_ppl, &cfg.newbob);
        if state.halted {
            break;
        }
    }
    let (_, best_epoch, model) = best.ok_or_else(|| Error::Config("max_epochs is zero".into()))?;
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}
