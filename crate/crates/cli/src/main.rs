mod grid;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfrn_core::data::{tokenize, Vocabulary};
use tfrn_core::eval::{parse_nbest, parse_references, perplexity, Rescorer};
use tfrn_core::gradcheck::{check_model_gradients, GradCheckOptions, GRAD_TOLERANCE};
use tfrn_core::model::{load_checkpoint, param_specs, save_checkpoint};
use tfrn_core::tape::OpKind;
use tfrn_core::training::{train, NewBobConfig, TrainerConfig};
use tfrn_core::{Family, InferenceMode, LanguageModel, ModelConfig};

const SEED_ENV: &str = "TFRN_SEED";

#[derive(Parser)]
#[command(name = "tfrn", version, about = "Train and evaluate causal neural language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint, its vocabulary and a log.
    Train(TrainArgs),
    /// Perplexity of a corpus under a checkpoint.
    EvalPpl(EvalArgs),
    /// Rescore N-best lists and report word error rate.
    Rerank(RerankArgs),
    /// Print the parameter table of a config or checkpoint.
    Inspect(InspectArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "transfornn")]
    family: Family,
    /// Embedding width.
    #[arg(long, default_value_t = 512)]
    d: usize,
    /// Transformer layers [default: 2, or 0 for lstm].
    #[arg(long)]
    n_layers: Option<usize>,
    /// LSTM layers [default: 2, or 0 for transformer].
    #[arg(long)]
    m_layers: Option<usize>,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 1024)]
    d_ff: usize,
    /// Add sinusoidal positions [default: true, false for lstm].
    #[arg(long)]
    use_pos: Option<bool>,
    /// Share the embedding with the output projection.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    tied: bool,
    /// Scale embeddings by sqrt(d) [default: true, false for lstm].
    #[arg(long)]
    scale_embed: Option<bool>,
    /// LSTM width [default: d].
    #[arg(long)]
    lstm_hidden: Option<usize>,
    /// Perplexity protocol stored with the model [default: final for
    /// transformer, all otherwise].
    #[arg(long)]
    inference_mode: Option<InferenceMode>,
    /// Initialization seed; the TFRN_SEED environment variable wins.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl ModelArgs {
    fn resolve(&self, vocab_size: usize) -> Result<ModelConfig> {
        let (n, m) = match self.family {
            Family::Transformer => (self.n_layers.unwrap_or(2), self.m_layers.unwrap_or(0)),
            Family::Lstm => (self.n_layers.unwrap_or(0), self.m_layers.unwrap_or(2)),
            Family::TransfoRnn => (self.n_layers.unwrap_or(2), self.m_layers.unwrap_or(2)),
        };
        let mut c = ModelConfig::for_family(self.family, vocab_size, self.d, n, m);
        c.heads = self.heads;
        c.d_ff = self.d_ff;
        c.tied = self.tied;
        if let Some(v) = self.use_pos {
            c.use_pos = v;
        }
        if let Some(v) = self.scale_embed {
            c.scale_embed = v;
        }
        c.lstm_hidden = self.lstm_hidden.unwrap_or(self.d);
        if let Some(v) = self.inference_mode {
            c.inference_mode = v;
        }
        c.seed = seed_override(self.seed)?;
        c.validate()?;
        Ok(c)
    }
}

fn seed_override(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer")),
        Err(_) => Ok(flag),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Existing vocabulary to use instead of building one from --train.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Largest vocabulary built from --train, reserved tokens included.
    #[arg(long, default_value_t = 10_000)]
    max_vocab: usize,
    /// Per-epoch log [default: <out>.log].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Append <eos> after every line.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    eos_per_line: bool,
    #[arg(long, default_value_t = 0.1)]
    lr0: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    window: usize,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.5)]
    newbob_factor: f64,
    #[arg(long, default_value_t = 0.001)]
    newbob_threshold: f64,
    #[arg(long, default_value_t = 2)]
    patience: usize,
    #[arg(long, default_value_t = 20)]
    max_epochs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// [default: <model>.vocab]
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// [default: the checkpoint's inference mode]
    #[arg(long)]
    mode: Option<InferenceMode>,
    #[arg(long, default_value_t = 64)]
    window: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    eos_per_line: bool,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    model: PathBuf,
    /// [default: <model>.vocab]
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    nbest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    lm_weight: f64,
    /// Try lm_weight 0, 0.1, ..., 1.0 and report the best.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to describe.
    #[arg(long, conflicts_with = "config")]
    model: Option<PathBuf>,
    /// key=value config file to describe.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary size when describing a config given by flags.
    #[arg(long, default_value_t = 10_000)]
    vocab_size: usize,
    #[command(flatten)]
    flags: ModelArgs,
    /// Print parameter totals for the reference depth grid at V=10000.
    #[arg(long)]
    table1: bool,
    /// Allocate every reference architecture once and report its size.
    #[arg(long)]
    instantiate: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value = "transfornn")]
    family: Family,
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Number of input positions.
    #[arg(long, default_value_t = 6)]
    window: usize,
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    d_ff: usize,
    /// [default: 2, or 0 for lstm]
    #[arg(long)]
    n_layers: Option<usize>,
    /// [default: 2, or 0 for transformer]
    #[arg(long)]
    m_layers: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt_rule: Option<OpKind>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::EvalPpl(a) => cmd_eval_ppl(a),
        Command::Rerank(a) => cmd_rerank(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn echo(pairs: &[(String, String)]) {
    let line: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("config {}", line.join(" "));
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let train_text = read(&a.train)?;
    let valid_text = read(&a.valid)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Vocabulary::build(train_text.lines(), a.max_vocab)?,
    };
    let config = a.model.resolve(vocab.len())?;
    let trainer = TrainerConfig {
        lr0: a.lr0,
        batch: a.batch,
        window: a.window,
        clip: a.clip,
        newbob: NewBobConfig {
            factor: a.newbob_factor,
            threshold: a.newbob_threshold,
            patience: a.patience,
        },
        max_epochs: a.max_epochs,
    };
    trainer.validate()?;
    let vocab_path = with_suffix(&a.out, ".vocab");
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log"));

    let mut pairs = config.fields();
    pairs.extend([
        kv("lr0", trainer.lr0),
        kv("batch", trainer.batch),
        kv("window", trainer.window),
        kv("clip", trainer.clip),
        kv("newbob_factor", trainer.newbob.factor),
        kv("newbob_threshold", trainer.newbob.threshold),
        kv("patience", trainer.newbob.patience),
        kv("max_epochs", trainer.max_epochs),
        kv("eos_per_line", a.eos_per_line),
        kv("train", a.train.display()),
        kv("valid", a.valid.display()),
        kv("out", a.out.display()),
        kv("vocab", vocab_path.display()),
        kv("log", log_path.display()),
    ]);
    echo(&pairs);

    let train_ids = tokenize(&train_text, &vocab, a.eos_per_line);
    let valid_ids = tokenize(&valid_text, &vocab, a.eos_per_line);
    let model = LanguageModel::<f32>::new(config)?;
    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    let mut log_err = None;
    let outcome = train(model, &train_ids.ids, &valid_ids.ids, &trainer, |rec| {
        println!("{rec}");
        if let Err(e) = writeln!(log, "{rec}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    save_checkpoint(&outcome.model, &a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    vocab.save(&vocab_path)?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "best_epoch={} valid_ppl={:.4} epochs={} params={} checkpoint={}",
        outcome.best_epoch,
        best.valid_ppl,
        outcome.log.len(),
        outcome.model.num_parameters(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_model_and_vocab(
    model: &Path,
    vocab: Option<&PathBuf>,
) -> Result<(LanguageModel<f32>, Vocabulary, PathBuf)> {
    let m = load_checkpoint(model).with_context(|| format!("loading {}", model.display()))?;
    let vp = vocab.cloned().unwrap_or_else(|| with_suffix(model, ".vocab"));
    let v = Vocabulary::load(&vp).with_context(|| format!("loading {}", vp.display()))?;
    if v.len() != m.config().vocab_size {
        bail!(
            "vocabulary {} has {} entries but the model expects {}",
            vp.display(),
            v.len(),
            m.config().vocab_size
        );
    }
    Ok((m, v, vp))
}

fn cmd_eval_ppl(a: EvalArgs) -> Result<ExitCode> {
    let (model, vocab, vp) = load_model_and_vocab(&a.model, a.vocab.as_ref())?;
    let mode = a.mode.unwrap_or(model.config().inference_mode);
    let mut pairs = model.config().fields();
    pairs.extend([
        kv("model", a.model.display()),
        kv("corpus", a.corpus.display()),
        kv("vocab", vp.display()),
        kv("mode", mode),
        kv("window", a.window),
        kv("eos_per_line", a.eos_per_line),
    ]);
    echo(&pairs);
    let corpus = tokenize(&read(&a.corpus)?, &vocab, a.eos_per_line);
    if corpus.oov_rate() > 0.5 {
        eprintln!(
            "warning: {:.1}% of corpus words are out of vocabulary; is {} the right vocabulary?",
            100.0 * corpus.oov_rate(),
            vp.display()
        );
    }
    if mode == InferenceMode::Final && model.config().n_layers > 0 {
        eprintln!("note: final-position evaluation runs one window per token");
    }
    let r = perplexity(&model, &corpus.ids, mode, a.window)?;
    println!("ppl={:.6} tokens={} mode={}", r.ppl, r.tokens, mode);
    Ok(ExitCode::SUCCESS)
}

fn cmd_rerank(a: RerankArgs) -> Result<ExitCode> {
    let (model, vocab, vp) = load_model_and_vocab(&a.model, a.vocab.as_ref())?;
    echo(&[
        kv("model", a.model.display()),
        kv("vocab", vp.display()),
        kv("refs", a.refs.display()),
        kv("nbest", a.nbest.display()),
        kv("lm_weight", a.lm_weight),
        kv("sweep", a.sweep),
    ]);
    let refs = parse_references(&read(&a.refs)?)
        .with_context(|| format!("parsing {}", a.refs.display()))?;
    let lists =
        parse_nbest(&read(&a.nbest)?).with_context(|| format!("parsing {}", a.nbest.display()))?;
    let rescorer = Rescorer::new(&model, &vocab, &refs, lists)?;
    let baseline = rescorer.report(0.0)?.total;
    if a.sweep {
        let sweep = rescorer.sweep();
        let mut best = sweep[0];
        for &(w, s) in &sweep {
            println!("lm_weight={w:.1} wer={:.4} errors={}", s.rate(), s.errors());
            if s.errors() < best.1.errors() {
                best = (w, s);
            }
        }
        println!("{}", rescorer.report(best.0)?);
        println!(
            "best_lm_weight={:.1} wer={:.4} baseline_wer={:.4} utterances={}",
            best.0,
            best.1.rate(),
            baseline.rate(),
            rescorer.len()
        );
    } else {
        let report = rescorer.report(a.lm_weight)?;
        println!("{report}");
        let t = report.total;
        println!(
            "lm_weight={} wer={:.4} sub={} ins={} del={} words={} baseline_wer={:.4}",
            a.lm_weight,
            t.rate(),
            t.substitutions,
            t.insertions,
            t.deletions,
            t.reference_words,
            baseline.rate()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(a: InspectArgs) -> Result<ExitCode> {
    if a.table1 || a.instantiate {
        return inspect_grid(a.table1, a.instantiate);
    }
    let config = if let Some(p) = &a.model {
        load_checkpoint(p)
            .with_context(|| format!("loading {}", p.display()))?
            .config()
            .clone()
    } else if let Some(p) = &a.config {
        let c = ModelConfig::from_kv(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
        c.validate()?;
        c
    } else {
        a.flags.resolve(a.vocab_size)?
    };
    echo(&config.fields());
    let specs = param_specs(&config)?;
    let mut walked = 0;
    specs.visit(|name, s| {
        let shape: Vec<String> = s.shape.iter().map(usize::to_string).collect();
        println!("{name}\t{}\t{}", shape.join("x"), s.numel());
        walked += s.numel();
    });
    let formula = config.parameter_count();
    if walked != formula {
        bail!("walked count {walked} disagrees with closed form {formula}");
    }
    println!(
        "total={walked} millions={:.1} family={} tied={}",
        walked as f64 / 1e6,
        config.family,
        config.tied
    );
    if config.family == Family::TransfoRnn {
        let mut other = config.clone();
        other.tied = !config.tied;
        if other.validate().is_ok() {
            println!(
                "note: tied={} gives total={}; the reference cascade counts assume a separate output matrix (tied=false)",
                other.tied,
                other.parameter_count()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn inspect_grid(table: bool, instantiate: bool) -> Result<ExitCode> {
    let rows = if instantiate {
        grid::all_rows()
    } else {
        grid::depth_sweep()
    };
    println!("group\tfamily\tV\td\tN\tM\td_ff\ttied\tparams\tmillions");
    let mut built = 0;
    for r in &rows {
        let c = &r.config;
        let count = if instantiate {
            let m = LanguageModel::<f32>::new(c.clone())
                .with_context(|| format!("instantiating {} d={} N={} M={}", c.family, c.d, c.n_layers, c.m_layers))?;
            built += 1;
            m.num_parameters()
        } else {
            c.parameter_count()
        };
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.1}",
            r.group,
            c.family,
            c.vocab_size,
            c.d,
            c.n_layers,
            c.m_layers,
            c.d_ff,
            c.tied,
            count,
            count as f64 / 1e6
        );
    }
    println!("note: transfornn rows use tied=false; their output projection is a separate matrix");
    println!(
        "rows={} instantiated={} table={}",
        rows.len(),
        built,
        table
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<ExitCode> {
    let (n, m) = match a.family {
        Family::Transformer => (a.n_layers.unwrap_or(2), a.m_layers.unwrap_or(0)),
        Family::Lstm => (a.n_layers.unwrap_or(0), a.m_layers.unwrap_or(2)),
        Family::TransfoRnn => (a.n_layers.unwrap_or(2), a.m_layers.unwrap_or(2)),
    };
    let mut config = ModelConfig::for_family(a.family, a.vocab_size, a.d, n, m);
    config.heads = a.heads;
    config.d_ff = a.d_ff;
    config.seed = seed_override(a.seed)?;
    config.validate()?;
    if a.window < 1 {
        bail!("window must be at least 1");
    }
    let mut pairs = config.fields();
    pairs.extend([kv("window", a.window), kv("tolerance", GRAD_TOLERANCE)]);
    if let Some(k) = a.corrupt_rule {
        pairs.push(kv("corrupt_rule", format!("{k:?}")));
    }
    echo(&pairs);

    let model = LanguageModel::<f32>::new(config.clone())?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let tokens: Vec<usize> = (0..=a.window)
        .map(|_| rng.gen_range(0..config.vocab_size))
        .collect();
    let opts = GradCheckOptions {
        corrupt: a.corrupt_rule,
        ..Default::default()
    };
    let report = check_model_gradients(&model, &tokens, opts)?;
    let mut worst = 0.0f64;
    let mut failing = Vec::new();
    let (mut reprobed, mut skipped) = (0, 0);
    for t in &report {
        println!(
            "{}\t{}\t{:.3e}\t{}",
            t.name,
            t.numel,
            t.max_rel_err,
            if t.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(t.max_rel_err);
        reprobed += t.reprobed;
        skipped += t.skipped;
        if !t.passed() {
            failing.push(t.name.clone());
        }
    }
    if !failing.is_empty() {
        eprintln!("failing tensors: {}", failing.join(", "));
    }
    println!(
        "result={} max_rel_err={worst:.3e} tensors={} failing={} kink_reprobed={reprobed} kink_skipped={skipped}",
        if failing.is_empty() { "pass" } else { "fail" },
        report.len(),
        failing.len()
    );
    Ok(if failing.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
