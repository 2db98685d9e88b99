//! Command-line driver: synthetic data and teacher dumps, the two training
//! stages, evaluation and energy reports.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{augment, encode_all, load_tsv, synth_dataset, synth_vocab, write_tsv, PosLexicon, Sample, Vocab};
use crate::distill::{run_stage, LoopOptions, LossBreakdown, Stage, TrainConfig, Trainer, TrainerOptions};
use crate::energy::{measure_firing_rates, model_profiles, snn_energy};
use crate::error::Error;
use crate::eval::evaluate;
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, SpikeBert, TokenBatch};
use crate::teacher_io::{read_dump, write_dump, DumpKind, SyntheticTeacher};

/// Default directory for outputs whose path is not given explicitly.
pub const OUT_DIR_ENV: &str = "SPIKEBERT_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "spikebert", version, about = "Spiking transformer distillation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-class dataset and its vocabulary.
    GenData(GenDataArgs),
    /// Write a synthetic teacher dump for a dataset.
    GenTeacher(GenTeacherArgs),
    /// Align features and embeddings with a general teacher.
    TrainStage1(TrainArgs),
    /// Distill from a task teacher, including logits and labels.
    TrainStage2(TrainArgs),
    /// Report classification accuracy.
    Eval(EvalArgs),
    /// Estimate inference energy from measured firing rates.
    Energy(EnergyArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for files without an explicit path.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub test: usize,
    #[arg(long, default_value_t = 40)]
    pub words: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Args)]
pub struct GenTeacherArgs {
    #[command(flatten)]
    pub common: Common,
    /// Labelled TSV dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Stage 1 dumps carry features only; stage 2 adds logits and labels.
    #[arg(long, value_enum)]
    pub stage: StageArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Vocabulary file; built from the dataset when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Where to write a vocabulary built from the dataset (default `<out>.vocab`).
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
    /// `word<TAB>tag` lexicon for same-tag replacement.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub num_classes: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Teacher dump.
    #[arg(long)]
    pub dump: PathBuf,
    /// Vocabulary the dump was built with (default `<dump>.vocab`).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint to start from (stage 2).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Start stage 2 from random weights.
    #[arg(long)]
    pub from_scratch: bool,
    /// Overrides the config step count.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step loss log (TSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Reproducible run: single-threaded unless `--threads` is given.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Samples used to measure firing rates.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Text report (default `<out-dir>/energy.txt`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Key-value report (default `<out-dir>/energy.kv`).
    #[arg(long)]
    pub kv: Option<PathBuf>,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Usage(String),
    /// Exit code 1.
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            e => CliError::Runtime(e),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn out_dir(common: Option<&Common>) -> PathBuf {
    common
        .and_then(|c| c.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn output(explicit: &Option<PathBuf>, common: &Common, default_name: &str) -> CliResult<PathBuf> {
    let p = explicit.clone().unwrap_or_else(|| out_dir(Some(common)).join(default_name));
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.into()))?;
    }
    Ok(p)
}

fn load_config(common: &Common) -> CliResult<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            require_file(p, "config")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Specials followed by every distinct dataset word in sorted order.
pub fn vocab_from_samples(samples: &[Sample]) -> crate::Result<Vocab> {
    let words: BTreeSet<&str> = samples.iter().flat_map(|s| s.tokens.iter().map(String::as_str)).collect();
    Vocab::with_specials(words.into_iter().filter(|w| !crate::data::SPECIALS.contains(w)))
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::GenTeacher(a) => gen_teacher(a),
        Command::TrainStage1(a) => train(a, Stage::One),
        Command::TrainStage2(a) => train(a, Stage::Two),
        Command::Eval(a) => eval(a),
        Command::Energy(a) => energy(a),
    }
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let dir = out_dir(Some(&a.common));
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.into()))?;
    let vocab = synth_vocab(a.words)?;
    let train = synth_dataset(a.train, a.words, cfg.seed)?;
    let test = synth_dataset(a.test, a.words, cfg.seed.wrapping_add(1_000_003))?;
    write_tsv(&train, &dir.join("train.tsv"))?;
    write_tsv(&test, &dir.join("test.tsv"))?;
    vocab.save(&dir.join("vocab.txt"))?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), dir.display());
    Ok(())
}

fn gen_teacher(a: GenTeacherArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    require_file(&a.data, "dataset")?;
    let samples = load_tsv(&a.data)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(Error::Input(format!("{} holds no samples", a.data.display()))));
    }
    let out = output(&a.out, &a.common, "teacher.sbtd")?;
    let vocab = match &a.vocab {
        Some(p) => {
            require_file(p, "vocabulary")?;
            Vocab::load(p)?
        }
        None => {
            let v = vocab_from_samples(&samples)?;
            v.save(&a.vocab_out.clone().unwrap_or_else(|| with_suffix(&out, ".vocab")))?;
            v
        }
    };
    let lexicon = match &a.lexicon {
        Some(p) => {
            require_file(p, "lexicon")?;
            Some(PosLexicon::load(p)?)
        }
        None => None,
    };
    let kind = match a.stage {
        StageArg::One => DumpKind::Features,
        StageArg::Two => DumpKind::Task,
    };
    let mut all = samples.clone();
    if kind == DumpKind::Task && cfg.augment_copies > 0 {
        let aug = cfg.augment();
        for (i, s) in samples.iter().enumerate() {
            for j in 0..cfg.augment_copies {
                let stream = (i * cfg.augment_copies + j) as u64;
                all.push(augment(s, &aug, lexicon.as_ref(), &vocab, stream, cfg.max_len));
            }
        }
    }
    encode_all(&mut all, &vocab, cfg.max_len);
    let teacher = SyntheticTeacher {
        layers: cfg.teacher_layers,
        dim: cfg.teacher_dim,
        num_classes: a.num_classes,
        seed: cfg.seed,
    };
    let dump = teacher.generate(&all, &vocab, kind)?;
    write_dump(&dump, &out)?;
    println!("wrote {} records to {}", dump.len(), out.display());
    Ok(())
}

fn train(a: TrainArgs, stage: Stage) -> CliResult {
    let mut cfg = load_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    require_file(&a.dump, "dump")?;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| with_suffix(&a.dump, ".vocab"));
    require_file(&vocab_path, "vocabulary")?;
    if stage == Stage::Two && a.init.is_none() && !a.from_scratch {
        return Err(CliError::Usage(
            "train-stage2 needs --init <stage-1 checkpoint> or --from-scratch".into(),
        ));
    }
    if let Some(p) = &a.init {
        require_file(p, "checkpoint")?;
    }
    let vocab = Vocab::load(&vocab_path)?;
    let dump = read_dump(&a.dump)?;
    dump.check_vocab(&vocab)?;

    let (model, prior_meta) = match &a.init {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            if let Some(h) = ck.meta.get("vocab_hash") {
                if *h != format!("{:016x}", vocab.hash()) {
                    return Err(CliError::Runtime(Error::Data(
                        "checkpoint was trained with a different vocabulary".into(),
                    )));
                }
            }
            let meta = ck.meta.clone();
            (ck.into_model()?, meta)
        }
        None => {
            let classes = dump.header.num_classes.max(2);
            let mc = cfg.model_config(vocab.len(), classes, vocab.pad_id())?;
            (SpikeBert::new(mc, cfg.seed)?, Default::default())
        }
    };
    if stage == Stage::Two && dump.header.num_classes != model.config.num_classes {
        return Err(CliError::Runtime(Error::Data(format!(
            "dump has {} classes, model has {}",
            dump.header.num_classes, model.config.num_classes
        ))));
    }
    if dump.header.max_len > model.config.max_len {
        return Err(CliError::Runtime(Error::Data("dump max_len exceeds the model's".into())));
    }

    let threads = a.threads.unwrap_or(if a.deterministic {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    });
    let opts = TrainerOptions::from_config(&cfg, stage, threads);
    let mut trainer = Trainer::new(model, dump.header.layers, dump.header.dim, &opts)?;

    let name = match stage {
        Stage::One => "stage1",
        Stage::Two => "stage2",
    };
    let ckpt_path = output(&a.out, &a.common, &format!("{name}.ckpt"))?;
    let log_path = match &a.log {
        Some(p) => p.clone(),
        None => with_suffix(&ckpt_path, ".loss.tsv"),
    };
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::Runtime(e.into()))?);
    let io = |e: std::io::Error| Error::Io(e);
    writeln!(log, "step\ttotal\tfeature\tembedding\tlogits\tce").map_err(io)?;
    let loop_opts = LoopOptions {
        steps: cfg.steps,
        batch_size: cfg.batch_size_for(stage),
        seed: cfg.seed,
    };
    let every = (cfg.steps / 10).max(1);
    let history = run_stage(&mut trainer, &dump, stage, &loop_opts, |step, l: &LossBreakdown| {
        writeln!(log, "{step}\t{}\t{}\t{}\t{}\t{}", l.total, l.feature, l.embedding, l.logits, l.ce).map_err(io)?;
        if step % every == 0 || step == 1 {
            log::info!("{name} step {step} loss {:.5}", l.total);
        }
        Ok(())
    })?;
    log.flush().map_err(io)?;

    let mut ck = Checkpoint::from_model(&trainer.model);
    ck.meta = prior_meta;
    ck.meta.insert("vocab_hash".into(), format!("{:016x}", vocab.hash()));
    ck.meta.insert(format!("{name}_steps"), cfg.steps.to_string());
    ck.meta.insert("teacher_layers".into(), dump.header.layers.to_string());
    ck.meta.insert("teacher_dim".into(), dump.header.dim.to_string());
    ck.meta.insert("seed".into(), cfg.seed.to_string());
    write_checkpoint(&ck, &ckpt_path)?;
    let last = history.last().map_or(0.0, |l| l.total);
    println!("{name}: {} steps, final loss {last:.6}, checkpoint {}", history.len(), ckpt_path.display());
    Ok(())
}

fn load_labelled(data: &Path, vocab: &Vocab, max_len: usize) -> CliResult<Vec<Sample>> {
    require_file(data, "dataset")?;
    let mut samples = load_tsv(data)?;
    encode_all(&mut samples, vocab, max_len);
    Ok(samples)
}

fn load_model(checkpoint: &Path, vocab_path: &Path) -> CliResult<(SpikeBert, Vocab)> {
    require_file(checkpoint, "checkpoint")?;
    require_file(vocab_path, "vocabulary")?;
    let vocab = Vocab::load(vocab_path)?;
    let model = read_checkpoint(checkpoint)?.into_model()?;
    if model.config.vocab_size != vocab.len() {
        return Err(CliError::Runtime(Error::Data(format!(
            "checkpoint vocabulary size {} differs from {}",
            model.config.vocab_size,
            vocab.len()
        ))));
    }
    Ok((model, vocab))
}

fn eval(a: EvalArgs) -> CliResult {
    let (model, vocab) = load_model(&a.checkpoint, &a.vocab)?;
    let samples = load_labelled(&a.data, &vocab, model.config.max_len)?;
    let report = evaluate(&model, &samples)?;
    print!("{}", report.render());
    Ok(())
}

fn energy(a: EnergyArgs) -> CliResult {
    let (model, vocab) = load_model(&a.checkpoint, &a.vocab)?;
    let mut samples = load_labelled(&a.data, &vocab, model.config.max_len)?;
    samples.truncate(a.samples.max(1));
    if samples.is_empty() {
        return Err(CliError::Runtime(Error::Input("no samples for firing-rate measurement".into())));
    }
    let batch = TokenBatch::from_rows(samples.iter().map(|s| s.token_ids.as_slice()))?;
    let rates = measure_firing_rates(&model, &batch)?;
    let report = snn_energy(&model_profiles(&model.config, &rates)?)?;
    let text = report.render_text();
    let out = output(&a.out, &a.common, "energy.txt")?;
    let kv = output(&a.kv, &a.common, "energy.kv")?;
    fs::write(&out, &text).map_err(|e| CliError::Runtime(e.into()))?;
    fs::write(&kv, report.render_kv()).map_err(|e| CliError::Runtime(e.into()))?;
    print!("{text}");
    Ok(())
}
