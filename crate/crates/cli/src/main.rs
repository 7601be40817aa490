use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentigen_core::generator::GenerationMode;
use sentigen_core::gradcheck::{self, GradModule};
use sentigen_core::metrics::evaluate_corpus;
use sentigen_core::remi::corpus::{read_label_manifest, read_token_file, write_token_file, CorpusEntry};
use sentigen_core::remi::vocab::BOS;
use sentigen_core::remi::{decode, encode, parse_midi, write_midi, DecodeMode, TokenSequence};
use sentigen_core::trainer::{
    load_checkpoint, load_checkpoint_checked, save_checkpoint, Corpus, LogRecord, PreparedData, TrainConfig, Trainer,
};
use sentigen_core::EmotionClass;

#[derive(Parser)]
#[command(name = "sentigen", version, about = "Sentiment-conditioned symbolic music generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a directory of MIDI files into a token file.
    Encode {
        /// Directory of .mid/.midi files.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output token file; a `.manifest` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Label manifest (`<file> <Q1..Q4>` lines), or `none`.
        #[arg(long, default_value = "none")]
        labels: String,
    },
    /// Write one MIDI file per sequence of a token file.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Fail on the first grammar error instead of repairing.
        #[arg(long)]
        strict: bool,
    },
    /// Teacher-forced pretraining on labeled and unlabeled sequences.
    Pretrain {
        /// Training configuration (`key = value` lines); defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Token file produced by `encode`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        ckpt: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print every n-th log record.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Adversarial fine-tuning of a pretrained checkpoint on labeled sequences.
    Advtrain {
        /// Must match the configuration stored in the checkpoint if given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        /// Pretrained (or partially fine-tuned) checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Sample a piece for one emotion class.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Q1, Q2, Q3 or Q4.
        #[arg(long)]
        class: String,
        /// Maximum number of new tokens.
        #[arg(long, default_value_t = 512)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// MIDI output; the tokens go to the same path with a `.tokens` extension.
        #[arg(long)]
        out: PathBuf,
        /// Token file whose first sequence supplies the primer.
        #[arg(long)]
        primer: Option<PathBuf>,
        /// Primer length in tokens; defaults to the checkpoint's primer_len.
        #[arg(long)]
        primer_len: Option<usize>,
    },
    /// Pitch range, pitch classes and polyphony of a corpus.
    Evaluate {
        /// Directory of MIDI and token files.
        #[arg(long = "in")]
        input: PathBuf,
        /// Label manifest for MIDI files.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Write per-sample records here instead of stdout.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run only a check with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        negative_control: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Tensor,
    Attention,
    Generator,
    Discriminator,
    Losses,
}

impl ModuleArg {
    fn modules(self) -> Vec<GradModule> {
        match self {
            ModuleArg::All => GradModule::ALL.to_vec(),
            ModuleArg::Tensor => vec![GradModule::Tensor],
            ModuleArg::Attention => vec![GradModule::Attention],
            ModuleArg::Generator => vec![GradModule::Generator],
            ModuleArg::Discriminator => vec![GradModule::Discriminator],
            ModuleArg::Losses => vec![GradModule::Losses],
        }
    }
}

fn is_midi(path: &Path) -> bool {
    path.is_file()
        && path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

fn run_encode(input: &Path, out: &Path, labels: &str) -> Result<()> {
    let labels = match labels {
        "none" => Default::default(),
        path => read_label_manifest(Path::new(path))?,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_midi(p))
        .collect();
    paths.sort();
    let mut entries = Vec::new();
    let mut skipped = 0;
    for path in &paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let notes = match fs::read(path).map_err(anyhow::Error::from).and_then(|b| Ok(parse_midi(&b)?)) {
            Ok(n) => n,
            Err(e) => {
                warn!("skipping {name}: {e}");
                skipped += 1;
                continue;
            }
        };
        let mut sequence = encode(&notes);
        sequence.label = labels.get(&name).copied().unwrap_or(EmotionClass::Unlabeled);
        entries.push(CorpusEntry { source: name, sequence });
    }
    if entries.is_empty() {
        warn!("no MIDI files encoded from {}", input.display());
    }
    write_token_file(out, &entries)?;
    println!("encoded {} files, skipped {skipped}", entries.len());
    Ok(())
}

fn run_decode(input: &Path, out: &Path, strict: bool) -> Result<()> {
    let entries = read_token_file(input)?;
    fs::create_dir_all(out)?;
    let mode = if strict { DecodeMode::Strict } else { DecodeMode::Robust };
    let mut repaired = 0;
    for (i, e) in entries.iter().enumerate() {
        let decoded = decode(&e.sequence.tokens, mode).with_context(|| format!("sequence {i} ({})", e.source))?;
        repaired += decoded.warnings;
        let stem = Path::new(&e.source).file_stem().and_then(|s| s.to_str()).unwrap_or("seq");
        fs::write(out.join(format!("{i:04}_{stem}.mid")), write_midi(&decoded.notes))?;
    }
    println!("decoded {} sequences, {repaired} tokens repaired", entries.len());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    })
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let entries = read_token_file(path)?;
    Ok(Corpus::from_sequences(entries.into_iter().map(|e| e.sequence)))
}

fn printer(every: u64) -> impl FnMut(&LogRecord) {
    move |r: &LogRecord| {
        if every > 0 && r.step % every == 0 {
            println!("{r}");
        }
    }
}

fn run_pretrain(config: Option<&Path>, input: &Path, ckpt: &Path, resume: Option<&Path>, log_every: u64) -> Result<()> {
    let config = load_config(config)?;
    let corpus = load_corpus(input)?;
    let data = PreparedData::new(&corpus, &config)?;
    info!("{} labeled and {} unlabeled windows", data.labeled.len(), data.unlabeled.len());
    let mut trainer = match resume {
        Some(p) => load_checkpoint_checked(p, &config)?,
        None => Trainer::new(config)?,
    };
    trainer.pretrain(&data, printer(log_every))?;
    save_checkpoint(&trainer, ckpt)?;
    println!("pretrained {} steps, checkpoint {}", trainer.pretrain_done, ckpt.display());
    Ok(())
}

fn run_advtrain(config: Option<&Path>, input: &Path, ckpt: &Path, out: &Path, log_every: u64) -> Result<()> {
    let mut trainer = match config {
        Some(p) => load_checkpoint_checked(ckpt, &TrainConfig::from_file(p)?)?,
        None => load_checkpoint(ckpt)?,
    };
    if trainer.pretrain_done < trainer.config.pretrain_steps {
        bail!(
            "checkpoint has {} of {} pretraining steps; finish pretraining first",
            trainer.pretrain_done,
            trainer.config.pretrain_steps
        );
    }
    let data = PreparedData::new(&load_corpus(input)?, &trainer.config)?;
    info!("{} adversarial windows", data.adversarial.len());
    trainer.adversarial_train(&data, printer(log_every))?;
    save_checkpoint(&trainer, out)?;
    println!("adversarial steps {}, checkpoint {}", trainer.adv_done, out.display());
    Ok(())
}

struct GenerateArgs<'a> {
    ckpt: &'a Path,
    class: &'a str,
    length: usize,
    seed: u64,
    out: &'a Path,
    primer: Option<&'a Path>,
    primer_len: Option<usize>,
}

fn run_generate(a: GenerateArgs<'_>) -> Result<()> {
    let class: EmotionClass = a.class.parse()?;
    if !class.is_labeled() {
        bail!("generation needs a class in Q1..Q4, got {class}");
    }
    let trainer = load_checkpoint(a.ckpt)?;
    let primer = match a.primer {
        Some(p) => {
            let entries = read_token_file(p)?;
            let first = entries.first().with_context(|| format!("{} has no sequences", p.display()))?;
            let n = a.primer_len.unwrap_or(trainer.config.primer_len).min(first.sequence.len());
            first.sequence.tokens[..n].to_vec()
        }
        None => vec![BOS],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let tau = trainer.config.tau_min;
    let generation = trainer.generator.generate(&primer, class, a.length, GenerationMode::HardEval, tau, &mut rng)?;
    let decoded = decode(&generation.tokens, DecodeMode::Robust)?;
    fs::write(a.out, write_midi(&decoded.notes))?;
    let token_path = a.out.with_extension("tokens");
    let sequence = TokenSequence::new(generation.tokens.clone(), class)?;
    let source = a.out.file_name().and_then(|n| n.to_str()).unwrap_or("generated").to_string();
    write_token_file(&token_path, &[CorpusEntry { source, sequence }])?;
    println!(
        "generated {} tokens ({} notes) for {class}, wrote {} and {}",
        generation.generated().len(),
        decoded.notes.notes.len(),
        a.out.display(),
        token_path.display()
    );
    Ok(())
}

fn run_evaluate(input: &Path, labels: Option<&Path>, records: Option<&Path>) -> Result<()> {
    let report = evaluate_corpus(input, labels)?;
    for w in &report.warnings {
        warn!("{w}");
    }
    print!("{}", report.table());
    match records {
        Some(p) => fs::write(p, report.records())?,
        None => print!("{}", report.records()),
    }
    Ok(())
}

fn run_gradcheck(module: ModuleArg, seed: u64, negative_control: bool) -> Result<bool> {
    if negative_control {
        let r = gradcheck::negative_control()?;
        println!("{r}");
        return Ok(r.passed);
    }
    let results = gradcheck::run(&module.modules(), seed, |r| println!("{r}"))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Encode { input, out, labels } => run_encode(&input, &out, &labels)?,
        Command::Decode { input, out, strict } => run_decode(&input, &out, strict)?,
        Command::Pretrain { config, input, ckpt, resume, log_every } => {
            run_pretrain(config.as_deref(), &input, &ckpt, resume.as_deref(), log_every)?
        }
        Command::Advtrain { config, input, ckpt, out, log_every } => {
            run_advtrain(config.as_deref(), &input, &ckpt, &out, log_every)?
        }
        Command::Generate { ckpt, class, length, seed, out, primer, primer_len } => run_generate(GenerateArgs {
            ckpt: &ckpt,
            class: &class,
            length,
            seed,
            out: &out,
            primer: primer.as_deref(),
            primer_len,
        })?,
        Command::Evaluate { input, labels, records } => run_evaluate(&input, labels.as_deref(), records.as_deref())?,
        Command::Gradcheck { module, seed, negative_control } => return run_gradcheck(module, seed, negative_control),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SENTIGEN_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
