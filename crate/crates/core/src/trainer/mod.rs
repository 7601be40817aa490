//! Two-stage training: teacher-forced pretraining, then adversarial
//! fine-tuning against the patch critic. Checkpoints and log records.

mod checkpoint;
mod config;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_checked, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::TrainConfig;

use std::fmt;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{tokens_to_rows, Critic, Discriminator};
use crate::emotion::EmotionClass;
use crate::error::{contract_err, Error, Result};
use crate::generator::{schedule_tau, GenerationMode, Generator};
use crate::losses::{discriminator_total, generator_total, gradient_penalty, rsgan_d, rsgan_g, Head};
use crate::remi::vocab::PAD;
use crate::remi::{chunk, TokenSequence, VOCAB_SIZE};
use crate::tensor::{Adam, Tape, Tensor, Var};

/// Labeled (Q1–Q4) and unlabeled sequences.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub labeled: Vec<TokenSequence>,
    pub unlabeled: Vec<TokenSequence>,
}

impl Corpus {
    /// Splits by label.
    pub fn from_sequences(seqs: impl IntoIterator<Item = TokenSequence>) -> Self {
        let (labeled, unlabeled) = seqs.into_iter().partition(|s| s.label.is_labeled());
        Self { labeled, unlabeled }
    }
}

/// A training example: tokens and the class that conditions them.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub class: EmotionClass,
}

/// Corpus cut into fixed-length, non-overlapping windows for each stage.
#[derive(Clone, Debug, Default)]
pub struct PreparedData {
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub adversarial: Vec<Example>,
}

fn windows(seqs: &[TokenSequence], length: usize, min_tokens: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for s in seqs {
        for c in chunk(s, length, length)? {
            if c.tokens.iter().filter(|&&t| t != PAD).count() >= min_tokens {
                out.push(Example { tokens: c.tokens, class: s.label });
            }
        }
    }
    Ok(out)
}

impl PreparedData {
    pub fn new(corpus: &Corpus, config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            labeled: windows(&corpus.labeled, config.pretrain_seq_len, 2)?,
            unlabeled: windows(&corpus.unlabeled, config.pretrain_seq_len, 2)?,
            adversarial: windows(&corpus.labeled, config.adv_seq_len, config.primer_len)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Adversarial,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Adversarial => "adversarial",
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub stage: Stage,
    pub losses: Vec<(&'static str, f64)>,
    pub tau: Option<f64>,
}

impl LogRecord {
    pub fn loss(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} stage={}", self.step, self.stage)?;
        for (name, v) in &self.losses {
            write!(f, " {name}={v:?}")?;
        }
        if let Some(t) = self.tau {
            write!(f, " tau={t:?}")?;
        }
        Ok(())
    }
}

/// Networks, optimizers, counters and the random stream of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub(crate) g_opt: Adam,
    pub(crate) d_opt: Adam,
    pub pretrain_done: u64,
    pub adv_done: u64,
    pub(crate) rng: ChaCha8Rng,
}

fn guard<T>(step: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(m) => Error::Divergence { step, message: m },
        other => other,
    })
}

fn finite(step: u64, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { step, message: format!("{name} = {v}") })
    }
}

fn mean<'t>(terms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let n = terms.len() as f64;
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    for t in it {
        acc = acc.add(t)?;
    }
    acc.scale(1.0 / n)
}

fn sample<'a>(pool: &'a [Example], n: usize, rng: &mut impl Rng) -> Vec<&'a Example> {
    (0..n).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(config.generator_config(), &mut rng)?;
        let discriminator = Discriminator::new(config.discriminator_config(), &mut rng)?;
        let g_opt = Adam::new(&generator.params, config.lr);
        let d_opt = Adam::new(&discriminator.params, config.lr);
        Ok(Self { config, generator, discriminator, g_opt, d_opt, pretrain_done: 0, adv_done: 0, rng })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Temperature for the next adversarial step.
    pub fn tau(&self) -> f64 {
        schedule_tau(self.adv_done, self.config.adv_steps, self.config.tau_min)
    }

    /// Source of pretraining step `step`: labeled on even steps, unlabeled on
    /// odd ones, falling back to whichever set is non-empty.
    pub fn pretrain_source(step: u64, data: &PreparedData) -> Result<(&[Example], bool)> {
        let labeled_turn = step % 2 == 0;
        match (data.labeled.is_empty(), data.unlabeled.is_empty()) {
            (true, true) => contract_err("pretraining corpus is empty"),
            (false, true) => Ok((&data.labeled, true)),
            (true, false) => Ok((&data.unlabeled, false)),
            _ if labeled_turn => Ok((&data.labeled, true)),
            _ => Ok((&data.unlabeled, false)),
        }
    }

    /// One teacher-forced step on a batch from the set chosen by step parity.
    pub fn pretrain_step(&mut self, data: &PreparedData) -> Result<LogRecord> {
        let step = self.pretrain_done;
        let (pool, labeled) = Self::pretrain_source(step, data)?;
        let batch = sample(pool, self.config.batch_size, &mut self.rng);
        let loss = guard(step, self.mle_update(&batch))?;
        self.pretrain_done += 1;
        let source = if labeled { 0.0 } else { 1.0 };
        Ok(LogRecord { step, stage: Stage::Pretrain, losses: vec![("mle", loss), ("unlabeled", source)], tau: None })
    }

    fn mle_update(&mut self, batch: &[&Example]) -> Result<f64> {
        let g = &self.generator;
        let tape = Tape::new();
        let p = g.params.bind(&tape);
        let terms = batch.iter().map(|e| g.mle_loss(&p, &e.tokens, e.class)).collect::<Result<Vec<_>>>()?;
        let loss = mean(terms)?;
        let value = finite(self.pretrain_done, "mle", loss.item()?)?;
        tape.backward(loss)?;
        self.generator.params.accumulate_grads(&tape, &p);
        self.g_opt.step(&mut self.generator.params)?;
        self.generator.params.zero_grad();
        Ok(value)
    }

    /// Runs pretraining until `pretrain_steps` are done.
    pub fn pretrain(&mut self, data: &PreparedData, mut on_record: impl FnMut(&LogRecord)) -> Result<()> {
        while self.pretrain_done < self.config.pretrain_steps {
            let r = self.pretrain_step(data)?;
            if r.step % 100 == 0 {
                info!("{r}");
            }
            on_record(&r);
        }
        Ok(())
    }

    /// Runs adversarial steps until `adv_steps` are done.
    pub fn adversarial_train(&mut self, data: &PreparedData, mut on_record: impl FnMut(&LogRecord)) -> Result<()> {
        while self.adv_done < self.config.adv_steps {
            let r = self.adversarial_step(data)?;
            if r.step % 100 == 0 {
                info!("{r}");
            }
            on_record(&r);
        }
        Ok(())
    }

    pub fn adversarial_step(&mut self, data: &PreparedData) -> Result<LogRecord> {
        self.adversarial_step_with(data, self.config.d_steps_per_g)
    }

    /// One adversarial step with an explicit number of critic updates
    /// (zero skips the critic entirely).
    pub fn adversarial_step_with(&mut self, data: &PreparedData, d_steps: usize) -> Result<LogRecord> {
        if data.adversarial.is_empty() {
            return contract_err("adversarial stage needs labeled sequences");
        }
        let step = self.adv_done;
        let tau = self.tau();
        let batch: Vec<Example> = sample(&data.adversarial, self.config.batch_size, &mut self.rng).into_iter().cloned().collect();
        let mut losses = Vec::new();
        for _ in 0..d_steps {
            let (d_loss, accuracy) = guard(step, self.critic_update(&batch, tau))?;
            losses = vec![("d_total", finite(step, "d_total", d_loss)?), ("d_accuracy", accuracy)];
        }
        let (g_total, mle) = guard(step, self.generator_update(&batch, tau))?;
        losses.push(("g_total", finite(step, "g_total", g_total)?));
        losses.push(("mle", mle));
        self.adv_done += 1;
        Ok(LogRecord { step, stage: Stage::Adversarial, losses, tau: Some(tau) })
    }

    fn fake_rows(&mut self, e: &Example, tau: f64) -> Result<(crate::generator::Generation, Tensor)> {
        let cfg = &self.config;
        let primer = &e.tokens[..cfg.primer_len];
        let gen = self.generator.generate(primer, e.class, cfg.adv_seq_len - cfg.primer_len, GenerationMode::SoftTrain, tau, &mut self.rng)?;
        let mut rows = tokens_to_rows(primer, VOCAB_SIZE)?.into_data();
        rows.extend_from_slice(gen.soft_rows.data());
        let rows = Tensor::new(vec![cfg.adv_seq_len, VOCAB_SIZE], rows)?;
        Ok((gen, rows))
    }

    fn critic_update(&mut self, batch: &[Example], tau: f64) -> Result<(f64, f64)> {
        let fakes = batch.iter().map(|e| self.fake_rows(e, tau).map(|(_, r)| r)).collect::<Result<Vec<_>>>()?;
        let d = &self.discriminator;
        let w = self.config.weights;
        let tape = Tape::new();
        let p = d.params.bind(&tape);
        let mut terms = Vec::with_capacity(batch.len());
        let mut accuracy = 0.0;
        for (e, fake) in batch.iter().zip(&fakes) {
            let real = tokens_to_rows(&e.tokens, VOCAB_SIZE)?;
            let out_r = d.critic(&p, tape.constant(real.clone()), e.class)?;
            let out_f = d.critic(&p, tape.constant(fake.clone()), e.class)?;
            let gap = out_r.global.value().data()[0] - out_f.global.value().data()[0];
            accuracy += 1.0 / (1.0 + (-gap).exp());
            let dg = rsgan_d(out_r.global, out_f.global)?;
            let dl = rsgan_d(out_r.local, out_f.local)?;
            let (gpg, gpl) = if w.lambda > 0.0 {
                (
                    gradient_penalty(d, &p, &real, fake, e.class, Head::Global, &mut self.rng)?,
                    gradient_penalty(d, &p, &real, fake, e.class, Head::Local, &mut self.rng)?,
                )
            } else {
                (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
            };
            terms.push(discriminator_total(dg, dl, gpg, gpl, &w)?);
        }
        let loss = mean(terms)?;
        let value = loss.item()?;
        tape.backward(loss)?;
        self.discriminator.params.accumulate_grads(&tape, &p);
        self.d_opt.step(&mut self.discriminator.params)?;
        self.discriminator.params.zero_grad();
        Ok((value, accuracy / batch.len() as f64))
    }

    fn generator_update(&mut self, batch: &[Example], tau: f64) -> Result<(f64, f64)> {
        let w = self.config.weights;
        let adversarial = w.alpha > 0.0 || w.beta > 0.0;
        let gens = if adversarial {
            batch.iter().map(|e| self.fake_rows(e, tau).map(|(g, _)| g)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (g, d) = (&self.generator, &self.discriminator);
        let tape = Tape::new();
        let pg = g.params.bind(&tape);
        let pd = d.params.bind_frozen(&tape);
        let mut terms = Vec::with_capacity(batch.len());
        let mut mle_sum = 0.0;
        for (i, e) in batch.iter().enumerate() {
            let mle = g.mle_loss(&pg, &e.tokens, e.class)?;
            mle_sum += mle.item()?;
            if !adversarial {
                terms.push(mle);
                continue;
            }
            let primer = tape.constant(tokens_to_rows(&e.tokens[..self.config.primer_len], VOCAB_SIZE)?);
            let soft = g.soft_rows_on_tape(&pg, &gens[i], e.class)?;
            let fake = tape.concat(&[primer, soft], 0)?;
            let out_f = d.critic(&pd, fake, e.class)?;
            let out_r = d.critic(&pd, tape.constant(tokens_to_rows(&e.tokens, VOCAB_SIZE)?), e.class)?;
            let gg = rsgan_g(out_r.global, out_f.global)?;
            let gl = rsgan_g(out_r.local, out_f.local)?;
            terms.push(generator_total(mle, gg, gl, &w)?);
        }
        let loss = mean(terms)?;
        let value = loss.item()?;
        tape.backward(loss)?;
        self.generator.params.accumulate_grads(&tape, &pg);
        self.g_opt.step(&mut self.generator.params)?;
        self.generator.params.zero_grad();
        Ok((value, mle_sum / batch.len() as f64))
    }
}
