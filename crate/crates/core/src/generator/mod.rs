//! Class-conditional autoregressive Transformer over REMI tokens.

mod condnorm;
pub mod gumbel;

pub use condnorm::ConditionalLayerNorm;
pub use gumbel::{gumbel_sample_hard, gumbel_sample_index, gumbel_sample_soft, gumbel_softmax, schedule_tau};

use rand::Rng;

use crate::attention::{row_matmul, sinusoidal_encoding, AttentionBlock, MaskMode, RecurrentState};
use crate::emotion::EmotionClass;
use crate::error::{contract_err, Error, Result};
use crate::remi::vocab::{EOS, PAD};
use crate::remi::VOCAB_SIZE;
use crate::tensor::{cross_entropy, embedding, Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub tau_min: f64,
    pub pretrain_seq_len: usize,
    pub adv_seq_len: usize,
    pub primer_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: VOCAB_SIZE,
            max_len: 2048,
            tau_min: 1e-2,
            pretrain_seq_len: 128,
            adv_seq_len: 128,
            primer_len: 16,
        }
    }
}

impl GeneratorConfig {
    /// Small model for tests and quick experiments.
    pub fn toy() -> Self {
        Self { n_blocks: 2, d_model: 32, n_heads: 4, d_ff: 64, max_len: 256, pretrain_seq_len: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return bad(format!("tau_min {} outside (0, 1)", self.tau_min));
        }
        if self.primer_len >= self.adv_seq_len {
            return bad(format!("primer_len {} must be below adv_seq_len {}", self.primer_len, self.adv_seq_len));
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("vocab_size, d_ff and max_len must be positive".into());
        }
        if self.pretrain_seq_len > self.max_len || self.adv_seq_len > self.max_len {
            return bad(format!("sequence lengths exceed max_len {}", self.max_len));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerationMode {
    /// Gumbel-max sampling; stops after EOS.
    HardEval,
    /// Relaxed rows at temperature τ; the argmax token is fed back.
    SoftTrain,
}

/// Output of [`Generator::generate`].
#[derive(Clone, Debug)]
pub struct Generation {
    /// Primer followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub primer_len: usize,
    /// One probability row per generated token: one-hot in hard mode,
    /// relaxed in soft mode.
    pub soft_rows: Tensor,
    /// Gumbel noise used for each generated row.
    pub noise: Tensor,
    pub tau: f64,
}

impl Generation {
    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.primer_len..]
    }
}

/// Per-block recurrent state plus position.
#[derive(Clone, Debug)]
pub struct GeneratorState {
    blocks: Vec<RecurrentState>,
    pos: usize,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    embed: ParamId,
    blocks: Vec<AttentionBlock>,
    final_norm: ConditionalLayerNorm,
    head: ParamId,
    head_bias: ParamId,
    positions: Tensor,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let embed = params.add_normal("g.embed", &[config.vocab_size, d], 1.0, rng);
        let residual_scale = (2.0 * config.n_blocks as f64).powf(-0.5);
        let blocks = (0..config.n_blocks)
            .map(|i| AttentionBlock::new(&mut params, &format!("g.block{i}"), d, config.d_ff, config.n_heads, residual_scale, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = ConditionalLayerNorm::new(&mut params, "g.final_norm", d);
        let head = params.add_normal("g.head", &[d, config.vocab_size], 0.1 * (d as f64).powf(-0.5), rng);
        let head_bias = params.add("g.head_bias", Tensor::zeros(&[config.vocab_size]));
        let positions = sinusoidal_encoding(config.max_len, d);
        Ok(Self { config, params, embed, blocks, final_norm, head, head_bias, positions })
    }

    pub fn blocks(&self) -> &[AttentionBlock] {
        &self.blocks
    }

    pub fn final_norm(&self) -> &ConditionalLayerNorm {
        &self.final_norm
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!("token {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        if tokens.len() > self.config.max_len {
            return contract_err(format!("sequence of {} exceeds max_len {}", tokens.len(), self.config.max_len));
        }
        Ok(())
    }

    /// Causal logits `[N×V]`; row i scores token i+1 given tokens ≤ i.
    pub fn forward_tf<'t>(&self, p: &Bound<'t>, tokens: &[usize], class: EmotionClass) -> Result<Var<'t>> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        if n == 0 {
            return contract_err("empty token sequence");
        }
        let tape = p.get(self.embed).tape();
        let pos = tape.constant(Tensor::new(vec![n, self.config.d_model], self.positions.data()[..n * self.config.d_model].to_vec())?);
        let mut x = embedding(p.get(self.embed), tokens)?.add(pos)?;
        for block in &self.blocks {
            x = block.forward(p, x, class, MaskMode::Causal)?;
        }
        let x = self.final_norm.forward(p, x, class)?;
        x.matmul(p.get(self.head))?.add(p.get(self.head_bias))
    }

    /// Logits without recording gradients.
    pub fn logits(&self, tokens: &[usize], class: EmotionClass) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward_tf(&p, tokens, class)?;
        Ok((*out.value()).clone())
    }

    /// Mean next-token cross-entropy over non-PAD targets.
    pub fn mle_loss<'t>(&self, p: &Bound<'t>, tokens: &[usize], class: EmotionClass) -> Result<Var<'t>> {
        if tokens.len() < 2 {
            return contract_err(format!("MLE needs at least 2 tokens, got {}", tokens.len()));
        }
        if tokens.iter().all(|&t| t == PAD) {
            return contract_err("MLE over an all-PAD sequence");
        }
        let logits = self.forward_tf(p, &tokens[..tokens.len() - 1], class)?;
        cross_entropy(logits, &tokens[1..], Some(PAD))
    }

    pub fn fresh_state(&self) -> GeneratorState {
        GeneratorState { blocks: self.blocks.iter().map(AttentionBlock::fresh_state).collect(), pos: 0 }
    }

    /// Feeds one token and returns the logits for the next one.
    pub fn step(&self, state: &mut GeneratorState, token: usize, class: EmotionClass) -> Result<Vec<f64>> {
        self.check_tokens(&[token])?;
        if state.pos >= self.config.max_len {
            return contract_err(format!("position {} exceeds max_len {}", state.pos, self.config.max_len));
        }
        let d = self.config.d_model;
        let table = self.params.get(self.embed);
        let pe = &self.positions.data()[state.pos * d..(state.pos + 1) * d];
        let mut x: Vec<f64> = table.row(token).iter().zip(pe).map(|(a, b)| a + b).collect();
        for (block, bs) in self.blocks.iter().zip(&mut state.blocks) {
            x = block.step(&self.params, &x, class, bs)?;
        }
        let x = self.final_norm.apply_row(&self.params, &x, class);
        let mut logits = row_matmul(&x, self.params.get(self.head));
        for (l, b) in logits.iter_mut().zip(self.params.get(self.head_bias).data()) {
            *l += b;
        }
        state.pos += 1;
        Ok(logits)
    }

    /// Autoregressive continuation of `primer` by up to `length` tokens using
    /// the recurrent form.
    pub fn generate(
        &self,
        primer: &[usize],
        class: EmotionClass,
        length: usize,
        mode: GenerationMode,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<Generation> {
        if primer.is_empty() {
            return contract_err("generation needs a non-empty primer");
        }
        if mode == GenerationMode::SoftTrain && !(tau > 0.0) {
            return contract_err(format!("temperature must be positive, got {tau}"));
        }
        if primer.len() + length > self.config.max_len {
            return contract_err(format!(
                "primer {} + length {length} exceeds max_len {}",
                primer.len(),
                self.config.max_len
            ));
        }
        let v = self.config.vocab_size;
        let mut state = self.fresh_state();
        let mut logits = Vec::new();
        for &t in primer {
            logits = self.step(&mut state, t, class)?;
        }
        let mut tokens = primer.to_vec();
        let mut rows = Vec::with_capacity(length * v);
        let mut noise = Vec::with_capacity(length * v);
        for i in 0..length {
            let lp = log_softmax_row(&logits);
            let g: Vec<f64> = (0..v).map(|_| gumbel::gumbel_noise(rng)).collect();
            let next = gumbel::gumbel_argmax(&lp, &g);
            match mode {
                GenerationMode::HardEval => {
                    let mut row = vec![0.0; v];
                    row[next] = 1.0;
                    rows.extend(row);
                }
                GenerationMode::SoftTrain => {
                    let z: Vec<f64> = lp.iter().zip(&g).map(|(a, b)| (a + b) / tau).collect();
                    rows.extend(softmax_row(&z));
                }
            }
            noise.extend(g);
            tokens.push(next);
            if mode == GenerationMode::HardEval && next == EOS {
                break;
            }
            if i + 1 < length {
                logits = self.step(&mut state, next, class)?;
            }
        }
        let produced = tokens.len() - primer.len();
        Ok(Generation {
            tokens,
            primer_len: primer.len(),
            soft_rows: Tensor::new(vec![produced, v], rows)?,
            noise: Tensor::new(vec![produced, v], noise)?,
            tau,
        })
    }

    /// Relaxed rows of a [`Generation`] rebuilt on the tape from the batched
    /// forward pass with the same noise, so they carry gradients to the
    /// generator parameters.
    pub fn soft_rows_on_tape<'t>(&self, p: &Bound<'t>, gen: &Generation, class: EmotionClass) -> Result<Var<'t>> {
        let produced = gen.tokens.len() - gen.primer_len;
        if produced == 0 {
            return contract_err("generation produced no tokens");
        }
        let logits = self.forward_tf(p, &gen.tokens[..gen.tokens.len() - 1], class)?;
        let rows = logits.slice(0, gen.primer_len - 1, gen.tokens.len() - 1)?;
        gumbel_softmax(rows, &gen.noise, gen.tau)
    }
}

pub(crate) fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> Generator {
        let cfg = GeneratorConfig { n_blocks: 2, d_model: 16, n_heads: 2, d_ff: 24, max_len: 64, pretrain_seq_len: 32, adv_seq_len: 32, primer_len: 4, ..GeneratorConfig::default() };
        Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn out_of_vocab_is_index_error() {
        let g = tiny(0);
        assert!(matches!(g.logits(&[1, 244], EmotionClass::Q1), Err(Error::Index(_))));
    }

    #[test]
    fn recurrent_logits_match_batched() {
        let g = tiny(1);
        let tokens = [1, 3, 4, 60, 190, 215, 8, 70, 185, 220];
        let batched = g.logits(&tokens, EmotionClass::Q3).unwrap();
        let mut state = g.fresh_state();
        for (i, &t) in tokens.iter().enumerate() {
            let row = g.step(&mut state, t, EmotionClass::Q3).unwrap();
            for (a, b) in row.iter().zip(batched.row(i)) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn padding_does_not_change_loss() {
        let g = tiny(2);
        let tape = Tape::new();
        let p = g.params.bind_frozen(&tape);
        let seq = vec![1, 3, 4, 60, 190, 215, 2];
        let a = g.mle_loss(&p, &seq, EmotionClass::Q1).unwrap().item().unwrap();
        let mut padded = seq.clone();
        padded.extend([PAD; 5]);
        let b = g.mle_loss(&p, &padded, EmotionClass::Q1).unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(g.mle_loss(&p, &[PAD; 6], EmotionClass::Q1).is_err());
        assert!(g.mle_loss(&p, &[1], EmotionClass::Q1).is_err());
    }

    #[test]
    fn soft_generation_rows_and_tape_rebuild() {
        let g = tiny(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = g.generate(&[1, 3, 4, 60], EmotionClass::Q2, 12, GenerationMode::SoftTrain, 0.5, &mut rng).unwrap();
        assert_eq!(gen.generated().len(), 12);
        for i in 0..12 {
            let row = gen.soft_rows.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, gen.generated()[i]);
        }
        let tape = Tape::new();
        let p = g.params.bind(&tape);
        let rows = g.soft_rows_on_tape(&p, &gen, EmotionClass::Q2).unwrap();
        assert!(rows.value().max_abs_diff(&gen.soft_rows) < 1e-8);
    }

    #[test]
    fn generation_is_seeded_and_stops_at_eos() {
        let g = tiny(4);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            g.generate(&[1], EmotionClass::Q4, 40, GenerationMode::HardEval, 1.0, &mut rng).unwrap().tokens
        };
        assert_eq!(run(9), run(9));
        let t = run(9);
        if let Some(i) = t.iter().skip(1).position(|&x| x == EOS) {
            assert_eq!(i + 2, t.len());
        }
        assert!(g.generate(&[], EmotionClass::Q4, 4, GenerationMode::HardEval, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
