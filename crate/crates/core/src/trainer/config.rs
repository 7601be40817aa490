use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::remi::VOCAB_SIZE;

/// Everything that determines a training run. Read from and written to a
/// `key = value` text file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain_steps: u64,
    pub adv_steps: u64,
    pub d_steps_per_g: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_seq_len: usize,
    pub adv_seq_len: usize,
    pub primer_len: usize,
    pub weights: LossWeights,
    pub tau_min: f64,
    pub seed: u64,
    pub g_blocks: usize,
    pub g_d_model: usize,
    pub g_heads: usize,
    pub g_d_ff: usize,
    pub d_blocks: usize,
    pub d_d_model: usize,
    pub d_heads: usize,
    pub d_d_ff: usize,
    pub patch_len: usize,
    pub d_positional: bool,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let d = DiscriminatorConfig::default();
        Self {
            pretrain_steps: 2000,
            adv_steps: 1000,
            d_steps_per_g: 1,
            lr: 1e-4,
            batch_size: 8,
            pretrain_seq_len: g.pretrain_seq_len,
            adv_seq_len: g.adv_seq_len,
            primer_len: g.primer_len,
            weights: LossWeights::default(),
            tau_min: g.tau_min,
            seed: 0,
            g_blocks: g.n_blocks,
            g_d_model: g.d_model,
            g_heads: g.n_heads,
            g_d_ff: g.d_ff,
            d_blocks: d.n_blocks,
            d_d_model: d.d_model,
            d_heads: d.n_heads,
            d_d_ff: d.d_ff,
            patch_len: d.patch_len,
            d_positional: d.positional,
            max_len: 512,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

impl TrainConfig {
    /// Small networks that train in seconds to minutes on a CPU.
    pub fn toy() -> Self {
        Self {
            g_blocks: 2,
            g_d_model: 32,
            g_heads: 4,
            g_d_ff: 64,
            d_blocks: 2,
            d_d_model: 32,
            d_heads: 4,
            d_d_ff: 64,
            max_len: 256,
            ..Self::default()
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_blocks: self.g_blocks,
            d_model: self.g_d_model,
            n_heads: self.g_heads,
            d_ff: self.g_d_ff,
            vocab_size: VOCAB_SIZE,
            max_len: self.max_len,
            tau_min: self.tau_min,
            pretrain_seq_len: self.pretrain_seq_len,
            adv_seq_len: self.adv_seq_len,
            primer_len: self.primer_len,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            n_blocks: self.d_blocks,
            d_model: self.d_d_model,
            n_heads: self.d_heads,
            d_ff: self.d_d_ff,
            patch_len: self.patch_len,
            vocab_size: VOCAB_SIZE,
            n_classes: 4,
            positional: self.d_positional,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_steps_per_g == 0 {
            return bad("d_steps_per_g must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.pretrain_seq_len < 2 {
            return bad("pretrain_seq_len must be at least 2".into());
        }
        if self.adv_seq_len % self.patch_len.max(1) != 0 {
            return bad(format!("adv_seq_len {} is not a multiple of patch_len {}", self.adv_seq_len, self.patch_len));
        }
        if self.primer_len == 0 || self.primer_len >= self.adv_seq_len {
            return bad(format!("primer_len {} must be in 1..adv_seq_len ({})", self.primer_len, self.adv_seq_len));
        }
        self.weights.validate()?;
        self.generator_config().validate()?;
        self.discriminator_config().validate()
    }

    /// Canonical text form; `from_text(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let pairs: [(&str, String); 24] = [
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("adv_steps", self.adv_steps.to_string()),
            ("d_steps_per_g", self.d_steps_per_g.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("pretrain_seq_len", self.pretrain_seq_len.to_string()),
            ("adv_seq_len", self.adv_seq_len.to_string()),
            ("primer_len", self.primer_len.to_string()),
            ("alpha", format!("{:?}", w.alpha)),
            ("beta", format!("{:?}", w.beta)),
            ("lambda", format!("{:?}", w.lambda)),
            ("tau_min", format!("{:?}", self.tau_min)),
            ("seed", self.seed.to_string()),
            ("g_blocks", self.g_blocks.to_string()),
            ("g_d_model", self.g_d_model.to_string()),
            ("g_heads", self.g_heads.to_string()),
            ("g_d_ff", self.g_d_ff.to_string()),
            ("d_blocks", self.d_blocks.to_string()),
            ("d_d_model", self.d_d_model.to_string()),
            ("d_heads", self.d_heads.to_string()),
            ("d_d_ff", self.d_d_ff.to_string()),
            ("patch_len", self.patch_len.to_string()),
            ("d_positional", self.d_positional.to_string()),
            ("max_len", self.max_len.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "pretrain_steps" => c.pretrain_steps = parse(key, value)?,
                "adv_steps" => c.adv_steps = parse(key, value)?,
                "d_steps_per_g" => c.d_steps_per_g = parse(key, value)?,
                "lr" => c.lr = parse(key, value)?,
                "batch_size" => c.batch_size = parse(key, value)?,
                "pretrain_seq_len" => c.pretrain_seq_len = parse(key, value)?,
                "adv_seq_len" => c.adv_seq_len = parse(key, value)?,
                "primer_len" => c.primer_len = parse(key, value)?,
                "alpha" => c.weights.alpha = parse(key, value)?,
                "beta" => c.weights.beta = parse(key, value)?,
                "lambda" => c.weights.lambda = parse(key, value)?,
                "tau_min" => c.tau_min = parse(key, value)?,
                "seed" => c.seed = parse(key, value)?,
                "g_blocks" => c.g_blocks = parse(key, value)?,
                "g_d_model" => c.g_d_model = parse(key, value)?,
                "g_heads" => c.g_heads = parse(key, value)?,
                "g_d_ff" => c.g_d_ff = parse(key, value)?,
                "d_blocks" => c.d_blocks = parse(key, value)?,
                "d_d_model" => c.d_d_model = parse(key, value)?,
                "d_heads" => c.d_heads = parse(key, value)?,
                "d_d_ff" => c.d_d_ff = parse(key, value)?,
                "patch_len" => c.patch_len = parse(key, value)?,
                "d_positional" => c.d_positional = parse(key, value)?,
                "max_len" => c.max_len = parse(key, value)?,
                other => return Err(Error::Config(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// First 8 bytes of the SHA-256 of the canonical text.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
