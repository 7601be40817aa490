//! Patch-based conditional critic with a [CLS] global head and a per-patch
//! local head.

use rand::Rng;

use crate::attention::{sinusoidal_encoding, AttentionBlock, MaskMode};
use crate::emotion::EmotionClass;
use crate::error::{contract_err, Error, Result};
use crate::generator::ConditionalLayerNorm;
use crate::remi::VOCAB_SIZE;
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Tolerance on the row sums of probability-row inputs.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub patch_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    /// Add sinusoidal encodings to the patch embeddings.
    pub positional: bool,
    /// Longest accepted input in tokens.
    pub max_len: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            patch_len: 16,
            vocab_size: VOCAB_SIZE,
            n_classes: 4,
            positional: true,
            max_len: 2048,
        }
    }
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        Self { n_blocks: 2, d_model: 32, n_heads: 4, d_ff: 64, max_len: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.patch_len == 0 || self.vocab_size == 0 || self.d_ff == 0 {
            return Err(Error::Config("patch_len, vocab_size and d_ff must be positive".into()));
        }
        if self.n_classes != 4 {
            return Err(Error::Config(format!("n_classes must be 4, got {}", self.n_classes)));
        }
        Ok(())
    }
}

/// Scores of one input: a global scalar and one score per patch.
#[derive(Clone, Copy, Debug)]
pub struct CriticOutput<'t> {
    /// Shape `[1]`.
    pub global: Var<'t>,
    /// Shape `[n_patches]`.
    pub local: Var<'t>,
}

/// Anything that scores probability rows; the gradient penalty is written
/// against this.
pub trait Critic {
    fn critic<'t>(&self, p: &Bound<'t>, rows: Var<'t>, class: EmotionClass) -> Result<CriticOutput<'t>>;
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    patch_proj: ParamId,
    patch_bias: ParamId,
    cls: ParamId,
    blocks: Vec<AttentionBlock>,
    final_norm: ConditionalLayerNorm,
    w_global: ParamId,
    b_global: ParamId,
    class_embed: ParamId,
    w_local: ParamId,
    b_local: ParamId,
    positions: Tensor,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let fan_in = (config.patch_len * config.vocab_size) as f64;
        let patch_proj = params.add_normal("d.patch_proj", &[config.patch_len * config.vocab_size, d], fan_in.powf(-0.5), rng);
        let patch_bias = params.add("d.patch_bias", Tensor::zeros(&[d]));
        let cls = params.add_normal("d.cls", &[1, d], 1.0, rng);
        let residual_scale = (2.0 * config.n_blocks.max(1) as f64).powf(-0.5);
        let blocks = (0..config.n_blocks)
            .map(|i| AttentionBlock::new(&mut params, &format!("d.block{i}"), d, config.d_ff, config.n_heads, residual_scale, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = ConditionalLayerNorm::new(&mut params, "d.final_norm", d);
        let std = (d as f64).powf(-0.5);
        let w_global = params.add_normal("d.w_global", &[d, 1], std, rng);
        let b_global = params.add("d.b_global", Tensor::zeros(&[1]));
        let class_embed = params.add_normal("d.class_embed", &[config.n_classes, d], std, rng);
        let w_local = params.add_normal("d.w_local", &[d, 1], std, rng);
        let b_local = params.add("d.b_local", Tensor::zeros(&[1]));
        let n_pos = config.max_len / config.patch_len + 1;
        let positions = sinusoidal_encoding(n_pos, d);
        Ok(Self {
            config,
            params,
            patch_proj,
            patch_bias,
            cls,
            blocks,
            final_norm,
            w_global,
            b_global,
            class_embed,
            w_local,
            b_local,
            positions,
        })
    }

    pub fn class_embedding_id(&self) -> ParamId {
        self.class_embed
    }

    fn check_rows(&self, rows: &Tensor, class: EmotionClass) -> Result<usize> {
        if !class.is_labeled() {
            return contract_err(format!("critic class must be Q1..Q4, got {class}"));
        }
        let (l, v) = rows.dims2()?;
        if v != self.config.vocab_size {
            return Err(Error::Shape(format!("rows of width {v}, vocabulary is {}", self.config.vocab_size)));
        }
        if l == 0 || l % self.config.patch_len != 0 {
            return contract_err(format!("length {l} is not a positive multiple of patch_len {}", self.config.patch_len));
        }
        if l > self.config.max_len {
            return contract_err(format!("length {l} exceeds max_len {}", self.config.max_len));
        }
        for i in 0..l {
            let s: f64 = rows.row(i).iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return contract_err(format!("row {i} sums to {s}"));
            }
        }
        Ok(l / self.config.patch_len)
    }

    /// Hidden states `[1 + n_patches, d]`, [CLS] first.
    fn hidden<'t>(&self, p: &Bound<'t>, rows: Var<'t>, n_patches: usize) -> Result<Var<'t>> {
        let d = self.config.d_model;
        let tape = rows.tape();
        let flat = rows.reshape(&[n_patches, self.config.patch_len * self.config.vocab_size])?;
        let patches = flat.matmul(p.get(self.patch_proj))?.add(p.get(self.patch_bias))?;
        let mut x = tape.concat(&[p.get(self.cls), patches], 0)?;
        if self.config.positional {
            let pe = Tensor::new(vec![n_patches + 1, d], self.positions.data()[..(n_patches + 1) * d].to_vec())?;
            x = x.add(tape.constant(pe))?;
        }
        for block in &self.blocks {
            x = block.forward(p, x, EmotionClass::Unlabeled, MaskMode::Full)?;
        }
        self.final_norm.forward(p, x, EmotionClass::Unlabeled)
    }

    /// [CLS] representation without recording gradients.
    pub fn cls_state(&self, rows: &Tensor, class: EmotionClass) -> Result<Vec<f64>> {
        let n = self.check_rows(rows, class)?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let h = self.hidden(&p, tape.constant(rows.clone()), n)?;
        Ok(h.value().row(0).to_vec())
    }

    /// Scores without recording gradients: (global, local).
    pub fn score(&self, rows: &Tensor, class: EmotionClass) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.critic(&p, tape.constant(rows.clone()), class)?;
        Ok((out.global.value().data()[0], out.local.value().data().to_vec()))
    }
}

impl Critic for Discriminator {
    fn critic<'t>(&self, p: &Bound<'t>, rows: Var<'t>, class: EmotionClass) -> Result<CriticOutput<'t>> {
        let n = self.check_rows(&rows.value(), class)?;
        let h = self.hidden(p, rows, n)?;
        let cls = h.slice(0, 0, 1)?;
        let c = class.index();
        let e = p.get(self.class_embed).slice(0, c, c + 1)?;
        let projection = cls.mul(e)?.sum_axis(1)?;
        let global = cls.matmul(p.get(self.w_global))?.add(p.get(self.b_global))?.add(projection)?.reshape(&[1])?;
        let local = h
            .slice(0, 1, n + 1)?
            .matmul(p.get(self.w_local))?
            .add(p.get(self.b_local))?
            .reshape(&[n])?;
        Ok(CriticOutput { global, local })
    }
}

/// One-hot rows `[L×V]` for a token sequence.
pub fn tokens_to_rows(tokens: &[usize], vocab_size: usize) -> Result<Tensor> {
    let mut data = vec![0.0; tokens.len() * vocab_size];
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab_size {
            return Err(Error::Index(format!("token {t} outside vocabulary of {vocab_size}")));
        }
        data[i * vocab_size + t] = 1.0;
    }
    Tensor::new(vec![tokens.len(), vocab_size], data)
}
