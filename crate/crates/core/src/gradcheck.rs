//! Central finite-difference checks of every differentiable operation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{feature_map, linear_attention_causal, linear_attention_full, AttentionBlock, MaskMode};
use crate::discriminator::{tokens_to_rows, Critic, Discriminator, DiscriminatorConfig};
use crate::emotion::EmotionClass;
use crate::error::{Error, Result};
use crate::generator::{gumbel::gumbel_noise, gumbel_softmax, ConditionalLayerNorm, GenerationMode, Generator, GeneratorConfig};
use crate::losses::{discriminator_total, generator_total, gradient_penalty_at, rsgan_d, rsgan_g, Head, LossWeights};
use crate::tensor::{cross_entropy, embedding, Bound, ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 10;
/// Gradients smaller than this are compared absolutely.
const DENOM_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Tensor,
    Attention,
    Generator,
    Discriminator,
    Losses,
}

impl GradModule {
    pub const ALL: [GradModule; 5] =
        [GradModule::Tensor, GradModule::Attention, GradModule::Generator, GradModule::Discriminator, GradModule::Losses];

    pub fn as_str(self) -> &'static str {
        match self {
            GradModule::Tensor => "tensor",
            GradModule::Attention => "attention",
            GradModule::Generator => "generator",
            GradModule::Discriminator => "discriminator",
            GradModule::Losses => "losses",
        }
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradModule::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: GradModule,
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} instances={} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.module.as_str(),
            self.name,
            self.instances,
            self.max_rel_err
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Evaluates `f` as a scalar: outputs are contracted with fixed random
/// weights so every output component contributes.
fn project<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    out.mul(out.tape().constant(weights.clone()))?.sum()
}

/// Compares the tape gradient of `f` with central differences on
/// `instances` random inputs from `make`. With `coords`, only that many
/// randomly chosen coordinates are differenced per instance.
pub fn check<F>(
    module: GradModule,
    name: &str,
    instances: usize,
    coords: Option<usize>,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: F,
) -> Result<CheckResult>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inputs = make(rng);
        let probe_tape = Tape::new();
        let probe: Vec<Var> = inputs.iter().map(|t| probe_tape.leaf(t.clone())).collect();
        let weights = normal(rng, &f(&probe)?.shape());
        let eval = |xs: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            project(f(&vars)?, &weights)?.item()
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = project(f(&vars)?, &weights)?;
        let grads = tape.grad(loss, &vars, false)?;
        let mut all: Vec<(usize, usize)> =
            inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
        if let Some(k) = coords {
            for s in 0..k.min(all.len()) {
                let pick = rng.random_range(s..all.len());
                all.swap(s, pick);
            }
            all.truncate(k);
        }
        let mut xs = inputs.clone();
        for (i, j) in all {
            let analytic = grads[i].map_or(0.0, |g| g.value().data()[j]);
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(CheckResult { module, name: name.to_string(), instances, max_rel_err: worst, passed: worst < REL_TOL })
}

/// A squaring operation whose backward rule is deliberately wrong by 10%.
/// The harness must report it as failing.
pub fn negative_control() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check(GradModule::Tensor, "corrupted_square", INSTANCES, None, &mut rng, |r| vec![normal(r, &[5])], |v| {
        let x = v[0];
        let value = x.value().map(|a| a * a);
        x.tape().custom("corrupted_square", &[x], value, |inputs, _, g| {
            let gx = inputs[0].data().iter().zip(g.data()).map(|(a, b)| 2.2 * a * b).collect();
            Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), gx)?)])
        })
    })
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<CheckResult>>;

fn case<M, F>(module: GradModule, name: &'static str, coords: Option<usize>, make: M, f: F) -> Case
where
    M: Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + 'static,
{
    Box::new(move |rng| check(module, name, INSTANCES, coords, rng, &make, &f))
}

fn tensor_cases() -> Vec<Case> {
    use GradModule::Tensor as T;
    let two = |a: &'static [usize], b: &'static [usize]| move |r: &mut ChaCha8Rng| vec![normal(r, a), normal(r, b)];
    let one = |a: &'static [usize]| move |r: &mut ChaCha8Rng| vec![normal(r, a)];
    vec![
        case(T, "add_broadcast", None, two(&[3, 4], &[4]), |v| v[0].add(v[1])),
        case(T, "sub", None, two(&[3, 4], &[3, 4]), |v| v[0].sub(v[1])),
        case(T, "mul_broadcast", None, two(&[2, 3, 4], &[3, 1]), |v| v[0].mul(v[1])),
        case(T, "div", None, |r| vec![normal(r, &[3, 4]), uniform(r, &[4], 0.5, 2.0)], |v| v[0].div(v[1])),
        case(T, "exp", None, one(&[3, 4]), |v| v[0].exp()),
        case(T, "log", None, |r| vec![uniform(r, &[3, 4], 0.5, 3.0)], |v| v[0].log()),
        case(T, "powf", None, |r| vec![uniform(r, &[3, 4], 0.5, 2.0)], |v| v[0].powf(1.7)),
        case(T, "sigmoid", None, one(&[3, 4]), |v| v[0].sigmoid()),
        case(T, "log_sigmoid", None, one(&[3, 4]), |v| v[0].log_sigmoid()),
        case(T, "elu", None, one(&[3, 4]), |v| v[0].elu()),
        case(T, "clamp_min", None, one(&[3, 4]), |v| v[0].clamp_min(0.1)),
        case(T, "sum_axis", None, one(&[3, 4]), |v| v[0].sum_axis(0)),
        case(T, "mean_axis", None, one(&[2, 3, 4]), |v| v[0].mean_axis(1)),
        case(T, "reshape_transpose", None, one(&[3, 4]), |v| v[0].reshape(&[2, 6])?.transpose()),
        case(T, "slice", None, one(&[4, 5]), |v| v[0].slice(1, 1, 4)),
        case(T, "pad_slice", None, one(&[2, 3]), |v| v[0].pad_slice(1, 2, 6)),
        case(T, "concat", None, two(&[2, 3], &[4, 3]), |v| v[0].tape().concat(v, 0)),
        case(T, "matmul", None, two(&[3, 4], &[4, 2]), |v| v[0].matmul(v[1])),
        case(T, "matmul_nt", None, two(&[3, 4], &[5, 4]), |v| v[0].matmul_nt(v[1])),
        case(T, "matmul_tn", None, two(&[4, 3], &[4, 2]), |v| v[0].matmul_tn(v[1])),
        case(T, "softmax", None, one(&[3, 5]), |v| v[0].softmax(1)),
        case(T, "log_softmax", None, one(&[3, 5]), |v| v[0].log_softmax(1)),
        case(T, "layer_norm", None, one(&[3, 6]), |v| Ok(v[0].layer_norm_stats(1)?.0)),
        case(T, "cross_entropy", None, one(&[4, 6]), |v| cross_entropy(v[0], &[1, 5, 0, 3], Some(0))),
        case(T, "embedding", None, one(&[6, 3]), |v| embedding(v[0], &[2, 0, 2, 5])),
        case(T, "second_order", None, two(&[2, 3], &[3, 4]), |v| {
            let (x, w) = (v[0], v[1]);
            let h = x.matmul(w)?.elu()?.layer_norm_stats(1)?.0.log_sigmoid()?.sum()?;
            let g = x.tape().grad(h, &[x], true)?[0].expect("depends on x");
            g.mul(g)?.sum()
        }),
    ]
}

fn block_params() -> (ParamStore, AttentionBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "b", 8, 12, 2, 1.0, &mut rng).expect("valid dims");
    (store, block)
}

fn store_inputs(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|p| (*p.value).clone()).collect()
}

fn perturbed(store: &ParamStore, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    store_inputs(store).into_iter().map(|t| {
        let noise = normal(rng, t.shape());
        Tensor::new(t.shape().to_vec(), t.data().iter().zip(noise.data()).map(|(a, b)| a + scale * b).collect()).expect("shape")
    }).collect()
}

fn attention_cases() -> Vec<Case> {
    use GradModule::Attention as A;
    let qkv = |r: &mut ChaCha8Rng| vec![normal(r, &[5, 4]), normal(r, &[5, 4]), normal(r, &[5, 4])];
    let mut cases = vec![
        case(A, "feature_map", None, |r| vec![normal(r, &[3, 4])], |v| feature_map(v[0])),
        case(A, "linear_attention_causal", None, qkv, |v| linear_attention_causal(v[0], v[1], v[2], 2)),
        case(A, "linear_attention_full", None, qkv, |v| linear_attention_full(v[0], v[1], v[2], 2)),
        case(A, "conditional_layer_norm", None, |r| vec![normal(r, &[3, 4]), normal(r, &[5, 4]), normal(r, &[5, 4])], |v| {
            let ln = ConditionalLayerNorm { gamma: crate::tensor::ParamId(0), beta: crate::tensor::ParamId(1), dim: 4 };
            ln.forward(&Bound::from_vars(vec![v[1], v[2]]), v[0], EmotionClass::Q2)
        }),
    ];
    for (mask, name) in [(MaskMode::Causal, "block_causal"), (MaskMode::Full, "block_full")] {
        let (store, block) = block_params();
        let make_store = store.clone();
        cases.push(case(
            A,
            name,
            None,
            move |r| {
                let mut inputs = vec![normal(r, &[4, 8])];
                inputs.extend(perturbed(&make_store, 0.1, r));
                inputs
            },
            move |v| block.forward(&Bound::from_vars(v[1..].to_vec()), v[0], EmotionClass::Q4, mask),
        ));
    }
    cases
}

fn tiny_generator() -> Generator {
    let cfg = GeneratorConfig {
        n_blocks: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        max_len: 32,
        pretrain_seq_len: 16,
        adv_seq_len: 16,
        primer_len: 4,
        ..GeneratorConfig::default()
    };
    Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(41)).expect("valid config")
}

fn tiny_discriminator(vocab: usize) -> Discriminator {
    let cfg = DiscriminatorConfig {
        n_blocks: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        patch_len: 4,
        vocab_size: vocab,
        max_len: 16,
        ..DiscriminatorConfig::default()
    };
    Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(43)).expect("valid config")
}

const SEQ: [usize; 10] = [1, 3, 4, 20, 100, 190, 215, 8, 64, 2];

fn generator_cases() -> Vec<Case> {
    use GradModule::Generator as G;
    let g = tiny_generator();
    let store = g.params.clone();
    let gen = g
        .generate(&SEQ[..4], EmotionClass::Q1, 6, GenerationMode::SoftTrain, 0.7, &mut ChaCha8Rng::seed_from_u64(3))
        .expect("generation");
    let noise = {
        let mut r = ChaCha8Rng::seed_from_u64(13);
        Tensor::new(vec![2, 6], (0..12).map(|_| gumbel_noise(&mut r)).collect()).expect("shape")
    };
    vec![
        case(G, "gumbel_softmax", None, |r| vec![normal(r, &[2, 6])], move |v| gumbel_softmax(v[0], &noise, 0.7)),
        case(
            G,
            "soft_rows",
            Some(60),
            move |r| perturbed(&store, 0.05, r),
            move |v| g.soft_rows_on_tape(&Bound::from_vars(v.to_vec()), &gen, EmotionClass::Q1),
        ),
    ]
}

fn softmax_rows(z: Var<'_>) -> Result<Var<'_>> {
    z.softmax(1)
}

fn discriminator_cases() -> Vec<Case> {
    use GradModule::Discriminator as D;
    let mut cases = Vec::new();
    for (head, name) in [(Head::Global, "critic_global"), (Head::Local, "critic_local")] {
        let d = tiny_discriminator(6);
        let store = d.params.clone();
        cases.push(case(
            D,
            name,
            Some(80),
            move |r| {
                let mut inputs = vec![normal(r, &[8, 6])];
                inputs.extend(perturbed(&store, 0.05, r));
                inputs
            },
            move |v| {
                let out = d.critic(&Bound::from_vars(v[1..].to_vec()), softmax_rows(v[0])?, EmotionClass::Q3)?;
                Ok(match head {
                    Head::Global => out.global,
                    Head::Local => out.local,
                })
            },
        ));
    }
    cases
}

fn loss_cases() -> Vec<Case> {
    use GradModule::Losses as L;
    let w = LossWeights::default();
    let pair = |r: &mut ChaCha8Rng| vec![normal(r, &[4]), normal(r, &[4])];
    let scalars = |n: usize| move |r: &mut ChaCha8Rng| (0..n).map(|_| normal(r, &[])).collect::<Vec<_>>();
    let g = tiny_generator();
    let g_store = g.params.clone();
    let mut cases = vec![
        case(L, "rsgan_d", None, pair, |v| rsgan_d(v[0], v[1])),
        case(L, "rsgan_g", None, pair, |v| rsgan_g(v[0], v[1])),
        case(L, "generator_total", None, scalars(3), move |v| generator_total(v[0], v[1], v[2], &w)),
        case(L, "discriminator_total", None, scalars(4), move |v| discriminator_total(v[0], v[1], v[2], v[3], &w)),
        case(
            L,
            "mle",
            Some(60),
            move |r| perturbed(&g_store, 0.05, r),
            move |v| g.mle_loss(&Bound::from_vars(v.to_vec()), &SEQ, EmotionClass::Q2),
        ),
    ];
    for (head, name) in [(Head::Global, "gradient_penalty_global"), (Head::Local, "gradient_penalty_local")] {
        let d = tiny_discriminator(6);
        let store = d.params.clone();
        let real = tokens_to_rows(&[0, 1, 2, 3, 4, 5, 0, 1], 6).expect("rows");
        let fake = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            let z = normal(&mut r, &[8, 6]);
            let t = Tape::new();
            (*t.constant(z).softmax(1).expect("softmax").value()).clone()
        };
        cases.push(case(
            L,
            name,
            Some(40),
            move |r| perturbed(&store, 0.05, r),
            move |v| gradient_penalty_at(&d, &Bound::from_vars(v.to_vec()), &real, &fake, EmotionClass::Q2, head, 0.37),
        ));
    }
    cases
}

fn cases(module: GradModule) -> Vec<Case> {
    match module {
        GradModule::Tensor => tensor_cases(),
        GradModule::Attention => attention_cases(),
        GradModule::Generator => generator_cases(),
        GradModule::Discriminator => discriminator_cases(),
        GradModule::Losses => loss_cases(),
    }
}

/// Runs every check of the selected modules, calling `report` after each.
pub fn run(modules: &[GradModule], seed: u64, mut report: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &m in modules {
        for c in cases(m) {
            let r = c(&mut rng)?;
            report(&r);
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_control_fails() {
        let r = negative_control().unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_err > 0.05);
    }

    #[test]
    fn module_names_parse() {
        for m in GradModule::ALL {
            assert_eq!(m.as_str().parse::<GradModule>().unwrap(), m);
        }
        assert!("nope".parse::<GradModule>().is_err());
    }
}
