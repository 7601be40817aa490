//! Relativistic GAN losses, gradient penalty and the composite objectives.

use rand::Rng;

use crate::discriminator::Critic;
use crate::emotion::EmotionClass;
use crate::error::{contract_err, Error, Result};
use crate::tensor::{Bound, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Global adversarial term.
    pub alpha: f64,
    /// Local adversarial term.
    pub beta: f64,
    /// Gradient penalty.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, lambda: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.lambda].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

/// `mean(−log σ(d_real − d_fake))`.
pub fn rsgan_d<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Result<Var<'t>> {
    paired(d_real, d_fake)?;
    d_real.sub(d_fake)?.log_sigmoid()?.mean()?.neg()
}

/// `mean(−log σ(d_fake − d_real))`.
pub fn rsgan_g<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Result<Var<'t>> {
    rsgan_d(d_fake, d_real)
}

fn paired(a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return contract_err(format!("paired scores of shape {:?} and {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Global,
    Local,
}

/// Offset inside the square root of the gradient norm, keeping its
/// derivative finite at zero.
const NORM_EPS: f64 = 1e-12;

/// `(‖∇ₓ out‖₂ − 1)²` with the gradient kept on the tape.
fn unit_penalty<'t>(out: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let tape = x.tape();
    let g = match tape.grad(out.sum()?, &[x], true)?.remove(0) {
        Some(g) => g,
        None => tape.constant(Tensor::zeros(&x.shape())),
    };
    g.mul(g)?.sum()?.add_scalar(NORM_EPS)?.powf(0.5)?.add_scalar(-1.0)?.powf(2.0)
}

/// Gradient penalty at `x̂ = u·real + (1−u)·fake` for a given interpolation
/// coefficient. Differentiable with respect to the critic parameters.
pub fn gradient_penalty_at<'t, C: Critic + ?Sized>(
    critic: &C,
    p: &Bound<'t>,
    rows_real: &Tensor,
    rows_fake: &Tensor,
    class: EmotionClass,
    head: Head,
    u: f64,
) -> Result<Var<'t>> {
    if rows_real.shape() != rows_fake.shape() {
        return contract_err(format!("real {:?} and fake {:?} rows differ in shape", rows_real.shape(), rows_fake.shape()));
    }
    let mixed: Vec<f64> = rows_real.data().iter().zip(rows_fake.data()).map(|(r, f)| u * r + (1.0 - u) * f).collect();
    let tape = p
        .vars()
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| Error::Contract("critic has no parameters bound".into()))?;
    let x = tape.leaf(Tensor::new(rows_real.shape().to_vec(), mixed)?);
    let out = critic.critic(p, x, class)?;
    match head {
        Head::Global => unit_penalty(out.global, x),
        Head::Local => {
            let n = out.local.shape()[0];
            let mut total: Option<Var<'t>> = None;
            for k in 0..n {
                let term = unit_penalty(out.local.slice(0, k, k + 1)?, x)?;
                total = Some(match total {
                    None => term,
                    Some(t) => t.add(term)?,
                });
            }
            total.ok_or_else(|| Error::Contract("critic produced no local units".into()))?.scale(1.0 / n as f64)
        }
    }
}

/// Gradient penalty with `u ~ U(0, 1)` drawn from `rng`.
pub fn gradient_penalty<'t, C: Critic + ?Sized>(
    critic: &C,
    p: &Bound<'t>,
    rows_real: &Tensor,
    rows_fake: &Tensor,
    class: EmotionClass,
    head: Head,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    let u: f64 = rng.random();
    gradient_penalty_at(critic, p, rows_real, rows_fake, class, head, u)
}

/// `mle + α·g_global + β·g_local`.
pub fn generator_total<'t>(mle: Var<'t>, g_global: Var<'t>, g_local: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    mle.add(g_global.scale(w.alpha)?)?.add(g_local.scale(w.beta)?)
}

/// `d_global + β·d_local + λ·(gp_global + gp_local)`.
pub fn discriminator_total<'t>(
    d_global: Var<'t>,
    d_local: Var<'t>,
    gp_global: Var<'t>,
    gp_local: Var<'t>,
    w: &LossWeights,
) -> Result<Var<'t>> {
    d_global.add(d_local.scale(w.beta)?)?.add(gp_global.add(gp_local)?.scale(w.lambda)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::CriticOutput;
    use crate::tensor::{ParamStore, Tape};
    use std::f64::consts::LN_2;

    fn s<'t>(tape: &'t Tape, x: f64) -> Var<'t> {
        tape.constant(Tensor::vector(vec![x]))
    }

    #[test]
    fn rsgan_closed_forms() {
        let tape = Tape::new();
        assert!((rsgan_d(s(&tape, 0.7), s(&tape, 0.7)).unwrap().item().unwrap() - LN_2).abs() < 1e-12);
        assert!((rsgan_g(s(&tape, 0.7), s(&tape, 0.7)).unwrap().item().unwrap() - LN_2).abs() < 1e-12);
        let v = rsgan_d(s(&tape, 1.0), s(&tape, 0.0)).unwrap().item().unwrap();
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.313262).abs() < 1e-6);
        assert!(rsgan_d(s(&tape, 800.0), s(&tape, 0.0)).unwrap().item().unwrap() < 1e-300);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(rsgan_d(a, s(&tape, 0.0)).is_err());
    }

    #[test]
    fn generator_gradient_signs() {
        let tape = Tape::new();
        let real = tape.leaf(Tensor::vector(vec![0.3]));
        let fake = tape.leaf(Tensor::vector(vec![-0.2]));
        tape.backward(rsgan_g(real, fake).unwrap()).unwrap();
        assert!(tape.grad_of(fake).unwrap().data()[0] < 0.0);
        assert!(tape.grad_of(real).unwrap().data()[0] > 0.0);
    }

    #[test]
    fn compositions() {
        let tape = Tape::new();
        let one = s(&tape, 1.0);
        let w = LossWeights::default();
        assert_eq!(generator_total(one, one, one, &w).unwrap().item().unwrap(), 3.0);
        let zero = LossWeights { alpha: 0.0, beta: 0.0, lambda: 10.0 };
        assert_eq!(generator_total(s(&tape, 2.5), one, one, &zero).unwrap().item().unwrap(), 2.5);
        let l2 = s(&tape, LN_2);
        let z = s(&tape, 0.0);
        assert_eq!(discriminator_total(l2, l2, z, z, &w).unwrap().item().unwrap(), 2.0 * LN_2);
        assert_eq!(discriminator_total(z, z, one, one, &w).unwrap().item().unwrap(), 20.0);
        assert!(LossWeights { alpha: -1.0, ..w }.validate().is_err());
    }

    struct Linear {
        weights: Tensor,
    }

    impl Critic for Linear {
        fn critic<'t>(&self, _p: &Bound<'t>, rows: Var<'t>, _class: EmotionClass) -> Result<CriticOutput<'t>> {
            let w = rows.tape().constant(self.weights.clone());
            let global = rows.mul(w)?.sum()?.reshape(&[1])?;
            let local = rows.mul(w)?.sum_axis(1)?.reshape(&[rows.shape()[0]])?;
            Ok(CriticOutput { global, local })
        }
    }

    fn dummy_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.add("dummy", Tensor::zeros(&[1]));
        store
    }

    #[test]
    fn unit_linear_critic_has_zero_penalty() {
        let tape = Tape::new();
        let store = dummy_store();
        let p = store.bind(&tape);
        let mut w = vec![0.0; 6];
        w[1] = 0.6;
        w[4] = 0.8;
        let critic = Linear { weights: Tensor::new(vec![2, 3], w).unwrap() };
        let real = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let fake = Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        let gp = gradient_penalty_at(&critic, &p, &real, &fake, EmotionClass::Q1, Head::Global, 0.3).unwrap();
        assert!(gp.item().unwrap().abs() < 1e-10);
    }

    #[test]
    fn scaled_coordinate_critic_has_unit_penalty() {
        let tape = Tape::new();
        let store = dummy_store();
        let p = store.bind(&tape);
        let mut w = vec![0.0; 6];
        w[0] = 2.0;
        let critic = Linear { weights: Tensor::new(vec![2, 3], w).unwrap() };
        let real = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let gp = gradient_penalty_at(&critic, &p, &real, &real, EmotionClass::Q1, Head::Global, 0.5).unwrap();
        assert!((gp.item().unwrap() - 1.0).abs() < 1e-10);
        let w = LossWeights::default();
        let z = tape.constant(Tensor::scalar(0.0));
        assert!((discriminator_total(z, z, gp, z, &w).unwrap().item().unwrap() - 10.0).abs() < 1e-9);
        // Row 0 has gradient norm 2, row 1 has norm 0: ((2−1)² + (0−1)²) / 2.
        let local = gradient_penalty_at(&critic, &p, &real, &real, EmotionClass::Q1, Head::Local, 0.5).unwrap();
        assert!((local.item().unwrap() - 1.0).abs() < 1e-6);
        let bad = Tensor::zeros(&[3, 3]);
        assert!(gradient_penalty_at(&critic, &p, &real, &bad, EmotionClass::Q1, Head::Global, 0.5).is_err());
    }
}
