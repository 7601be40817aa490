use rand::Rng;

use crate::emotion::EmotionClass;
use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};

/// LayerNorm whose scale and bias are selected by emotion class:
/// `s'[i,k] = γ[c,k] · norm(s)[i,k] + β[c,k]`, one (γ, β) row per class.
#[derive(Clone, Copy, Debug)]
pub struct ConditionalLayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl ConditionalLayerNorm {
    /// γ starts at one and β at zero for every class.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[EmotionClass::COUNT, dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[EmotionClass::COUNT, dim]));
        Self { gamma, beta, dim }
    }

    /// Same as [`ConditionalLayerNorm::new`] with random per-class modulation,
    /// used by tests that need the classes to differ.
    pub fn new_random(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let n = EmotionClass::COUNT * dim;
        let gamma: Vec<f64> = (0..n).map(|_| 1.0 + 0.3 * (rng.random::<f64>() - 0.5)).collect();
        let beta: Vec<f64> = (0..n).map(|_| 0.3 * (rng.random::<f64>() - 0.5)).collect();
        let shape = vec![EmotionClass::COUNT, dim];
        let gamma = store.add(format!("{name}.gamma"), Tensor::new(shape.clone(), gamma).expect("shape"));
        let beta = store.add(format!("{name}.beta"), Tensor::new(shape, beta).expect("shape"));
        Self { gamma, beta, dim }
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>, class: EmotionClass) -> Result<Var<'t>> {
        let c = class.index();
        let (normalized, _, _) = x.layer_norm_stats(1)?;
        let gamma = params.get(self.gamma).slice(0, c, c + 1)?;
        let beta = params.get(self.beta).slice(0, c, c + 1)?;
        normalized.mul(gamma)?.add(beta)
    }

    /// Single-row forward on raw values.
    pub fn apply_row(&self, store: &ParamStore, x: &[f64], class: EmotionClass) -> Vec<f64> {
        let c = class.index();
        let gamma = &store.get(self.gamma).data()[c * self.dim..(c + 1) * self.dim];
        let beta = &store.get(self.beta).data()[c * self.dim..(c + 1) * self.dim];
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = (var + LAYER_NORM_EPS).powf(-0.5);
        x.iter()
            .zip(gamma.iter().zip(beta))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_modulation_is_plain_layer_norm() {
        let mut store = ParamStore::new();
        let ln = ConditionalLayerNorm::new(&mut store, "ln", 4);
        let tape = Tape::new();
        let params = store.bind(&tape);
        let x = tape.constant(Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0, 1.0, 9.0]).unwrap());
        let (plain, _, _) = x.layer_norm_stats(1).unwrap();
        for c in EmotionClass::ALL {
            let y = ln.forward(&params, x, c).unwrap();
            assert_eq!(*y.value(), *plain.value());
        }
    }

    #[test]
    fn only_selected_class_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ln = ConditionalLayerNorm::new_random(&mut store, "ln", 3, &mut rng);
        let tape = Tape::new();
        let params = store.bind(&tape);
        let x = tape.constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 1.0, 1.5, -0.5]).unwrap());
        let y = ln.forward(&params, x, EmotionClass::Q2).unwrap();
        let loss = y.mul(y).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        for id in [ln.gamma, ln.beta] {
            let g = tape.grad_of(params.get(id)).unwrap();
            for c in EmotionClass::ALL {
                let row = &g.data()[c.index() * 3..(c.index() + 1) * 3];
                if c == EmotionClass::Q2 {
                    assert!(row.iter().any(|&v| v != 0.0));
                } else {
                    assert!(row.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn row_path_matches_tape_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let ln = ConditionalLayerNorm::new_random(&mut store, "ln", 5, &mut rng);
        let tape = Tape::new();
        let params = store.bind(&tape);
        let row = vec![0.1, 0.7, -2.0, 3.3, 0.0];
        let x = tape.constant(Tensor::new(vec![1, 5], row.clone()).unwrap());
        let y = ln.forward(&params, x, EmotionClass::Q4).unwrap();
        let r = ln.apply_row(&store, &row, EmotionClass::Q4);
        for (a, b) in y.value().data().iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
