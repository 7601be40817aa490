//! Dense f64 arrays and a reverse-mode differentiation tape.

mod array;
pub(crate) mod kernels;
mod optim;
mod params;
mod tape;

pub use array::Tensor;
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{BackwardCtx, Tape, Var, LAYER_NORM_EPS};

use std::rc::Rc;

use crate::error::{Error, Result};

/// Mean cross-entropy of row-wise softmax(logits) against target indices,
/// skipping positions whose target equals `ignore`. Fused log-softmax.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[usize], ignore: Option<usize>) -> Result<Var<'t>> {
    let x = logits.value();
    let (n, v) = x.dims2()?;
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v && Some(t) != ignore) {
        return Err(Error::Index(format!("target {bad} outside vocabulary of {v}")));
    }
    let active: Vec<bool> = targets.iter().map(|&t| Some(t) != ignore).collect();
    let count = active.iter().filter(|&&a| a).count();
    if count == 0 {
        return Err(Error::Contract("cross-entropy over zero active positions".into()));
    }
    let mut probs = vec![0.0; n * v];
    let mut total = 0.0;
    for i in 0..n {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&r| (r - max).exp()).sum();
        let log_z = z.ln() + max;
        for j in 0..v {
            probs[i * v + j] = (row[j] - log_z).exp();
        }
        if active[i] {
            total += log_z - row[targets[i]];
        }
    }
    let loss = total / count as f64;
    let targets = targets.to_vec();
    logits.tape().custom("cross_entropy", &[logits], Tensor::scalar(loss), move |_, _, g| {
        let scale = g.item()? / count as f64;
        let mut grad = probs.clone();
        for i in 0..n {
            let row = &mut grad[i * v..(i + 1) * v];
            if active[i] {
                row[targets[i]] -= 1.0;
                row.iter_mut().for_each(|x| *x *= scale);
            } else {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(vec![Some(Tensor::new(vec![n, v], grad)?)])
    })
}

/// Rows of `table` selected by `indices`; gradients scatter-add back.
pub fn embedding<'t>(table: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
    let t = table.value();
    let (rows, d) = t.dims2()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(Error::Index(format!("index {bad} outside table of {rows} rows")));
    }
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(t.row(i));
    }
    let value = Tensor::new(vec![indices.len(), d], data)?;
    let indices = indices.to_vec();
    table.tape().custom("embedding", &[table], value, move |inputs: &[Rc<Tensor>], _, g| {
        let mut grad = Tensor::zeros(inputs[0].shape());
        let gd = grad.data_mut();
        for (k, &i) in indices.iter().enumerate() {
            for j in 0..d {
                gd[i * d + j] += g.data()[k * d + j];
            }
        }
        Ok(vec![Some(grad)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_cross_entropy_is_log_v() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 16]));
        let l = cross_entropy(logits, &[0, 5, 15], None).unwrap();
        assert!((l.item().unwrap() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_cross_entropy_goes_to_zero() {
        let tape = Tape::new();
        let mut x = Tensor::zeros(&[1, 4]);
        x.data_mut()[2] = 60.0;
        let l = cross_entropy(tape.constant(x), &[2], None).unwrap();
        assert!(l.item().unwrap() < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(cross_entropy(logits, &[4], None), Err(Error::Index(_))));
        assert!(matches!(cross_entropy(logits, &[0], Some(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn embedding_scatters_gradients() {
        let tape = Tape::new();
        let table = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let rows = embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(rows.value().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        tape.backward(rows.sum().unwrap()).unwrap();
        assert_eq!(tape.grad_of(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
