//! Linear attention with the positive feature map φ(x) = elu(x) + 1.
//!
//! The causal form keeps running sums `S = Σ φ(k_j) v_jᵀ` and
//! `z = Σ φ(k_j)`, so the batched computation over a whole sequence and the
//! one-token-at-a-time recurrent computation are the same arithmetic.

use rand::Rng;

use crate::emotion::EmotionClass;
use crate::error::{shape_err, Result};
use crate::generator::ConditionalLayerNorm;
use crate::tensor::kernels::{elu, gemm};
use crate::tensor::{Bound, ParamId, ParamStore, Tensor, Var};

/// Floor applied to every attention denominator.
pub const ATTENTION_EPS: f64 = 1e-6;

pub fn phi(x: f64) -> f64 {
    elu(x) + 1.0
}

fn phi_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// φ(x) = elu(x) + 1 on the tape.
pub fn feature_map(x: Var<'_>) -> Result<Var<'_>> {
    x.elu()?.add_scalar(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Position i attends to positions ≤ i.
    Causal,
    /// Every position attends to every position.
    Full,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize)> {
    let (n, d) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return shape_err(format!("q {:?}, k {:?}, v {:?} must match", q.shape(), k.shape(), v.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return shape_err(format!("model width {d} is not divisible by {heads} heads"));
    }
    Ok((n, d / heads))
}

/// Causal linear attention over `[N×d]` inputs split into `heads` column
/// blocks, computed with prefix sums. Fused operation with an exact
/// hand-written backward rule.
pub fn linear_attention_causal<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (n, dh) = check_qkv(&qv, &kv, &vv, heads)?;
    let d = heads * dh;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let mut state = HeadState::new(dh);
        for i in 0..n {
            let cols = i * d + h * dh..i * d + (h + 1) * dh;
            let row = state.step(&qv.data()[cols.clone()], &kv.data()[cols.clone()], &vv.data()[cols.clone()]);
            out[cols].copy_from_slice(&row);
        }
    }
    let value = Tensor::new(vec![n, d], out)?;
    q.tape().custom("linear_attention_causal", &[q, k, v], value, move |inputs, out, g| {
        let (qd, kd, vd) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (od, gd) = (out.data(), g.data());
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        let mut dnum = vec![0.0; n * dh];
        let mut dden = vec![0.0; n];
        for h in 0..heads {
            let at = |i: usize, j: usize| i * d + h * dh + j;
            let fq: Vec<f64> = (0..n * dh).map(|x| phi(qd[at(x / dh, x % dh)])).collect();
            let fk: Vec<f64> = (0..n * dh).map(|x| phi(kd[at(x / dh, x % dh)])).collect();
            // Forward sweep: gradient w.r.t. φ(q_i) needs S_i and z_i.
            let mut s = vec![0.0; dh * dh];
            let mut z = vec![0.0; dh];
            for i in 0..n {
                let (fki, fqi) = (&fk[i * dh..(i + 1) * dh], &fq[i * dh..(i + 1) * dh]);
                for a in 0..dh {
                    z[a] += fki[a];
                    for b in 0..dh {
                        s[a * dh + b] += fki[a] * vd[at(i, b)];
                    }
                }
                let raw: f64 = z.iter().zip(fqi).map(|(x, y)| x * y).sum();
                let den = raw.max(ATTENTION_EPS);
                let mut g_dot_out = 0.0;
                for b in 0..dh {
                    dnum[i * dh + b] = gd[at(i, b)] / den;
                    g_dot_out += gd[at(i, b)] * od[at(i, b)];
                }
                dden[i] = if raw > ATTENTION_EPS { -g_dot_out / den } else { 0.0 };
                for a in 0..dh {
                    let mut acc = z[a] * dden[i];
                    for b in 0..dh {
                        acc += s[a * dh + b] * dnum[i * dh + b];
                    }
                    gq[at(i, a)] = acc * phi_grad(qd[at(i, a)]);
                }
            }
            // Reverse sweep: R_j = Σ_{i≥j} φ(q_i) dnum_iᵀ, r_j = Σ_{i≥j} φ(q_i) dden_i.
            let mut r_mat = vec![0.0; dh * dh];
            let mut r_vec = vec![0.0; dh];
            for j in (0..n).rev() {
                let fqj = &fq[j * dh..(j + 1) * dh];
                for a in 0..dh {
                    r_vec[a] += fqj[a] * dden[j];
                    for b in 0..dh {
                        r_mat[a * dh + b] += fqj[a] * dnum[j * dh + b];
                    }
                }
                let fkj = &fk[j * dh..(j + 1) * dh];
                for a in 0..dh {
                    let mut acc = r_vec[a];
                    for b in 0..dh {
                        acc += r_mat[a * dh + b] * vd[at(j, b)];
                    }
                    gk[at(j, a)] = acc * phi_grad(kd[at(j, a)]);
                }
                for b in 0..dh {
                    gv[at(j, b)] = (0..dh).map(|a| r_mat[a * dh + b] * fkj[a]).sum();
                }
            }
        }
        let shape = vec![n, d];
        Ok(vec![
            Some(Tensor::new(shape.clone(), gq)?),
            Some(Tensor::new(shape.clone(), gk)?),
            Some(Tensor::new(shape, gv)?),
        ])
    })
}

/// Unmasked linear attention built from differentiable primitives, so its
/// gradient can itself be differentiated.
pub fn linear_attention_full<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let (_, dh) = check_qkv(&q.value(), &k.value(), &v.value(), heads)?;
    let tape = q.tape();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = |x: Var<'t>| x.slice(1, h * dh, (h + 1) * dh);
        let fq = feature_map(cols(q)?)?;
        let fk = feature_map(cols(k)?)?;
        let vh = cols(v)?;
        let kv = fk.matmul_tn(vh)?;
        let num = fq.matmul(kv)?;
        let ksum = fk.sum_axis(0)?;
        let den = fq.matmul_nt(ksum)?.clamp_min(ATTENTION_EPS)?;
        outs.push(num.div(den)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Running sums of one head.
#[derive(Clone, Debug, PartialEq)]
struct HeadState {
    dim: usize,
    s: Vec<f64>,
    z: Vec<f64>,
}

impl HeadState {
    fn new(dim: usize) -> Self {
        Self { dim, s: vec![0.0; dim * dim], z: vec![0.0; dim] }
    }

    fn step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Vec<f64> {
        let dh = self.dim;
        for a in 0..dh {
            let fk = phi(k[a]);
            self.z[a] += fk;
            for b in 0..dh {
                self.s[a * dh + b] += fk * v[b];
            }
        }
        let fq: Vec<f64> = q.iter().map(|&x| phi(x)).collect();
        let den = self.z.iter().zip(&fq).map(|(z, f)| z * f).sum::<f64>().max(ATTENTION_EPS);
        (0..dh)
            .map(|b| (0..dh).map(|a| self.s[a * dh + b] * fq[a]).sum::<f64>() / den)
            .collect()
    }
}

/// Per-head accumulators `S = Σ φ(k)vᵀ` and `z = Σ φ(k)` for recurrent
/// (token-by-token) causal attention.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    heads: Vec<HeadState>,
}

impl RecurrentState {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        Self { heads: (0..heads).map(|_| HeadState::new(head_dim)).collect() }
    }

    /// Accumulator `S` of head `h`, row-major `d_head×d_head`.
    pub fn s(&self, h: usize) -> &[f64] {
        &self.heads[h].s
    }

    /// Accumulator `z` of head `h`.
    pub fn z(&self, h: usize) -> &[f64] {
        &self.heads[h].z
    }

    /// Adds (k, v) to the sums, then reads them with q:
    /// `S += φ(k)vᵀ; z += φ(k); out = Sᵀφ(q) / max(zᵀφ(q), ε)`.
    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let dh = self.heads.first().map_or(0, |h| h.dim);
        let d = dh * self.heads.len();
        if q.len() != d || k.len() != d || v.len() != d {
            return shape_err(format!("step inputs of width {}/{}/{} for state width {d}", q.len(), k.len(), v.len()));
        }
        let mut out = Vec::with_capacity(d);
        for (h, head) in self.heads.iter_mut().enumerate() {
            let r = h * dh..(h + 1) * dh;
            out.extend(head.step(&q[r.clone()], &k[r.clone()], &v[r]));
        }
        Ok(out)
    }
}

/// Functional form of [`RecurrentState::step`].
pub fn linear_attention_step(
    state: &RecurrentState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, RecurrentState)> {
    let mut next = state.clone();
    let out = next.step(q, k, v)?;
    Ok((out, next))
}

/// Parameters of one pre-norm attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlock {
    pub norm_attn: ConditionalLayerNorm,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub norm_ff: ConditionalLayerNorm,
    pub w_1: ParamId,
    pub w_2: ParamId,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        residual_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return shape_err(format!("d_model {d_model} is not divisible by {heads} heads"));
        }
        let std_in = (d_model as f64).powf(-0.5);
        let std_ff = (d_ff as f64).powf(-0.5);
        Ok(Self {
            norm_attn: ConditionalLayerNorm::new(store, &format!("{name}.norm_attn"), d_model),
            w_q: store.add_normal(format!("{name}.w_q"), &[d_model, d_model], std_in, rng),
            w_k: store.add_normal(format!("{name}.w_k"), &[d_model, d_model], std_in, rng),
            w_v: store.add_normal(format!("{name}.w_v"), &[d_model, d_model], std_in, rng),
            w_o: store.add_normal(format!("{name}.w_o"), &[d_model, d_model], std_in * residual_scale, rng),
            norm_ff: ConditionalLayerNorm::new(store, &format!("{name}.norm_ff"), d_model),
            w_1: store.add_normal(format!("{name}.w_1"), &[d_model, d_ff], std_in, rng),
            w_2: store.add_normal(format!("{name}.w_2"), &[d_ff, d_model], std_ff * residual_scale, rng),
            d_model,
            d_ff,
            heads,
        })
    }

    /// `x + MHA(CondLN(x))`, then `+ FFN(CondLN(·))` with an elu FFN.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, class: EmotionClass, mask: MaskMode) -> Result<Var<'t>> {
        let h = self.norm_attn.forward(p, x, class)?;
        let q = h.matmul(p.get(self.w_q))?;
        let k = h.matmul(p.get(self.w_k))?;
        let v = h.matmul(p.get(self.w_v))?;
        let a = match mask {
            MaskMode::Causal => linear_attention_causal(q, k, v, self.heads)?,
            MaskMode::Full => linear_attention_full(q, k, v, self.heads)?,
        };
        let x = x.add(a.matmul(p.get(self.w_o))?)?;
        let h = self.norm_ff.forward(p, x, class)?;
        let f = h.matmul(p.get(self.w_1))?.elu()?.matmul(p.get(self.w_2))?;
        x.add(f)
    }

    /// One causal step for a single position, advancing `state`.
    pub fn step(&self, store: &ParamStore, x: &[f64], class: EmotionClass, state: &mut RecurrentState) -> Result<Vec<f64>> {
        let h = self.norm_attn.apply_row(store, x, class);
        let q = row_matmul(&h, store.get(self.w_q));
        let k = row_matmul(&h, store.get(self.w_k));
        let v = row_matmul(&h, store.get(self.w_v));
        let a = state.step(&q, &k, &v)?;
        let o = row_matmul(&a, store.get(self.w_o));
        let x: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h = self.norm_ff.apply_row(store, &x, class);
        let f: Vec<f64> = row_matmul(&h, store.get(self.w_1)).into_iter().map(elu).collect();
        let f = row_matmul(&f, store.get(self.w_2));
        Ok(x.iter().zip(&f).map(|(a, b)| a + b).collect())
    }

    pub fn fresh_state(&self) -> RecurrentState {
        RecurrentState::new(self.heads, self.d_model / self.heads)
    }
}

/// Row vector times matrix.
pub(crate) fn row_matmul(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = w.dims2().expect("weight matrix");
    debug_assert_eq!(x.len(), k);
    let mut out = vec![0.0; n];
    gemm(1, k, n, x, false, w.data(), false, &mut out, false);
    out
}

/// Absolute sinusoidal position encodings for positions `0..n`.
pub fn sinusoidal_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_map_points() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0, -2.0]));
        let y = feature_map(x).unwrap().value();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 2.0);
        assert!((y.data()[2] - (-2f64).exp()).abs() < 1e-15);
        assert!((y.data()[2] - 0.1353).abs() < 1e-4);
    }

    #[test]
    fn single_position_returns_value_row() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 3], vec![0.4, -1.0, 2.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 3], vec![-0.3, 0.2, 1.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 3], vec![5.0, -6.0, 7.5]).unwrap());
        let out = linear_attention_causal(q, k, v, 1).unwrap();
        for (a, b) in out.value().data().iter().zip(v.value().data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
        let mut state = RecurrentState::new(1, 3);
        let row = state.step(q.value().data(), k.value().data(), v.value().data()).unwrap();
        assert_eq!(row, out.value().data());
    }

    #[test]
    fn equal_value_rows_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let rand = |rng: &mut ChaCha8Rng| Tensor::new(vec![6, 4], (0..24).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).unwrap();
        let q = tape.constant(rand(&mut rng));
        let k = tape.constant(rand(&mut rng));
        let row = [0.5, -1.5, 2.0, 3.0];
        let v = tape.constant(Tensor::new(vec![6, 4], row.iter().copied().cycle().take(24).collect()).unwrap());
        for out in [linear_attention_causal(q, k, v, 2).unwrap(), linear_attention_full(q, k, v, 2).unwrap()] {
            for (i, x) in out.value().data().iter().enumerate() {
                assert!((x - row[i % 4]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_ignores_queries() {
        let mut a = RecurrentState::new(2, 2);
        let mut b = RecurrentState::new(2, 2);
        let k = [0.1, -0.4, 2.0, 0.3];
        let v = [1.0, 2.0, 3.0, 4.0];
        a.step(&[9.0, -9.0, 1.0, 0.0], &k, &v).unwrap();
        b.step(&[-3.0, 0.5, 0.0, 7.0], &k, &v).unwrap();
        assert_eq!(a, b);
        assert!(a.z(0).iter().chain(a.z(1)).all(|&z| z > 0.0));
    }

    #[test]
    fn zero_output_projections_make_identity_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", 8, 16, 2, 0.0, &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        for mask in [MaskMode::Causal, MaskMode::Full] {
            let y = block.forward(&p, x, EmotionClass::Q1, mask).unwrap();
            assert_eq!(*y.value(), *x.value());
        }
    }

    #[test]
    fn sinusoid_rows() {
        let pe = sinusoidal_encoding(3, 4);
        assert_eq!(&pe.data()[0..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[6] - 0.01f64.sin()).abs() < 1e-15);
    }
}
