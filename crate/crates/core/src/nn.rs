//! Dense residual network with hand-written reverse-mode gradients.
//!
//! Layout: `h1 = silu(W0 x + b0)`, then for each further hidden layer
//! `h <- h + silu(W h + b)`, and a linear read-out `y = Wout h + bout`.
//! Parameters live in one flat slice in declared layer order so optimizers
//! and checkpoints can treat them uniformly.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub output: usize,
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayout {
    pub weight: usize,
    pub bias: usize,
    pub rows: usize,
    pub cols: usize,
}

impl DenseLayout {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MlpShape {
    pub fn layers(&self) -> Vec<DenseLayout> {
        let mut out = Vec::with_capacity(self.hidden_layers + 1);
        let mut off = 0;
        let mut push = |rows: usize, cols: usize| {
            let l = DenseLayout { weight: off, bias: off + rows * cols, rows, cols };
            off += l.len();
            out.push(l);
        };
        push(self.width, self.input);
        for _ in 1..self.hidden_layers {
            push(self.width, self.width);
        }
        push(self.output, self.width);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(DenseLayout::len).sum()
    }

    /// Random init: weights `N(0, 1/fan_in)`, residual branches scaled down,
    /// zero biases. The read-out layer is zeroed when `zero_output` is set.
    pub fn init<S: Scalar>(&self, rng: &mut impl rand::Rng, zero_output: bool) -> Vec<S> {
        let layers = self.layers();
        let mut params = vec![S::zero(); self.param_count()];
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            if i == last && zero_output {
                continue;
            }
            let mut scale = (1.0 / l.cols as f64).sqrt();
            if i > 0 && i < last {
                scale *= 0.5;
            }
            for w in &mut params[l.weight..l.bias] {
                let z: f64 = crate::rng::normal(rng);
                *w = S::from_f64_lossy(z * scale);
            }
        }
        params
    }
}

#[inline]
fn sigmoid<S: Scalar>(z: S) -> S {
    S::one() / (S::one() + (-z).exp())
}

#[inline]
fn silu<S: Scalar>(z: S) -> S {
    z * sigmoid(z)
}

#[inline]
fn silu_grad<S: Scalar>(z: S) -> S {
    let s = sigmoid(z);
    s * (S::one() + z * (S::one() - s))
}

/// `out (batch x rows) = x (batch x cols) W^T + b`.
fn dense_forward<S: Scalar>(params: &[S], l: &DenseLayout, x: &[S], batch: usize) -> Vec<S> {
    let w = &params[l.weight..l.bias];
    let b = &params[l.bias..l.bias + l.rows];
    let mut out = Vec::with_capacity(batch * l.rows);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    S::gemm(
        batch,
        l.cols,
        l.rows,
        S::one(),
        x,
        l.cols as isize,
        1,
        w,
        1,
        l.cols as isize,
        S::one(),
        &mut out,
        l.rows as isize,
        1,
    );
    out
}

/// Accumulates `dW += dZ^T X`, `db += colsum(dZ)` and returns `dX = dZ W`.
fn dense_backward<S: Scalar>(
    params: &[S],
    grad: &mut [S],
    l: &DenseLayout,
    x: &[S],
    dz: &[S],
    batch: usize,
    want_dx: bool,
) -> Option<Vec<S>> {
    S::gemm(
        l.rows,
        batch,
        l.cols,
        S::one(),
        dz,
        1,
        l.rows as isize,
        x,
        l.cols as isize,
        1,
        S::one(),
        &mut grad[l.weight..l.bias],
        l.cols as isize,
        1,
    );
    let gb = &mut grad[l.bias..l.bias + l.rows];
    for row in dz.chunks_exact(l.rows) {
        for (g, d) in gb.iter_mut().zip(row) {
            *g = *g + *d;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![S::zero(); batch * l.cols];
    S::gemm(
        batch,
        l.rows,
        l.cols,
        S::one(),
        dz,
        l.rows as isize,
        1,
        &params[l.weight..l.bias],
        l.cols as isize,
        1,
        S::zero(),
        &mut dx,
        l.cols as isize,
        1,
    );
    Some(dx)
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<S> {
    batch: usize,
    input: Vec<S>,
    pre: Vec<Vec<S>>,
    hidden: Vec<Vec<S>>,
}

impl MlpShape {
    pub fn forward<S: Scalar>(&self, params: &[S], input: &[S], batch: usize) -> Vec<S> {
        self.run(params, input, batch, false).0
    }

    pub fn forward_cached<S: Scalar>(
        &self,
        params: &[S],
        input: &[S],
        batch: usize,
    ) -> (Vec<S>, MlpCache<S>) {
        let (out, cache) = self.run(params, input, batch, true);
        (out, cache.expect("cache requested"))
    }

    fn run<S: Scalar>(
        &self,
        params: &[S],
        input: &[S],
        batch: usize,
        keep: bool,
    ) -> (Vec<S>, Option<MlpCache<S>>) {
        assert_eq!(input.len(), batch * self.input, "input size");
        assert_eq!(params.len(), self.param_count(), "parameter count");
        let layers = self.layers();
        let (read_out, hidden_layers) = layers.split_last().expect("at least two layers");
        let mut pre = Vec::new();
        let mut hidden = Vec::new();

        let z = dense_forward(params, &hidden_layers[0], input, batch);
        let mut h: Vec<S> = z.iter().map(|&v| silu(v)).collect();
        if keep {
            pre.push(z);
            hidden.push(h.clone());
        }
        for l in &hidden_layers[1..] {
            let z = dense_forward(params, l, &h, batch);
            for (hv, zv) in h.iter_mut().zip(&z) {
                *hv = *hv + silu(*zv);
            }
            if keep {
                pre.push(z);
                hidden.push(h.clone());
            }
        }
        let out = dense_forward(params, read_out, &h, batch);
        let cache = keep.then(|| MlpCache { batch, input: input.to_vec(), pre, hidden });
        (out, cache)
    }

    /// Reverse pass. Accumulates parameter gradients into `grad` and returns
    /// the gradient with respect to the network input when `want_input_grad`.
    pub fn backward<S: Scalar>(
        &self,
        params: &[S],
        cache: &MlpCache<S>,
        d_out: &[S],
        grad: &mut [S],
        want_input_grad: bool,
    ) -> Option<Vec<S>> {
        let batch = cache.batch;
        assert_eq!(d_out.len(), batch * self.output);
        assert_eq!(grad.len(), self.param_count());
        let layers = self.layers();
        let (read_out, hidden_layers) = layers.split_last().expect("at least two layers");
        let n_hidden = hidden_layers.len();

        let mut dh = dense_backward(
            params,
            grad,
            read_out,
            &cache.hidden[n_hidden - 1],
            d_out,
            batch,
            true,
        )
        .expect("dx requested");

        for i in (1..n_hidden).rev() {
            let dz: Vec<S> = dh
                .iter()
                .zip(&cache.pre[i])
                .map(|(&d, &z)| d * silu_grad(z))
                .collect();
            let dx = dense_backward(params, grad, &hidden_layers[i], &cache.hidden[i - 1], &dz, batch, true)
                .expect("dx requested");
            for (a, b) in dh.iter_mut().zip(dx) {
                *a = *a + b;
            }
        }

        let dz: Vec<S> = dh
            .iter()
            .zip(&cache.pre[0])
            .map(|(&d, &z)| d * silu_grad(z))
            .collect();
        dense_backward(params, grad, &hidden_layers[0], &cache.input, &dz, batch, want_input_grad)
    }

    /// Forward-mode Jacobian-vector product with respect to the input.
    /// Returns `(output, J * tangent)`.
    pub fn jvp<S: Scalar>(
        &self,
        params: &[S],
        input: &[S],
        tangent: &[S],
        batch: usize,
    ) -> (Vec<S>, Vec<S>) {
        assert_eq!(tangent.len(), input.len());
        let layers = self.layers();
        let (read_out, hidden_layers) = layers.split_last().expect("at least two layers");
        let linear = |l: &DenseLayout, x: &[S]| {
            let mut out = vec![S::zero(); batch * l.rows];
            S::gemm(
                batch,
                l.cols,
                l.rows,
                S::one(),
                x,
                l.cols as isize,
                1,
                &params[l.weight..l.bias],
                1,
                l.cols as isize,
                S::zero(),
                &mut out,
                l.rows as isize,
                1,
            );
            out
        };

        let z = dense_forward(params, &hidden_layers[0], input, batch);
        let dz = linear(&hidden_layers[0], tangent);
        let mut h: Vec<S> = z.iter().map(|&v| silu(v)).collect();
        let mut dh: Vec<S> = z.iter().zip(&dz).map(|(&v, &d)| silu_grad(v) * d).collect();
        for l in &hidden_layers[1..] {
            let z = dense_forward(params, l, &h, batch);
            let dz = linear(l, &dh);
            for i in 0..h.len() {
                h[i] = h[i] + silu(z[i]);
                dh[i] = dh[i] + silu_grad(z[i]) * dz[i];
            }
        }
        let out = dense_forward(params, read_out, &h, batch);
        let dout = linear(read_out, &dh);
        (out, dout)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![S::zero(); len], v: vec![S::zero(); len] }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, params: &mut [S], grad: &[S]) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1 = S::from_f64_lossy(self.beta1);
        let b2 = S::from_f64_lossy(self.beta2);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = S::from_f64_lossy(self.lr / c1);
        let c2_sqrt = S::from_f64_lossy(c2.sqrt());
        let eps = S::from_f64_lossy(self.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (S::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (S::one() - b2) * g * g;
            let denom = self.v[i].sqrt() / c2_sqrt + eps;
            params[i] = params[i] - step_size * self.m[i] / denom;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    fn shape() -> MlpShape {
        MlpShape { input: 5, width: 8, hidden_layers: 3, output: 3 }
    }

    #[test]
    fn zero_readout_gives_zero_output() {
        let s = shape();
        let p: Vec<f64> = s.init(&mut seeded(1), true);
        let x: Vec<f64> = normal_vec(&mut seeded(2), 4 * s.input);
        assert!(s.forward(&p, &x, 4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_layers() {
        let s = shape();
        assert_eq!(s.param_count(), (8 * 5 + 8) + 2 * (8 * 8 + 8) + (3 * 8 + 3));
    }

    fn loss(s: &MlpShape, p: &[f64], x: &[f64], w: &[f64], batch: usize) -> f64 {
        s.forward(p, x, batch).iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = shape();
        let batch = 3;
        let p: Vec<f64> = s.init(&mut seeded(4), false);
        let x: Vec<f64> = normal_vec(&mut seeded(5), batch * s.input);
        let w: Vec<f64> = normal_vec(&mut seeded(6), batch * s.output);
        let (_, cache) = s.forward_cached(&p, &x, batch);
        let mut g = vec![0.0; p.len()];
        let dx = s.backward(&p, &cache, &w, &mut g, true).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let up = loss(&s, &pp, &x, &w, batch);
            pp[i] -= 2.0 * h;
            let dn = loss(&s, &pp, &x, &w, batch);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
        for i in 0..x.len() {
            let mut xx = x.clone();
            xx[i] += h;
            let up = loss(&s, &p, &xx, &w, batch);
            xx[i] -= 2.0 * h;
            let dn = loss(&s, &p, &xx, &w, batch);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let s = shape();
        let p: Vec<f64> = s.init(&mut seeded(7), false);
        let x: Vec<f64> = normal_vec(&mut seeded(8), s.input);
        let v: Vec<f64> = normal_vec(&mut seeded(9), s.input);
        let (y, jv) = s.jvp(&p, &x, &v, 1);
        assert_eq!(y, s.forward(&p, &x, 1));
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (yp, ym) = (s.forward(&p, &xp, 1), s.forward(&p, &xm, 1));
        for i in 0..s.output {
            let fd = (yp[i] - ym[i]) / (2.0 * h);
            assert!((fd - jv[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.update(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn adam_leaves_zero_gradient_entries_untouched() {
        let mut p = vec![1.5f32, 0.25];
        let mut opt = Adam::new(2, 1e-3);
        for _ in 0..10 {
            opt.update(&mut p, &[0.3, 0.0]);
        }
        assert_eq!(p[1], 0.25);
        assert!(p[0] < 1.5);
    }
}
