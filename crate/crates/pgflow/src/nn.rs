//! Minimal dense neural-network building blocks: batched fully connected
//! layers, squared-error losses, the Adam optimizer, and a finite-difference
//! gradient checker.
//!
//! Batches are stored column-wise: a matrix of shape `(features, batch)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Tanh => z.map(f64::tanh),
            Activation::Identity => z.clone(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn deriv_from_output(self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Tanh => a.map(|t| 1.0 - t * t),
            Activation::Identity => DMatrix::from_element(a.nrows(), a.ncols(), 1.0),
        }
    }
}

/// Samples from the Glorot uniform range `+-sqrt(6 / (fan_in + fan_out))`,
/// filling the matrix row by row so initialization is reproducible for a
/// given seed regardless of storage order.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut w = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for k in 0..cols {
            w[(i, k)] = rng.random_range(-limit..limit);
        }
    }
    w
}

/// A fully connected layer `a = act(W x + b)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DenseLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub activation: Activation,
}

/// Per-layer forward cache needed by the backward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

/// Parameter gradients of one layer.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub dw: DMatrix<f64>,
    pub db: DVector<f64>,
}

impl DenseLayer {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        DenseLayer {
            w: glorot_uniform(fan_out, fan_in, rng),
            b: DVector::zeros(fan_out),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.w.nrows()
    }

    /// Forward pass on a `(fan_in, batch)` matrix.
    pub fn forward(&self, x: &DMatrix<f64>) -> DenseCache {
        assert_eq!(x.nrows(), self.fan_in(), "input feature dimension mismatch");
        let mut z = &self.w * x;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        DenseCache { input: x.clone(), output: self.activation.apply(&z) }
    }

    /// Backward pass: given `d_out = dL/da`, returns parameter gradients and
    /// `dL/dx` for the layer below.
    pub fn backward(&self, cache: &DenseCache, d_out: &DMatrix<f64>) -> (DenseGrads, DMatrix<f64>) {
        assert_eq!(d_out.shape(), cache.output.shape(), "gradient shape mismatch");
        let dz = d_out.component_mul(&self.activation.deriv_from_output(&cache.output));
        let dw = &dz * cache.input.transpose();
        let db = DVector::from_fn(self.fan_out(), |i, _| dz.row(i).sum());
        let dx = self.w.transpose() * &dz;
        (DenseGrads { dw, db }, dx)
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Tanh hidden layers and an identity output layer.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let layers = (0..sizes.len() - 1)
            .map(|i| {
                let act = if i + 2 == sizes.len() { Activation::Identity } else { Activation::Tanh };
                DenseLayer::new(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Vec<DenseCache> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let cache = layer.forward(&cur);
            cur = cache.output.clone();
            caches.push(cache);
        }
        caches
    }

    pub fn output<'a>(&self, caches: &'a [DenseCache]) -> &'a DMatrix<f64> {
        &caches.last().expect("forward ran").output
    }

    /// Returns per-layer gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        caches: &[DenseCache],
        d_out: &DMatrix<f64>,
    ) -> (Vec<DenseGrads>, DMatrix<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = d_out.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (g, dx) = layer.backward(cache, &d);
            grads.push(g);
            d = dx;
        }
        grads.reverse();
        (grads, d)
    }

    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        self.layers.iter().map(|l| &l.w).collect()
    }
}

/// Mean over the batch of the per-sample sum of squared errors, and its
/// gradient with respect to `pred`.
pub fn sq_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    assert_eq!(pred.shape(), target.shape(), "prediction/target shape mismatch");
    let batch = pred.ncols().max(1) as f64;
    let err = pred - target;
    let value = err.iter().map(|e| e * e).sum::<f64>() / batch;
    let grad = err.map(|e| 2.0 * e / batch);
    (value, grad)
}

/// Weighted two-term objective `alpha_sup * L_sup + alpha_unsup * L_unsup`.
pub fn multitask_loss(sup: f64, unsup: f64, alpha_sup: f64, alpha_unsup: f64) -> f64 {
    alpha_sup * sup + alpha_unsup * unsup
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Moments {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl Moments {
    pub fn zeros_like(p: &DMatrix<f64>) -> Self {
        Moments { m: DMatrix::zeros(p.nrows(), p.ncols()), v: DMatrix::zeros(p.nrows(), p.ncols()) }
    }
}

/// Moment estimates for a vector parameter (biases).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VecMoments {
    m: DVector<f64>,
    v: DVector<f64>,
}

impl VecMoments {
    pub fn zeros_like(p: &DVector<f64>) -> Self {
        VecMoments { m: DVector::zeros(p.len()), v: DVector::zeros(p.len()) }
    }
}

/// Adam optimizer. One instance drives all tensors of a model; call
/// [`Adam::begin_step`] once per optimization step, then [`Adam::update`] for
/// each tensor with its moment slot.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&self, slot: &mut Moments, param: &mut DMatrix<f64>, grad: &DMatrix<f64>) {
        assert!(self.t > 0, "begin_step before update");
        assert_eq!(param.shape(), grad.shape(), "parameter/gradient shape mismatch");
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.nrows() {
            for k in 0..param.ncols() {
                let g = grad[(i, k)];
                slot.m[(i, k)] = self.beta1 * slot.m[(i, k)] + (1.0 - self.beta1) * g;
                slot.v[(i, k)] = self.beta2 * slot.v[(i, k)] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[(i, k)] / bc1;
                let v_hat = slot.v[(i, k)] / bc2;
                param[(i, k)] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn update_vec(&self, slot: &mut VecMoments, param: &mut DVector<f64>, grad: &DVector<f64>) {
        assert!(self.t > 0, "begin_step before update");
        assert_eq!(param.len(), grad.len(), "parameter/gradient length mismatch");
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Compares an analytic gradient against central finite differences of the
/// scalar function `f`. Returns the maximum elementwise error normalized by
/// `max(|analytic|, |numeric|, 1)`.
pub fn grad_check(
    mut f: impl FnMut(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    analytic: &DVector<f64>,
    eps: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += eps;
        xm[i] -= eps;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle_layer() -> DenseLayer {
        // weights follow 0.5*sin(1.3*(4i+j)+0.7), matching the script that
        // froze the forward-pass golden values
        let w = DMatrix::from_fn(3, 4, |i, j| 0.5 * ((1.3 * (4 * i + j) as f64) + 0.7).sin());
        let b = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        DenseLayer { w, b, activation: Activation::Tanh }
    }

    #[test]
    fn dense_tanh_forward_matches_script_oracle() {
        let layer = oracle_layer();
        let x = DMatrix::from_vec(4, 1, vec![0.4, -0.3, 0.25, -0.1]);
        let out = layer.forward(&x).output;
        let want = [0.12180742061290546, -0.26891202327512714, 0.20376742649815366];
        for i in 0..3 {
            assert_relative_eq!(out[(i, 0)], want[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn batched_forward_equals_per_sample_forward() {
        let layer = oracle_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(4, 7, |_, _| rng.random_range(-1.0..1.0));
        let batched = layer.forward(&x).output;
        for s in 0..7 {
            let single = layer.forward(&DMatrix::from_column_slice(4, 1, x.column(s).as_slice()));
            assert_relative_eq!(
                (batched.column(s) - single.output.column(0)).amax(),
                0.0,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let layer = oracle_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let target = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let cache = layer.forward(&x);
        let (_, d_out) = sq_loss(&cache.output, &target);
        let (grads, dx) = layer.backward(&cache, &d_out);

        let loss_at = |w: &DVector<f64>| {
            let mut l = layer.clone();
            l.w.copy_from_slice(w.as_slice());
            sq_loss(&l.forward(&x).output, &target).0
        };
        let w_flat = DVector::from_column_slice(layer.w.as_slice());
        let dw_flat = DVector::from_column_slice(grads.dw.as_slice());
        assert!(grad_check(loss_at, &w_flat, &dw_flat, 1e-6) < 1e-7);

        let loss_at_b = |b: &DVector<f64>| {
            let mut l = layer.clone();
            l.b.copy_from(b);
            sq_loss(&l.forward(&x).output, &target).0
        };
        assert!(grad_check(loss_at_b, &layer.b, &grads.db, 1e-6) < 1e-7);

        let loss_at_x = |xf: &DVector<f64>| {
            let xm = DMatrix::from_column_slice(4, 3, xf.as_slice());
            sq_loss(&layer.forward(&xm).output, &target).0
        };
        let x_flat = DVector::from_column_slice(x.as_slice());
        let dx_flat = DVector::from_column_slice(dx.as_slice());
        assert!(grad_check(loss_at_x, &x_flat, &dx_flat, 1e-6) < 1e-7);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Mlp::new(&[5, 8, 8, 3], &mut rng);
        let x = DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let target = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let caches = net.forward(&x);
        let (_, d_out) = sq_loss(net.output(&caches), &target);
        let (grads, _) = net.backward(&caches, &d_out);

        for li in 0..net.layers.len() {
            let loss_at = |w: &DVector<f64>| {
                let mut n = net.clone();
                n.layers[li].w.copy_from_slice(w.as_slice());
                let c = n.forward(&x);
                sq_loss(n.output(&c), &target).0
            };
            let w_flat = DVector::from_column_slice(net.layers[li].w.as_slice());
            let dw_flat = DVector::from_column_slice(grads[li].dw.as_slice());
            assert!(grad_check(loss_at, &w_flat, &dw_flat, 1e-6) < 1e-6, "layer {li} weights");
        }
    }

    #[test]
    fn sq_loss_is_mean_of_per_sample_sums() {
        let pred = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 5.0]);
        let target = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 0.0, 1.0]);
        let (value, grad) = sq_loss(&pred, &target);
        // sample 0: 1 + 4 = 5, sample 1: 0 + 16 = 16
        assert_relative_eq!(value, 10.5);
        assert_relative_eq!(grad[(0, 0)], 1.0);
        assert_relative_eq!(grad[(1, 1)], 4.0);
    }

    #[test]
    fn multitask_loss_weights_terms() {
        assert_relative_eq!(multitask_loss(2.0, 4.0, 1.0, 0.1), 2.4);
        assert_relative_eq!(multitask_loss(2.0, 4.0, 1.0, 0.0), 2.0);
    }

    #[test]
    fn adam_trace_matches_script_oracle() {
        // 10 steps on params [1, -2] with constant gradients [0.1, -0.3]
        let mut param = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let grad = DMatrix::from_row_slice(1, 2, &[0.1, -0.3]);
        let mut opt = Adam::new(1e-3);
        let mut slot = Moments::zeros_like(&param);
        for _ in 0..10 {
            opt.begin_step();
            opt.update(&mut slot, &mut param, &grad);
        }
        assert_relative_eq!(param[(0, 0)], 0.9900000010000001, epsilon = 1e-16);
        assert_relative_eq!(param[(0, 1)], -1.990000000333333, epsilon = 1e-15);
    }

    #[test]
    fn glorot_respects_fan_limit_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = glorot_uniform(30, 20, &mut rng);
        let limit = (6.0 / 50.0f64).sqrt();
        assert!(w.iter().all(|v| v.abs() < limit));
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        let w2 = glorot_uniform(30, 20, &mut rng2);
        assert_eq!(w, w2);
    }

    proptest! {
        #[test]
        fn tanh_output_is_bounded(vals in proptest::collection::vec(-50.0f64..50.0, 8)) {
            let layer = oracle_layer();
            let x = DMatrix::from_vec(4, 2, vals);
            let out = layer.forward(&x).output;
            prop_assert!(out.iter().all(|v| v.abs() <= 1.0));
        }

        #[test]
        fn sq_loss_is_nonnegative_and_zero_at_target(
            vals in proptest::collection::vec(-10.0f64..10.0, 6)
        ) {
            let pred = DMatrix::from_vec(3, 2, vals);
            let (value, _) = sq_loss(&pred, &pred);
            prop_assert_eq!(value, 0.0);
            let shifted = pred.map(|v| v + 0.5);
            let (value2, _) = sq_loss(&shifted, &pred);
            prop_assert!(value2 > 0.0);
        }
    }
}
