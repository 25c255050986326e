//! Minimal one-hidden-layer feedforward network with manual backpropagation.
//! The batch dimension is the flattened set of (bank, quarter) cells; all
//! matrix products run single-threaded so training is bit-reproducible
//! regardless of worker-thread count.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::{Error, Result};

/// Hidden layer width shared by every network in the model.
pub const HIDDEN: usize = 50;

#[derive(Debug, Clone)]
pub struct Mlp {
    w1: Array2<f64>, // [n_in, HIDDEN]
    b1: Array1<f64>, // [HIDDEN]
    w2: Array2<f64>, // [HIDDEN, n_out]
    b2: Array1<f64>, // [n_out]
    version: u64,
}

/// Activations recorded by [`Mlp::forward_cached`]; consumed by
/// [`Mlp::backward`], which rejects caches from an older parameter version.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Array2<f64>,
    hidden: Array2<f64>,
    version: u64,
}

/// Gradients of `sum(output * upstream)` w.r.t. every parameter and the input.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub input: Array2<f64>,
}

impl MlpGrads {
    /// Squared L2 norm over the parameter gradients (input excluded).
    pub fn param_norm_sq(&self) -> f64 {
        self.w1.iter().map(|g| g * g).sum::<f64>()
            + self.b1.iter().map(|g| g * g).sum::<f64>()
            + self.w2.iter().map(|g| g * g).sum::<f64>()
            + self.b2.iter().map(|g| g * g).sum::<f64>()
    }

    pub fn scale(&mut self, s: f64) {
        self.w1.mapv_inplace(|g| g * s);
        self.b1.mapv_inplace(|g| g * s);
        self.w2.mapv_inplace(|g| g * s);
        self.b2.mapv_inplace(|g| g * s);
        self.input.mapv_inplace(|g| g * s);
    }
}

impl Mlp {
    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let lim1 = (6.0 / (n_in + HIDDEN) as f64).sqrt();
        let lim2 = (6.0 / (HIDDEN + n_out) as f64).sqrt();
        let w1 = Array2::from_shape_fn((n_in, HIDDEN), |_| rng.random_range(-lim1..lim1));
        let w2 = Array2::from_shape_fn((HIDDEN, n_out), |_| rng.random_range(-lim2..lim2));
        Mlp {
            w1,
            b1: Array1::zeros(HIDDEN),
            w2,
            b2: Array1::zeros(n_out),
            version: 0,
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Mlp {
            w1: Array2::zeros((n_in, HIDDEN)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, n_out)),
            b2: Array1::zeros(n_out),
            version: 0,
        }
    }

    pub fn n_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w2.ncols()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.n_in() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.n_in()
            )));
        }
        Ok(())
    }

    /// `relu(x w1 + b1) w2 + b2`
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut hidden = x.dot(&self.w1);
        hidden += &self.b1;
        hidden.mapv_inplace(|z| z.max(0.0));
        let mut out = hidden.dot(&self.w2);
        out += &self.b2;
        let cache = ForwardCache {
            x: x.clone(),
            hidden,
            version: self.version,
        };
        Ok((out, cache))
    }

    /// Exact gradients of `sum(output * upstream)`. The cache must come from a
    /// forward pass against the current parameters.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<MlpGrads> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        if upstream.dim() != (cache.x.nrows(), self.n_out()) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, expected ({}, {})",
                upstream.dim(),
                cache.x.nrows(),
                self.n_out()
            )));
        }
        let gw2 = cache.hidden.t().dot(upstream);
        let gb2 = upstream.sum_axis(Axis(0));
        let mut dz = upstream.dot(&self.w2.t());
        // relu derivative: active exactly where the cached activation is > 0
        dz.zip_mut_with(&cache.hidden, |g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        let gw1 = cache.x.t().dot(&dz);
        let gb1 = dz.sum_axis(Axis(0));
        let ginput = dz.dot(&self.w1.t());
        Ok(MlpGrads {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
            input: ginput,
        })
    }

    /// `param <- param - lr * grad` for every parameter.
    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64) {
        self.w1.zip_mut_with(&grads.w1, |p, &g| *p -= lr * g);
        self.b1.zip_mut_with(&grads.b1, |p, &g| *p -= lr * g);
        self.w2.zip_mut_with(&grads.w2, |p, &g| *p -= lr * g);
        self.b2.zip_mut_with(&grads.b2, |p, &g| *p -= lr * g);
        self.version += 1;
    }

    /// Adds `2 * decay * param` to the gradients (L2 regularization on
    /// weights only; biases are left alone).
    pub fn add_weight_decay(&self, grads: &mut MlpGrads, decay: f64) {
        if decay == 0.0 {
            return;
        }
        grads.w1.zip_mut_with(&self.w1, |g, &p| *g += 2.0 * decay * p);
        grads.w2.zip_mut_with(&self.w2, |g, &p| *g += 2.0 * decay * p);
    }

    // Flat parameter view in w1, b1, w2, b2 order; used by checkpoints and
    // finite-difference checks.

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        let mut i = idx;
        if i < self.w1.len() {
            return self.w1.as_slice().unwrap()[i];
        }
        i -= self.w1.len();
        if i < self.b1.len() {
            return self.b1[i];
        }
        i -= self.b1.len();
        if i < self.w2.len() {
            return self.w2.as_slice().unwrap()[i];
        }
        i -= self.w2.len();
        self.b2[i]
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let mut i = idx;
        if i < self.w1.len() {
            self.w1.as_slice_mut().unwrap()[i] = value;
        } else {
            i -= self.w1.len();
            if i < self.b1.len() {
                self.b1[i] = value;
            } else {
                i -= self.b1.len();
                if i < self.w2.len() {
                    self.w2.as_slice_mut().unwrap()[i] = value;
                } else {
                    i -= self.w2.len();
                    self.b2[i] = value;
                }
            }
        }
        self.version += 1;
    }

    pub fn from_params(n_in: usize, n_out: usize, flat: &[f64]) -> Result<Self> {
        let mut net = Mlp::zeros(n_in, n_out);
        if flat.len() != net.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                net.n_params(),
                flat.len()
            )));
        }
        for (i, &v) in flat.iter().enumerate() {
            net.set_param(i, v);
        }
        net.version = 0;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rng() -> rand_chacha::ChaCha8Rng {
        crate::rng::derive(11, &[0])
    }

    /// Naive triple-loop re-implementation used as a duplicate-computation
    /// oracle for `forward`.
    fn forward_naive(net: &Mlp, x: &Array2<f64>) -> Array2<f64> {
        let (n, n_in) = x.dim();
        let n_out = net.n_out();
        let mut out = Array2::zeros((n, n_out));
        for r in 0..n {
            let mut h = vec![0.0; HIDDEN];
            for j in 0..HIDDEN {
                let mut z = net.b1[j];
                for i in 0..n_in {
                    z += x[[r, i]] * net.w1[[i, j]];
                }
                h[j] = z.max(0.0);
            }
            for k in 0..n_out {
                let mut y = net.b2[k];
                for j in 0..HIDDEN {
                    y += h[j] * net.w2[[j, k]];
                }
                out[[r, k]] = y;
            }
        }
        out
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(6, 2);
        let x = Array2::from_shape_fn((4, 6), |(r, c)| (r + c) as f64);
        let y = net.forward(&x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_active_path_is_relu_of_first_input() {
        let mut net = Mlp::zeros(6, 1);
        net.w1[[0, 0]] = 1.0;
        net.w2[[0, 0]] = 1.0;
        let x = array![[2.5, 9.0, 9.0, 9.0, 9.0, 9.0], [-3.0, 9.0, 9.0, 9.0, 9.0, 9.0]];
        let y = net.forward(&x).unwrap();
        assert_eq!(y[[0, 0]], 2.5);
        assert_eq!(y[[1, 0]], 0.0);
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let mut r = rng();
        let net = Mlp::new(6, 2, &mut r);
        let x = Array2::from_shape_fn((7, 6), |_| r.random_range(-2.0..2.0));
        let fast = net.forward(&x).unwrap();
        let slow = forward_naive(&net, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::zeros(6, 2);
        let x = Array2::zeros((3, 5));
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_central_finite_differences() {
        let mut r = rng();
        let mut net = Mlp::new(6, 2, &mut r);
        let x = Array2::from_shape_fn((5, 6), |_| r.random_range(-1.5..1.5));
        let upstream = Array2::from_shape_fn((5, 2), |_| r.random_range(-1.0..1.0));

        let (_, cache) = net.forward_cached(&x).unwrap();
        let grads = net.backward(&cache, &upstream).unwrap();
        let flat: Vec<f64> = {
            let mut v = Vec::new();
            v.extend(grads.w1.iter());
            v.extend(grads.b1.iter());
            v.extend(grads.w2.iter());
            v.extend(grads.b2.iter());
            v
        };

        let objective = |net: &Mlp| -> f64 {
            let y = net.forward(&x).unwrap();
            (y * &upstream).sum()
        };
        let h = 1e-5;
        for idx in 0..net.n_params() {
            let orig = net.get_param(idx);
            net.set_param(idx, orig + h);
            let up = objective(&net);
            net.set_param(idx, orig - h);
            let down = objective(&net);
            net.set_param(idx, orig);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(flat[idx].abs()).max(1e-8);
            assert!(
                ((fd - flat[idx]) / denom).abs() < 1e-4,
                "param {idx}: fd={fd}, analytic={}",
                flat[idx]
            );
        }
    }

    #[test]
    fn linear_region_gradient_is_weight_product() {
        // single active path with all preactivations positive: d out / d x0 = w1 * w2
        let mut net = Mlp::zeros(6, 1);
        net.w1[[0, 0]] = 0.7;
        net.b1[0] = 5.0; // keeps the unit active
        net.w2[[0, 0]] = 1.3;
        let x = array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let upstream = array![[1.0]];
        let (_, cache) = net.forward_cached(&x).unwrap();
        let g = net.backward(&cache, &upstream).unwrap();
        assert!((g.input[[0, 0]] - 0.7 * 1.3).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng();
        let net = Mlp::new(6, 2, &mut r);
        let x = Array2::from_shape_fn((3, 6), |_| r.random_range(-1.0..1.0));
        let (_, cache) = net.forward_cached(&x).unwrap();
        let g = net.backward(&cache, &Array2::zeros((3, 2))).unwrap();
        assert_eq!(g.param_norm_sq(), 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut r = rng();
        let mut net = Mlp::new(6, 1, &mut r);
        let x = Array2::from_shape_fn((2, 6), |_| r.random_range(-1.0..1.0));
        let (_, cache) = net.forward_cached(&x).unwrap();
        let g = net.backward(&cache, &Array2::ones((2, 1))).unwrap();
        net.sgd_step(&g, 0.1);
        assert!(matches!(net.backward(&cache, &Array2::ones((2, 1))), Err(Error::StaleCache)));
    }

    #[test]
    fn sgd_step_definition() {
        let mut net = Mlp::zeros(6, 1);
        net.w1[[0, 0]] = 1.0;
        let mut grads = MlpGrads {
            w1: Array2::zeros((6, HIDDEN)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, 1)),
            b2: Array1::zeros(1),
            input: Array2::zeros((1, 6)),
        };
        grads.w1[[0, 0]] = 2.0;
        let frozen = net.clone();
        net.sgd_step(&grads, 0.0);
        assert_eq!(net.w1, frozen.w1);
        net.sgd_step(&grads, 0.1);
        assert!((net.w1[[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn descent_on_fixed_batch_is_monotone_with_small_lr() {
        let mut r = rng();
        let mut net = Mlp::new(6, 1, &mut r);
        let x = Array2::from_shape_fn((8, 6), |_| r.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((8, 1), |_| r.random_range(-1.0..1.0));
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let (y, cache) = net.forward_cached(&x).unwrap();
            let resid = &y - &target;
            let loss = resid.iter().map(|e| e * e).sum::<f64>();
            assert!(loss <= prev + 1e-12, "loss increased: {prev} -> {loss}");
            prev = loss;
            let upstream = resid.mapv(|e| 2.0 * e);
            let g = net.backward(&cache, &upstream).unwrap();
            net.sgd_step(&g, 1e-3);
        }
    }

    #[test]
    fn param_round_trip() {
        let mut r = rng();
        let net = Mlp::new(6, 2, &mut r);
        let flat = net.params();
        let back = Mlp::from_params(6, 2, &flat).unwrap();
        assert_eq!(net.params(), back.params());
        for idx in [0, 7, 299, 300, 349, 350, 449, 450, 451] {
            assert_eq!(net.get_param(idx), flat[idx]);
        }
    }
}
