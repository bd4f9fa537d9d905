//! Fully-connected networks with exact manual backpropagation.
//!
//! Forward/backward operate on whole batches (rows are samples). Gradients
//! returned by [`DenseNet::backward`] are sums over the batch; callers fold
//! any 1/n factors into the upstream `dy`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Result, VdlError};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out x in
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// MLP with leaky-ReLU hidden activations and identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
    /// Leaky-ReLU negative slope.
    pub alpha: f64,
}

/// Pre-activations recorded by a forward pass, consumed by backward.
pub struct ForwardCache {
    input: Array2<f64>,
    /// Pre-activation of every layer, in order.
    pre: Vec<Array2<f64>>,
}

/// Per-parameter gradients mirroring a net's shapes, plus the input gradient.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub dw: Vec<Array2<f64>>,
    pub db: Vec<Array1<f64>>,
    pub dx: Array2<f64>,
}

impl GradBundle {
    pub fn zeros_like(net: &DenseNet, batch: usize) -> GradBundle {
        GradBundle {
            dw: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.w.dim()))
                .collect(),
            db: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.b.len()))
                .collect(),
            dx: Array2::zeros((batch, net.input_dim())),
        }
    }

    pub fn add_assign(&mut self, other: &GradBundle) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += b;
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.dw.iter_mut() {
            *a *= s;
        }
        for a in self.db.iter_mut() {
            *a *= s;
        }
        self.dx *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.dw.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.db.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

fn leaky(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

fn leaky_deriv(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        alpha
    }
}

impl DenseNet {
    /// Fan-in-scaled Gaussian init (std sqrt(2 / (fan_in * (1 + alpha^2)))),
    /// biases zero.
    pub fn init(rng: &mut Rng, layer_sizes: &[usize], alpha: f64) -> DenseNet {
        assert!(layer_sizes.len() >= 2, "need at least one layer");
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        for win in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = (2.0 / (fan_in as f64 * (1.0 + alpha * alpha))).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.next_normal() * std);
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        DenseNet { layers, alpha }
    }

    /// Conventional sizes vector for a d_in -> width x (depth-1 hidden) -> d_out stack.
    pub fn mlp_sizes(d_in: usize, width: usize, depth: usize, d_out: usize) -> Vec<usize> {
        assert!(depth >= 1);
        let mut sizes = vec![d_in];
        for _ in 0..depth.saturating_sub(1) {
            sizes.push(width);
        }
        sizes.push(d_out);
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|x| x.is_finite()) && l.b.iter().all(|x| x.is_finite()))
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(VdlError::ShapeMismatch {
                expected: self.input_dim().to_string(),
                got: x.ncols().to_string(),
                context: "mlp_forward input",
            });
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let a = h.dot(&layer.w.t()) + &layer.b;
            if k < last {
                h = a.mapv(|v| leaky(v, self.alpha));
            } else {
                h = a.clone();
            }
            pre.push(a);
        }
        Ok((
            h,
            ForwardCache {
                input: x.to_owned(),
                pre,
            },
        ))
    }

    /// Single-sample convenience wrapper.
    pub fn forward_one(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let x2 = x.insert_axis(Axis(0));
        let (y, _) = self.forward(x2)?;
        Ok(y.row(0).to_owned())
    }

    /// Gradients of sum_i dy_i . y_i w.r.t. every parameter and the input.
    pub fn backward(&self, cache: &ForwardCache, dy: ArrayView2<f64>) -> Result<GradBundle> {
        let last = self.layers.len() - 1;
        if dy.ncols() != self.output_dim() || dy.nrows() != cache.input.nrows() {
            return Err(VdlError::ShapeMismatch {
                expected: format!("{}x{}", cache.input.nrows(), self.output_dim()),
                got: format!("{}x{}", dy.nrows(), dy.ncols()),
                context: "mlp_backward dy",
            });
        }
        let mut dw = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut db = vec![Array1::zeros(0); self.layers.len()];
        let mut da = dy.to_owned();
        for k in (0..=last).rev() {
            // Post-activation input of layer k.
            let h_in = if k == 0 {
                cache.input.clone()
            } else {
                cache.pre[k - 1].mapv(|v| leaky(v, self.alpha))
            };
            dw[k] = da.t().dot(&h_in);
            db[k] = da.sum_axis(Axis(0));
            let dh = da.dot(&self.layers[k].w);
            if k > 0 {
                da = &dh * &cache.pre[k - 1].mapv(|v| leaky_deriv(v, self.alpha));
            } else {
                da = dh;
            }
        }
        Ok(GradBundle { dw, db, dx: da })
    }

    /// Gradient of the (scalar) output w.r.t. the input, per sample.
    /// Requires output_dim == 1.
    pub fn input_grad_scalar(&self, cache: &ForwardCache) -> Result<Array2<f64>> {
        let n = cache.input.nrows();
        let dy = Array2::ones((n, 1));
        Ok(self.backward(cache, dy.view())?.dx)
    }

    /// R1 machinery: sum_i ||d out_i / d x_i||^2 and its exact gradient w.r.t.
    /// the weights (bias gradient is zero almost everywhere since biases enter
    /// only through the piecewise-constant activation masks).
    ///
    /// Requires output_dim == 1.
    pub fn grad_norm_sq_and_grads(&self, cache: &ForwardCache) -> Result<(f64, GradBundle)> {
        assert_eq!(self.output_dim(), 1, "R1 needs a scalar-output net");
        let n = cache.input.nrows();
        let last = self.layers.len() - 1;
        let masks: Vec<Array2<f64>> = cache.pre[..last]
            .iter()
            .map(|a| a.mapv(|v| leaky_deriv(v, self.alpha)))
            .collect();

        // Backward deltas u_k = d out / d a_k with dy = 1.
        let mut u = vec![Array2::zeros((0, 0)); self.layers.len()];
        u[last] = Array2::ones((n, 1));
        for k in (0..last).rev() {
            u[k] = &u[k + 1].dot(&self.layers[k + 1].w) * &masks[k];
        }
        let g = u[0].dot(&self.layers[0].w); // n x d input gradients

        let penalty: f64 = g.iter().map(|x| x * x).sum();

        // Linearized forward of g through the frozen masks:
        // t_0 = g (input space), t_k = mask_{k-1} * (t_{k-1} W_{k-1}^T).
        let mut dw = Vec::with_capacity(self.layers.len());
        let mut db = Vec::with_capacity(self.layers.len());
        let mut t = g.clone();
        for k in 0..self.layers.len() {
            if k > 0 {
                t = &t.dot(&self.layers[k - 1].w.t()) * &masks[k - 1];
            }
            dw.push(u[k].t().dot(&t).mapv(|v| 2.0 * v));
            db.push(Array1::zeros(self.layers[k].b.len()));
        }
        Ok((
            penalty,
            GradBundle {
                dw,
                db,
                dx: Array2::zeros((n, self.input_dim())),
            },
        ))
    }
}

/// Bias-corrected Adam over a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_w: Vec<Array2<f64>>,
    pub v_w: Vec<Array2<f64>>,
    pub m_b: Vec<Array1<f64>>,
    pub v_b: Vec<Array1<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64) -> AdamState {
        AdamState {
            m_w: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.w.dim()))
                .collect(),
            v_w: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.w.dim()))
                .collect(),
            m_b: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.b.len()))
                .collect(),
            v_b: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.b.len()))
                .collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One Adam step descending along `grads`. Ascent callers negate gradients
/// before the call.
pub fn adam_step(net: &mut DenseNet, grads: &GradBundle, state: &mut AdamState) -> Result<()> {
    if !grads.is_finite() {
        return Err(VdlError::NonFiniteGradient {
            context: "adam_step",
        });
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    for (k, layer) in net.layers.iter_mut().enumerate() {
        azip_update(
            layer.w.iter_mut(),
            grads.dw[k].iter(),
            state.m_w[k].iter_mut(),
            state.v_w[k].iter_mut(),
            b1,
            b2,
            eps,
            lr,
            bc1,
            bc2,
        );
        azip_update(
            layer.b.iter_mut(),
            grads.db[k].iter(),
            state.m_b[k].iter_mut(),
            state.v_b[k].iter_mut(),
            b1,
            b2,
            eps,
            lr,
            bc1,
            bc2,
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn azip_update<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    m: impl Iterator<Item = &'a mut f64>,
    v: impl Iterator<Item = &'a mut f64>,
    b1: f64,
    b2: f64,
    eps: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for (((p, g), m), v) in params.zip(grads).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Central-difference check of an analytic gradient over a flat parameter
/// vector. Returns max of |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check(
    loss: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    assert_eq!(params.len(), analytic.len());
    assert!((1e-7..=1e-3).contains(&h), "h out of range");
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let lp = loss(&p);
        p[i] = orig - h;
        let lm = loss(&p);
        p[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(VdlError::NonFiniteLoss {
                iteration: i,
                term: "grad_check probe",
            });
        }
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Flatten a net's parameters in declared order (w then b per layer).
pub fn flatten_params(net: &DenseNet) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &net.layers {
        out.extend(l.w.iter());
        out.extend(l.b.iter());
    }
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(net: &mut DenseNet, flat: &[f64]) {
    let mut idx = 0;
    for l in net.layers.iter_mut() {
        for w in l.w.iter_mut() {
            *w = flat[idx];
            idx += 1;
        }
        for b in l.b.iter_mut() {
            *b = flat[idx];
            idx += 1;
        }
    }
    assert_eq!(idx, flat.len());
}

/// Flatten a bundle's parameter gradients in the same order.
pub fn flatten_grads(g: &GradBundle) -> Vec<f64> {
    let mut out = Vec::new();
    for (dw, db) in g.dw.iter().zip(&g.db) {
        out.extend(dw.iter());
        out.extend(db.iter());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single_layer(w: Array2<f64>) -> DenseNet {
        let b = Array1::zeros(w.nrows());
        DenseNet {
            layers: vec![Layer { w, b }],
            alpha: 0.2,
        }
    }

    #[test]
    fn forward_linear_map() {
        let net = single_layer(array![[2.0, 0.0], [0.0, 3.0]]);
        let y = net.forward_one(array![1.0, 1.0].view()).unwrap();
        assert_eq!(y, array![2.0, 3.0]);
    }

    #[test]
    fn leaky_relu_slope() {
        assert_eq!(leaky(-1.0, 0.2), -0.2);
        // Through a 2-layer net: first layer identity-ish to force a negative
        // pre-activation.
        let net = DenseNet {
            layers: vec![
                Layer {
                    w: array![[1.0]],
                    b: array![0.0],
                },
                Layer {
                    w: array![[1.0]],
                    b: array![0.0],
                },
            ],
            alpha: 0.2,
        };
        // input dim 1 < 2 is fine for nets (only UnitVec requires d >= 2)
        let y = net.forward_one(array![-1.0].view()).unwrap();
        assert!((y[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_net_zero_output() {
        let net = single_layer(Array2::zeros((3, 3)));
        let y = net.forward_one(array![1.0, -2.0, 3.0].view()).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_linear_rows() {
        let net = single_layer(array![[1.0, 2.0], [3.0, 4.0]]);
        let x = array![[5.0, 7.0]];
        let (_, cache) = net.forward(x.view()).unwrap();
        let dy = array![[1.0, 0.0]];
        let g = net.backward(&cache, dy.view()).unwrap();
        assert_eq!(g.dw[0], array![[5.0, 7.0], [0.0, 0.0]]);
        assert_eq!(g.db[0], array![1.0, 0.0]);
        assert_eq!(g.dx, array![[1.0, 2.0]]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let net = DenseNet::init(&mut rng, &[5, 7, 7, 3], 0.2);
        let x = Array2::from_shape_fn((4, 5), |_| rng.next_normal());
        let dy = Array2::from_shape_fn((4, 3), |_| rng.next_normal());
        let (_, cache) = net.forward(x.view()).unwrap();
        let g = net.backward(&cache, dy.view()).unwrap();

        let flat = flatten_params(&net);
        let analytic = flatten_grads(&g);
        let mut probe = net.clone();
        let mut loss = |p: &[f64]| {
            unflatten_params(&mut probe, p);
            let (y, _) = probe.forward(x.view()).unwrap();
            (&y * &dy).sum()
        };
        let err = grad_check(&mut loss, &flat, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let net = DenseNet::init(&mut rng, &[4, 6, 1], 0.2);
        let x0: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
        let (_, cache) = net
            .forward(Array2::from_shape_vec((1, 4), x0.clone()).unwrap().view())
            .unwrap();
        let g = net.input_grad_scalar(&cache).unwrap();
        let mut loss = |p: &[f64]| {
            net.forward_one(Array1::from_vec(p.to_vec()).view())
                .unwrap()[0]
        };
        let analytic: Vec<f64> = g.row(0).to_vec();
        let err = grad_check(&mut loss, &x0, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn adam_hand_computed_first_step() {
        let mut net = single_layer(array![[1.0]]);
        let mut state = AdamState::new(&net, 0.1);
        let grads = GradBundle {
            dw: vec![array![[1.0]]],
            db: vec![array![0.0]],
            dx: Array2::zeros((1, 1)),
        };
        adam_step(&mut net, &grads, &mut state).unwrap();
        // m_hat = v_hat = 1 at t=1, so the step is lr / (1 + eps).
        assert!((net.layers[0].w[[0, 0]] - 0.9).abs() < 1e-9);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_grad_noop() {
        let mut rng = Rng::new(2);
        let mut net = DenseNet::init(&mut rng, &[3, 3], 0.2);
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.1);
        let grads = GradBundle::zeros_like(&net, 1);
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_lr_zero_advances_t_only() {
        let mut rng = Rng::new(4);
        let mut net = DenseNet::init(&mut rng, &[3, 3], 0.2);
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.0);
        let mut grads = GradBundle::zeros_like(&net, 1);
        grads.dw[0][[0, 0]] = 1.5;
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_deterministic() {
        let mut rng = Rng::new(6);
        let net = DenseNet::init(&mut rng, &[3, 4, 2], 0.2);
        let grads = {
            let x = Array2::from_shape_fn((2, 3), |_| rng.next_normal());
            let dy = Array2::from_shape_fn((2, 2), |_| rng.next_normal());
            let (_, c) = net.forward(x.view()).unwrap();
            net.backward(&c, dy.view()).unwrap()
        };
        let mut n1 = net.clone();
        let mut n2 = net.clone();
        let mut s1 = AdamState::new(&net, 0.01);
        let mut s2 = AdamState::new(&net, 0.01);
        adam_step(&mut n1, &grads, &mut s1).unwrap();
        adam_step(&mut n2, &grads, &mut s2).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn init_statistics() {
        let mut rng = Rng::new(8);
        let net = DenseNet::init(&mut rng, &[256, 256], 0.2);
        assert!(net.layers[0].b.iter().all(|b| *b == 0.0));
        let target = (2.0f64 / (256.0 * 1.04)).sqrt();
        let w = &net.layers[0].w;
        let mean = w.sum() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - target).abs() / target < 0.1,
            "std {std} target {target}"
        );
    }

    #[test]
    fn init_reproducible() {
        let a = DenseNet::init(&mut Rng::new(55), &[8, 16, 8], 0.2);
        let b = DenseNet::init(&mut Rng::new(55), &[8, 16, 8], 0.2);
        assert_eq!(a, b);
    }

    #[test]
    fn grad_check_quadratic_exact() {
        let x = [1.0, 2.0];
        let analytic = x;
        let mut loss = |p: &[f64]| 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let err = grad_check(&mut loss, &x, &analytic, 1e-5).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn grad_check_catches_wrong_gradient() {
        let x = [1.0, 2.0];
        let analytic = [1.1, 2.0]; // +10% on one coordinate
        let mut loss = |p: &[f64]| 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let err = grad_check(&mut loss, &x, &analytic, 1e-5).unwrap();
        assert!(err > 0.05, "err {err}");
    }

    #[test]
    fn r1_linear_discriminator_constant() {
        // D(z) = w^T z: per-sample grad norm is ||w||^2 regardless of input.
        let net = single_layer(array![[0.5, -1.5, 2.0]]);
        let x = array![[1.0, 0.0, 0.0], [0.3, 0.4, -0.2]];
        let (_, cache) = net.forward(x.view()).unwrap();
        let (p, _) = net.grad_norm_sq_and_grads(&cache).unwrap();
        let expected = 2.0 * (0.25 + 2.25 + 4.0);
        assert!((p - expected).abs() < 1e-12);
    }

    #[test]
    fn r1_grads_match_finite_differences() {
        let mut rng = Rng::new(91);
        let net = DenseNet::init(&mut rng, &[4, 8, 8, 1], 0.2);
        let x = Array2::from_shape_fn((3, 4), |_| rng.next_normal());
        let (_, cache) = net.forward(x.view()).unwrap();
        let (_, grads) = net.grad_norm_sq_and_grads(&cache).unwrap();

        let flat = flatten_params(&net);
        let analytic = flatten_grads(&grads);
        let mut probe = net.clone();
        let mut loss = |p: &[f64]| {
            unflatten_params(&mut probe, p);
            let (_, c) = probe.forward(x.view()).unwrap();
            let g = probe.input_grad_scalar(&c).unwrap();
            g.iter().map(|v| v * v).sum::<f64>()
        };
        let err = grad_check(&mut loss, &flat, &analytic, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn forward_bitwise_repeatable() {
        let mut rng = Rng::new(13);
        let net = DenseNet::init(&mut rng, &[6, 12, 6], 0.2);
        let x = Array2::from_shape_fn((5, 6), |_| rng.next_normal());
        let (y1, _) = net.forward(x.view()).unwrap();
        let (y2, _) = net.forward(x.view()).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = Rng::new(1);
        let net = DenseNet::init(&mut rng, &[4, 4], 0.2);
        let x = Array2::zeros((1, 3));
        assert!(matches!(
            net.forward(x.view()),
            Err(VdlError::ShapeMismatch { .. })
        ));
    }
}
