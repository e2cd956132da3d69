use ndarray::linalg::general_mat_mul;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Multiply `delta` in place by the derivative, expressed through the
    /// activation's output `y`.
    fn backprop(self, y: &[f64], delta: &mut [f64]) {
        match self {
            Activation::Tanh => delta
                .iter_mut()
                .zip(y)
                .for_each(|(d, y)| *d *= 1.0 - y * y),
            Activation::Relu => delta.iter_mut().zip(y).for_each(|(d, y)| {
                if *y <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Identity => {}
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Dense layer `y = act(W x + b)` with `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.out_dim()] {
                return Err(Error::Shape(format!("layer {i}: bias does not match weight rows")));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::Dimension {
                    layer: i,
                    expected: layers[i - 1].out_dim(),
                    got: l.in_dim(),
                });
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Shape("final layer must use the identity activation".into()));
        }
        Ok(MlpParams { layers })
    }

    /// Seeded uniform fan-in initialisation: Xavier bounds for tanh and
    /// identity layers, He bounds for relu layers. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let activation = if i + 1 == n { Activation::Identity } else { hidden };
                let bound = match activation {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Layer {
                    weight: Tensor::new(vec![fan_out, fan_in], w).expect("sized"),
                    bias: Tensor::zeros(vec![fan_out]),
                    activation,
                }
            })
            .collect();
        MlpParams { layers }
    }

    /// All-zero weights and biases with the given architecture.
    pub fn zeros(sizes: &[usize], hidden: Activation) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| Layer {
                weight: Tensor::zeros(vec![sizes[i + 1], sizes[i]]),
                bias: Tensor::zeros(vec![sizes[i + 1]]),
                activation: if i + 1 == n { Activation::Identity } else { hidden },
            })
            .collect();
        MlpParams { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Layer::out_dim));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `self <- (1 - tau) * self + tau * source`.
    pub fn polyak_from(&mut self, source: &MlpParams, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            for (a, b) in t.weight.data_mut().iter_mut().zip(s.weight.data()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
            for (a, b) in t.bias.data_mut().iter_mut().zip(s.bias.data()) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }

    /// Squared L2 distance between two congruent parameter sets.
    pub fn distance_sq(&self, other: &MlpParams) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                let w: f64 = a.weight.data().iter().zip(b.weight.data()).map(|(x, y)| (x - y).powi(2)).sum();
                let c: f64 = a.bias.data().iter().zip(b.bias.data()).map(|(x, y)| (x - y).powi(2)).sum();
                w + c
            })
            .sum()
    }

    /// Forward pass that keeps every layer's output for a later backward pass.
    pub fn forward_cached(&self, x: &Tensor) -> Result<ForwardCache> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let batch = x.rows();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let input = acts.last().expect("non-empty");
            let mut out = Tensor::zeros(vec![batch, layer.out_dim()]);
            for row in out.data_mut().chunks_exact_mut(layer.out_dim()) {
                row.copy_from_slice(layer.bias.data());
            }
            general_mat_mul(1.0, &input.view2(), &layer.weight.view2().t(), 1.0, &mut out.view2_mut());
            layer.activation.apply(out.data_mut());
            acts.push(out);
        }
        Ok(ForwardCache { acts })
    }

    /// Backward pass from a cached forward pass. Parameter gradients are
    /// skipped when `with_params` is false.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor,
        with_params: bool,
    ) -> Result<(Option<Gradients>, Tensor)> {
        let out = cache.output();
        if upstream.shape() != out.shape() {
            return Err(Error::Dimension {
                layer: self.layers.len() - 1,
                expected: out.cols(),
                got: upstream.cols(),
            });
        }
        let mut grads = with_params.then(|| Gradients::zeros_like(self));
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(cache.acts[i + 1].data(), delta.data_mut());
            let input = &cache.acts[i];
            if let Some(g) = grads.as_mut() {
                general_mat_mul(1.0, &delta.view2().t(), &input.view2(), 0.0, &mut g.weights[i].view2_mut());
                let gb = g.biases[i].data_mut();
                for row in delta.iter_rows() {
                    gb.iter_mut().zip(row).for_each(|(b, d)| *b += d);
                }
            }
            let mut prev = Tensor::zeros(vec![delta.rows(), layer.in_dim()]);
            general_mat_mul(1.0, &delta.view2(), &layer.weight.view2(), 0.0, &mut prev.view2_mut());
            delta = prev;
        }
        Ok((grads, delta))
    }

    /// Forward a single input vector.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(mlp_forward(self, &Tensor::row_vector(x)?)?.into_data())
    }
}

/// Activations recorded during a forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Tensor>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("non-empty")
    }

    pub fn into_output(mut self) -> Tensor {
        self.acts.pop().expect("non-empty")
    }
}

/// Parameter gradients, congruent with [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Gradients {
            weights: params.layers.iter().map(|l| Tensor::zeros(l.weight.shape().to_vec())).collect(),
            biases: params.layers.iter().map(|l| Tensor::zeros(l.bias.shape().to_vec())).collect(),
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b])
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &Gradients, k: f64) {
        for (a, b) in self.blocks_mut().zip(other.blocks()) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += k * y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.blocks_mut() {
            a.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    /// Name of the first block holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if !w.all_finite() {
                return Some(format!("layer {i} weight"));
            }
            if !b.all_finite() {
                return Some(format!("layer {i} bias"));
            }
        }
        None
    }
}

pub fn mlp_forward(params: &MlpParams, x: &Tensor) -> Result<Tensor> {
    Ok(params.forward_cached(x)?.into_output())
}

/// Gradients of `sum(upstream * forward(x))` with respect to the parameters
/// and to `x`.
pub fn mlp_backward(params: &MlpParams, x: &Tensor, upstream: &Tensor) -> Result<(Gradients, Tensor)> {
    let cache = params.forward_cached(x)?;
    let (g, dx) = params.backward_cached(&cache, upstream, true)?;
    Ok((g.expect("requested"), dx))
}

/// Input gradient only; skips the parameter-gradient products.
pub fn mlp_input_grad(params: &MlpParams, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let cache = params.forward_cached(x)?;
    Ok(params.backward_cached(&cache, upstream, false)?.1)
}

/// Central-difference estimate of the gradient of a scalar function of a
/// tensor, one coordinate at a time.
pub fn finite_diff<F: FnMut(&Tensor) -> f64>(mut f: F, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Central-difference estimate of the input gradient returned by
/// [`mlp_backward`].
pub fn finite_diff_input_grad(params: &MlpParams, x: &Tensor, upstream: &Tensor, h: f64) -> Result<Tensor> {
    mlp_forward(params, x)?;
    let objective = |p: &Tensor| {
        let y = mlp_forward(params, p).expect("shape checked");
        y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    Ok(finite_diff(objective, x, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn layer(w: Vec<Vec<f64>>, b: Vec<f64>, activation: Activation) -> Layer {
        Layer {
            weight: Tensor::from_rows(&w).unwrap(),
            bias: Tensor::new(vec![b.len()], b).unwrap(),
            activation,
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = MlpParams::from_layers(vec![layer(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            Activation::Identity,
        )])
        .unwrap();
        let y = mlp_forward(&p, &Tensor::row_vector(&[1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_input_through_tanh_net_is_zero() {
        let mut r = rng::stream(3);
        let p = MlpParams::init(&[3, 8, 8, 2], Activation::Tanh, &mut r);
        let y = mlp_forward(&p, &Tensor::zeros(vec![4, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_two_layer_forward() {
        let p = MlpParams::from_layers(vec![
            layer(vec![vec![0.1, -0.2], vec![0.3, 0.4]], vec![0.05, -0.1], Activation::Tanh),
            layer(vec![vec![0.7, -0.6]], vec![0.2], Activation::Identity),
        ])
        .unwrap();
        let y = mlp_forward(&p, &Tensor::row_vector(&[0.5, -0.5]).unwrap()).unwrap();
        // Straight-line re-evaluation.
        let h0 = (0.1 * 0.5 + -0.2 * -0.5 + 0.05_f64).tanh();
        let h1 = (0.3 * 0.5 + 0.4 * -0.5 - 0.1_f64).tanh();
        let expected = 0.7 * h0 - 0.6 * h1 + 0.2;
        assert!((y.data()[0] - expected).abs() < 1e-15);
        // Frozen value of the same arithmetic.
        assert!((y.data()[0] - 0.427_493_744_331_423_6).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut r = rng::stream(0);
        let p = MlpParams::init(&[3, 4, 1], Activation::Tanh, &mut r);
        match mlp_forward(&p, &Tensor::zeros(vec![2, 5])) {
            Err(Error::Dimension { layer: 0, expected: 3, got: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let x = Tensor::zeros(vec![2, 3]);
        assert!(mlp_backward(&p, &x, &Tensor::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn from_layers_rejects_inconsistent_dims() {
        let r = MlpParams::from_layers(vec![
            layer(vec![vec![1.0, 0.0]], vec![0.0], Activation::Tanh),
            layer(vec![vec![1.0, 0.0]], vec![0.0], Activation::Identity),
        ]);
        assert!(matches!(r, Err(Error::Dimension { layer: 1, .. })));
        let r = MlpParams::from_layers(vec![layer(vec![vec![1.0]], vec![0.0], Activation::Tanh)]);
        assert!(r.is_err());
    }

    #[test]
    fn linear_layer_input_grad_is_column_sums() {
        let w = vec![vec![1.0, 2.0, 3.0], vec![-4.0, 5.0, 0.5]];
        let p = MlpParams::from_layers(vec![layer(w, vec![0.3, 0.1], Activation::Identity)]).unwrap();
        let x = Tensor::row_vector(&[0.2, -0.7, 1.1]).unwrap();
        let (_, dx) = mlp_backward(&p, &x, &Tensor::filled(vec![1, 2], 1.0)).unwrap();
        assert_eq!(dx.data(), &[-3.0, 7.0, 3.5]);
        let fd = finite_diff_input_grad(&p, &x, &Tensor::filled(vec![1, 2], 1.0), 1e-5).unwrap();
        for (a, b) in fd.data().iter().zip([-3.0, 7.0, 3.5]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_network_has_zero_input_grad() {
        let mut p = MlpParams::zeros(&[3, 5, 2], Activation::Tanh);
        p.layers_mut()[0].bias.data_mut().copy_from_slice(&[0.1, -2.0, 0.3, 4.0, 1.0]);
        p.layers_mut()[1].bias.data_mut().copy_from_slice(&[7.0, -1.0]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        let (_, dx) = mlp_backward(&p, &x, &Tensor::filled(vec![2, 2], 1.0)).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_of_square() {
        let x = Tensor::row_vector(&[3.0]).unwrap();
        let g = finite_diff(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn param_grads_match_finite_differences() {
        let mut r = rng::stream(11);
        let p = MlpParams::init(&[3, 6, 2], Activation::Tanh, &mut r);
        let x = Tensor::new(vec![2, 3], (0..6).map(|i| 0.3 * i as f64 - 0.7).collect()).unwrap();
        let up = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (g, _) = mlp_backward(&p, &x, &up).unwrap();
        let h = 1e-6;
        for li in 0..2 {
            for k in 0..p.layers()[li].weight.len() {
                let mut q = p.clone();
                q.layers_mut()[li].weight.data_mut()[k] += h;
                let fp: f64 = mlp_forward(&q, &x).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
                q.layers_mut()[li].weight.data_mut()[k] -= 2.0 * h;
                let fm: f64 = mlp_forward(&q, &x).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g.weights[li].data()[k]).abs() < 1e-7, "layer {li} w{k}");
            }
        }
    }

    #[test]
    fn relu_layers_backprop() {
        let mut r = rng::stream(5);
        let p = MlpParams::init(&[2, 7, 1], Activation::Relu, &mut r);
        let x = Tensor::row_vector(&[0.31, -0.42]).unwrap();
        let up = Tensor::filled(vec![1, 1], 1.0);
        let (_, dx) = mlp_backward(&p, &x, &up).unwrap();
        let fd = finite_diff_input_grad(&p, &x, &up, 1e-6).unwrap();
        for (a, b) in dx.data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn polyak_moves_toward_source() {
        let mut r = rng::stream(1);
        let a = MlpParams::init(&[2, 3, 1], Activation::Tanh, &mut r);
        let mut b = MlpParams::init(&[2, 3, 1], Activation::Tanh, &mut r);
        let d0 = b.distance_sq(&a);
        b.polyak_from(&a, 0.5);
        assert!((b.distance_sq(&a) - 0.25 * d0).abs() < 1e-12);
    }
}
