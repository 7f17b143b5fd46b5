//! Batched forward/backward kernels for [`Mlp`] on row-major sample batches.
//!
//! These compute exactly the derivatives the scalar tape records, but per
//! layer with matrix products instead of per scalar. The trainer runs on them;
//! the tests in `objectives` hold them against the tape and against finite
//! differences.
//!
//! Conventions: a batch is `B x n`, layer `l` computes `A = H W^T + b`, hidden
//! layers apply leaky-ReLU, the last one the configured output activation.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::models::{Layer, Mlp};

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Layer>,
}

impl Grads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    /// Same order as [`Mlp::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.w.iter().chain(l.b.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    /// Pre-activations per layer.
    pub pre: Vec<Array2<f64>>,
    /// Post-activations per layer; the last entry is the network output.
    pub post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().unwrap()
    }

    fn layer_input(&self, i: usize) -> &Array2<f64> {
        if i == 0 {
            &self.input
        } else {
            &self.post[i - 1]
        }
    }
}

fn leaky_mask(pre: &Array2<f64>, slope: f64) -> Array2<f64> {
    pre.mapv(|a| if a >= 0.0 { 1.0 } else { slope })
}

pub fn forward(mlp: &Mlp, x: ArrayView2<f64>) -> ForwardCache {
    assert_eq!(x.ncols(), mlp.input_dim(), "batch width must match the input layer");
    let last = mlp.layers.len() - 1;
    let slope = mlp.config.leaky_slope;
    let act = mlp.config.output_activation;
    let mut pre = Vec::with_capacity(mlp.layers.len());
    let mut post: Vec<Array2<f64>> = Vec::with_capacity(mlp.layers.len());
    for (i, layer) in mlp.layers.iter().enumerate() {
        let h = if i == 0 { x } else { post[i - 1].view() };
        let a = h.dot(&layer.w.t()) + &layer.b;
        let out = if i < last {
            a.mapv(|v| if v >= 0.0 { v } else { slope * v })
        } else {
            a.mapv(|v| act.apply(v))
        };
        pre.push(a);
        post.push(out);
    }
    ForwardCache {
        input: x.to_owned(),
        pre,
        post,
    }
}

/// Forward pass without keeping intermediates.
pub fn predict(mlp: &Mlp, x: ArrayView2<f64>) -> Array2<f64> {
    let cache = forward(mlp, x);
    cache.post.into_iter().last().unwrap()
}

/// Reverse pass for an upstream gradient `d_out` on the network output.
///
/// Returns parameter gradients (if requested) and the gradient with respect to
/// the input batch.
pub fn backward(
    mlp: &Mlp,
    cache: &ForwardCache,
    d_out: ArrayView2<f64>,
    want_params: bool,
) -> (Option<Grads>, Array2<f64>) {
    let act = mlp.config.output_activation;
    let slope = mlp.config.leaky_slope;
    let mut delta = d_out.to_owned();
    Zip::from(&mut delta)
        .and(cache.output())
        .for_each(|d, &y| *d *= act.slope_from_output(y));
    let mut grads = want_params.then(|| Grads::zeros_like(mlp));
    for i in (0..mlp.layers.len()).rev() {
        if let Some(g) = grads.as_mut() {
            g.layers[i].w = delta.t().dot(cache.layer_input(i));
            g.layers[i].b = delta.sum_axis(Axis(0));
        }
        let p = delta.dot(&mlp.layers[i].w);
        if i == 0 {
            return (grads, p);
        }
        delta = p * leaky_mask(&cache.pre[i - 1], slope);
    }
    unreachable!("an Mlp has at least one layer")
}

/// Gradient of a scalar raw output with respect to the input rows, plus the
/// per-layer deltas needed to differentiate that gradient again.
#[derive(Debug, Clone)]
pub struct InputGrad {
    pub grad: Array2<f64>,
    deltas: Vec<Array2<f64>>,
}

/// `d output / d input` per row for a network with one raw (activation-free)
/// output, such as a discriminator logit.
pub fn logit_input_grad(mlp: &Mlp, cache: &ForwardCache) -> InputGrad {
    assert_eq!(mlp.output_dim(), 1);
    let slope = mlp.config.leaky_slope;
    let n = cache.input.nrows();
    let mut delta = Array2::<f64>::ones((n, 1));
    let mut deltas = vec![Array2::zeros((0, 0)); mlp.layers.len()];
    for i in (0..mlp.layers.len()).rev() {
        let p = delta.dot(&mlp.layers[i].w);
        deltas[i] = delta;
        if i == 0 {
            return InputGrad { grad: p, deltas };
        }
        delta = p * leaky_mask(&cache.pre[i - 1], slope);
    }
    unreachable!("an Mlp has at least one layer")
}

/// Parameter gradient of `sum_rows <g_bar_row, input_grad_row>`, i.e. the
/// second-order pass through [`logit_input_grad`].
///
/// Leaky-ReLU masks are piecewise constant, so the input gradient does not
/// depend on the biases and their gradient is zero.
pub fn input_grad_param_grads(
    mlp: &Mlp,
    cache: &ForwardCache,
    ig: &InputGrad,
    g_bar: ArrayView2<f64>,
) -> Grads {
    let slope = mlp.config.leaky_slope;
    let mut grads = Grads::zeros_like(mlp);
    let mut p_bar = g_bar.to_owned();
    let last = mlp.layers.len() - 1;
    for i in 0..mlp.layers.len() {
        grads.layers[i].w = ig.deltas[i].t().dot(&p_bar);
        if i < last {
            let d_bar = p_bar.dot(&mlp.layers[i].w.t());
            p_bar = d_bar * leaky_mask(&cache.pre[i], slope);
        }
    }
    grads
}

/// Horizontal concatenation of two batches with equal row counts.
pub fn hcat(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(s![.., a.ncols()..]).assign(&b);
    out
}
