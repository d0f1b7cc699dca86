//! Two-hidden-layer MLP: affine → layer norm → ReLU → dropout (twice), then
//! a single-logit affine head. Batched forward and exact backward in f64.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub const LAYER_NORM_EPS: f64 = 1e-9;

/// All trainable tensors. Weight matrices are stored `(fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub g1: Array1<f64>,
    pub beta1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub g2: Array1<f64>,
    pub beta2: Array1<f64>,
    pub w3: Array1<f64>,
    pub b3: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 10] = [
    "w1", "b1", "g1", "beta1", "w2", "b2", "g2", "beta2", "w3", "b3",
];

impl Params {
    pub fn zeros(input: usize, hidden1: usize, hidden2: usize) -> Self {
        Self {
            w1: Array2::zeros((input, hidden1)),
            b1: Array1::zeros(hidden1),
            g1: Array1::zeros(hidden1),
            beta1: Array1::zeros(hidden1),
            w2: Array2::zeros((hidden1, hidden2)),
            b2: Array1::zeros(hidden2),
            g2: Array1::zeros(hidden2),
            beta2: Array1::zeros(hidden2),
            w3: Array1::zeros(hidden2),
            b3: Array1::zeros(1),
        }
    }

    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(input: usize, hidden1: usize, hidden2: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden1, hidden2);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            w.iter_mut().for_each(|x| *x = dist.sample(rng));
        };
        fill(slice_mut(&mut p.w1), input, hidden1);
        fill(slice_mut(&mut p.w2), hidden1, hidden2);
        fill(p.w3.as_slice_mut().expect("contiguous"), hidden2, 1);
        p.g1.fill(1.0);
        p.g2.fill(1.0);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden1(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden2(&self) -> usize {
        self.w2.ncols()
    }

    /// Tensors in serialization order (see [`TENSOR_NAMES`]).
    pub fn tensors(&self) -> [&[f64]; 10] {
        [
            slice(&self.w1),
            self.b1.as_slice().expect("contiguous"),
            self.g1.as_slice().expect("contiguous"),
            self.beta1.as_slice().expect("contiguous"),
            slice(&self.w2),
            self.b2.as_slice().expect("contiguous"),
            self.g2.as_slice().expect("contiguous"),
            self.beta2.as_slice().expect("contiguous"),
            self.w3.as_slice().expect("contiguous"),
            self.b3.as_slice().expect("contiguous"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 10] {
        [
            slice_mut(&mut self.w1),
            self.b1.as_slice_mut().expect("contiguous"),
            self.g1.as_slice_mut().expect("contiguous"),
            self.beta1.as_slice_mut().expect("contiguous"),
            slice_mut(&mut self.w2),
            self.b2.as_slice_mut().expect("contiguous"),
            self.g2.as_slice_mut().expect("contiguous"),
            self.beta2.as_slice_mut().expect("contiguous"),
            self.w3.as_slice_mut().expect("contiguous"),
            self.b3.as_slice_mut().expect("contiguous"),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("weights are kept in standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("weights are kept in standard layout")
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    input: Array2<f64>,
    xhat1: Array2<f64>,
    inv_std1: Array1<f64>,
    normed1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    h1: Array2<f64>,
    xhat2: Array2<f64>,
    inv_std2: Array1<f64>,
    normed2: Array2<f64>,
    mask2: Option<Array2<f64>>,
    h2: Array2<f64>,
    pub logits: Array1<f64>,
}

impl Activations {
    /// Layer-norm outputs before gain/bias, for diagnostics.
    pub fn normalized(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.xhat1, &self.xhat2)
    }
}

/// Row-wise layer norm; returns `(xhat, 1/sqrt(var + eps))`.
fn layer_norm(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let width = z.ncols() as f64;
    let mut xhat = z.clone();
    let mut inv_std = Array1::zeros(z.nrows());
    for (mut row, inv) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row -= mean;
        let var = row.iter().map(|x| x * x).sum::<f64>() / width;
        *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= *inv;
    }
    (xhat, inv_std)
}

/// Inverted-dropout mask: 0 with probability `rate`, otherwise `1/(1-rate)`.
fn dropout_mask<R: Rng>(shape: (usize, usize), rate: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

fn hidden_block<R: Rng>(
    input: ArrayView2<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    g: &Array1<f64>,
    beta: &Array1<f64>,
    dropout: &mut Option<(&mut R, f64)>,
) -> (Array2<f64>, Array1<f64>, Array2<f64>, Option<Array2<f64>>, Array2<f64>) {
    let z = input.dot(w) + b;
    let (xhat, inv_std) = layer_norm(&z);
    let normed = &xhat * g + beta;
    let mut h = normed.mapv(|v| v.max(0.0));
    let mask = match dropout {
        Some((rng, rate)) if *rate > 0.0 => {
            let m = dropout_mask(h.dim(), *rate, *rng);
            h *= &m;
            Some(m)
        }
        _ => None,
    };
    (xhat, inv_std, normed, mask, h)
}

/// Batched forward pass. `dropout = None` is evaluation mode.
pub fn forward_batch<R: Rng>(
    params: &Params,
    input: ArrayView2<f64>,
    mut dropout: Option<(&mut R, f64)>,
) -> Activations {
    let (xhat1, inv_std1, normed1, mask1, h1) = hidden_block(
        input,
        &params.w1,
        &params.b1,
        &params.g1,
        &params.beta1,
        &mut dropout,
    );
    let (xhat2, inv_std2, normed2, mask2, h2) = hidden_block(
        h1.view(),
        &params.w2,
        &params.b2,
        &params.g2,
        &params.beta2,
        &mut dropout,
    );
    let logits = h2.dot(&params.w3) + params.b3[0];
    Activations {
        input: input.to_owned(),
        xhat1,
        inv_std1,
        normed1,
        mask1,
        h1,
        xhat2,
        inv_std2,
        normed2,
        mask2,
        h2,
        logits,
    }
}

/// Evaluation-mode logits without retaining activations.
pub fn logits_eval(params: &Params, input: ArrayView2<f64>) -> Array1<f64> {
    let block = |x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>, g: &Array1<f64>, beta: &Array1<f64>| {
        let z = x.dot(w) + b;
        let (xhat, _) = layer_norm(&z);
        (xhat * g + beta).mapv(|v| v.max(0.0))
    };
    let h1 = block(input, &params.w1, &params.b1, &params.g1, &params.beta1);
    let h2 = block(h1.view(), &params.w2, &params.b2, &params.g2, &params.beta2);
    h2.dot(&params.w3) + params.b3[0]
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[w·y·log σ(z) + (1-y)·log(1-σ(z))]` in softplus form.
pub fn loss_bce_logits(logit: f64, label: f64, pos_weight: f64) -> f64 {
    pos_weight * label * softplus(-logit) + (1.0 - label) * softplus(logit)
}

/// d loss / d logit.
fn loss_grad(logit: f64, label: f64, pos_weight: f64) -> f64 {
    let s = sigmoid(logit);
    pos_weight * label * (s - 1.0) + (1.0 - label) * s
}

fn layer_norm_backward(d_normed: &Array2<f64>, xhat: &Array2<f64>, g: &Array1<f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    let width = xhat.ncols() as f64;
    let dxhat = d_normed * g;
    let mut dz = Array2::zeros(xhat.dim());
    Zip::from(dz.rows_mut())
        .and(dxhat.rows())
        .and(xhat.rows())
        .and(inv_std)
        .for_each(|mut out, dx, xh, &inv| {
            let mean_dx = dx.sum() / width;
            let mean_dx_xh = dx.dot(&xh) / width;
            Zip::from(&mut out)
                .and(&dx)
                .and(&xh)
                .for_each(|o, &d, &x| *o = inv * (d - mean_dx - x * mean_dx_xh));
        });
    dz
}

fn relu_dropout_backward(dh: Array2<f64>, normed: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    let mut d = match mask {
        Some(m) => dh * m,
        None => dh,
    };
    Zip::from(&mut d).and(normed).for_each(|d, &n| {
        if n <= 0.0 {
            *d = 0.0;
        }
    });
    d
}

/// Mean batch loss and its exact gradient for every parameter. Dropout masks
/// recorded in `acts` are reused.
pub fn backward(
    params: &Params,
    acts: &Activations,
    labels: ArrayView1<f64>,
    pos_weight: f64,
) -> (f64, Params) {
    let batch = acts.logits.len() as f64;
    let loss = Zip::from(&acts.logits)
        .and(&labels)
        .fold(0.0, |acc, &z, &y| acc + loss_bce_logits(z, y, pos_weight))
        / batch;
    let dlogits: Array1<f64> = Zip::from(&acts.logits)
        .and(&labels)
        .map_collect(|&z, &y| loss_grad(z, y, pos_weight) / batch);

    let mut grads = Params::zeros(params.input_dim(), params.hidden1(), params.hidden2());
    grads.b3[0] = dlogits.sum();
    grads.w3 = acts.h2.t().dot(&dlogits);

    let dh2 = dlogits
        .view()
        .insert_axis(Axis(1))
        .dot(&params.w3.view().insert_axis(Axis(0)));
    let dnormed2 = relu_dropout_backward(dh2, &acts.normed2, &acts.mask2);
    grads.g2 = (&dnormed2 * &acts.xhat2).sum_axis(Axis(0));
    grads.beta2 = dnormed2.sum_axis(Axis(0));
    let dz2 = layer_norm_backward(&dnormed2, &acts.xhat2, &params.g2, &acts.inv_std2);
    grads.w2 = acts.h1.t().dot(&dz2);
    grads.b2 = dz2.sum_axis(Axis(0));

    let dh1 = dz2.dot(&params.w2.t());
    let dnormed1 = relu_dropout_backward(dh1, &acts.normed1, &acts.mask1);
    grads.g1 = (&dnormed1 * &acts.xhat1).sum_axis(Axis(0));
    grads.beta1 = dnormed1.sum_axis(Axis(0));
    let dz1 = layer_norm_backward(&dnormed1, &acts.xhat1, &params.g1, &acts.inv_std1);
    grads.w1 = acts.input.t().dot(&dz1);
    grads.b1 = dz1.sum_axis(Axis(0));

    // `t().dot()` may hand back a non-standard layout.
    grads.w1 = grads.w1.as_standard_layout().into_owned();
    grads.w2 = grads.w2.as_standard_layout().into_owned();
    (loss, grads)
}
