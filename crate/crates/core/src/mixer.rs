//! All-MLP mixer over the document-history and tag-history streams.
//!
//! Each layer applies, in order:
//! * a sequence mixer: an MLP along the sequence axis, shared across features;
//! * a channel mixer: an MLP along the feature axis, shared across positions;
//! * a fusion mixer: an MLP over the pair `[doc, tag]` at every
//!   (position, feature) cell, shared across cells and streams.
//!
//! All three are the same residual block `x + W2 g(W1 LayerNorm(x))` applied
//! to the rows of a matrix, so one forward/backward implementation serves all
//! of them. Doc and tag streams have separate sequence and channel weights.

use ndarray::{Array1, Array2, Array3, ArrayView, ArrayView1, ArrayView2, ArrayView3, Axis, Dimension, Zip};
use ndarray::linalg::general_mat_mul;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    /// Value and derivative at `z`.
    #[inline]
    fn eval<T: Scalar>(self, z: T) -> (T, T) {
        match self {
            Activation::Gelu => {
                let half = T::from_f64_lossy(0.5);
                let cdf = half * (T::one() + (z * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-half * z * z).exp() * T::from_f64_lossy(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
                (z * cdf, cdf + z * pdf)
            }
            Activation::Relu => {
                if z > T::zero() {
                    (z, T::one())
                } else {
                    (T::zero(), T::zero())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    /// History window length.
    pub u: usize,
    pub d_h: usize,
    /// Sequence-mixer hidden width; 0 means `2 * u`.
    pub r_u: usize,
    /// Channel-mixer hidden width; 0 means `2 * d_h`.
    pub r_c: usize,
    pub r_f: usize,
    pub n_layers: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            u: 8,
            d_h: 512,
            r_u: 0,
            r_c: 0,
            r_f: 8,
            n_layers: 2,
            activation: Activation::Gelu,
            dropout: 0.1,
        }
    }
}

impl MixerConfig {
    pub fn seq_hidden(&self) -> usize {
        if self.r_u == 0 {
            2 * self.u
        } else {
            self.r_u
        }
    }

    pub fn chan_hidden(&self) -> usize {
        if self.r_c == 0 {
            2 * self.d_h
        } else {
            self.r_c
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.u == 0 || self.d_h == 0 || self.r_f == 0 || self.n_layers == 0 {
            return Err(Error::Config(
                "mixer dimensions u, d_h, r_f and n_layers must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// LayerNorm of one vector with population variance.
pub fn layer_norm<T: Scalar>(x: ArrayView1<T>, gain: ArrayView1<T>, bias: ArrayView1<T>) -> Array1<T> {
    let mut xhat = x.to_vec();
    normalize(&mut xhat);
    Array1::from(xhat) * &gain + &bias
}

/// Normalizes `x` in place and returns the inverse standard deviation.
fn normalize<T: Scalar>(x: &mut [T]) -> T {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    let inv_std = T::one() / (var + T::from_f64_lossy(LN_EPS)).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    inv_std
}

/// Parameters of one residual MLP block acting on rows of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln_gain: Array1<T>,
    pub ln_bias: Array1<T>,
    /// `hidden x dim`
    pub w1: Array2<T>,
    /// `dim x hidden`
    pub w2: Array2<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let uniform = |fan_in: usize, rng: &mut R| {
            let b = 1.0 / (fan_in as f64).sqrt();
            T::from_f64_lossy(rng.gen_range(-b..=b))
        };
        let w1 = Array2::from_shape_fn((hidden, dim), |_| uniform(dim, rng));
        let w2 = Array2::from_shape_fn((dim, hidden), |_| uniform(hidden, rng));
        BlockParams {
            ln_gain: Array1::ones(dim),
            ln_bias: Array1::zeros(dim),
            w1,
            w2,
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        BlockParams {
            ln_gain: Array1::zeros(dim),
            ln_bias: Array1::zeros(dim),
            w1: Array2::zeros((hidden, dim)),
            w2: Array2::zeros((dim, hidden)),
        }
    }

    pub fn dim(&self) -> usize {
        self.ln_gain.len()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }
}

/// Intermediate values of a block forward pass needed by its backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
    normed: Array2<T>,
    act: Array2<T>,
    act_grad: Array2<T>,
    /// Inverted-dropout multipliers on the branch output.
    mask: Option<Array2<T>>,
}

/// Dropout applied to non-residual branch outputs during training.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout_mask<T: Scalar>(shape: (usize, usize), dropout: &mut Option<Dropout<'_>>) -> Option<Array2<T>> {
    let d = dropout.as_mut()?;
    if d.p <= 0.0 {
        return None;
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - d.p));
    let p = d.p;
    Some(Array2::from_shape_fn(shape, |_| {
        if d.rng.gen::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    }))
}

/// `x + W2 g(W1 LayerNorm(x))` applied to every row of `x`.
pub fn block_forward<T: Scalar>(
    params: &BlockParams<T>,
    x: ArrayView2<T>,
    activation: Activation,
    dropout: &mut Option<Dropout<'_>>,
) -> (Array2<T>, BlockCache<T>) {
    let (n, dim) = x.dim();
    let mut xhat = Array2::<T>::zeros((n, dim));
    xhat.assign(&x);
    let mut inv_std = Array1::<T>::zeros(n);
    let rows = xhat.as_slice_mut().expect("standard layout").chunks_exact_mut(dim);
    for (row, s) in rows.zip(inv_std.iter_mut()) {
        *s = normalize(row);
    }
    let normed = &xhat * &params.ln_gain + &params.ln_bias;
    let pre = normed.dot(&params.w1.t());
    let mut act = Array2::<T>::zeros(pre.dim());
    let mut act_grad = Array2::<T>::zeros(pre.dim());
    Zip::from(&mut act)
        .and(&mut act_grad)
        .and(&pre)
        .for_each(|a, g, &z| (*a, *g) = activation.eval(z));
    let mut branch = act.dot(&params.w2.t());
    let mask = dropout_mask(branch.dim(), dropout);
    if let Some(m) = &mask {
        branch *= m;
    }
    let out = branch + &x;
    (
        out,
        BlockCache {
            xhat,
            inv_std,
            normed,
            act,
            act_grad,
            mask,
        },
    )
}

/// Backward pass of [`block_forward`]. Accumulates parameter gradients into
/// `grads` and returns the gradient with respect to the block input.
pub fn block_backward<T: Scalar>(
    params: &BlockParams<T>,
    cache: &BlockCache<T>,
    d_out: ArrayView2<T>,
    grads: &mut BlockParams<T>,
) -> Array2<T> {
    let d_branch = match &cache.mask {
        Some(m) => &d_out * m,
        None => d_out.to_owned(),
    };
    // branch = act · W2ᵀ
    general_mat_mul(T::one(), &d_branch.t(), &cache.act, T::one(), &mut grads.w2);
    let mut d_pre = d_branch.dot(&params.w2);
    d_pre *= &cache.act_grad;
    // pre = normed · W1ᵀ
    general_mat_mul(T::one(), &d_pre.t(), &cache.normed, T::one(), &mut grads.w1);
    let d_normed = d_pre.dot(&params.w1);

    grads.ln_gain += &(&d_normed * &cache.xhat).sum_axis(Axis(0));
    grads.ln_bias += &d_normed.sum_axis(Axis(0));
    let d_xhat = d_normed * &params.ln_gain;

    let width = d_out.ncols();
    let dim = T::from_usize(width).unwrap();
    let mut d_x = d_out.as_standard_layout().into_owned();
    let d_xhat = d_xhat.as_standard_layout();
    let rows = d_x
        .as_slice_mut()
        .expect("standard layout")
        .chunks_exact_mut(width)
        .zip(d_xhat.as_slice().expect("standard layout").chunks_exact(width))
        .zip(cache.xhat.as_slice().expect("standard layout").chunks_exact(width))
        .zip(cache.inv_std.iter());
    for (((dx, dxh), xh), &is) in rows {
        let mean_d = dxh.iter().fold(T::zero(), |a, &g| a + g) / dim;
        let mean_dx = dxh.iter().zip(xh).fold(T::zero(), |a, (&g, &h)| a + g * h) / dim;
        for ((o, &g), &h) in dx.iter_mut().zip(dxh).zip(xh) {
            *o += is * (g - mean_d - h * mean_dx);
        }
    }
    d_x
}

fn check_shape<T>(context: &'static str, m: &ArrayView2<T>, expected: (usize, usize)) -> Result<()> {
    if m.dim() != expected {
        return Err(Error::shape(context, expected, m.dim()));
    }
    Ok(())
}

/// Sequence mixer on a `u x d_h` history: each feature column is mixed
/// along the sequence axis.
pub fn sequence_mix<T: Scalar>(
    h: ArrayView2<T>,
    params: &BlockParams<T>,
    activation: Activation,
) -> Result<Array2<T>> {
    if h.nrows() != params.dim() {
        return Err(Error::shape("sequence_mix", params.dim(), h.nrows()));
    }
    let (out_t, _) = block_forward(params, h.t(), activation, &mut None);
    Ok(out_t.reversed_axes().as_standard_layout().into_owned())
}

/// Channel mixer on a `u x d_h` history: each position's row is mixed
/// along the feature axis.
pub fn channel_mix<T: Scalar>(
    h: ArrayView2<T>,
    params: &BlockParams<T>,
    activation: Activation,
) -> Result<Array2<T>> {
    if h.ncols() != params.dim() {
        return Err(Error::shape("channel_mix", params.dim(), h.ncols()));
    }
    Ok(block_forward(params, h, activation, &mut None).0)
}

fn interleave<T: Scalar, D: Dimension>(doc: ArrayView<T, D>, tag: ArrayView<T, D>) -> Array2<T> {
    let cells = doc.len();
    let mut pairs = Array2::<T>::zeros((cells, 2));
    for ((mut p, &d), &t) in pairs.outer_iter_mut().zip(doc.iter()).zip(tag.iter()) {
        p[0] = d;
        p[1] = t;
    }
    pairs
}

fn deinterleave<T: Scalar>(pairs: ArrayView2<T>, shape: (usize, usize)) -> (Array2<T>, Array2<T>) {
    let doc = Array2::from_shape_vec(shape, pairs.column(0).to_vec()).expect("cell count");
    let tag = Array2::from_shape_vec(shape, pairs.column(1).to_vec()).expect("cell count");
    (doc, tag)
}

/// Fusion mixer: the pair `[doc[c, t], tag[c, t]]` of every cell goes
/// through one shared 2 -> r_f -> 2 block.
pub fn fusion_mix<T: Scalar>(
    doc: ArrayView2<T>,
    tag: ArrayView2<T>,
    params: &BlockParams<T>,
    activation: Activation,
) -> Result<(Array2<T>, Array2<T>)> {
    check_shape("fusion_mix", &tag, doc.dim())?;
    if params.dim() != 2 {
        return Err(Error::shape("fusion_mix", 2, params.dim()));
    }
    let (out, _) = block_forward(params, interleave(doc, tag).view(), activation, &mut None);
    Ok(deinterleave(out.view(), doc.dim()))
}

/// Weights of one mixer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub seq_doc: BlockParams<T>,
    pub seq_tag: BlockParams<T>,
    pub chan_doc: BlockParams<T>,
    pub chan_tag: BlockParams<T>,
    pub fusion: BlockParams<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn init<R: Rng>(cfg: &MixerConfig, rng: &mut R) -> Self {
        LayerParams {
            seq_doc: BlockParams::init(cfg.u, cfg.seq_hidden(), rng),
            seq_tag: BlockParams::init(cfg.u, cfg.seq_hidden(), rng),
            chan_doc: BlockParams::init(cfg.d_h, cfg.chan_hidden(), rng),
            chan_tag: BlockParams::init(cfg.d_h, cfg.chan_hidden(), rng),
            fusion: BlockParams::init(2, cfg.r_f, rng),
        }
    }

    pub fn zeros(cfg: &MixerConfig) -> Self {
        LayerParams {
            seq_doc: BlockParams::zeros(cfg.u, cfg.seq_hidden()),
            seq_tag: BlockParams::zeros(cfg.u, cfg.seq_hidden()),
            chan_doc: BlockParams::zeros(cfg.d_h, cfg.chan_hidden()),
            chan_tag: BlockParams::zeros(cfg.d_h, cfg.chan_hidden()),
            fusion: BlockParams::zeros(2, cfg.r_f),
        }
    }

    pub fn blocks(&self) -> [(&'static str, &BlockParams<T>); 5] {
        [
            ("seq_doc", &self.seq_doc),
            ("seq_tag", &self.seq_tag),
            ("chan_doc", &self.chan_doc),
            ("chan_tag", &self.chan_tag),
            ("fusion", &self.fusion),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut BlockParams<T>); 5] {
        [
            ("seq_doc", &mut self.seq_doc),
            ("seq_tag", &mut self.seq_tag),
            ("chan_doc", &mut self.chan_doc),
            ("chan_tag", &mut self.chan_tag),
            ("fusion", &mut self.fusion),
        ]
    }
}

pub struct LayerCache<T> {
    seq_doc: BlockCache<T>,
    seq_tag: BlockCache<T>,
    chan_doc: BlockCache<T>,
    chan_tag: BlockCache<T>,
    fusion: BlockCache<T>,
    shape: (usize, usize, usize),
}

/// `(batch, u, d)` to the `(batch * d) x u` matrix whose rows are the
/// feature columns of every history.
fn columns<T: Scalar>(x: ArrayView3<T>) -> Array2<T> {
    let (b, u, d) = x.dim();
    let t = x.permuted_axes([0, 2, 1]).as_standard_layout().into_owned();
    t.into_shape_with_order((b * d, u)).expect("contiguous")
}

fn from_columns<T: Scalar>(m: Array2<T>, shape: (usize, usize, usize)) -> Array3<T> {
    let (b, u, d) = shape;
    let t = m.into_shape_with_order((b, d, u)).expect("contiguous");
    t.permuted_axes([0, 2, 1]).as_standard_layout().into_owned()
}

fn rows<T: Scalar>(x: Array3<T>) -> Array2<T> {
    let (b, u, d) = x.dim();
    x.into_shape_with_order((b * u, d)).expect("contiguous")
}

fn from_rows<T: Scalar>(m: Array2<T>, shape: (usize, usize, usize)) -> Array3<T> {
    m.into_shape_with_order(shape).expect("contiguous")
}

/// Runs the whole stack on a (doc history, tag history) pair. Pass a
/// dropout source only in training mode.
pub fn forward_stack<T: Scalar>(
    doc: ArrayView2<T>,
    tag: ArrayView2<T>,
    layers: &[LayerParams<T>],
    activation: Activation,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Array2<T>, Array2<T>, Vec<LayerCache<T>>)> {
    check_shape("forward_stack", &tag, doc.dim())?;
    let (d, t, caches) = forward_stack_batch(
        doc.insert_axis(Axis(0)),
        tag.insert_axis(Axis(0)),
        layers,
        activation,
        dropout,
    )?;
    Ok((d.index_axis_move(Axis(0), 0), t.index_axis_move(Axis(0), 0), caches))
}

/// [`forward_stack`] on a batch of `(batch, u, d_h)` histories. Every block
/// acts on rows, so a batch is processed as one tall matrix per block.
pub fn forward_stack_batch<T: Scalar>(
    doc: ArrayView3<T>,
    tag: ArrayView3<T>,
    layers: &[LayerParams<T>],
    activation: Activation,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Array3<T>, Array3<T>, Vec<LayerCache<T>>)> {
    if tag.dim() != doc.dim() {
        return Err(Error::shape("forward_stack", doc.dim(), tag.dim()));
    }
    let shape = doc.dim();
    let mut doc = doc.as_standard_layout().into_owned();
    let mut tag = tag.as_standard_layout().into_owned();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        if layer.seq_doc.dim() != shape.1 || layer.chan_doc.dim() != shape.2 {
            return Err(Error::shape(
                "forward_stack",
                (layer.seq_doc.dim(), layer.chan_doc.dim()),
                (shape.1, shape.2),
            ));
        }
        let (d, seq_doc) = block_forward(&layer.seq_doc, columns(doc.view()).view(), activation, dropout);
        let (t, seq_tag) = block_forward(&layer.seq_tag, columns(tag.view()).view(), activation, dropout);
        let d = rows(from_columns(d, shape));
        let t = rows(from_columns(t, shape));
        let (d, chan_doc) = block_forward(&layer.chan_doc, d.view(), activation, dropout);
        let (t, chan_tag) = block_forward(&layer.chan_tag, t.view(), activation, dropout);
        let (pairs, fusion) =
            block_forward(&layer.fusion, interleave(d.view(), t.view()).view(), activation, dropout);
        let (d, t) = deinterleave(pairs.view(), (shape.0 * shape.1, shape.2));
        doc = from_rows(d, shape);
        tag = from_rows(t, shape);
        caches.push(LayerCache {
            seq_doc,
            seq_tag,
            chan_doc,
            chan_tag,
            fusion,
            shape,
        });
    }
    Ok((doc, tag, caches))
}

/// Backward pass of [`forward_stack`]. Returns the gradients with respect
/// to the doc and tag inputs.
pub fn backward_stack<T: Scalar>(
    layers: &[LayerParams<T>],
    caches: &[LayerCache<T>],
    d_doc: ArrayView2<T>,
    d_tag: ArrayView2<T>,
    grads: &mut [LayerParams<T>],
) -> (Array2<T>, Array2<T>) {
    let (d, t) = backward_stack_batch(
        layers,
        caches,
        d_doc.insert_axis(Axis(0)),
        d_tag.insert_axis(Axis(0)),
        grads,
    );
    (d.index_axis_move(Axis(0), 0), t.index_axis_move(Axis(0), 0))
}

/// Backward pass of [`forward_stack_batch`].
pub fn backward_stack_batch<T: Scalar>(
    layers: &[LayerParams<T>],
    caches: &[LayerCache<T>],
    d_doc: ArrayView3<T>,
    d_tag: ArrayView3<T>,
    grads: &mut [LayerParams<T>],
) -> (Array3<T>, Array3<T>) {
    let mut d_doc = d_doc.as_standard_layout().into_owned();
    let mut d_tag = d_tag.as_standard_layout().into_owned();
    for ((layer, cache), grad) in layers.iter().zip(caches).zip(grads.iter_mut()).rev() {
        let shape = cache.shape;
        let d_pairs = interleave(d_doc.view(), d_tag.view());
        let d_pairs = block_backward(&layer.fusion, &cache.fusion, d_pairs.view(), &mut grad.fusion);
        let (dd, dt) = deinterleave(d_pairs.view(), (shape.0 * shape.1, shape.2));
        let dd = block_backward(&layer.chan_doc, &cache.chan_doc, dd.view(), &mut grad.chan_doc);
        let dt = block_backward(&layer.chan_tag, &cache.chan_tag, dt.view(), &mut grad.chan_tag);
        let dd = columns(from_rows(dd, shape).view());
        let dt = columns(from_rows(dt, shape).view());
        let dd = block_backward(&layer.seq_doc, &cache.seq_doc, dd.view(), &mut grad.seq_doc);
        let dt = block_backward(&layer.seq_tag, &cache.seq_tag, dt.view(), &mut grad.seq_tag);
        d_doc = from_columns(dd, shape);
        d_tag = from_columns(dt, shape);
    }
    (d_doc, d_tag)
}
