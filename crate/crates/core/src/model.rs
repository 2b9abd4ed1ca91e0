//! Tag scoring: fuse the current document embedding with the pooled mixer
//! outputs, rank the tags and score them with binary cross-entropy.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{backward_internal, encode_internal, init_token_table, EncoderMode};
use crate::mixer::{backward_stack_batch, forward_stack_batch, Dropout, LayerCache, LayerParams, MixerConfig};
use crate::{Error, Result, Scalar};

/// Logits beyond this magnitude are clamped when turned into probabilities,
/// so scores stay strictly inside (0, 1).
const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Skip the mixer and pool the raw history embeddings.
    NoMixerPooling,
    /// Drop the document-history term.
    TagOnly,
    /// Drop the tag-history term.
    DocOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::NoMixerPooling,
        AblationMode::TagOnly,
        AblationMode::DocOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoMixerPooling => "no_mixer_pooling",
            AblationMode::TagOnly => "tag_only",
            AblationMode::DocOnly => "doc_only",
        }
    }

    fn uses_mixer(self) -> bool {
        self != AblationMode::NoMixerPooling
    }

    fn active_terms(self) -> [bool; 3] {
        [
            true,
            self != AblationMode::TagOnly,
            self != AblationMode::DocOnly,
        ]
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// alpha = beta = gamma = 1/3, not trained.
    Fixed,
    /// softplus-parameterized, initialized to 1/3 each.
    #[default]
    Learned,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fusion weights for the three score terms.
#[derive(Debug, Clone, PartialEq)]
pub enum MixWeights<T> {
    Fixed([T; 3]),
    /// Pre-softplus values of alpha, beta, gamma.
    Learned(Array1<T>),
}

impl<T: Scalar> MixWeights<T> {
    pub fn new(mode: WeightMode) -> Self {
        let third = 1.0 / 3.0;
        match mode {
            WeightMode::Fixed => MixWeights::Fixed([T::from_f64_lossy(third); 3]),
            WeightMode::Learned => {
                // softplus(raw) = 1/3
                let raw = third.exp_m1().ln();
                MixWeights::Learned(Array1::from_elem(3, T::from_f64_lossy(raw)))
            }
        }
    }

    /// Effective (alpha, beta, gamma).
    pub fn values(&self) -> [T; 3] {
        match self {
            MixWeights::Fixed(w) => *w,
            MixWeights::Learned(raw) => {
                [0, 1, 2].map(|i| T::from_f64_lossy(softplus(raw[i].to_f64_lossy())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams<T> {
    /// Projection of the current document, `L x d_h`.
    pub w_doc: Array2<T>,
    /// Projection of the pooled document history.
    pub w_hist_doc: Array2<T>,
    /// Projection of the pooled tag history.
    pub w_hist_tag: Array2<T>,
    pub mix: MixWeights<T>,
}

impl<T: Scalar> PredictorParams<T> {
    pub fn init<R: Rng>(n_tags: usize, dim: usize, mode: WeightMode, rng: &mut R) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        let mut w = || Array2::from_shape_fn((n_tags, dim), |_| T::from_f64_lossy(rng.gen_range(-b..=b)));
        PredictorParams {
            w_doc: w(),
            w_hist_doc: w(),
            w_hist_tag: w(),
            mix: MixWeights::new(mode),
        }
    }
}

/// Per-tag logits; probabilities are derived on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub logits: Vec<f64>,
}

impl ScoreVector {
    pub fn from_logits<T: Scalar>(logits: ArrayView1<T>) -> Self {
        ScoreVector {
            logits: logits.iter().map(|x| x.to_f64_lossy()).collect(),
        }
    }

    /// Builds scores from probabilities in (0, 1).
    pub fn from_probs(probs: &[f64]) -> Self {
        ScoreVector {
            logits: probs.iter().map(|&p| (p / (1.0 - p)).ln()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn prob(&self, k: usize) -> f64 {
        sigmoid(self.logits[k].clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
    }

    pub fn probs(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.prob(k)).collect()
    }
}

/// Mean over the sequence axis.
pub fn pool_history<T: Scalar>(h: ArrayView2<T>) -> Array1<T> {
    h.mean_axis(Axis(0)).expect("history has at least one row")
}

/// `sigmoid(alpha W0 h + beta W1 pool(doc) + gamma W2 pool(tag))`, with the
/// history term dropped by the tag-only and doc-only ablations. The caller
/// passes raw histories for the no-mixer ablation.
pub fn predict_scores<T: Scalar>(
    h: ArrayView1<T>,
    doc_hist: ArrayView2<T>,
    tag_hist: ArrayView2<T>,
    params: &PredictorParams<T>,
    ablation: AblationMode,
) -> Result<ScoreVector> {
    let dim = params.w_doc.ncols();
    if h.len() != dim || doc_hist.ncols() != dim || tag_hist.dim() != doc_hist.dim() {
        return Err(Error::shape(
            "predict_scores",
            dim,
            (h.len(), doc_hist.dim(), tag_hist.dim()),
        ));
    }
    let row = |v: Array1<T>| v.insert_axis(Axis(0));
    let pooled = [
        row(h.to_owned()),
        row(pool_history(doc_hist)),
        row(pool_history(tag_hist)),
    ];
    let (logits, _) = logits_from_pooled(&pooled, params, ablation);
    Ok(ScoreVector::from_logits(logits.row(0)))
}

/// Returns the `batch x L` logits and the three unweighted projections.
fn logits_from_pooled<T: Scalar>(
    pooled: &[Array2<T>; 3],
    params: &PredictorParams<T>,
    ablation: AblationMode,
) -> (Array2<T>, [Array2<T>; 3]) {
    let weights = params.mix.values();
    let active = ablation.active_terms();
    let projections = [
        pooled[0].dot(&params.w_doc.t()),
        pooled[1].dot(&params.w_hist_doc.t()),
        pooled[2].dot(&params.w_hist_tag.t()),
    ];
    let mut logits = Array2::<T>::zeros((pooled[0].nrows(), params.w_doc.nrows()));
    for i in 0..3 {
        if active[i] {
            logits.scaled_add(weights[i], &projections[i]);
        }
    }
    (logits, projections)
}

/// The `b` best tags by descending score, ties broken by ascending tag id.
pub fn top_b(scores: &ScoreVector, b: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..scores.len() as u32).collect();
    ids.sort_by(|&x, &y| {
        scores.logits[y as usize]
            .total_cmp(&scores.logits[x as usize])
            .then(x.cmp(&y))
    });
    ids.truncate(b);
    ids
}

/// Binary cross-entropy summed over all tags, evaluated from logits as
/// `max(x, 0) - x y + ln(1 + e^-|x|)`.
pub fn bce_loss(scores: &ScoreVector, labels: &[u32]) -> f64 {
    let mut loss = 0.0;
    let mut li = 0;
    for (k, &x) in scores.logits.iter().enumerate() {
        let y = if labels.get(li) == Some(&(k as u32)) {
            li += 1;
            1.0
        } else {
            0.0
        };
        loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    }
    loss
}

/// Settings that determine parameter shapes and the forward computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_tokens: usize,
    pub n_tags: usize,
    pub mixer: MixerConfig,
    pub encoder: EncoderMode,
    pub weights: WeightMode,
    pub ablation: AblationMode,
}

/// Every trainable tensor of the model. Also used as the gradient and
/// optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Present only with the internal encoder.
    pub token_table: Option<Array2<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub predictor: PredictorParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let token_table = match cfg.encoder {
            EncoderMode::Internal => Some(init_token_table(cfg.n_tokens, cfg.mixer.d_h, rng)),
            EncoderMode::Precomputed => None,
        };
        let layers = (0..cfg.mixer.n_layers)
            .map(|_| LayerParams::init(&cfg.mixer, rng))
            .collect();
        let predictor = PredictorParams::init(cfg.n_tags, cfg.mixer.d_h, cfg.weights, rng);
        ModelParams {
            token_table,
            layers,
            predictor,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        if let MixWeights::Fixed(w) = &mut z.predictor.mix {
            *w = [T::zero(); 3];
        }
        z
    }

    /// Named views of every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        if let Some(t) = &self.token_table {
            out.push(("token_table".to_string(), t.view().into_dyn()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, b) in layer.blocks() {
                out.push((format!("layer{i}.{name}.ln_gain"), b.ln_gain.view().into_dyn()));
                out.push((format!("layer{i}.{name}.ln_bias"), b.ln_bias.view().into_dyn()));
                out.push((format!("layer{i}.{name}.w1"), b.w1.view().into_dyn()));
                out.push((format!("layer{i}.{name}.w2"), b.w2.view().into_dyn()));
            }
        }
        let p = &self.predictor;
        out.push(("predictor.w_doc".into(), p.w_doc.view().into_dyn()));
        out.push(("predictor.w_hist_doc".into(), p.w_hist_doc.view().into_dyn()));
        out.push(("predictor.w_hist_tag".into(), p.w_hist_tag.view().into_dyn()));
        if let MixWeights::Learned(m) = &p.mix {
            out.push(("predictor.mix".into(), m.view().into_dyn()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.token_table {
            out.push(("token_table".to_string(), t.view_mut().into_dyn()));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, b) in layer.blocks_mut() {
                out.push((format!("layer{i}.{name}.ln_gain"), b.ln_gain.view_mut().into_dyn()));
                out.push((format!("layer{i}.{name}.ln_bias"), b.ln_bias.view_mut().into_dyn()));
                out.push((format!("layer{i}.{name}.w1"), b.w1.view_mut().into_dyn()));
                out.push((format!("layer{i}.{name}.w2"), b.w2.view_mut().into_dyn()));
            }
        }
        let p = &mut self.predictor;
        out.push(("predictor.w_doc".into(), p.w_doc.view_mut().into_dyn()));
        out.push(("predictor.w_hist_doc".into(), p.w_hist_doc.view_mut().into_dyn()));
        out.push(("predictor.w_hist_tag".into(), p.w_hist_tag.view_mut().into_dyn()));
        if let MixWeights::Learned(m) = &mut p.mix {
            out.push(("predictor.mix".into(), m.view_mut().into_dyn()));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c2 = |a: &Array2<T>| a.mapv(|x| U::from_f64_lossy(x.to_f64_lossy()));
        let c1 = |a: &Array1<T>| a.mapv(|x| U::from_f64_lossy(x.to_f64_lossy()));
        let block = |b: &crate::mixer::BlockParams<T>| crate::mixer::BlockParams {
            ln_gain: c1(&b.ln_gain),
            ln_bias: c1(&b.ln_bias),
            w1: c2(&b.w1),
            w2: c2(&b.w2),
        };
        ModelParams {
            token_table: self.token_table.as_ref().map(c2),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    seq_doc: block(&l.seq_doc),
                    seq_tag: block(&l.seq_tag),
                    chan_doc: block(&l.chan_doc),
                    chan_tag: block(&l.chan_tag),
                    fusion: block(&l.fusion),
                })
                .collect(),
            predictor: PredictorParams {
                w_doc: c2(&self.predictor.w_doc),
                w_hist_doc: c2(&self.predictor.w_hist_doc),
                w_hist_tag: c2(&self.predictor.w_hist_tag),
                mix: match &self.predictor.mix {
                    MixWeights::Fixed(w) => {
                        MixWeights::Fixed(w.map(|x| U::from_f64_lossy(x.to_f64_lossy())))
                    }
                    MixWeights::Learned(m) => MixWeights::Learned(c1(m)),
                },
            },
        }
    }
}

/// A document as seen by the model: token ids for the internal encoder, or
/// a fixed precomputed vector.
#[derive(Debug, Clone, Copy)]
pub enum DocInput<'a, T> {
    Tokens(&'a [u32]),
    Vector(ArrayView1<'a, T>),
}

/// One scoring problem: the current post and its history window.
#[derive(Debug, Clone)]
pub struct Example<'a, T> {
    pub current: DocInput<'a, T>,
    /// `u` slots, oldest first; `None` marks padding.
    pub history_docs: Vec<Option<DocInput<'a, T>>>,
    /// `u x d_h` tag-set embeddings of the history slots.
    pub history_tags: Array2<T>,
    /// Sorted tag ids (empty at inference).
    pub labels: &'a [u32],
}

pub struct ForwardCache<T> {
    pooled: [Array2<T>; 3],
    projections: [Array2<T>; 3],
    mixer: Option<Vec<LayerCache<T>>>,
    u: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.mixer.validate()?;
        if config.n_tags < 2 {
            return Err(Error::Config("at least two tags are required".into()));
        }
        Ok(Model {
            config,
            params: ModelParams::init(&config, rng),
        })
    }

    fn embed(&self, doc: &DocInput<'_, T>) -> Result<Array1<T>> {
        match (doc, &self.params.token_table) {
            (DocInput::Tokens(ids), Some(table)) => encode_internal(ids, table.view()),
            (DocInput::Vector(v), _) => Ok(v.to_owned()),
            (DocInput::Tokens(_), None) => Err(Error::Config(
                "token input requires the internal encoder".into(),
            )),
        }
    }

    /// Forward pass to logits. A dropout source turns on training mode.
    pub fn forward(
        &self,
        ex: &Example<'_, T>,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(Array1<T>, ForwardCache<T>)> {
        let (logits, cache) = self.forward_batch(std::slice::from_ref(ex), dropout)?;
        Ok((logits.index_axis_move(Axis(0), 0), cache))
    }

    /// Forward pass over a batch; row `i` of the result holds the logits of
    /// `examples[i]`.
    pub fn forward_batch(
        &self,
        examples: &[Example<'_, T>],
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        let cfg = &self.config.mixer;
        let n = examples.len();
        let mut current = Array2::<T>::zeros((n, cfg.d_h));
        let mut doc_hist = Array3::<T>::zeros((n, cfg.u, cfg.d_h));
        let mut tag_hist = Array3::<T>::zeros((n, cfg.u, cfg.d_h));
        for (i, ex) in examples.iter().enumerate() {
            if ex.history_docs.len() != cfg.u || ex.history_tags.dim() != (cfg.u, cfg.d_h) {
                return Err(Error::shape(
                    "model input",
                    (cfg.u, cfg.d_h),
                    (ex.history_docs.len(), ex.history_tags.dim()),
                ));
            }
            current.row_mut(i).assign(&self.embed(&ex.current)?);
            for (mut row, slot) in doc_hist.index_axis_mut(Axis(0), i).outer_iter_mut().zip(&ex.history_docs) {
                if let Some(doc) = slot {
                    row.assign(&self.embed(doc)?);
                }
            }
            tag_hist.index_axis_mut(Axis(0), i).assign(&ex.history_tags);
        }

        let (doc_out, tag_out, mixer) = if self.config.ablation.uses_mixer() {
            let (d, t, c) = forward_stack_batch(
                doc_hist.view(),
                tag_hist.view(),
                &self.params.layers,
                cfg.activation,
                dropout,
            )?;
            (d, t, Some(c))
        } else {
            (doc_hist, tag_hist, None)
        };

        let pool = |h: &Array3<T>| h.mean_axis(Axis(1)).expect("history has at least one row");
        let pooled = [current, pool(&doc_out), pool(&tag_out)];
        let (logits, projections) =
            logits_from_pooled(&pooled, &self.params.predictor, self.config.ablation);
        Ok((
            logits,
            ForwardCache {
                pooled,
                projections,
                mixer,
                u: cfg.u,
            },
        ))
    }

    pub fn scores(&self, ex: &Example<'_, T>) -> Result<ScoreVector> {
        let (logits, _) = self.forward(ex, &mut None)?;
        Ok(ScoreVector::from_logits(logits.view()))
    }

    pub fn scores_batch(&self, examples: &[Example<'_, T>]) -> Result<Vec<ScoreVector>> {
        let (logits, _) = self.forward_batch(examples, &mut None)?;
        Ok(logits.outer_iter().map(ScoreVector::from_logits).collect())
    }

    /// Backward pass from the logit gradient. Accumulates into `grads`.
    pub fn backward(
        &self,
        ex: &Example<'_, T>,
        cache: &ForwardCache<T>,
        d_logits: ArrayView1<T>,
        grads: &mut ModelParams<T>,
    ) {
        self.backward_batch(std::slice::from_ref(ex), cache, d_logits.insert_axis(Axis(0)), grads);
    }

    /// Backward pass of [`Model::forward_batch`]; gradients are summed over
    /// the batch.
    pub fn backward_batch(
        &self,
        examples: &[Example<'_, T>],
        cache: &ForwardCache<T>,
        d_logits: ArrayView2<T>,
        grads: &mut ModelParams<T>,
    ) {
        let p = &self.params.predictor;
        let weights = p.mix.values();
        let active = self.config.ablation.active_terms();
        let mats = [&p.w_doc, &p.w_hist_doc, &p.w_hist_tag];

        if let (MixWeights::Learned(raw), MixWeights::Learned(g)) = (&p.mix, &mut grads.predictor.mix) {
            for i in 0..3 {
                if active[i] {
                    let slope = T::from_f64_lossy(sigmoid(raw[i].to_f64_lossy()));
                    let dot = Zip::from(&d_logits)
                        .and(&cache.projections[i])
                        .fold(T::zero(), |acc, &a, &b| acc + a * b);
                    g[i] += dot * slope;
                }
            }
        }

        let mut d_pooled: [Array2<T>; 3] = std::array::from_fn(|i| Array2::zeros(cache.pooled[i].dim()));
        {
            let gp = &mut grads.predictor;
            let gmats = [&mut gp.w_doc, &mut gp.w_hist_doc, &mut gp.w_hist_tag];
            for (i, gm) in gmats.into_iter().enumerate() {
                if !active[i] {
                    continue;
                }
                let dl = d_logits.mapv(|x| x * weights[i]);
                general_mat_mul(T::one(), &dl.t(), &cache.pooled[i], T::one(), gm);
                d_pooled[i] = dl.dot(mats[i]);
            }
        }

        let spread = |d: &Array2<T>| -> Array3<T> {
            let scale = T::one() / T::from_usize(cache.u).unwrap();
            let (n, dim) = d.dim();
            d.view()
                .insert_axis(Axis(1))
                .broadcast((n, cache.u, dim))
                .unwrap()
                .mapv(|x| x * scale)
        };
        let (dd, dt) = (spread(&d_pooled[1]), spread(&d_pooled[2]));
        let d_doc_in = match &cache.mixer {
            Some(caches) => {
                backward_stack_batch(&self.params.layers, caches, dd.view(), dt.view(), &mut grads.layers).0
            }
            None => dd,
        };
        let Some(grad_table) = grads.token_table.as_mut() else {
            return;
        };
        for (i, ex) in examples.iter().enumerate() {
            if let DocInput::Tokens(ids) = ex.current {
                backward_internal(ids, d_pooled[0].row(i), grad_table);
            }
            for (slot, d_row) in ex.history_docs.iter().zip(d_doc_in.index_axis(Axis(0), i).outer_iter()) {
                if let Some(DocInput::Tokens(ids)) = slot {
                    backward_internal(ids, d_row, grad_table);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pooling() {
        let single = array![[1.0f64, 2.0]];
        assert_eq!(pool_history(single.view()), array![1.0, 2.0]);
        let same = array![[1.0, 2.0], [1.0, 2.0]];
        assert_eq!(pool_history(same.view()), array![1.0, 2.0]);
        let m = array![[1.0f64, -2.0], [4.0, 0.5], [0.25, 3.0]];
        let p = pool_history(m.view());
        assert!((p[0] - (1.0 + 4.0 + 0.25) / 3.0).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.5 + 3.0) / 3.0).abs() < 1e-15);
    }

    fn predictor(l: usize, d: usize) -> PredictorParams<f64> {
        PredictorParams {
            w_doc: Array2::zeros((l, d)),
            w_hist_doc: Array2::zeros((l, d)),
            w_hist_tag: Array2::zeros((l, d)),
            mix: MixWeights::Fixed([1.0, 0.0, 0.0]),
        }
    }

    #[test]
    fn zero_weights_score_one_half() {
        let p = predictor(4, 2);
        let h = array![1.0, 2.0];
        let hist = array![[1.0, 1.0], [3.0, -1.0]];
        let s = predict_scores(h.view(), hist.view(), hist.view(), &p, AblationMode::Full).unwrap();
        assert_eq!(s.probs(), vec![0.5; 4]);
    }

    #[test]
    fn history_terms_can_be_nullified() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PredictorParams::<f64>::init(3, 2, WeightMode::Fixed, &mut rng);
        p.mix = MixWeights::Fixed([1.0, 0.0, 0.0]);
        let h = array![0.3, -0.7];
        let a = array![[1.0, 1.0], [3.0, -1.0]];
        let b = array![[-5.0, 2.0], [0.0, 9.0]];
        let s1 = predict_scores(h.view(), a.view(), a.view(), &p, AblationMode::Full).unwrap();
        let s2 = predict_scores(h.view(), b.view(), a.view(), &p, AblationMode::Full).unwrap();
        let s3 = predict_scores(h.view(), a.view(), b.view(), &p, AblationMode::Full).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1, s3);
    }

    #[test]
    fn tiny_instance_matches_formula() {
        let p = PredictorParams {
            w_doc: array![[1.0, 0.0], [0.5, -1.0], [0.0, 2.0]],
            w_hist_doc: array![[0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]],
            w_hist_tag: array![[2.0, 0.0], [0.0, 0.0], [1.0, -1.0]],
            mix: MixWeights::Fixed([0.5, 0.3, 0.2]),
        };
        let h = array![1.0, -1.0];
        let doc = array![[1.0, 2.0], [3.0, 0.0]];
        let tag = array![[0.0, 1.0], [2.0, 1.0]];
        let s = predict_scores(h.view(), doc.view(), tag.view(), &p, AblationMode::Full).unwrap();
        // pooled doc = [2, 1], pooled tag = [1, 1]
        let pd = [2.0, 1.0];
        let pt = [1.0, 1.0];
        let hv = [1.0, -1.0];
        for k in 0..3 {
            let dot = |w: &Array2<f64>, v: &[f64; 2]| w[[k, 0]] * v[0] + w[[k, 1]] * v[1];
            let z = 0.5 * dot(&p.w_doc, &hv) + 0.3 * dot(&p.w_hist_doc, &pd) + 0.2 * dot(&p.w_hist_tag, &pt);
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((s.prob(k) - expected).abs() < 1e-15);
        }
        let tag_only = predict_scores(h.view(), doc.view(), tag.view(), &p, AblationMode::TagOnly).unwrap();
        let z0 = 0.5 * 1.0 + 0.2 * 2.0;
        assert!((tag_only.logits[0] - z0).abs() < 1e-15);
        let doc_only = predict_scores(h.view(), doc.view(), tag.view(), &p, AblationMode::DocOnly).unwrap();
        let z0 = 0.5 * 1.0 + 0.3 * 1.0;
        assert!((doc_only.logits[0] - z0).abs() < 1e-15);
    }

    #[test]
    fn top_b_examples() {
        let s = ScoreVector::from_probs(&[0.1, 0.9, 0.5]);
        assert_eq!(top_b(&s, 2), vec![1, 2]);
        let s = ScoreVector::from_probs(&[0.5; 4]);
        assert_eq!(top_b(&s, 3), vec![0, 1, 2]);
    }

    #[test]
    fn top_b_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs: Vec<f64> = (0..50).map(|_| rng.gen_range(0.01..0.99)).collect();
        let s = ScoreVector::from_probs(&probs);
        let mut order: Vec<(f64, u32)> = probs.iter().enumerate().map(|(i, &p)| (p, i as u32)).collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let oracle: Vec<u32> = order.iter().take(5).map(|x| x.1).collect();
        assert_eq!(top_b(&s, 5), oracle);
    }

    #[test]
    fn top_b_invariant_to_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..30).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let a = ScoreVector { logits: logits.clone() };
        let b = ScoreVector { logits: logits.iter().map(|x| x + 2.5).collect() };
        assert_eq!(top_b(&a, 7), top_b(&b, 7));
    }

    #[test]
    fn bce_examples() {
        let s = ScoreVector::from_probs(&[0.5]);
        assert!((bce_loss(&s, &[0]) - std::f64::consts::LN_2).abs() < 1e-15);

        let s = ScoreVector::from_probs(&[1.0 - 1e-9]);
        assert!(bce_loss(&s, &[0]) < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..0.95)).collect();
        let labels = [1u32, 4];
        let s = ScoreVector::from_probs(&probs);
        let naive: f64 = probs
            .iter()
            .enumerate()
            .map(|(k, &f)| {
                let y = if labels.contains(&(k as u32)) { 1.0 } else { 0.0 };
                -(y * f.ln() + (1.0 - y) * (1.0 - f).ln())
            })
            .sum();
        assert!((bce_loss(&s, &labels) - naive).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_inside_unit_interval() {
        let s = ScoreVector { logits: vec![1e4, -1e4] };
        assert!(s.prob(0) < 1.0 && s.prob(1) > 0.0);
        assert!(bce_loss(&s, &[0]).is_finite());
        assert!(bce_loss(&s, &[1]) > 1e3);
    }

    #[test]
    fn learned_weights_start_at_one_third() {
        let w = MixWeights::<f64>::new(WeightMode::Learned).values();
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let f = MixWeights::<f64>::new(WeightMode::Fixed).values();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ablation_labels_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.label().parse::<AblationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }
}
