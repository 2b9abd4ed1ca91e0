//! Training: per-example backpropagation, Adam, the epoch loop with early
//! stopping, and a finite-difference gradient checker.

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Slot};
use crate::encoder::{encode_all, EmbeddingStore, EncoderMode};
use crate::mixer::{Activation, Dropout, MixerConfig};
use crate::model::{
    bce_loss, AblationMode, DocInput, Example, Model, ModelConfig, ModelParams, ScoreVector,
    WeightMode,
};
use crate::tagspace::{compute_tag_representations, embed_tag_set, TagRepresentations};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub weights: WeightMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            weights: WeightMode::Learned,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate and batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam moment accumulators, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. The padding row of the token table is
/// zeroed afterwards.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(cfg.adam_beta1);
    let b2 = T::from_f64_lossy(cfg.adam_beta2);
    let one = T::one();
    let bc1 = T::from_f64_lossy(1.0 - cfg.adam_beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - cfg.adam_beta2.powi(t));
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(cfg.adam_eps);

    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in
        params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs)
    {
        Zip::from(&mut p)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    if let Some(table) = params.token_table.as_mut() {
        table.row_mut(crate::corpus::PAD as usize).fill(T::zero());
    }
}

fn scale_grads<T: Scalar>(grads: &mut ModelParams<T>, factor: T) {
    for (_, mut g) in grads.tensors_mut() {
        g.mapv_inplace(|x| x * factor);
    }
}

fn clip_grads<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) {
    let norm: f64 = grads
        .tensors()
        .iter()
        .flat_map(|(_, g)| g.iter().map(|x| x.to_f64_lossy().powi(2)).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        scale_grads(grads, T::from_f64_lossy(max_norm / norm));
    }
}

/// Where document and tag-history features come from during training and
/// evaluation.
pub struct Features<'a, T> {
    pub corpus: &'a Corpus,
    /// Precomputed post embeddings; `None` with the internal encoder.
    pub precomputed: Option<&'a EmbeddingStore<T>>,
    pub tags: &'a TagRepresentations<T>,
    pub u: usize,
}

impl<'a, T: Scalar> Features<'a, T> {
    pub fn doc(&self, post_index: usize) -> DocInput<'a, T> {
        match self.precomputed {
            Some(store) => DocInput::Vector(store.get(post_index)),
            None => DocInput::Tokens(&self.corpus.posts[post_index].token_ids),
        }
    }

    fn history(&self, window: &[Option<usize>]) -> (Vec<Option<DocInput<'a, T>>>, Array2<T>) {
        let docs = window.iter().map(|s| s.map(|i| self.doc(i))).collect();
        let mut tags = Array2::zeros((window.len(), self.tags.dim()));
        for (mut row, slot) in tags.outer_iter_mut().zip(window) {
            if let Some(i) = slot {
                row.assign(&embed_tag_set(&self.corpus.posts[*i].label_ids, self.tags));
            }
        }
        (docs, tags)
    }

    /// The scoring problem for a split slot.
    pub fn example(&self, slot: Slot) -> Example<'a, T> {
        let post_index = self.corpus.users[slot.0].post_indices[slot.1];
        let window = self.corpus.window(slot, self.u);
        let (history_docs, history_tags) = self.history(&window);
        Example {
            current: self.doc(post_index),
            history_docs,
            history_tags,
            labels: &self.corpus.posts[post_index].label_ids,
        }
    }

    /// A new post by `user` that follows the user's whole history.
    pub fn example_for_new_post(&self, user: usize, current: DocInput<'a, T>) -> Example<'a, T> {
        let hist = &self.corpus.users[user];
        let window = crate::corpus::history_window(hist, hist.len(), self.u);
        let (history_docs, history_tags) = self.history(&window);
        Example {
            current,
            history_docs,
            history_tags,
            labels: &[],
        }
    }
}

/// Forward and backward pass for one example. Gradients are accumulated
/// into `grads`; the summed BCE loss is returned.
pub fn forward_backward<T: Scalar>(
    model: &Model<T>,
    ex: &Example<'_, T>,
    grads: &mut ModelParams<T>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<f64> {
    let losses = forward_backward_batch(model, std::slice::from_ref(ex), grads, dropout)
        .map_err(|(_, e)| e)?;
    Ok(losses[0])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        x.exp() / (1.0 + x.exp())
    }
}

/// Batched [`forward_backward`]: gradients are summed over the batch and the
/// per-example losses returned. A non-finite loss fails with the index of
/// the offending example.
pub fn forward_backward_batch<T: Scalar>(
    model: &Model<T>,
    examples: &[Example<'_, T>],
    grads: &mut ModelParams<T>,
    dropout: &mut Option<Dropout<'_>>,
) -> std::result::Result<Vec<f64>, (Option<usize>, Error)> {
    let (logits, cache) = model.forward_batch(examples, dropout).map_err(|e| (None, e))?;
    let mut losses = Vec::with_capacity(examples.len());
    for (i, (row, ex)) in logits.outer_iter().zip(examples).enumerate() {
        let loss = bce_loss(&ScoreVector::from_logits(row), ex.labels);
        if !loss.is_finite() {
            return Err((Some(i), Error::Numerical(format!("non-finite loss {loss}"))));
        }
        losses.push(loss);
    }
    let mut d_logits = logits.mapv(|x| T::from_f64_lossy(sigmoid(x.to_f64_lossy())));
    for (mut row, ex) in d_logits.outer_iter_mut().zip(examples) {
        for &l in ex.labels {
            row[l as usize] -= T::one();
        }
    }
    model.backward_batch(examples, &cache, d_logits.view(), grads);
    Ok(losses)
}

/// Summed BCE loss of one example in evaluation mode.
pub fn example_loss<T: Scalar>(model: &Model<T>, ex: &Example<'_, T>) -> Result<f64> {
    Ok(bce_loss(&model.scores(ex)?, ex.labels))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ batch as u64)
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Progress {
        match self.best {
            Some((_, best)) if val_loss >= best => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience.max(1) {
                    Progress::Stop
                } else {
                    Progress::Continue
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.bad_epochs = 0;
                Progress::Improved
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of a training run: the best-validation model and its tag space.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained<T> {
    pub model: Model<T>,
    pub tags: TagRepresentations<T>,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochStats>,
}

/// Rebuilds tag representations from the current document embeddings of
/// the training posts.
pub fn refresh_tag_representations<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    precomputed: Option<&EmbeddingStore<T>>,
) -> Result<TagRepresentations<T>> {
    let internal;
    let store = match (precomputed, &model.params.token_table) {
        (Some(s), _) => s,
        (None, Some(table)) => {
            internal = encode_all(corpus, table.view())?;
            &internal
        }
        (None, None) => {
            return Err(Error::Config(
                "precomputed encoder mode needs an embedding store".into(),
            ))
        }
    };
    let train = corpus
        .split
        .train
        .iter()
        .map(|&(u, p)| {
            let i = corpus.users[u].post_indices[p];
            (i, &corpus.posts[i])
        });
    Ok(compute_tag_representations(train, store.vectors.view(), corpus.n_tags()))
}

/// Examples per forward pass outside training.
pub const EVAL_BATCH: usize = 64;

/// Mean per-example loss over split slots in evaluation mode.
pub fn mean_loss<T: Scalar>(model: &Model<T>, features: &Features<'_, T>, slots: &[Slot]) -> Result<f64> {
    if slots.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in slots.chunks(EVAL_BATCH) {
        let examples: Vec<_> = chunk.iter().map(|&s| features.example(s)).collect();
        for (scores, ex) in model.scores_batch(&examples)?.iter().zip(&examples) {
            total += bce_loss(scores, ex.labels);
        }
    }
    Ok(total / slots.len() as f64)
}

/// Builds the model configuration implied by a corpus and settings.
pub fn model_config(
    corpus: &Corpus,
    mixer: MixerConfig,
    encoder: EncoderMode,
    weights: WeightMode,
    ablation: AblationMode,
) -> ModelConfig {
    ModelConfig {
        n_tokens: corpus.tokens.len(),
        n_tags: corpus.n_tags(),
        mixer,
        encoder,
        weights,
        ablation,
    }
}

/// Trains with minibatch Adam and early stopping on validation loss.
///
/// With the internal encoder the tag representations are rebuilt from the
/// current embeddings before every epoch; precomputed embeddings give a
/// fixed tag space.
pub fn train_loop<T: Scalar>(
    corpus: &Corpus,
    precomputed: Option<&EmbeddingStore<T>>,
    config: ModelConfig,
    train: &TrainConfig,
) -> Result<Trained<T>> {
    train_loop_observed(corpus, precomputed, config, train, |_| Ok(true))
}

/// State handed to a training observer after every epoch.
pub struct EpochView<'a, T> {
    pub stats: EpochStats,
    pub model: &'a Model<T>,
    pub tags: &'a TagRepresentations<T>,
}

/// [`train_loop`] with a callback after every epoch; returning `false` ends
/// training early.
pub fn train_loop_observed<T: Scalar, F>(
    corpus: &Corpus,
    precomputed: Option<&EmbeddingStore<T>>,
    config: ModelConfig,
    train: &TrainConfig,
    mut observer: F,
) -> Result<Trained<T>>
where
    F: FnMut(EpochView<'_, T>) -> Result<bool>,
{
    train.validate()?;
    if (config.encoder == EncoderMode::Precomputed) != precomputed.is_some() {
        return Err(Error::Config(
            "an embedding store is required exactly when the encoder is precomputed".into(),
        ));
    }
    if let Some(s) = precomputed {
        if s.dim() != config.mixer.d_h {
            return Err(Error::Config(format!(
                "embedding dimension {} differs from d_h {}",
                s.dim(),
                config.mixer.d_h
            )));
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = Model::<T>::new(config, &mut init_rng)?;
    let mut adam = AdamState::new(&model.params);
    let mut tags = refresh_tag_representations(&model, corpus, precomputed)?;
    let u = config.mixer.u;

    let initial_val = {
        let f = Features { corpus, precomputed, tags: &tags, u };
        mean_loss(&model, &f, &corpus.split.val)?
    };
    if !initial_val.is_finite() {
        return Err(Error::Numerical("initial validation loss is not finite".into()));
    }
    let mut best = Trained {
        model: model.clone(),
        tags: tags.clone(),
        epoch: 0,
        best_val_loss: initial_val,
        history: Vec::new(),
    };
    let mut stopper = EarlyStopping::new(train.patience);
    let mut history = Vec::new();
    let mut order: Vec<Slot> = corpus.split.train.clone();
    let dropout_p = config.mixer.dropout;

    for epoch in 1..=train.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut train_loss = 0.0;
        for (batch_no, batch) in order.chunks(train.batch_size).enumerate() {
            let mut grads = model.params.zeros_like();
            {
                let features = Features { corpus, precomputed, tags: &tags, u };
                let examples: Vec<_> = batch.iter().map(|&s| features.example(s)).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(train.seed, epoch, batch_no));
                let mut dropout = (dropout_p > 0.0).then_some(Dropout { p: dropout_p, rng: &mut rng });
                let losses = forward_backward_batch(&model, &examples, &mut grads, &mut dropout)
                    .map_err(|(i, e)| match (i, e) {
                        (Some(i), Error::Numerical(m)) => {
                            Error::Numerical(format!("post {}: {m}", corpus.post_at(batch[i]).id))
                        }
                        (_, e) => e,
                    })?;
                train_loss += losses.iter().sum::<f64>();
            }
            scale_grads(&mut grads, T::one() / T::from_usize(batch.len()).unwrap());
            if let Some(c) = train.grad_clip {
                clip_grads(&mut grads, c);
            }
            adam_step(&mut model.params, &grads, &mut adam, train);
        }

        if config.encoder == EncoderMode::Internal {
            tags = refresh_tag_representations(&model, corpus, precomputed)?;
        }
        let val_loss = {
            let f = Features { corpus, precomputed, tags: &tags, u };
            mean_loss(&model, &f, &corpus.split.val)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "validation loss diverged at epoch {epoch} (train loss {train_loss})"
            )));
        }
        let stats = EpochStats {
            epoch,
            train_loss: train_loss / order.len().max(1) as f64,
            val_loss,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val loss {:.5}",
            stats.train_loss,
            val_loss
        );
        history.push(stats);

        let progress = stopper.observe(epoch, val_loss);
        if progress == Progress::Improved {
            best.model = model.clone();
            best.tags = tags.clone();
            best.epoch = epoch;
            best.best_val_loss = val_loss;
        }
        let keep_going = observer(EpochView {
            stats,
            model: &model,
            tags: &tags,
        })?;
        if progress == Progress::Stop || !keep_going {
            break;
        }
    }
    best.history = history;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub tensor: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub epsilon: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.tensor.len()).max().unwrap_or(6).max(6);
        let mut s = format!(
            "{:<width$}  {:>7}  {:>12}  {:>12}\n",
            "tensor", "entries", "max_rel_err", "max_abs_err"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<width$}  {:>7}  {:>12.3e}  {:>12.3e}\n",
                r.tensor, r.entries, r.max_rel_error, r.max_abs_error
            ));
        }
        s
    }
}

/// Dimensions of the gradient-check model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSpec {
    pub d_h: usize,
    pub u: usize,
    pub n_tags: usize,
    pub n_tokens: usize,
    pub n_layers: usize,
    pub ablation: AblationMode,
    pub activation: Activation,
    pub epsilon: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            d_h: 8,
            u: 4,
            n_tags: 10,
            n_tokens: 16,
            n_layers: 1,
            ablation: AblationMode::Full,
            activation: Activation::Gelu,
            epsilon: 1e-5,
        }
    }
}

/// Relative error with a floor on the denominator; entries where both
/// gradients are below the floor compare on absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central finite differences on a tiny
/// `f64` model with dropout off.
pub fn grad_check(spec: &GradCheckSpec, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        n_tokens: spec.n_tokens,
        n_tags: spec.n_tags,
        mixer: MixerConfig {
            u: spec.u,
            d_h: spec.d_h,
            r_u: 0,
            r_c: 0,
            r_f: 8,
            n_layers: spec.n_layers,
            activation: spec.activation,
            dropout: 0.0,
        },
        encoder: EncoderMode::Internal,
        weights: WeightMode::Learned,
        ablation: spec.ablation,
    };
    let mut model = Model::<f64>::new(config, &mut rng)?;
    // spread the embeddings and perturb the LayerNorm affine parameters so
    // that every path carries a non-trivial gradient
    for (name, mut t) in model.params.tensors_mut() {
        if name == "token_table" {
            t.mapv_inplace(|x| x * 20.0);
        } else if name.ends_with("ln_gain") || name.ends_with("ln_bias") {
            t.mapv_inplace(|x| x + rng.gen_range(-0.3..0.3));
        }
    }
    if let Some(t) = model.params.token_table.as_mut() {
        t.row_mut(0).fill(0.0);
    }

    let random_doc = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let n = rng.gen_range(2..6);
        (0..n).map(|_| rng.gen_range(0..spec.n_tokens as u32)).collect()
    };
    let current = random_doc(&mut rng);
    // first slot is padding
    let history: Vec<Option<Vec<u32>>> = (0..spec.u)
        .map(|i| (i > 0).then(|| random_doc(&mut rng)))
        .collect();
    let mut history_tags = Array2::from_shape_fn((spec.u, spec.d_h), |_| rng.gen_range(-0.5..0.5));
    history_tags.row_mut(0).fill(0.0);
    let mut labels: Vec<u32> = vec![rng.gen_range(0..spec.n_tags as u32)];
    let second = rng.gen_range(0..spec.n_tags as u32);
    if second != labels[0] {
        labels.push(second);
    }
    labels.sort_unstable();

    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let ex = Example {
            current: DocInput::Tokens(&current),
            history_docs: history.iter().map(|h| h.as_deref().map(DocInput::Tokens)).collect(),
            history_tags: history_tags.clone(),
            labels: &labels,
        };
        example_loss(m, &ex)
    };

    let mut grads = model.params.zeros_like();
    {
        let ex = Example {
            current: DocInput::Tokens(&current),
            history_docs: history.iter().map(|h| h.as_deref().map(DocInput::Tokens)).collect(),
            history_tags: history_tags.clone(),
            labels: &labels,
        };
        forward_backward(&model, &ex, &mut grads, &mut None)?;
    }

    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();
    let eps = spec.epsilon;
    let mut rows = Vec::new();
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (j, &a) in grad.iter().enumerate() {
            let original = {
                let mut ts = model.params.tensors_mut();
                let t = &mut ts[ti].1;
                let x = t.iter_mut().nth(j).expect("entry");
                let orig = *x;
                *x = orig + eps;
                orig
            };
            let plus = loss_of(&model)?;
            set_entry(&mut model.params, ti, j, original - eps);
            let minus = loss_of(&model)?;
            set_entry(&mut model.params, ti, j, original);
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        rows.push(GradCheckRow {
            tensor: name.clone(),
            entries: grad.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        seed,
        epsilon: eps,
        rows,
    })
}

fn set_entry(params: &mut ModelParams<f64>, tensor: usize, entry: usize, value: f64) {
    let mut ts = params.tensors_mut();
    *ts[tensor].1.iter_mut().nth(entry).expect("entry") = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusOptions};
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let cfg = ModelConfig {
            n_tokens: 5,
            n_tags: 3,
            mixer: MixerConfig { u: 2, d_h: 4, ..MixerConfig::default() },
            encoder: EncoderMode::Internal,
            weights: WeightMode::Learned,
            ablation: AblationMode::Full,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::<f64>::init(&cfg, &mut rng);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default());
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_single_step_closed_form() {
        let cfg = ModelConfig {
            n_tokens: 2,
            n_tags: 2,
            mixer: MixerConfig { u: 1, d_h: 1, r_u: 1, r_c: 1, r_f: 1, n_layers: 1, ..MixerConfig::default() },
            encoder: EncoderMode::Precomputed,
            weights: WeightMode::Fixed,
            ablation: AblationMode::Full,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::<f64>::init(&cfg, &mut rng);
        let before = params.predictor.w_doc[[0, 0]];
        let mut grads = params.zeros_like();
        grads.predictor.w_doc[[0, 0]] = 1.0;
        let mut state = AdamState::new(&params);
        let tc = TrainConfig::default();
        adam_step(&mut params, &grads, &mut state, &tc);
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = 1e-3 / (1.0 + 1e-8);
        assert!((before - params.predictor.w_doc[[0, 0]] - expected).abs() < 1e-15);
        assert!((expected - 9.99999990e-4).abs() < 1e-12);
        // untouched entries do not move
        assert_eq!(params.predictor.w_doc[[1, 0]], {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            ModelParams::<f64>::init(&cfg, &mut r).predictor.w_doc[[1, 0]]
        });
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 5.0), Progress::Improved);
        assert_eq!(s.observe(2, 6.0), Progress::Stop);
        assert_eq!(s.best, Some((1, 5.0)));

        let mut s = EarlyStopping::new(3);
        for (e, l) in [(1, 3.0), (2, 2.0), (3, 2.5), (4, 2.1), (5, 1.9), (6, 2.0)] {
            assert_ne!(s.observe(e, l), Progress::Stop);
        }
        assert_eq!(s.best, Some((5, 1.9)));
    }

    fn tiny_corpus() -> Corpus {
        let raw = generate(&SynthConfig {
            users: 4,
            posts_per_user: 6,
            tags: 4,
            ..SynthConfig::default()
        });
        build_corpus(raw, &CorpusOptions { min_tag_count: 1, ..CorpusOptions::default() }).unwrap()
    }

    fn tiny_model_config(corpus: &Corpus) -> ModelConfig {
        model_config(
            corpus,
            MixerConfig { u: 3, d_h: 8, ..MixerConfig::default() },
            EncoderMode::Internal,
            WeightMode::Learned,
            AblationMode::Full,
        )
    }

    #[test]
    fn zero_weights_give_l_ln2() {
        let corpus = tiny_corpus();
        let cfg = tiny_model_config(&corpus);
        let mut model = Model::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        model.params = model.params.zeros_like();
        let tags = TagRepresentations::zeros(corpus.n_tags(), 8);
        let f = Features { corpus: &corpus, precomputed: None, tags: &tags, u: 3 };
        let ex = f.example(corpus.split.train[3]);
        let mut grads = model.params.zeros_like();
        let loss = forward_backward(&model, &ex, &mut grads, &mut None).unwrap();
        assert!((loss - corpus.n_tags() as f64 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_per_example_passes() {
        let corpus = tiny_corpus();
        let cfg = tiny_model_config(&corpus);
        let model = Model::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tags = refresh_tag_representations(&model, &corpus, None).unwrap();
        let f = Features { corpus: &corpus, precomputed: None, tags: &tags, u: 3 };
        let examples: Vec<_> = corpus.split.train.iter().take(7).map(|&s| f.example(s)).collect();

        let mut batch_grads = model.params.zeros_like();
        let losses = forward_backward_batch(&model, &examples, &mut batch_grads, &mut None).unwrap();
        let mut single_grads = model.params.zeros_like();
        for (ex, &batch_loss) in examples.iter().zip(&losses) {
            let loss = forward_backward(&model, ex, &mut single_grads, &mut None).unwrap();
            assert!((loss - batch_loss).abs() < 1e-10);
        }
        for ((name, a), (_, b)) in batch_grads.tensors().iter().zip(single_grads.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-10, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn precomputed_mode_has_no_table_gradient() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_model_config(&corpus);
        cfg.encoder = EncoderMode::Precomputed;
        let store = EmbeddingStore {
            vectors: Array2::from_shape_fn((corpus.posts.len(), 8), |(i, j)| ((i * 8 + j) as f64).sin()),
            source: crate::encoder::EmbeddingSource::Precomputed,
        };
        let model = Model::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tags = refresh_tag_representations(&model, &corpus, Some(&store)).unwrap();
        let f = Features { corpus: &corpus, precomputed: Some(&store), tags: &tags, u: 3 };
        let mut grads = model.params.zeros_like();
        forward_backward(&model, &f.example(corpus.split.train[2]), &mut grads, &mut None).unwrap();
        assert!(grads.token_table.is_none());
        assert!(grads.tensors().iter().all(|(n, _)| n != "token_table"));
        assert!(grads.layers[0].seq_doc.w1.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn grad_check_passes_for_every_mode() {
        for ablation in AblationMode::ALL {
            let spec = GradCheckSpec { ablation, ..GradCheckSpec::default() };
            let report = grad_check(&spec, 1).unwrap();
            assert!(report.passes(1e-3), "{ablation:?}\n{}", report.to_table());
        }
        let spec = GradCheckSpec { activation: Activation::Relu, n_layers: 2, ..GradCheckSpec::default() };
        let report = grad_check(&spec, 2).unwrap();
        assert!(report.passes(1e-3), "{}", report.to_table());
    }

    #[test]
    fn repeated_example_loss_decreases() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_model_config(&corpus);
        cfg.mixer.dropout = 0.0;
        let mut model = Model::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tags = refresh_tag_representations(&model, &corpus, None).unwrap();
        let slot = corpus.split.train[5];
        let tc = TrainConfig::default();
        let mut adam = AdamState::new(&model.params);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let f = Features { corpus: &corpus, precomputed: None, tags: &tags, u: 3 };
            let mut grads = model.params.zeros_like();
            losses.push(forward_backward(&model, &f.example(slot), &mut grads, &mut None).unwrap());
            adam_step(&mut model.params, &grads, &mut adam, &tc);
        }
        let increases = losses.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(increases <= 5, "{increases} non-decreasing steps");
        assert!(losses[199] < losses[0]);
    }

    #[test]
    fn adam_runs_are_bitwise_reproducible() {
        let run = || {
            let corpus = tiny_corpus();
            let cfg = tiny_model_config(&corpus);
            let mut model = Model::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let tags = refresh_tag_representations(&model, &corpus, None).unwrap();
            let mut adam = AdamState::new(&model.params);
            for step in 0..10 {
                let f = Features { corpus: &corpus, precomputed: None, tags: &tags, u: 3 };
                let mut grads = model.params.zeros_like();
                let mut rng = ChaCha8Rng::seed_from_u64(step);
                let mut d = Some(Dropout { p: 0.1, rng: &mut rng });
                forward_backward(&model, &f.example(corpus.split.train[step as usize]), &mut grads, &mut d).unwrap();
                adam_step(&mut model.params, &grads, &mut adam, &TrainConfig::default());
            }
            model.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pad_row_stays_zero_through_training() {
        let corpus = tiny_corpus();
        let cfg = tiny_model_config(&corpus);
        let tc = TrainConfig { max_epochs: 3, patience: 10, batch_size: 4, ..TrainConfig::default() };
        let trained = train_loop::<f32>(&corpus, None, cfg, &tc).unwrap();
        let table = trained.model.params.token_table.unwrap();
        assert!(table.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = tiny_corpus();
        let cfg = tiny_model_config(&corpus);
        let tc = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
        let trained = train_loop::<f32>(&corpus, None, cfg, &tc).unwrap();
        assert_eq!(trained.epoch, 0);
        assert!(trained.best_val_loss.is_finite());
        let fresh = Model::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(tc.seed)).unwrap();
        assert_eq!(trained.model, fresh);
        assert!(trained.history.is_empty());
    }

    #[test]
    fn best_checkpoint_is_never_worse_than_observed() {
        let corpus = tiny_corpus();
        let cfg = tiny_model_config(&corpus);
        let tc = TrainConfig { max_epochs: 6, patience: 2, batch_size: 4, learning_rate: 1e-2, ..TrainConfig::default() };
        let trained = train_loop::<f32>(&corpus, None, cfg, &tc).unwrap();
        let min = trained.history.iter().map(|s| s.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(trained.best_val_loss, min);
        let f = Features { corpus: &corpus, precomputed: None, tags: &trained.tags, u: 3 };
        let recomputed = mean_loss(&trained.model, &f, &corpus.split.val).unwrap();
        assert_eq!(recomputed, trained.best_val_loss);
    }
}
