//! Ranking metrics over the top-K recommended tags, split evaluation and
//! the history-length sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SplitPart};
use crate::encoder::EmbeddingStore;
use crate::model::{top_b, AblationMode, Model};
use crate::tagspace::TagRepresentations;
use crate::train::{model_config, train_loop, Features, TrainConfig, EVAL_BATCH};
use crate::{Error, Result, Scalar};

/// Precision, recall and F1 of one ranking at cut-off `k`.
pub fn metrics_at_k(predicted: &[u32], actual: &[u32], k: usize) -> (f64, f64, f64) {
    if k == 0 || actual.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let hits = predicted
        .iter()
        .take(k)
        .filter(|t| actual.contains(t))
        .count() as f64;
    let p = hits / k as f64;
    let r = hits / actual.len() as f64;
    (p, r, f1(p, r))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub metrics: Vec<MetricsAtK>,
    pub n_evaluated: usize,
    /// Posts skipped because none of their tags survived filtering.
    pub n_excluded: usize,
    pub per_post_f1: bool,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&MetricsAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }
}

/// Macro-averaged metrics over `(ranking, actual)` pairs. F1 is composed
/// from the averaged precision and recall unless `per_post_f1` is set.
pub fn aggregate<'a, I>(cases: I, ks: &[usize], per_post_f1: bool) -> Vec<MetricsAtK>
where
    I: IntoIterator<Item = (&'a [u32], &'a [u32])>,
{
    let mut sums = vec![[0.0f64; 3]; ks.len()];
    let mut n = 0usize;
    for (predicted, actual) in cases {
        n += 1;
        for (s, &k) in sums.iter_mut().zip(ks) {
            let (p, r, f) = metrics_at_k(predicted, actual, k);
            s[0] += p;
            s[1] += r;
            s[2] += f;
        }
    }
    ks.iter()
        .zip(sums)
        .map(|(&k, s)| {
            let d = n.max(1) as f64;
            let (p, r) = (s[0] / d, s[1] / d);
            MetricsAtK {
                k,
                precision: p,
                recall: r,
                f1: if per_post_f1 { s[2] / d } else { f1(p, r) },
            }
        })
        .collect()
}

/// Evaluates a model on one split part. The scoring uses `mode`, which may
/// differ from the mode the model was trained with.
pub fn evaluate_split<T: Scalar>(
    model: &Model<T>,
    tags: &TagRepresentations<T>,
    corpus: &Corpus,
    precomputed: Option<&EmbeddingStore<T>>,
    part: SplitPart,
    ks: &[usize],
    mode: AblationMode,
    per_post_f1: bool,
) -> Result<MetricsReport> {
    check_compatible(model, tags, corpus)?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cut-offs must be positive".into()));
    }
    let mut model = model.clone();
    model.config.ablation = mode;
    let b = *ks.iter().max().unwrap();
    let features = Features {
        corpus,
        precomputed,
        tags,
        u: model.config.mixer.u,
    };
    let mut slots = Vec::new();
    let mut n_excluded = 0;
    for &slot in corpus.split.part(part) {
        if corpus.post_at(slot).label_ids.is_empty() {
            n_excluded += 1;
        } else {
            slots.push(slot);
        }
    }
    let mut rankings = Vec::with_capacity(slots.len());
    for chunk in slots.chunks(EVAL_BATCH) {
        let examples: Vec<_> = chunk.iter().map(|&s| features.example(s)).collect();
        for (scores, ex) in model.scores_batch(&examples)?.iter().zip(&examples) {
            rankings.push((top_b(scores, b), ex.labels));
        }
    }
    Ok(MetricsReport {
        mode: mode.label().to_string(),
        metrics: aggregate(rankings.iter().map(|(p, a)| (p.as_slice(), *a)), ks, per_post_f1),
        n_evaluated: rankings.len(),
        n_excluded,
        per_post_f1,
    })
}

fn check_compatible<T: Scalar>(
    model: &Model<T>,
    tags: &TagRepresentations<T>,
    corpus: &Corpus,
) -> Result<()> {
    let cfg = &model.config;
    if cfg.n_tags != corpus.n_tags() || tags.n_tags() != corpus.n_tags() {
        return Err(Error::Data(format!(
            "model has {} tags but the corpus has {}",
            cfg.n_tags,
            corpus.n_tags()
        )));
    }
    if model.params.token_table.is_some() && cfg.n_tokens != corpus.tokens.len() {
        return Err(Error::Data(format!(
            "model has {} tokens but the corpus vocabulary has {}",
            cfg.n_tokens,
            corpus.tokens.len()
        )));
    }
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// Aligned text table, one row per report, P/R/F1 at every cut-off.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let ks: Vec<usize> = reports
        .first()
        .map(|r| r.metrics.iter().map(|m| m.k).collect())
        .unwrap_or_default();
    let width = reports.iter().map(|r| r.mode.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}", "mode");
    for k in &ks {
        for name in ["P", "R", "F1"] {
            s.push_str(&format!(" {:>7}", format!("{name}@{k}")));
        }
    }
    s.push_str(&format!(" {:>6}\n", "n"));
    for r in reports {
        let _ = write!(s, "{:<width$}", r.mode);
        for m in &r.metrics {
            let _ = write!(s, " {:>7} {:>7} {:>7}", pct(m.precision), pct(m.recall), pct(m.f1));
        }
        let _ = writeln!(s, " {:>6}", r.n_evaluated);
    }
    s
}

pub fn format_tsv(reports: &[MetricsReport]) -> String {
    let mut s = String::from("mode\tk\tprecision\trecall\tf1\tn_evaluated\n");
    for r in reports {
        for m in &r.metrics {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.mode,
                m.k,
                pct(m.precision),
                pct(m.recall),
                pct(m.f1),
                r.n_evaluated
            );
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub u: usize,
    pub f1_at_5: f64,
    pub epoch: usize,
}

/// Trains one model per history length and reports test F1@5.
pub fn sweep_history_length<T: Scalar>(
    corpus: &Corpus,
    precomputed: Option<&EmbeddingStore<T>>,
    base: &crate::config::RunConfig,
    u_values: &[usize],
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &u in u_values {
        if u == 0 {
            return Err(Error::Config("history length must be at least 1".into()));
        }
        let mut mixer = base.mixer;
        mixer.u = u;
        let cfg = model_config(corpus, mixer, base.encoder.mode, base.train.weights, base.ablation);
        let train: TrainConfig = base.train;
        let trained = train_loop(corpus, precomputed, cfg, &train)?;
        let report = evaluate_split(
            &trained.model,
            &trained.tags,
            corpus,
            precomputed,
            SplitPart::Test,
            &[5],
            base.ablation,
            base.eval.per_post_f1,
        )?;
        out.push(SweepPoint {
            u,
            f1_at_5: report.metrics[0].f1,
            epoch: trained.epoch,
        });
    }
    Ok(out)
}

pub fn format_sweep_tsv(points: &[SweepPoint]) -> String {
    let mut s = String::from("u\tf1@5\n");
    for p in points {
        let _ = writeln!(s, "{}\t{}", p.u, pct(p.f1_at_5));
    }
    s
}
