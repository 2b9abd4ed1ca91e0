//! Document embeddings: a trainable token-averaging encoder, or vectors
//! precomputed by an external text encoder and read from an EMB file.
//!
//! EMB layout (all little-endian): the 12 magic bytes `MLP4STREMB1\0`,
//! `u32` record count, `u32` dimension, then per record a `u64` id followed
//! by `dim` `f32` values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PAD};
use crate::{Error, Result, Scalar};

pub const EMB_MAGIC: &[u8; 12] = b"MLP4STREMB1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Internal,
    Precomputed,
}

/// Uniform in [-0.05, 0.05] with the padding row zeroed.
pub fn init_token_table<T: Scalar, R: Rng>(vocab: usize, dim: usize, rng: &mut R) -> Array2<T> {
    let mut table = Array2::from_shape_fn((vocab, dim), |_| {
        T::from_f64_lossy(rng.gen_range(-0.05..=0.05))
    });
    if vocab > 0 {
        table.row_mut(PAD as usize).fill(T::zero());
    }
    table
}

/// Mean of the embedding rows of the non-padding tokens. An empty or
/// all-padding document maps to the zero vector.
pub fn encode_internal<T: Scalar>(token_ids: &[u32], table: ArrayView2<T>) -> Result<Array1<T>> {
    let vocab = table.nrows();
    let mut out = Array1::<T>::zeros(table.ncols());
    let mut count = 0usize;
    for &t in token_ids {
        if t as usize >= vocab {
            return Err(Error::data(format!(
                "token id {t} outside the embedding table of {vocab} rows"
            )));
        }
        if t == PAD {
            continue;
        }
        out += &table.row(t as usize);
        count += 1;
    }
    if count > 0 {
        out /= T::from_usize(count).unwrap();
    }
    Ok(out)
}

/// Accumulates the gradient of [`encode_internal`] into `grad_table`.
pub fn backward_internal<T: Scalar>(
    token_ids: &[u32],
    grad_out: ArrayView1<T>,
    grad_table: &mut Array2<T>,
) {
    let count = token_ids.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return;
    }
    let scale = T::one() / T::from_usize(count).unwrap();
    for &t in token_ids.iter().filter(|&&t| t != PAD) {
        grad_table
            .row_mut(t as usize)
            .scaled_add(scale, &grad_out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Internal,
    Precomputed,
}

/// One embedding per corpus post, indexed like `Corpus::posts`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore<T> {
    pub vectors: Array2<T>,
    pub source: EmbeddingSource,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn get(&self, post_index: usize) -> ArrayView1<'_, T> {
        self.vectors.row(post_index)
    }

    pub fn scaled(&self, c: T) -> Self {
        EmbeddingStore {
            vectors: &self.vectors * c,
            source: self.source,
        }
    }
}

/// Encodes every corpus post with the token table.
pub fn encode_all<T: Scalar>(corpus: &Corpus, table: ArrayView2<T>) -> Result<EmbeddingStore<T>> {
    let mut vectors = Array2::zeros((corpus.posts.len(), table.ncols()));
    for (mut row, post) in vectors.axis_iter_mut(Axis(0)).zip(&corpus.posts) {
        row.assign(&encode_internal(&post.token_ids, table)?);
    }
    Ok(EmbeddingStore {
        vectors,
        source: EmbeddingSource::Internal,
    })
}

/// Writes records in EMB format.
pub fn write_emb<W: Write>(mut w: W, dim: usize, records: &[(u64, Vec<f32>)]) -> std::io::Result<()> {
    w.write_all(EMB_MAGIC)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for (id, v) in records {
        assert_eq!(v.len(), dim, "record {id} has the wrong dimension");
        w.write_all(&id.to_le_bytes())?;
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn write_emb_file(path: &Path, dim: usize, records: &[(u64, Vec<f32>)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_emb(BufWriter::new(f), dim, records).map_err(|e| Error::io(path, e))
}

/// Reads an EMB stream. Returns the dimension and the records in file order.
pub fn read_emb<R: Read>(mut r: R) -> Result<(usize, Vec<(u64, Vec<f32>)>)> {
    let io = |e: std::io::Error| Error::data(format!("truncated or unreadable EMB data: {e}"));
    let mut magic = [0u8; 12];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != EMB_MAGIC {
        return Err(Error::data("not an EMB file (bad magic bytes)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let count = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4).map_err(io)?;
    let dim = u32::from_le_bytes(b4) as usize;

    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut b8 = [0u8; 8];
    let mut buf = vec![0u8; dim * 4];
    for _ in 0..count {
        r.read_exact(&mut b8).map_err(io)?;
        r.read_exact(&mut buf).map_err(io)?;
        let v = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((u64::from_le_bytes(b8), v));
    }
    Ok((dim, records))
}

/// Loads precomputed post embeddings for every corpus post.
///
/// `expected_dim`, when given, must match the file header.
pub fn load_precomputed<T: Scalar>(
    path: &Path,
    corpus: &Corpus,
    expected_dim: Option<usize>,
) -> Result<EmbeddingStore<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let (dim, records) = read_emb(BufReader::new(f))?;
    if let Some(d) = expected_dim {
        if d != dim {
            return Err(Error::data(format!(
                "{} has dimension {dim} but the configuration expects {d}",
                path.display()
            )));
        }
    }
    let by_id: BTreeMap<u64, Vec<f32>> = records.into_iter().collect();
    let missing: Vec<u64> = corpus
        .posts
        .iter()
        .map(|p| p.id)
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(10).map(u64::to_string).collect();
        return Err(Error::data(format!(
            "{} lacks embeddings for {} corpus post(s): {}{}",
            path.display(),
            missing.len(),
            shown.join(", "),
            if missing.len() > 10 { ", ..." } else { "" }
        )));
    }
    let mut vectors = Array2::zeros((corpus.posts.len(), dim));
    for (mut row, post) in vectors.axis_iter_mut(Axis(0)).zip(&corpus.posts) {
        for (dst, &src) in row.iter_mut().zip(&by_id[&post.id]) {
            if !src.is_finite() {
                return Err(Error::data(format!("non-finite embedding for post {}", post.id)));
            }
            *dst = T::from_f64_lossy(src as f64);
        }
    }
    Ok(EmbeddingStore {
        vectors,
        source: EmbeddingSource::Precomputed,
    })
}
