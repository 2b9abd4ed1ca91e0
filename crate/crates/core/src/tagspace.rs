//! Tag representations: the normalized sum of the embeddings of the
//! training documents carrying each tag.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::corpus::Post;
use crate::encoder::write_emb_file;
use crate::{Result, Scalar};

const MIN_NORM: f64 = 1e-12;

/// `L x d` matrix whose rows are unit vectors, or zero for tags without
/// positive training documents.
#[derive(Debug, Clone, PartialEq)]
pub struct TagRepresentations<T> {
    pub matrix: Array2<T>,
}

impl<T: Scalar> TagRepresentations<T> {
    pub fn n_tags(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn zeros(n_tags: usize, dim: usize) -> Self {
        TagRepresentations {
            matrix: Array2::zeros((n_tags, dim)),
        }
    }

    /// Writes the matrix as an EMB file keyed by tag id.
    pub fn write_emb(&self, path: &Path) -> Result<()> {
        let records: Vec<(u64, Vec<f32>)> = self
            .matrix
            .outer_iter()
            .enumerate()
            .map(|(l, row)| (l as u64, row.iter().map(|x| x.to_f64_lossy() as f32).collect()))
            .collect();
        write_emb_file(path, self.dim(), &records)
    }
}

/// Builds tag representations from training posts only.
///
/// `embeddings` is indexed by the corpus post index; `posts` yields
/// `(post index, post)` for the training posts.
pub fn compute_tag_representations<'a, T, I>(
    posts: I,
    embeddings: ArrayView2<T>,
    n_tags: usize,
) -> TagRepresentations<T>
where
    T: Scalar,
    I: IntoIterator<Item = (usize, &'a Post)>,
{
    let dim = embeddings.ncols();
    let mut sums = Array2::<f64>::zeros((n_tags, dim));
    let mut touched = vec![false; n_tags];
    for (index, post) in posts {
        let h = embeddings.row(index);
        for &l in &post.label_ids {
            let l = l as usize;
            touched[l] = true;
            for (s, &x) in sums.row_mut(l).iter_mut().zip(h.iter()) {
                *s += x.to_f64_lossy();
            }
        }
    }

    let mut matrix = Array2::<T>::zeros((n_tags, dim));
    for (l, (sum, mut out)) in sums.outer_iter().zip(matrix.outer_iter_mut()).enumerate() {
        let norm = sum.dot(&sum).sqrt();
        if norm < MIN_NORM {
            if touched[l] && sum.iter().any(|&x| x != 0.0) {
                log::warn!("tag {l}: aggregated embedding norm {norm:e} treated as zero");
            }
            continue;
        }
        for (o, &s) in out.iter_mut().zip(sum.iter()) {
            *o = T::from_f64_lossy(s / norm);
        }
    }
    TagRepresentations { matrix }
}

/// Mean of the representations of a post's tags; the empty set (a padding
/// slot) maps to zero.
pub fn embed_tag_set<T: Scalar>(label_ids: &[u32], reps: &TagRepresentations<T>) -> Array1<T> {
    let mut out = Array1::<T>::zeros(reps.dim());
    if label_ids.is_empty() {
        return out;
    }
    for &l in label_ids {
        out += &reps.matrix.row(l as usize);
    }
    out / T::from_usize(label_ids.len()).unwrap()
}
