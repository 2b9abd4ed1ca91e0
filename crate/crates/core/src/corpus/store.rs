//! On-disk corpus directory: `posts.jsonl`, `token_vocab.tsv`,
//! `tag_vocab.tsv`, `histories.jsonl` and `split.json`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Corpus, CorpusSplit, Post, TagVocabulary, TokenVocabulary, UserHistory, Vocabulary};
use crate::{Error, Result};

const LOCK_FILE: &str = ".lock";

/// Exclusive write lock on a corpus directory, released on drop.
pub struct CorpusLock {
    path: PathBuf,
}

impl CorpusLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(CorpusLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::data(format!(
                "corpus directory {} is locked by another writer (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for CorpusLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut w = create(path)?;
    for (i, item) in vocab.items().iter().enumerate() {
        if item.contains(['\t', '\n', '\r']) {
            return Err(Error::data(format!("vocabulary entry {item:?} contains a tab or newline")));
        }
        writeln!(w, "{i}\t{item}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let reader = super::ingest::open(path)?;
    let mut items = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (id, item) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(format!("{}:{}: expected `id<TAB>item`", path.display(), n + 1)))?;
        if id.parse::<usize>().ok() != Some(items.len()) {
            return Err(Error::data(format!(
                "{}:{}: ids must be dense and ascending",
                path.display(),
                n + 1
            )));
        }
        items.push(item.to_string());
    }
    Vocabulary::from_items(items)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = super::ingest::open(path)?;
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

impl Corpus {
    /// Writes the corpus directory, holding the directory lock while writing.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let _lock = CorpusLock::acquire(dir)?;
        write_jsonl(&dir.join("posts.jsonl"), &self.posts)?;
        write_vocab(&dir.join("token_vocab.tsv"), &self.tokens.0)?;
        write_vocab(&dir.join("tag_vocab.tsv"), &self.tags.0)?;
        write_jsonl(&dir.join("histories.jsonl"), &self.users)?;
        self.split.save(&dir.join("split.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let posts: Vec<Post> = read_jsonl(&dir.join("posts.jsonl"))?;
        let tokens = TokenVocabulary(read_vocab(&dir.join("token_vocab.tsv"))?);
        let tags = TagVocabulary(read_vocab(&dir.join("tag_vocab.tsv"))?);
        let users: Vec<UserHistory> = read_jsonl(&dir.join("histories.jsonl"))?;
        let split = CorpusSplit::load(&dir.join("split.json"))?;
        let corpus = Corpus {
            posts,
            users,
            tokens,
            tags,
            split,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Checks the cross-file references of a loaded corpus.
    pub fn validate(&self) -> Result<()> {
        let v = self.tokens.len() as u32;
        let l = self.tags.len() as u32;
        for p in &self.posts {
            if p.user_index >= self.users.len() {
                return Err(Error::data(format!("post {} has unknown user index", p.id)));
            }
            if let Some(&t) = p.token_ids.iter().find(|&&t| t >= v) {
                return Err(Error::data(format!("post {} has token id {t} >= {v}", p.id)));
            }
            if p.label_ids.is_empty() || p.label_ids.iter().any(|&t| t >= l) {
                return Err(Error::data(format!("post {} has invalid labels", p.id)));
            }
        }
        for (i, u) in self.users.iter().enumerate() {
            if u.user_index != i || u.post_indices.iter().any(|&p| p >= self.posts.len()) {
                return Err(Error::data(format!("history of user {} is inconsistent", u.user_id)));
            }
        }
        for &(u, pos) in self
            .split
            .train
            .iter()
            .chain(&self.split.val)
            .chain(&self.split.test)
        {
            if u >= self.users.len() || pos >= self.users[u].len() {
                return Err(Error::data(format!("split refers to missing slot ({u}, {pos})")));
            }
        }
        Ok(())
    }
}

impl CorpusSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        serde_json::to_writer(&mut w, self).map_err(|e| Error::data(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}
