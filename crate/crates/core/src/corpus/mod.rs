//! Corpus data model: tokenized posts, per-user chronological histories,
//! vocabularies and the leave-one-out split.

pub mod ingest;
mod store;
pub mod text;

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use ingest::{IngestStats, JsonlPosts, RawPost, XmlPosts};
pub use store::CorpusLock;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: u64,
    pub user_index: usize,
    pub token_ids: Vec<u32>,
    /// Strictly increasing tag ids.
    pub label_ids: Vec<u32>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_index: usize,
    pub user_id: String,
    /// Indices into `Corpus::posts`, ordered by (created_at, post id).
    pub post_indices: Vec<usize>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.post_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.post_indices.is_empty()
    }
}

/// A (user index, position within that user's history) pair.
pub type Slot = (usize, usize);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Slot>,
    pub val: Vec<Slot>,
    pub test: Vec<Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl CorpusSplit {
    pub fn part(&self, part: SplitPart) -> &[Slot] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Bijection between strings and dense ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    items: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_items(items: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate vocabulary entry {item:?}")));
            }
        }
        Ok(Vocabulary { items, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, item: &str) -> Option<u32> {
        self.index.get(item).copied()
    }

    pub fn item(&self, id: u32) -> Option<&str> {
        self.items.get(id as usize).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

/// Token ids. Id 0 is padding and id 1 the out-of-vocabulary token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocabulary(pub Vocabulary);

impl TokenVocabulary {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.0.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Tokenizes raw text the same way the corpus builder does.
    pub fn encode_text(&self, title: &str, body: &str, max_tokens: usize) -> Vec<u32> {
        self.encode(&text::post_tokens(title, body, max_tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary(pub Vocabulary);

impl TagVocabulary {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn name(&self, id: u32) -> &str {
        self.0.item(id).unwrap_or("<unknown>")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub min_user_posts: usize,
    pub min_tag_count: usize,
    pub vocab_cap: usize,
    /// Per-post token cap; longer posts lose their tail.
    pub max_tokens: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            min_user_posts: 5,
            min_tag_count: 5,
            vocab_cap: 50_000,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub posts: Vec<Post>,
    pub users: Vec<UserHistory>,
    pub tokens: TokenVocabulary,
    pub tags: TagVocabulary,
    pub split: CorpusSplit,
}

impl Corpus {
    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn user_by_id(&self, user_id: &str) -> Option<&UserHistory> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn post_at(&self, slot: Slot) -> &Post {
        &self.posts[self.users[slot.0].post_indices[slot.1]]
    }

    /// Posts at training positions, in split order.
    pub fn train_posts(&self) -> impl Iterator<Item = &Post> + '_ {
        self.split.train.iter().map(|&s| self.post_at(s))
    }

    pub fn window(&self, slot: Slot, u: usize) -> Vec<Option<usize>> {
        history_window(&self.users[slot.0], slot.1, u)
    }
}

/// Filters, orders, splits and tokenizes raw posts into a corpus.
///
/// Rare tags, tagless posts and users with short histories are dropped
/// repeatedly until nothing changes. The token vocabulary is built from
/// training-position posts only.
pub fn build_corpus<I>(posts: I, opts: &CorpusOptions) -> Result<Corpus>
where
    I: IntoIterator<Item = RawPost>,
{
    if opts.min_user_posts < 3 {
        return Err(Error::Config(format!(
            "min_user_posts must be at least 3 for a train/val/test split, got {}",
            opts.min_user_posts
        )));
    }
    if opts.vocab_cap < 2 {
        return Err(Error::Config(format!(
            "vocab_cap must be at least 2, got {}",
            opts.vocab_cap
        )));
    }

    struct Work {
        raw: RawPost,
        tokens: Vec<String>,
        tags: Vec<String>,
        alive: bool,
    }

    let mut seen = HashSet::new();
    let mut work: Vec<Work> = Vec::new();
    for raw in posts {
        if !seen.insert(raw.id) {
            log::warn!("duplicate post id {} ignored", raw.id);
            continue;
        }
        let tokens = text::post_tokens(&raw.title, &raw.body, opts.max_tokens);
        let mut tags = raw.tags.clone();
        tags.sort();
        tags.dedup();
        work.push(Work {
            raw,
            tokens,
            tags,
            alive: true,
        });
    }

    loop {
        let mut changed = false;

        let mut tag_counts: HashMap<&str, usize> = HashMap::new();
        for w in work.iter().filter(|w| w.alive) {
            for t in &w.tags {
                *tag_counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let rare: HashSet<String> = tag_counts
            .iter()
            .filter(|(_, &c)| c < opts.min_tag_count)
            .map(|(t, _)| t.to_string())
            .collect();
        for w in work.iter_mut().filter(|w| w.alive) {
            let before = w.tags.len();
            w.tags.retain(|t| !rare.contains(t));
            if w.tags.len() != before {
                changed = true;
            }
            if w.tags.is_empty() {
                w.alive = false;
            }
        }

        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for w in work.iter().filter(|w| w.alive) {
            *user_counts.entry(w.raw.user_id.as_str()).or_default() += 1;
        }
        let short: HashSet<String> = user_counts
            .iter()
            .filter(|(_, &c)| c < opts.min_user_posts)
            .map(|(u, _)| u.to_string())
            .collect();
        for w in work.iter_mut().filter(|w| w.alive) {
            if short.contains(&w.raw.user_id) {
                w.alive = false;
                changed = true;
            }
        }

        if !changed {
            break;
        }
    }

    work.retain(|w| w.alive);
    if work.is_empty() {
        return Err(Error::data(format!(
            "no users survive filtering (min_user_posts={}, min_tag_count={})",
            opts.min_user_posts, opts.min_tag_count
        )));
    }
    work.sort_by(|a, b| {
        (a.raw.created_at, a.raw.id).cmp(&(b.raw.created_at, b.raw.id))
    });

    // tags: most frequent first, ties by name
    let mut tag_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &work {
        for t in &w.tags {
            *tag_counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut tag_order: Vec<(&str, usize)> = tag_counts.into_iter().collect();
    tag_order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tags = TagVocabulary(Vocabulary::from_items(
        tag_order.iter().map(|(t, _)| t.to_string()).collect(),
    )?);
    if tags.len() < 2 {
        return Err(Error::data(format!(
            "only {} tag(s) survive filtering; at least 2 are required",
            tags.len()
        )));
    }

    let user_ids: Vec<String> = {
        let set: std::collections::BTreeSet<&str> =
            work.iter().map(|w| w.raw.user_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    };
    let user_index: HashMap<&str, usize> = user_ids
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();

    let mut users: Vec<UserHistory> = user_ids
        .iter()
        .enumerate()
        .map(|(i, u)| UserHistory {
            user_index: i,
            user_id: u.clone(),
            post_indices: Vec::new(),
        })
        .collect();
    for (pi, w) in work.iter().enumerate() {
        users[user_index[w.raw.user_id.as_str()]].post_indices.push(pi);
    }

    let split = split_leave_one_out(&users)?;

    let mut train_post = vec![false; work.len()];
    for &(u, pos) in &split.train {
        train_post[users[u].post_indices[pos]] = true;
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for (w, _) in work.iter().zip(&train_post).filter(|(_, &t)| t) {
        for tok in &w.tokens {
            *freq.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut tok_order: Vec<(&str, usize)> = freq.into_iter().collect();
    tok_order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut token_items = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    token_items.extend(
        tok_order
            .into_iter()
            .filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .take(opts.vocab_cap - 2)
            .map(|(t, _)| t.to_string()),
    );
    let tokens = TokenVocabulary(Vocabulary::from_items(token_items)?);

    let posts: Vec<Post> = work
        .iter()
        .map(|w| {
            let mut label_ids: Vec<u32> = w
                .tags
                .iter()
                .map(|t| tags.0.id(t).expect("retained tag in vocabulary"))
                .collect();
            label_ids.sort_unstable();
            Post {
                id: w.raw.id,
                user_index: user_index[w.raw.user_id.as_str()],
                token_ids: tokens.encode(&w.tokens),
                label_ids,
                created_at: w.raw.created_at,
            }
        })
        .collect();

    Ok(Corpus {
        posts,
        users,
        tokens,
        tags,
        split,
    })
}

/// Per user: last position to test, second-to-last to validation, the rest
/// to training.
pub fn split_leave_one_out(histories: &[UserHistory]) -> Result<CorpusSplit> {
    let mut split = CorpusSplit::default();
    for h in histories {
        let n = h.len();
        if n < 3 {
            return Err(Error::data(format!(
                "user {} has {n} posts; leave-one-out needs at least 3",
                h.user_id
            )));
        }
        split
            .train
            .extend((0..n - 2).map(|p| (h.user_index, p)));
        split.val.push((h.user_index, n - 2));
        split.test.push((h.user_index, n - 1));
    }
    Ok(split)
}

/// The `u` posts strictly before `position`, most recent last, left-padded
/// with `None`.
pub fn history_window(history: &UserHistory, position: usize, u: usize) -> Vec<Option<usize>> {
    let start = position.saturating_sub(u);
    let prior = &history.post_indices[start..position.min(history.len())];
    let mut out = vec![None; u - prior.len()];
    out.extend(prior.iter().copied().map(Some));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn raw(id: u64, user: &str, day: u32, title: &str, tags: &[&str]) -> RawPost {
        RawPost {
            id,
            user_id: user.to_string(),
            created_at: Utc.with_ymd_and_hms(2020, 1, day, 0, 0, 0).unwrap(),
            title: title.to_string(),
            body: String::new(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }

    fn opts(min_user_posts: usize, min_tag_count: usize) -> CorpusOptions {
        CorpusOptions {
            min_user_posts,
            min_tag_count,
            ..CorpusOptions::default()
        }
    }

    fn hist(n: usize) -> UserHistory {
        UserHistory {
            user_index: 0,
            user_id: "u".into(),
            post_indices: (0..n).collect(),
        }
    }

    #[test]
    fn window_truncates_to_most_recent() {
        assert_eq!(history_window(&hist(4), 3, 2), vec![Some(1), Some(2)]);
    }

    #[test]
    fn window_left_pads() {
        assert_eq!(history_window(&hist(2), 1, 4), vec![None, None, None, Some(0)]);
        assert_eq!(history_window(&hist(5), 0, 3), vec![None, None, None]);
    }

    #[test]
    fn split_examples() {
        let s = split_leave_one_out(&[hist(5)]).unwrap();
        assert_eq!(s.train, vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(s.val, vec![(0, 3)]);
        assert_eq!(s.test, vec![(0, 4)]);

        let s = split_leave_one_out(&[hist(3)]).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));

        let mut second = hist(3);
        second.user_index = 1;
        let s = split_leave_one_out(&[hist(3), second]).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2, 2, 2));

        assert!(split_leave_one_out(&[hist(2)]).is_err());
    }

    #[test]
    fn short_users_are_fatal_when_nobody_survives() {
        let posts = vec![raw(1, "a", 1, "x", &["t"]), raw(2, "a", 2, "y", &["t"])];
        let err = build_corpus(posts, &opts(3, 1)).unwrap_err();
        assert!(err.to_string().contains("min_user_posts=3"));
    }

    #[test]
    fn min_user_posts_below_three_rejected() {
        assert!(matches!(
            build_corpus(Vec::new(), &opts(2, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fixed_point_filtering() {
        // user b loses a post to the tag floor, then falls below min_user_posts,
        // which in turn pushes tag "y" under its floor.
        let posts = vec![
            raw(1, "a", 1, "one", &["x"]),
            raw(2, "a", 2, "two", &["x"]),
            raw(3, "a", 3, "three", &["x", "z"]),
            raw(4, "a", 4, "four", &["z"]),
            raw(5, "b", 1, "five", &["y"]),
            raw(6, "b", 2, "six", &["y"]),
            raw(7, "b", 3, "seven", &["rare"]),
            raw(8, "c", 1, "a", &["x", "z"]),
            raw(9, "c", 2, "b", &["z", "x"]),
            raw(10, "c", 3, "c", &["x", "y"]),
        ];
        let c = build_corpus(posts, &opts(3, 2)).unwrap();
        let ids: Vec<&str> = c.users.iter().map(|u| u.user_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
        assert!(c.tags.0.id("y").is_none());
        assert!(c.tags.0.id("rare").is_none());
        for p in &c.posts {
            assert!(!p.label_ids.is_empty());
            assert!(p.label_ids.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(c.posts.len(), 7);
    }

    #[test]
    fn ties_broken_by_post_id() {
        let posts = vec![
            raw(9, "a", 1, "late id", &["t", "s"]),
            raw(3, "a", 1, "early id", &["t", "s"]),
            raw(5, "a", 2, "next", &["t", "s"]),
        ];
        let c = build_corpus(posts, &opts(3, 1)).unwrap();
        let order: Vec<u64> = c.users[0]
            .post_indices
            .iter()
            .map(|&i| c.posts[i].id)
            .collect();
        assert_eq!(order, vec![3, 9, 5]);
    }

    #[test]
    fn identical_text_gives_identical_tokens() {
        let posts = vec![
            raw(1, "a", 1, "same words here", &["t", "s"]),
            raw(2, "a", 2, "same words here", &["t"]),
            raw(3, "a", 3, "other", &["s"]),
        ];
        let c = build_corpus(posts, &opts(3, 1)).unwrap();
        assert_eq!(c.posts[0].token_ids, c.posts[1].token_ids);
        // only the training post contributes to the token vocabulary
        assert_eq!(c.posts[2].token_ids, vec![UNK]);
        assert_eq!(c.tokens.0.item(PAD), Some(PAD_TOKEN));
    }

    #[test]
    fn vocab_cap_limits_tokens() {
        let posts = vec![
            raw(1, "a", 1, "a a a b b c", &["t", "s"]),
            raw(2, "a", 2, "x", &["t"]),
            raw(3, "a", 3, "y", &["s"]),
        ];
        let mut o = opts(3, 1);
        o.vocab_cap = 4;
        let c = build_corpus(posts, &o).unwrap();
        assert_eq!(c.tokens.len(), 4);
        assert_eq!(c.tokens.0.id("a"), Some(2));
        assert_eq!(c.tokens.0.id("b"), Some(3));
        assert_eq!(c.tokens.0.id("c"), None);
    }
}
