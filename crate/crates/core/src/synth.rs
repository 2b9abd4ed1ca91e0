//! Synthetic corpora with a controllable amount of sequential signal.
//!
//! Every user walks through the tag space with a fixed personal stride: the
//! primary tag of post `k` is `(start + k * stride) mod tags`. With
//! probability `carry` a post also keeps the previous post's primary tag,
//! which can only be recovered by looking at the most recent history slot.
//! The text of a post names its primary topic with probability
//! `text_signal`, and always for a user's first two posts, so every primary
//! tag follows from the post's text or from the two posts before it. The
//! rest of the text is noise words.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::RawPost;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub posts_per_user: usize,
    pub tags: usize,
    /// Largest per-user stride through the tag space (strides are 1..=max_stride).
    pub max_stride: usize,
    /// Probability that a post also carries the previous post's primary tag.
    pub carry: f64,
    /// Probability that the text contains words of the primary topic.
    pub text_signal: f64,
    pub topic_words: usize,
    pub noise_words: usize,
    pub noise_vocab: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 50,
            posts_per_user: 12,
            tags: 20,
            max_stride: 3,
            carry: 0.0,
            text_signal: 0.7,
            topic_words: 3,
            noise_words: 6,
            noise_vocab: 400,
            seed: 0,
        }
    }
}

pub fn tag_name(t: usize) -> String {
    format!("tag{t:02}")
}

fn topic_word(t: usize, j: usize) -> String {
    format!("topic{t}w{j}")
}

/// Generates posts in user-major order. Timestamps are distinct and
/// increase with the post index inside each user.
pub fn generate(cfg: &SynthConfig) -> Vec<RawPost> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tags = cfg.tags.max(1);
    let base: DateTime<Utc> = Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap();
    let mut posts = Vec::with_capacity(cfg.users * cfg.posts_per_user);
    let mut next_id = 1u64;

    for user in 0..cfg.users {
        let start = rng.gen_range(0..tags);
        let stride = rng.gen_range(1..=cfg.max_stride.max(1));
        let offset = Duration::minutes(user as i64);
        let mut prev_primary: Option<usize> = None;

        for k in 0..cfg.posts_per_user {
            let primary = (start + k * stride) % tags;
            let mut post_tags = vec![tag_name(primary)];
            if let Some(prev) = prev_primary {
                if prev != primary && rng.gen_bool(cfg.carry.clamp(0.0, 1.0)) {
                    post_tags.push(tag_name(prev));
                }
            }

            let mut words: Vec<String> = Vec::new();
            // the first two posts have too little history to infer a stride
            if rng.gen_bool(cfg.text_signal.clamp(0.0, 1.0)) || k < 2 {
                for _ in 0..cfg.topic_words {
                    words.push(topic_word(primary, rng.gen_range(0..3)));
                }
            }
            for _ in 0..cfg.noise_words {
                words.push(format!("w{}", rng.gen_range(0..cfg.noise_vocab.max(1))));
            }
            // topic words should not sit at a fixed position
            for i in (1..words.len()).rev() {
                let j = rng.gen_range(0..=i);
                words.swap(i, j);
            }
            let split = words.len() / 3;
            posts.push(RawPost {
                id: next_id,
                user_id: format!("user{user:04}"),
                created_at: base + Duration::days(k as i64) + offset,
                title: words[..split].join(" "),
                body: words[split..].join(" "),
                tags: post_tags,
            });
            next_id += 1;
            prev_primary = Some(primary);
        }
    }
    posts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg), generate(&cfg));
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg), generate(&other));
    }

    #[test]
    fn sizes_and_drift_rule() {
        let cfg = SynthConfig {
            users: 3,
            posts_per_user: 5,
            tags: 7,
            ..SynthConfig::default()
        };
        let posts = generate(&cfg);
        assert_eq!(posts.len(), 15);
        for user in posts.chunks(5) {
            let primaries: Vec<usize> = user
                .iter()
                .map(|p| p.tags[0][3..].parse().unwrap())
                .collect();
            let stride = (primaries[1] + 7 - primaries[0]) % 7;
            for w in primaries.windows(2) {
                assert_eq!((w[0] + stride) % 7, w[1]);
            }
        }
    }

    #[test]
    fn carry_copies_previous_primary() {
        let cfg = SynthConfig {
            users: 4,
            carry: 1.0,
            ..SynthConfig::default()
        };
        let posts = generate(&cfg);
        for user in posts.chunks(cfg.posts_per_user) {
            for w in user.windows(2) {
                if w[0].tags[0] != w[1].tags[0] {
                    assert_eq!(w[1].tags[1], w[0].tags[0]);
                }
            }
        }
    }
}
