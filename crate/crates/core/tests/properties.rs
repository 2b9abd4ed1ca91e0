use std::collections::HashMap;

use chrono::{Duration, TimeZone, Utc};
use mlp4str::checkpoint::{read_tensors, write_tensors, NamedTensor};
use mlp4str::corpus::text::tokenize;
use mlp4str::corpus::{build_corpus, history_window, split_leave_one_out, CorpusOptions, RawPost, UserHistory};
use mlp4str::mixer::{forward_stack, Activation, LayerParams, MixerConfig};
use mlp4str::model::{bce_loss, top_b, ScoreVector};
use mlp4str::tagspace::{compute_tag_representations, embed_tag_set, TagRepresentations};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn history(user: usize, n: usize) -> UserHistory {
    UserHistory {
        user_index: user,
        user_id: format!("u{user}"),
        post_indices: (0..n).collect(),
    }
}

fn matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..=scale))
}

proptest! {
    #[test]
    fn split_assigns_every_position_once(lens in prop::collection::vec(3usize..30, 1..10)) {
        let users: Vec<UserHistory> = lens.iter().enumerate().map(|(i, &n)| history(i, n)).collect();
        let split = split_leave_one_out(&users).unwrap();
        for (u, &n) in lens.iter().enumerate() {
            prop_assert_eq!(split.test.iter().filter(|s| s.0 == u).map(|s| s.1).collect::<Vec<_>>(), vec![n - 1]);
            prop_assert_eq!(split.val.iter().filter(|s| s.0 == u).map(|s| s.1).collect::<Vec<_>>(), vec![n - 2]);
            let mut seen: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test)
                .filter(|s| s.0 == u).map(|s| s.1).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn window_is_left_padded_past(n in 1usize..40, pos_frac in 0.0f64..1.0, u in 1usize..12) {
        let h = history(0, n);
        let position = ((n as f64 * pos_frac) as usize).min(n - 1);
        let w = history_window(&h, position, u);
        prop_assert_eq!(w.len(), u);
        let real: Vec<usize> = w.iter().flatten().copied().collect();
        let pads = w.iter().take_while(|s| s.is_none()).count();
        prop_assert_eq!(pads + real.len(), u);
        let expected: Vec<usize> = (position.saturating_sub(u)..position).collect();
        prop_assert_eq!(real, expected);
    }

    #[test]
    fn filtering_holds_on_rescan(
        posts in prop::collection::vec((0usize..6, prop::collection::vec(0usize..8, 1..4)), 10..120),
        min_user_posts in 3usize..6,
        min_tag_count in 1usize..6,
    ) {
        let base = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let raw: Vec<RawPost> = posts.iter().enumerate().map(|(i, (user, tags))| RawPost {
            id: i as u64 + 1,
            user_id: format!("user{user}"),
            created_at: base + Duration::hours(i as i64),
            title: format!("word{}", i % 7),
            body: String::new(),
            tags: tags.iter().map(|t| format!("t{t}")).collect(),
        }).collect();
        let opts = CorpusOptions { min_user_posts, min_tag_count, ..CorpusOptions::default() };
        if let Ok(corpus) = build_corpus(raw, &opts) {
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for p in &corpus.posts {
                prop_assert!(!p.label_ids.is_empty());
                for &l in &p.label_ids {
                    *counts.entry(l).or_default() += 1;
                }
            }
            prop_assert!(counts.values().all(|&c| c >= min_tag_count));
            prop_assert!(corpus.users.iter().all(|u| u.len() >= min_user_posts));
        }
    }

    #[test]
    fn tokenizer_is_a_function(text in "[ -~]{0,80}") {
        prop_assert_eq!(tokenize(&text), tokenize(&text.clone()));
    }

    #[test]
    fn tag_rows_are_unit_or_zero_and_scale_free(seed in 0u64..1000, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_posts = rng.gen_range(1..30);
        let n_tags = rng.gen_range(2..8);
        let posts: Vec<mlp4str::corpus::Post> = (0..n_posts).map(|i| mlp4str::corpus::Post {
            id: i as u64,
            user_index: 0,
            token_ids: vec![],
            label_ids: {
                let mut l: Vec<u32> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(0..n_tags as u32)).collect();
                l.sort_unstable();
                l.dedup();
                l
            },
            created_at: Utc.timestamp_opt(i as i64, 0).unwrap(),
        }).collect();
        let emb = matrix(n_posts, 6, 1.0, seed);
        let z = compute_tag_representations(posts.iter().enumerate(), emb.view(), n_tags);
        for row in z.matrix.outer_iter() {
            let n = row.dot(&row).sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-6);
        }
        let scaled = emb.mapv(|x| x * c);
        let z2 = compute_tag_representations(posts.iter().enumerate(), scaled.view(), n_tags);
        for (a, b) in z.matrix.iter().zip(z2.matrix.iter()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn tag_set_embedding_ignores_order(mut labels in prop::collection::vec(0u32..6, 0..6), seed in 0u64..100) {
        let reps = TagRepresentations { matrix: matrix(6, 4, 1.0, seed) };
        let a: Array1<f64> = embed_tag_set(&labels, &reps);
        labels.reverse();
        let b = embed_tag_set(&labels, &reps);
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn top_b_survives_logit_shift(logits in prop::collection::vec(-20.0f64..20.0, 2..30), shift in -5.0f64..5.0, b in 1usize..30) {
        let b = b.min(logits.len());
        let s = ScoreVector { logits: logits.clone() };
        let shifted = ScoreVector { logits: logits.iter().map(|x| x + shift).collect() };
        let mut ranked = top_b(&s, b);
        prop_assert_eq!(&ranked, &top_b(&shifted, b));
        prop_assert_eq!(ranked.len(), b);
        ranked.dedup();
        prop_assert_eq!(ranked.len(), b);
    }

    #[test]
    fn bce_is_non_negative_and_scores_stay_open(
        logits in prop::collection::vec(-1e4f64..1e4, 2..20),
        label in 0u32..2,
    ) {
        let s = ScoreVector { logits };
        prop_assert!(bce_loss(&s, &[label]) >= 0.0);
        for k in 0..s.len() {
            let p = s.prob(k);
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn checkpoint_container_round_trips(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 1..6),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<NamedTensor> = shapes.iter().enumerate().map(|(i, dims)| NamedTensor {
            name: format!("t{i}.w"),
            data: ArrayD::from_shape_fn(IxDyn(dims), |_| rng.gen_range(-1e3f32..1e3)),
        }).collect();
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &tensors).unwrap();
        let back = read_tensors(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for (a, b) in tensors.iter().zip(&back) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.data.shape(), b.data.shape());
            prop_assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixer_residual_identity_and_shapes(
        u in 1usize..7,
        d in 1usize..9,
        layers in 1usize..4,
        relu in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let cfg = MixerConfig {
            u,
            d_h: d,
            n_layers: layers,
            activation: if relu { Activation::Relu } else { Activation::Gelu },
            ..MixerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<LayerParams<f64>> = (0..layers).map(|_| LayerParams::init(&cfg, &mut rng)).collect();
        let doc = matrix(u, d, 10.0, seed);
        let tag = matrix(u, d, 10.0, seed + 1);

        let (a, b, _) = forward_stack(doc.view(), tag.view(), &params, cfg.activation, &mut None).unwrap();
        prop_assert_eq!(a.dim(), (u, d));
        prop_assert_eq!(b.dim(), (u, d));
        prop_assert!(a.iter().chain(b.iter()).all(|x| x.is_finite()));

        for layer in &mut params {
            for (_, block) in layer.blocks_mut() {
                block.w1.fill(0.0);
                block.w2.fill(0.0);
            }
        }
        let (a, b, _) = forward_stack(doc.view(), tag.view(), &params, cfg.activation, &mut None).unwrap();
        prop_assert_eq!(a, doc);
        prop_assert_eq!(b, tag);
    }
}
