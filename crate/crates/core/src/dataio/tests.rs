use super::*;
use proptest::prelude::*;
use crate::numeric::dot;
use crate::rng::Rng;

fn tiny() -> Dataset {
    let tweet = |id: &str, v: Vec<f64>| Tweet {
        tweet_id: id.into(),
        embedding: v,
        text: None,
    };
    Dataset {
        manifest: DatasetManifest {
            name: "tiny".into(),
            embedding_dim: 2,
            splits: Splits {
                train: vec!["a".into()],
                val: vec!["b".into()],
                test: vec!["c".into()],
            },
            notes: vec![],
            fallback_seed: 0,
        },
        users: vec![
            EmbeddedUser {
                user_id: "a".into(),
                label: 1,
                tweets: vec![tweet("a1", vec![1.0, 0.0]), tweet("a2", vec![0.5, 0.25])],
            },
            EmbeddedUser {
                user_id: "b".into(),
                label: 0,
                tweets: vec![tweet("b1", vec![0.1, 0.2])],
            },
            EmbeddedUser {
                user_id: "c".into(),
                label: 0,
                tweets: vec![tweet("c1", vec![-1.0, 3.0])],
            },
        ],
    }
}

#[test]
fn round_trip_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.users.len(), 3);
    assert_eq!(back.split(SplitName::Train)[0].user_id, "a");
    let raw = fs::read_to_string(dir.path().join(USERS_FILE)).unwrap();
    // 0.1 is not an f32, so that tweet falls back to a plain array
    assert!(raw.contains("[0.1,0.2]"));
    assert!(raw.contains(&format!("\"{}\"", encode_embedding(&[1.0, 0.0]))));
}

fn write_raw(dir: &Path, manifest: &str, users: &str) {
    fs::write(dir.join(MANIFEST_FILE), manifest).unwrap();
    fs::write(dir.join(USERS_FILE), users).unwrap();
}

const MANIFEST: &str = r#"{"name":"t","embedding_dim":2,"splits":{"train":["a"],"val":["b"],"test":[]}}"#;

#[test]
fn rejects_user_without_tweets() {
    let dir = tempfile::tempdir().unwrap();
    write_raw(
        dir.path(),
        MANIFEST,
        "{\"user_id\":\"a\",\"label\":1,\"tweets\":[{\"tweet_id\":\"x\",\"embedding\":[1,0]}]}\n{\"user_id\":\"b\",\"label\":0,\"tweets\":[]}\n",
    );
    let err = load_dataset(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Schema { line: 2, .. }), "{msg}");
    assert!(msg.contains("\"b\""), "{msg}");
}

#[test]
fn rejects_mixed_dims_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    write_raw(
        dir.path(),
        MANIFEST,
        "{\"user_id\":\"a\",\"label\":1,\"tweets\":[{\"tweet_id\":\"x\",\"embedding\":[1,0]}]}\n{\"user_id\":\"b\",\"label\":0,\"tweets\":[{\"tweet_id\":\"y\",\"embedding\":[1,0,0]}]}\n",
    );
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("dim 3"));

    write_raw(
        dir.path(),
        MANIFEST,
        "{\"user_id\":\"a\",\"label\":1,\"tweets\":[{\"tweet_id\":\"x\",\"embedding\":[1,0]}]}\n{\"user_id\":\"a\",\"label\":0,\"tweets\":[{\"tweet_id\":\"y\",\"embedding\":[1,0]}]}\n",
    );
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("duplicate"));

    write_raw(dir.path(), MANIFEST, "{\"user_id\":\"a\",\"label\":1,\"tweets\":[{\"tweet_id\":\"x\",\"embedding\":[1,0]}]}\n");
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("unknown user"));

    write_raw(dir.path(), MANIFEST, "{\"user_id\":\"a\",\"label\":1,\"tweets\":[{\"tweet_id\":\"x\"}]}\nnot json\n");
    assert!(matches!(load_dataset(dir.path()), Err(Error::Schema { line: 1, .. })));

    assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn text_only_tweets_use_fallback_embedder() {
    let dir = tempfile::tempdir().unwrap();
    write_raw(
        dir.path(),
        r#"{"name":"t","embedding_dim":4,"splits":{"train":["a"],"val":[],"test":[]},"fallback_seed":7}"#,
        "{\"user_id\":\"a\",\"label\":1,\"tweets\":[{\"tweet_id\":\"x\",\"text\":\"so tired\"}]}\n",
    );
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.users[0].tweets[0].embedding, fallback_embed("so tired", 4, 7).unwrap());
}

#[test]
fn fallback_embed_properties() {
    let a = fallback_embed("I feel Tired today", 16, 0).unwrap();
    assert_eq!(a, fallback_embed("I feel Tired today", 16, 0).unwrap());
    assert_eq!(a, fallback_embed("i  feel tired\ttoday", 16, 0).unwrap());
    assert!((crate::numeric::norm(&a) - 1.0).abs() < 1e-12);
    let one = fallback_embed("a", 16, 0).unwrap();
    let three = fallback_embed("a a a", 16, 0).unwrap();
    for (x, y) in one.iter().zip(&three) {
        assert!((x - y).abs() < 1e-15);
    }
    assert_ne!(a, fallback_embed("I feel Tired today", 16, 1).unwrap());
    assert!(fallback_embed("   ", 16, 0).is_err());
}

#[test]
fn fallback_embed_is_pinned() {
    // the algorithm is part of the file format: FNV-1a 64 then ChaCha20
    assert_eq!(fnv1a(""), 0xcbf29ce484222325);
    assert_eq!(fnv1a("a"), 0xaf63dc4c8601ec8c);
    let v = fallback_embed("sleep", 3, 0).unwrap();
    let mut rng = Rng::new(fnv1a("sleep"));
    let mut w: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    normalize(&mut w).unwrap();
    normalize(&mut w).unwrap();
    for (x, y) in v.iter().zip(&w) {
        assert!((x - y).abs() < 1e-15);
    }
}

fn vec9(dim: usize, f: impl Fn(usize) -> PrototypeEntry) -> BasePrototypeFile {
    let _ = dim;
    BasePrototypeFile {
        provenance: None,
        symptoms: SymptomId::all().map(|s| (s.code(), f(s.index()))).collect(),
    }
}

fn onehot(j: usize, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[j % d] = 1.0;
    v
}

#[test]
fn base_prototypes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.json");
    let file = vec9(9, |j| PrototypeEntry::Vector(onehot(j, 9)));
    write_json(&path, &file).unwrap();
    let b = load_base_prototypes(&path, 9).unwrap();
    for j in 0..9 {
        assert_eq!(b.vectors().row(j), onehot(j, 9).as_slice());
    }
    assert_eq!(b.provenance(), Provenance::Lexicon);

    let dup = vec9(9, |j| PrototypeEntry::Examples(vec![onehot(j, 9), onehot(j, 9)]));
    let b = base_prototypes_from_file(&path, &dup, 9).unwrap();
    assert_eq!(b.vectors().row(4), onehot(4, 9).as_slice());
    assert_eq!(b.provenance(), Provenance::LexiconTweet);

    let mut missing = file.clone();
    missing.symptoms.remove("S6");
    let err = base_prototypes_from_file(&path, &missing, 9).unwrap_err().to_string();
    assert!(err.contains("S6"), "{err}");
    assert!(base_prototypes_from_file(&path, &file, 8).is_err());

    // names and numbers are accepted as keys
    let mut named = file.clone();
    let v = named.symptoms.remove("S4").unwrap();
    named.symptoms.insert("Fatigue or Low Energy".into(), v);
    assert!(base_prototypes_from_file(&path, &named, 9).is_ok());
}

#[test]
fn lexicon_loading() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lex.json");
    let file = LexiconFile {
        symptoms: SymptomId::all()
            .map(|s| {
                let entry = if s.index() == 0 {
                    LexiconEntry {
                        terms: vec!["anhedonia".into(), "no interest".into()],
                        embeddings: vec![],
                    }
                } else {
                    LexiconEntry {
                        terms: vec![],
                        embeddings: vec![onehot(s.index(), 10), onehot(s.index() + 1, 10)],
                    }
                };
                (s.code(), entry)
            })
            .collect(),
        fallback_seed: 3,
    };
    write_json(&path, &file).unwrap();
    let lex = load_lexicon(&path, 10).unwrap();
    assert!(lex.from_terms);
    assert_eq!(lex.embeddings(SymptomId::from_index(0)).rows(), 2);
    assert_eq!(lex.means().row(2), &[0., 0., 0.5, 0.5, 0., 0., 0., 0., 0., 0.]);
}

#[test]
fn synthetic_shapes_and_splits() {
    let spec = SyntheticSpec {
        users: 100,
        dim: 16,
        ..Default::default()
    };
    let s = generate_synthetic(&spec).unwrap();
    let m = &s.dataset.manifest;
    assert_eq!((m.splits.train.len(), m.splits.val.len(), m.splits.test.len()), (60, 20, 20));
    assert_eq!(s.dataset.users.iter().filter(|u| u.label == 1).count(), 50);
    let dirs = s.truth.symptom_matrix();
    for i in 0..9 {
        for j in 0..9 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot(dirs.row(i), dirs.row(j)) - want).abs() < 1e-12);
        }
        for b in &s.truth.background_directions {
            assert!(dot(dirs.row(i), b).abs() < 1e-12);
        }
    }
    assert!(generate_synthetic(&SyntheticSpec { dim: 8, ..spec }).is_err());
}

#[test]
fn synthetic_is_byte_stable_and_reloads() {
    let spec = SyntheticSpec {
        users: 20,
        dim: 12,
        seed: 5,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_synthetic(&generate_synthetic(&spec).unwrap(), a.path()).unwrap();
    write_synthetic(&generate_synthetic(&spec).unwrap(), b.path()).unwrap();
    for f in [MANIFEST_FILE, USERS_FILE, BASE_PROTOTYPES_FILE, LEXICON_FILE, TRUTH_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let gen = generate_synthetic(&spec).unwrap();
    assert_eq!(load_dataset(a.path()).unwrap(), gen.dataset);
    assert_eq!(load_base_prototypes(&a.path().join(BASE_PROTOTYPES_FILE), 12).unwrap(), gen.base);
    assert_eq!(load_lexicon(&a.path().join(LEXICON_FILE), 12).unwrap().means(), gen.lexicon.means());
    let other = generate_synthetic(&SyntheticSpec { seed: 6, ..spec }).unwrap();
    assert_ne!(other.dataset, gen.dataset);
}

#[test]
fn synthetic_truth_explains_every_tweet() {
    // with no noise each symptom tweet is exactly its direction, so the
    // truth labels predict the nearest symptom direction exactly
    let spec = SyntheticSpec {
        users: 10,
        dim: 20,
        noise: 0.0,
        ..Default::default()
    };
    let s = generate_synthetic(&spec).unwrap();
    let dirs = s.truth.symptom_matrix();
    for (u, t) in s.dataset.users.iter().zip(&s.truth.users) {
        assert_eq!(u.tweets.len(), t.tweet_symptoms.len());
        for (tw, kind) in u.tweets.iter().zip(&t.tweet_symptoms) {
            let sims: Vec<f64> = dirs.iter_rows().map(|d| dot(d, &tw.embedding)).collect();
            match kind {
                Some(s) => assert!((sims[s.index()] - 1.0).abs() < 1e-6),
                None => assert!(sims.iter().all(|v| v.abs() < 1e-6)),
            }
        }
    }
}

#[test]
fn infinite_separation_is_separable() {
    // no control user tweets about symptoms; every depressed user does
    let spec = SyntheticSpec {
        users: 60,
        dim: 20,
        separation: 60.0,
        noise: 0.0,
        ..Default::default()
    };
    let s = generate_synthetic(&spec).unwrap();
    let dirs = s.truth.symptom_matrix();
    let score = |u: &EmbeddedUser| -> f64 {
        let n = u.tweets.len() as f64;
        u.tweets
            .iter()
            .map(|t| dirs.iter_rows().map(|d| dot(d, &t.embedding)).sum::<f64>())
            .sum::<f64>()
            / n
    };
    let max_control = s.dataset.users.iter().filter(|u| u.label == 0).map(score).fold(f64::MIN, f64::max);
    let min_dep = s.dataset.users.iter().filter(|u| u.label == 1).map(score).fold(f64::MAX, f64::min);
    assert!(max_control < 1e-6 && min_dep > 0.3, "{max_control} {min_dep}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embedding_codec_round_trips(v in proptest::collection::vec(-1e3f32..1e3, 1..40)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        prop_assert_eq!(decode_embedding(&encode_embedding(&v)).unwrap(), v);
    }

    #[test]
    fn dataset_round_trips(seed in 0u64..1000, users in 2usize..12) {
        let spec = SyntheticSpec { users, dim: 10, min_tweets: 1, max_tweets: 4, seed, ..Default::default() };
        let ds = generate_synthetic(&spec).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
