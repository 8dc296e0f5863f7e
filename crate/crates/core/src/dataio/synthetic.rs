use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    base_prototypes_from_file, quantize_f32, save_dataset, write_json, BasePrototypeFile, Dataset, DatasetManifest,
    EmbeddedUser, Lexicon, LexiconEntry, LexiconFile, PrototypeEntry, Splits, Tweet,
};
use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, normalize, Matrix};
use crate::rng::Rng;
use crate::symptom::{BasePrototypeSet, Provenance, SymptomId, NUM_SYMPTOMS};

pub const BASE_PROTOTYPES_FILE: &str = "base_prototypes.json";
pub const LEXICON_FILE: &str = "lexicon.json";
pub const TRUTH_FILE: &str = "truth.json";

/// Symptoms that dominate depressed users' symptom tweets.
const CORE: [usize; 3] = [0, 1, 3];
const CORE_SHARE: f64 = 0.7;
const MAX_BACKGROUND: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub users: usize,
    pub depressed_fraction: f64,
    pub min_tweets: usize,
    pub max_tweets: usize,
    pub dim: usize,
    /// Larger values widen the gap between the two classes' symptom-tweet
    /// rates.
    pub separation: f64,
    /// Scale of isotropic noise added to each tweet direction.
    pub noise: f64,
    /// Noise of the example vectors written as base prototypes.
    pub base_noise: f64,
    pub base_examples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 200,
            depressed_fraction: 0.5,
            min_tweets: 20,
            max_tweets: 40,
            dim: 32,
            separation: 1.0,
            noise: 0.3,
            base_noise: 0.5,
            base_examples: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < NUM_SYMPTOMS {
            return Err(Error::invalid(format!(
                "dim {} is too small for 9 orthonormal symptom directions",
                self.dim
            )));
        }
        if self.users < 2 || self.min_tweets == 0 || self.max_tweets < self.min_tweets || self.base_examples == 0 {
            return Err(Error::invalid("synthetic spec needs >= 2 users and 1 <= min_tweets <= max_tweets"));
        }
        if !(0.0..=1.0).contains(&self.depressed_fraction) || !(self.separation >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::invalid("bad fraction, separation or noise"));
        }
        if !(self.base_noise >= 0.0) {
            return Err(Error::invalid("base_noise must be >= 0"));
        }
        Ok(())
    }

    /// Probability that a depressed user's tweet expresses a symptom.
    pub fn depressed_rate(&self) -> f64 {
        0.3 + 0.6 * (1.0 - (-self.separation).exp())
    }

    /// Probability that a non-depressed user's tweet expresses a symptom.
    pub fn control_rate(&self) -> f64 {
        0.3 * (-self.separation).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub label: usize,
    /// Generating symptom per tweet, `None` for background tweets.
    pub tweet_symptoms: Vec<Option<SymptomId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub spec: SyntheticSpec,
    pub depressed_rate: f64,
    pub control_rate: f64,
    pub core_symptoms: Vec<SymptomId>,
    /// Orthonormal, one row per symptom.
    pub symptom_directions: Vec<Vec<f64>>,
    pub background_directions: Vec<Vec<f64>>,
    pub users: Vec<UserTruth>,
}

impl SyntheticTruth {
    pub fn symptom_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.symptom_directions, self.spec.dim).expect("uniform")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub base_file: BasePrototypeFile,
    pub base: BasePrototypeSet,
    pub lexicon_file: LexiconFile,
    pub lexicon: Lexicon,
    pub truth: SyntheticTruth,
}

fn orthonormal(rng: &mut Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for u in &out {
            let c = dot(&v, u);
            axpy(-c, u, &mut v);
        }
        if crate::numeric::norm(&v) > 1e-6 && normalize(&mut v).is_ok() {
            out.push(v);
        }
    }
    out
}

fn noisy(rng: &mut Rng, dir: &[f64], noise: f64) -> Vec<f64> {
    let scale = noise / (dir.len() as f64).sqrt();
    let mut v: Vec<f64> = dir.iter().map(|&x| x + scale * rng.normal()).collect();
    if normalize(&mut v).is_err() {
        v = dir.to_vec();
    }
    v
}

/// Users whose tweets are noisy copies of 9 orthonormal symptom directions
/// or of background directions. Depressed users tweet about symptoms more
/// often, and mostly about S1, S2 and S4. Embeddings are rounded to `f32`
/// so the written files reload to identical values.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = Rng::new(spec.seed);
    let n_background = (d - NUM_SYMPTOMS).min(MAX_BACKGROUND);
    let mut dirs = orthonormal(&mut rng, NUM_SYMPTOMS + n_background, d);
    let background = dirs.split_off(NUM_SYMPTOMS);
    let symptoms = dirs;

    let n_dep = (spec.users as f64 * spec.depressed_fraction).round() as usize;
    let mut labels: Vec<usize> = (0..spec.users).map(|i| usize::from(i < n_dep)).collect();
    rng.shuffle(&mut labels);

    let (rate_d, rate_c) = (spec.depressed_rate(), spec.control_rate());
    let width = spec.users.saturating_sub(1).to_string().len().max(4);
    let mut users = Vec::with_capacity(spec.users);
    let mut truth_users = Vec::with_capacity(spec.users);
    for (i, &label) in labels.iter().enumerate() {
        let user_id = format!("u{i:0width$}");
        let n = spec.min_tweets + rng.below(spec.max_tweets - spec.min_tweets + 1);
        let rate = if label == 1 { rate_d } else { rate_c };
        let mut tweets = Vec::with_capacity(n);
        let mut kinds = Vec::with_capacity(n);
        for t in 0..n {
            let kind = if rng.uniform() < rate {
                let j = if label == 1 && rng.uniform() < CORE_SHARE {
                    CORE[rng.below(CORE.len())]
                } else {
                    rng.below(NUM_SYMPTOMS)
                };
                Some(SymptomId::from_index(j))
            } else {
                None
            };
            let mut e = match kind {
                Some(s) => noisy(&mut rng, &symptoms[s.index()], spec.noise),
                None if background.is_empty() => {
                    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                    normalize(&mut v)?;
                    v
                }
                None => {
                    let b = rng.below(background.len());
                    noisy(&mut rng, &background[b], spec.noise)
                }
            };
            quantize_f32(&mut e);
            tweets.push(Tweet {
                tweet_id: format!("{user_id}-t{t:03}"),
                embedding: e,
                text: None,
            });
            kinds.push(kind);
        }
        truth_users.push(UserTruth {
            user_id: user_id.clone(),
            label,
            tweet_symptoms: kinds,
        });
        users.push(EmbeddedUser { user_id, label, tweets });
    }

    // stratified 60/20/20
    let mut splits = Splits::default();
    for class in [0, 1] {
        let mut ids: Vec<&str> = users.iter().filter(|u| u.label == class).map(|u| u.user_id.as_str()).collect();
        rng.shuffle(&mut ids);
        let n = ids.len() as f64;
        let (a, b) = ((0.6 * n).round() as usize, (0.8 * n).round() as usize);
        splits.train.extend(ids[..a].iter().map(|s| s.to_string()));
        splits.val.extend(ids[a..b].iter().map(|s| s.to_string()));
        splits.test.extend(ids[b..].iter().map(|s| s.to_string()));
    }
    for list in [&mut splits.train, &mut splits.val, &mut splits.test] {
        list.sort();
    }

    let manifest = DatasetManifest {
        name: format!("synthetic-{}", spec.seed),
        embedding_dim: d,
        splits,
        notes: vec![format!(
            "synthetic: separation {}, noise {}, symptom-tweet rate {:.4} (depressed) vs {:.4} (control)",
            spec.separation, spec.noise, rate_d, rate_c
        )],
        fallback_seed: 0,
    };
    let dataset = Dataset { manifest, users };
    dataset.validate()?;

    let mut base_entries = BTreeMap::new();
    let mut lex_entries = BTreeMap::new();
    for s in SymptomId::all() {
        let dir = &symptoms[s.index()];
        let examples = (0..spec.base_examples).map(|_| noisy(&mut rng, dir, spec.base_noise)).collect();
        base_entries.insert(s.code(), PrototypeEntry::Examples(examples));
        lex_entries.insert(
            s.code(),
            LexiconEntry {
                terms: vec![s.name().to_lowercase()],
                embeddings: vec![dir.clone()],
            },
        );
    }
    let base_file = BasePrototypeFile {
        provenance: Some(Provenance::Llm),
        symptoms: base_entries,
    };
    let base = base_prototypes_from_file(Path::new(BASE_PROTOTYPES_FILE), &base_file, d)?;
    let lexicon_file = LexiconFile {
        symptoms: lex_entries,
        fallback_seed: 0,
    };
    let lexicon = Lexicon::from_embeddings(
        symptoms
            .iter()
            .map(|v| Matrix::from_rows(&[v.as_slice()], d))
            .collect::<Result<_>>()?,
    )?;
    Ok(SyntheticDataset {
        dataset,
        base_file,
        base,
        lexicon_file,
        lexicon,
        truth: SyntheticTruth {
            spec: *spec,
            depressed_rate: rate_d,
            control_rate: rate_c,
            core_symptoms: CORE.iter().map(|&j| SymptomId::from_index(j)).collect(),
            symptom_directions: symptoms,
            background_directions: background,
            users: truth_users,
        },
    })
}

/// Writes the dataset files plus `base_prototypes.json`, `lexicon.json`
/// and `truth.json` into `dir`.
pub fn write_synthetic(data: &SyntheticDataset, dir: &Path) -> Result<()> {
    save_dataset(&data.dataset, dir)?;
    write_json(&dir.join(BASE_PROTOTYPES_FILE), &data.base_file)?;
    write_json(&dir.join(LEXICON_FILE), &data.lexicon_file)?;
    write_json(&dir.join(TRUTH_FILE), &data.truth)
}
