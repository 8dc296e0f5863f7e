//! Dataset, base-prototype and lexicon files, the hash-based fallback text
//! embedder and the synthetic dataset generator.
//!
//! A dataset is a directory holding `manifest.json` and `users.jsonl` (one
//! user per line). Embeddings are base64 little-endian `f32` strings or
//! plain number arrays; tweets with text but no embedding are embedded with
//! [`fallback_embed`].

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::numeric::{mean_rows, normalize, Matrix};
use crate::rng::Rng;
use crate::symptom::{BasePrototypeSet, Provenance, SymptomId, NUM_SYMPTOMS};

mod synthetic;

pub use synthetic::{
    generate_synthetic, write_synthetic, SyntheticDataset, SyntheticSpec, SyntheticTruth, UserTruth,
    BASE_PROTOTYPES_FILE, LEXICON_FILE, TRUTH_FILE,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const USERS_FILE: &str = "users.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Tweet {
    pub tweet_id: String,
    pub embedding: Vec<f64>,
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedUser {
    pub user_id: String,
    pub label: usize,
    pub tweets: Vec<Tweet>,
}

impl EmbeddedUser {
    pub fn tweet_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.tweets.iter().map(|t| t.embedding.as_slice()).collect();
        let dim = rows.first().map_or(0, |r| r.len());
        Matrix::from_rows(&rows, dim).expect("validated on load")
    }

    /// The first `max_tweets` tweets as a training example.
    pub fn example(&self, max_tweets: usize) -> Example {
        Example {
            tweets: crate::trainer::truncate(&self.tweet_matrix(), max_tweets),
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}, expected train, val or test")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub embedding_dim: usize,
    pub splits: Splits,
    #[serde(default)]
    pub notes: Vec<String>,
    /// Seed for [`fallback_embed`] on text-only tweets.
    #[serde(default)]
    pub fallback_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub users: Vec<EmbeddedUser>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.manifest.embedding_dim
    }

    pub fn user(&self, id: &str) -> Option<&EmbeddedUser> {
        self.users.iter().find(|u| u.user_id == id)
    }

    /// Users of a split in manifest order.
    pub fn split(&self, name: SplitName) -> Vec<&EmbeddedUser> {
        let index: BTreeMap<&str, &EmbeddedUser> = self.users.iter().map(|u| (u.user_id.as_str(), u)).collect();
        self.manifest
            .splits
            .get(name)
            .iter()
            .map(|id| index[id.as_str()])
            .collect()
    }

    pub fn examples(&self, name: SplitName, max_tweets: usize) -> Vec<Example> {
        self.split(name).iter().map(|u| u.example(max_tweets)).collect()
    }

    /// Checks every invariant that [`load_dataset`] enforces.
    pub fn validate(&self) -> Result<()> {
        let d = self.manifest.embedding_dim;
        if d == 0 {
            return Err(Error::invalid("embedding_dim must be >= 1"));
        }
        let mut ids = HashSet::new();
        for u in &self.users {
            if !ids.insert(u.user_id.as_str()) {
                return Err(Error::invalid(format!("duplicate user_id {:?}", u.user_id)));
            }
            validate_user(u, d)?;
        }
        let mut assigned = HashSet::new();
        for name in SplitName::ALL {
            for id in self.manifest.splits.get(name) {
                if !ids.contains(id.as_str()) {
                    return Err(Error::invalid(format!("split {} names unknown user {id:?}", name.as_str())));
                }
                if !assigned.insert(id.as_str()) {
                    return Err(Error::invalid(format!("user {id:?} is assigned to more than one split")));
                }
            }
        }
        if let Some(u) = self.users.iter().find(|u| !assigned.contains(u.user_id.as_str())) {
            return Err(Error::invalid(format!("user {:?} is not assigned to a split", u.user_id)));
        }
        Ok(())
    }
}

fn validate_user(u: &EmbeddedUser, d: usize) -> Result<()> {
    if u.label > 1 {
        return Err(Error::invalid(format!("user {:?} has label {}, expected 0 or 1", u.user_id, u.label)));
    }
    if u.tweets.is_empty() {
        return Err(Error::invalid(format!("user {:?} has no tweets", u.user_id)));
    }
    for t in &u.tweets {
        if t.embedding.len() != d {
            return Err(Error::invalid(format!(
                "user {:?} tweet {:?} has dim {}, dataset dim is {d}",
                u.user_id,
                t.tweet_id,
                t.embedding.len()
            )));
        }
        if !t.embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("tweet {:?} has a non-finite embedding", t.tweet_id)));
        }
        if t.embedding.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid(format!("tweet {:?} has a zero embedding", t.tweet_id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum EmbeddingRepr {
    Base64(String),
    Array(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TweetRecord {
    tweet_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<EmbeddingRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserRecord {
    user_id: String,
    label: usize,
    tweets: Vec<TweetRecord>,
}

/// Little-endian `f32` bytes, base64 encoded.
pub fn encode_embedding(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_embedding(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::invalid(format!("bad base64 embedding: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid("base64 embedding length is not a multiple of 4 bytes"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn f32_exact(v: &[f64]) -> bool {
    v.iter().all(|&x| (x as f32) as f64 == x)
}

/// Rounds every coordinate to the nearest `f32`.
pub fn quantize_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = (*x as f32) as f64);
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads and fully validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let d = manifest.embedding_dim;
    let path = dir.join(USERS_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut users = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UserRecord = serde_json::from_str(&line).map_err(|e| schema(&path, line_no, e.to_string()))?;
        let mut tweets = Vec::with_capacity(rec.tweets.len());
        for t in rec.tweets {
            let embedding = match (t.embedding, &t.text) {
                (Some(EmbeddingRepr::Array(v)), _) => v,
                (Some(EmbeddingRepr::Base64(s)), _) => decode_embedding(&s)
                    .map_err(|e| schema(&path, line_no, format!("tweet {:?}: {e}", t.tweet_id)))?,
                (None, Some(text)) => fallback_embed(text, d, manifest.fallback_seed)
                    .map_err(|e| schema(&path, line_no, format!("tweet {:?}: {e}", t.tweet_id)))?,
                (None, None) => {
                    return Err(schema(
                        &path,
                        line_no,
                        format!("tweet {:?} has neither embedding nor text", t.tweet_id),
                    ))
                }
            };
            tweets.push(Tweet {
                tweet_id: t.tweet_id,
                embedding,
                text: t.text,
            });
        }
        let user = EmbeddedUser {
            user_id: rec.user_id,
            label: rec.label,
            tweets,
        };
        validate_user(&user, d).map_err(|e| schema(&path, line_no, e.to_string()))?;
        users.push(user);
    }
    let ds = Dataset { manifest, users };
    ds.validate().map_err(|e| schema(&dir.join(MANIFEST_FILE), 0, e.to_string()))?;
    Ok(ds)
}

/// Writes `manifest.json` and `users.jsonl`. Embeddings that are exact
/// `f32` values are stored as base64, others as number arrays.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(MANIFEST_FILE), &ds.manifest)?;
    let path = dir.join(USERS_FILE);
    let mut out = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for u in &ds.users {
        let rec = UserRecord {
            user_id: u.user_id.clone(),
            label: u.label,
            tweets: u
                .tweets
                .iter()
                .map(|t| TweetRecord {
                    tweet_id: t.tweet_id.clone(),
                    embedding: Some(if f32_exact(&t.embedding) {
                        EmbeddingRepr::Base64(encode_embedding(&t.embedding))
                    } else {
                        EmbeddingRepr::Array(t.embedding.clone())
                    }),
                    text: t.text.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec).expect("serializable");
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

fn fnv1a(token: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(token.as_bytes());
    h.finish()
}

/// Deterministic bag-of-tokens embedding: each lowercase whitespace token
/// seeds a ChaCha20 stream (FNV-1a 64 of its UTF-8 bytes, xor `seed`) that
/// yields a Gaussian unit vector; token vectors are averaged and
/// L2-normalized.
pub fn fallback_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::invalid("fallback embedding dim must be >= 1"));
    }
    let lower = text.to_lowercase();
    let tokens: Vec<&str> = lower.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::invalid("cannot embed empty text"));
    }
    let mut acc = vec![0.0; dim];
    for tok in &tokens {
        let mut rng = Rng::new(fnv1a(tok) ^ seed);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        normalize(&mut v)?;
        crate::numeric::axpy(1.0 / tokens.len() as f64, &v, &mut acc);
    }
    normalize(&mut acc)?;
    Ok(acc)
}

/// Either one vector or a list of example vectors per symptom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrototypeEntry {
    Vector(Vec<f64>),
    Examples(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasePrototypeFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    /// Keyed by symptom code (`S1`..`S9`), number or name.
    pub symptoms: BTreeMap<String, PrototypeEntry>,
}

fn symptom_table<'a, T>(path: &Path, table: &'a BTreeMap<String, T>) -> Result<Vec<Option<&'a T>>> {
    let mut out: Vec<Option<&'a T>> = vec![None; NUM_SYMPTOMS];
    for (key, v) in table {
        let s = SymptomId::parse(key).map_err(|e| schema(path, 0, e.to_string()))?;
        if out[s.index()].replace(v).is_some() {
            return Err(schema(path, 0, format!("symptom {} listed twice", s.code())));
        }
    }
    if let Some(j) = out.iter().position(|v| v.is_none()) {
        let s = SymptomId::from_index(j);
        return Err(schema(path, 0, format!("missing symptom {} ({})", s.code(), s.name())));
    }
    Ok(out)
}

fn check_dim(path: &Path, s: SymptomId, v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(schema(
            path,
            0,
            format!("symptom {} vector has dim {}, expected {dim}", s.code(), v.len()),
        ));
    }
    Ok(())
}

/// Single vectors are used as given; example lists are averaged.
pub fn base_prototypes_from_file(path: &Path, file: &BasePrototypeFile, dim: usize) -> Result<BasePrototypeSet> {
    let entries = symptom_table(path, &file.symptoms)?;
    let mut rows = Vec::with_capacity(NUM_SYMPTOMS);
    let mut any_examples = false;
    for (j, e) in entries.into_iter().enumerate() {
        let s = SymptomId::from_index(j);
        match e.expect("complete table") {
            PrototypeEntry::Vector(v) => {
                check_dim(path, s, v, dim)?;
                rows.push(v.clone());
            }
            PrototypeEntry::Examples(list) => {
                any_examples = true;
                for v in list {
                    check_dim(path, s, v, dim)?;
                }
                let mean = mean_rows(list.iter().map(|v| v.as_slice()), dim)
                    .ok_or_else(|| schema(path, 0, format!("symptom {} has no examples", s.code())))?;
                rows.push(mean);
            }
        }
    }
    let provenance = file.provenance.unwrap_or(if any_examples {
        Provenance::LexiconTweet
    } else {
        Provenance::Lexicon
    });
    BasePrototypeSet::new(Matrix::from_rows(&rows, dim)?, provenance).map_err(|e| schema(path, 0, e.to_string()))
}

pub fn load_base_prototypes(path: &Path, dim: usize) -> Result<BasePrototypeSet> {
    let file: BasePrototypeFile = read_json(path)?;
    base_prototypes_from_file(path, &file, dim)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconEntry {
    #[serde(default)]
    pub terms: Vec<String>,
    #[serde(default)]
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconFile {
    pub symptoms: BTreeMap<String, LexiconEntry>,
    #[serde(default)]
    pub fallback_seed: u64,
}

/// Per-symptom lexicon embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: Vec<Matrix>,
    /// True when at least one symptom was embedded from its terms.
    pub from_terms: bool,
}

impl Lexicon {
    pub fn from_embeddings(entries: Vec<Matrix>) -> Result<Self> {
        if entries.len() != NUM_SYMPTOMS || entries.iter().any(|m| m.rows() == 0) {
            return Err(Error::invalid("lexicon needs a non-empty entry for each of the 9 symptoms"));
        }
        Ok(Self {
            entries,
            from_terms: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries[0].cols()
    }

    pub fn embeddings(&self, s: SymptomId) -> &Matrix {
        &self.entries[s.index()]
    }

    /// `9 x d` mean embedding per symptom.
    pub fn means(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self.entries.iter().map(|m| m.column_means().expect("non-empty")).collect();
        Matrix::from_rows(&rows, self.dim()).expect("uniform dim")
    }
}

/// Embeddings are used when listed; otherwise the terms are embedded with
/// [`fallback_embed`].
pub fn load_lexicon(path: &Path, dim: usize) -> Result<Lexicon> {
    let file: LexiconFile = read_json(path)?;
    let entries = symptom_table(path, &file.symptoms)?;
    let mut out = Vec::with_capacity(NUM_SYMPTOMS);
    let mut from_terms = false;
    for (j, e) in entries.into_iter().enumerate() {
        let s = SymptomId::from_index(j);
        let e = e.expect("complete table");
        let rows: Vec<Vec<f64>> = if !e.embeddings.is_empty() {
            for v in &e.embeddings {
                check_dim(path, s, v, dim)?;
            }
            e.embeddings.clone()
        } else if !e.terms.is_empty() {
            from_terms = true;
            e.terms
                .iter()
                .map(|t| fallback_embed(t, dim, file.fallback_seed))
                .collect::<Result<_>>()
                .map_err(|err| schema(path, 0, format!("symptom {}: {err}", s.code())))?
        } else {
            return Err(schema(path, 0, format!("symptom {} has no terms or embeddings", s.code())));
        };
        out.push(Matrix::from_rows(&rows, dim)?);
    }
    let mut lex = Lexicon::from_embeddings(out)?;
    lex.from_terms = from_terms;
    Ok(lex)
}

#[cfg(test)]
mod tests;
