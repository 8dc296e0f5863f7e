//! Metrics, prototype quality scores, explanations and prototype-count
//! sweeps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, EmbeddedUser, Lexicon, SplitName};
use crate::error::{Error, Result};
use crate::head::{symptom_weight_report, SymptomWeight};
use crate::metrics::{ConfusionCounts, Prf1};
use crate::model::{forward_user, Example, ModelParams};
use crate::numeric::{cosine_similarity, mean_rows, Matrix};
use crate::symptom::{BasePrototypeSet, SymptomId, SymptomPrototypeSpace, NUM_SYMPTOMS};
use crate::trainer::{evaluate, train, truncate, TrainConfig};
use crate::user_proto::{UserPrototypeSpace, CLASS_NAMES, NUM_CLASSES};

pub use crate::metrics::{f1_score, prf1};

/// Name of the PRIDE formula used here: similarity to the matching real
/// prototype minus the mean similarity to the other real prototypes.
pub const PRIDE_VARIANT: &str = "mean-offdiag";

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Incompatible(format!("{what} has dim {got}, expected {want}")));
    }
    Ok(())
}

/// `a.rows() x b.rows()` cosine similarities.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dim("right operand", b.cols(), a.cols())?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, x) in a.iter_rows().enumerate() {
        for (j, y) in b.iter_rows().enumerate() {
            out.set(i, j, cosine_similarity(x, y)?);
        }
    }
    Ok(out)
}

/// `9 x d`, row `j` the mean of symptom `j`'s prototypes.
pub fn mean_symptom_prototypes(space: &SymptomPrototypeSpace) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..NUM_SYMPTOMS).map(|j| space.mean_prototype(j)).collect();
    Matrix::from_rows(&rows, space.dim()).expect("uniform")
}

/// Row `j`: cosine of mean learned prototype `j` against each symptom's
/// mean lexicon embedding.
pub fn lexicon_alignment(space: &SymptomPrototypeSpace, lexicon_means: &Matrix) -> Result<Matrix> {
    check_dim("lexicon", lexicon_means.cols(), space.dim())?;
    if lexicon_means.rows() != NUM_SYMPTOMS {
        return Err(Error::shape("lexicon needs 9 rows"));
    }
    cosine_matrix(&mean_symptom_prototypes(space), lexicon_means)
}

/// Mean of the diagonal and mean of the off-diagonal entries.
pub fn diagonal_contrast(m: &Matrix) -> (f64, f64) {
    let n = m.rows();
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..m.cols() {
            if i == j {
                diag += m.get(i, j);
            } else {
                off += m.get(i, j);
            }
        }
    }
    let offdiag_count = n * m.cols() - n.min(m.cols());
    (diag / n as f64, if offdiag_count == 0 { 0.0 } else { off / offdiag_count as f64 })
}

/// PRIDE per row of a square learned-vs-real similarity matrix.
pub fn pride_from_similarities(sims: &Matrix) -> Result<Vec<f64>> {
    let n = sims.rows();
    if n != sims.cols() || n < 2 {
        return Err(Error::shape("PRIDE needs a square matrix with at least 2 categories"));
    }
    Ok((0..n)
        .map(|j| {
            let row = sims.row(j);
            let others: f64 = row.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, v)| v).sum();
            row[j] - others / (n - 1) as f64
        })
        .collect())
}

pub fn pride_scores(space: &SymptomPrototypeSpace, real: &Matrix) -> Result<Vec<f64>> {
    check_dim("real prototypes", real.cols(), space.dim())?;
    if real.rows() != NUM_SYMPTOMS {
        return Err(Error::shape("need 9 real prototypes"));
    }
    pride_from_similarities(&cosine_matrix(&mean_symptom_prototypes(space), real)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RealPrototypeSource {
    /// The dataset tweet closest to each symptom's lexicon mean.
    NearestTweet,
    LexiconMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealPrototypes {
    pub vectors: Matrix,
    pub source: RealPrototypeSource,
    /// Chosen tweet per symptom when `source` is `NearestTweet`.
    pub tweet_ids: Vec<String>,
}

/// Real symptom prototypes: the tweet nearest (by cosine) to each lexicon
/// mean when the dataset carries tweet texts, else the lexicon means.
pub fn real_symptom_prototypes(users: &[&EmbeddedUser], lexicon: &Lexicon) -> Result<RealPrototypes> {
    let means = lexicon.means();
    let with_text: Vec<(&str, &[f64])> = users
        .iter()
        .flat_map(|u| u.tweets.iter())
        .filter(|t| t.text.is_some())
        .map(|t| (t.tweet_id.as_str(), t.embedding.as_slice()))
        .collect();
    if with_text.is_empty() {
        return Ok(RealPrototypes {
            vectors: means,
            source: RealPrototypeSource::LexiconMean,
            tweet_ids: vec![],
        });
    }
    check_dim("tweets", with_text[0].1.len(), means.cols())?;
    let mut rows = Vec::with_capacity(NUM_SYMPTOMS);
    let mut ids = Vec::with_capacity(NUM_SYMPTOMS);
    for m in means.iter_rows() {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, (_, e)) in with_text.iter().enumerate() {
            let c = cosine_similarity(m, e)?;
            if c > best.0 {
                best = (c, i);
            }
        }
        rows.push(with_text[best.1].1.to_vec());
        ids.push(with_text[best.1].0.to_string());
    }
    Ok(RealPrototypes {
        vectors: Matrix::from_rows(&rows, means.cols())?,
        source: RealPrototypeSource::NearestTweet,
        tweet_ids: ids,
    })
}

/// Encoder outputs, one row per example.
pub fn user_embeddings(params: &ModelParams, data: &[Example]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = data
        .par_iter()
        .map(|ex| forward_user(params, &ex.tweets).map(|f| f.embedding))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows, params.encoder.output_dim())
}

/// PRIDE of each class's mean user prototype against the class mean user
/// embedding.
pub fn user_pride(space: &UserPrototypeSpace, embeddings: &Matrix, labels: &[usize]) -> Result<[f64; 2]> {
    check_dim("embeddings", embeddings.cols(), space.dim())?;
    if embeddings.rows() != labels.len() {
        return Err(Error::shape("one label per embedding"));
    }
    let mut real = Vec::with_capacity(NUM_CLASSES);
    let mut learned = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let members = labels.iter().zip(embeddings.iter_rows()).filter(|(&l, _)| l == c).map(|(_, r)| r);
        let mean = mean_rows(members, space.dim())
            .ok_or_else(|| Error::invalid(format!("no {} users to build a real prototype", CLASS_NAMES[c])))?;
        real.push(mean);
        let block = space.class_block(c);
        learned.push(mean_rows(block.iter_rows(), space.dim()).expect("k >= 1"));
    }
    let sims = cosine_matrix(&Matrix::from_rows(&learned, space.dim())?, &Matrix::from_rows(&real, space.dim())?)?;
    let p = pride_from_similarities(&sims)?;
    Ok([p[0], p[1]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMatch {
    pub rank: usize,
    pub class: usize,
    pub class_name: String,
    /// Index within the class.
    pub index: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TweetExplanation {
    pub tweet_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Mean similarity to each symptom's prototypes, S1..S9.
    pub symptom_sims: Vec<f64>,
    pub top_symptom: SymptomId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSnapshot {
    /// One row per class; columns are S1..S9 then the user prototypes.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub symptom_weights: Vec<SymptomWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub user_id: String,
    pub label: usize,
    pub tweets: Vec<TweetExplanation>,
    pub symptom_scores: Vec<f64>,
    pub nearest_prototypes: Vec<PrototypeMatch>,
    pub head: HeadSnapshot,
    pub probs: [f64; 2],
    pub predicted_label: usize,
    pub predicted_class: String,
}

/// Recomputes the forward pass for one user over its first `max_tweets`
/// tweets. `q` may not exceed the number of user prototypes.
pub fn explain_user(user: &EmbeddedUser, params: &ModelParams, q: usize, max_tweets: usize) -> Result<ExplanationReport> {
    let total = params.user.len();
    if q > total {
        return Err(Error::invalid(format!("q = {q} exceeds the {total} user prototypes")));
    }
    let tweets = truncate(&user.tweet_matrix(), max_tweets);
    let f = forward_user(params, &tweets)?;
    let per_tweet = tweets
        .iter_rows()
        .enumerate()
        .map(|(i, _)| {
            let row = f.sympsims.row(i).to_vec();
            let top = SymptomId::from_index(crate::symptom::argmax_first(row.iter().copied()));
            TweetExplanation {
                tweet_id: user.tweets[i].tweet_id.clone(),
                text: user.tweets[i].text.clone(),
                symptom_sims: row,
                top_symptom: top,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| f.proto_sims[b].total_cmp(&f.proto_sims[a]));
    let k = params.user.k();
    let nearest = order
        .into_iter()
        .take(q)
        .enumerate()
        .map(|(rank, row)| PrototypeMatch {
            rank: rank + 1,
            class: params.user.class_of(row),
            class_name: CLASS_NAMES[params.user.class_of(row)].to_string(),
            index: row % k,
            similarity: f.proto_sims[row],
        })
        .collect();
    let head = &params.head;
    Ok(ExplanationReport {
        user_id: user.user_id.clone(),
        label: user.label,
        tweets: per_tweet,
        symptom_scores: f.features.symptom_scores().to_vec(),
        nearest_prototypes: nearest,
        head: HeadSnapshot {
            weight: head.weight.iter_rows().map(|r| r.to_vec()).collect(),
            bias: head.bias.row(0).to_vec(),
            symptom_weights: symptom_weight_report(head),
        },
        probs: f.prediction.probs,
        predicted_label: f.prediction.label,
        predicted_class: CLASS_NAMES[f.prediction.label].to_string(),
    })
}

impl ExplanationReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "user {} (label: {})\nprediction: {} (p = {:.4} / {:.4})\n\nsymptom scores (head weights non-depressed / depressed):\n",
            self.user_id, CLASS_NAMES[self.label], self.predicted_class, self.probs[0], self.probs[1]
        );
        for (j, v) in self.symptom_scores.iter().enumerate() {
            let id = SymptomId::from_index(j);
            s += &format!(
                "  {:<3} {:<36} {:>8.4}   weight {:>8.4} / {:>8.4}\n",
                id.code(),
                id.name(),
                v,
                self.head.weight[0][j],
                self.head.weight[1][j]
            );
        }
        s += "\nnearest user prototypes:\n";
        if self.nearest_prototypes.is_empty() {
            s += "  (none requested)\n";
        }
        for p in &self.nearest_prototypes {
            s += &format!("  {}. {} #{}  cos {:.4}\n", p.rank, p.class_name, p.index, p.similarity);
        }
        s += "\ntweets:\n";
        for t in &self.tweets {
            s += &format!("  {}  top {} ({:.4})", t.tweet_id, t.top_symptom.code(), t.symptom_sims[t.top_symptom.index()]);
            if let Some(text) = &t.text {
                s += &format!("  {text}");
            }
            s += "\n";
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: SplitName,
    pub users: usize,
    pub counts: ConfusionCounts,
    pub metrics: Prf1,
    pub pride_variant: String,
    pub real_prototype_source: Option<RealPrototypeSource>,
    pub symptom_pride: Option<Vec<f64>>,
    pub user_pride: [f64; 2],
    /// Present when a lexicon was supplied.
    pub alignment: Option<Vec<Vec<f64>>>,
    pub alignment_diagonal_mean: Option<f64>,
    pub alignment_offdiagonal_mean: Option<f64>,
    pub symptom_weights: Vec<SymptomWeight>,
}

/// Metrics, PRIDE and (with a lexicon) alignment on one split.
pub fn evaluate_split(
    params: &ModelParams,
    dataset: &Dataset,
    split: SplitName,
    max_tweets: usize,
    lexicon: Option<&Lexicon>,
) -> Result<EvaluationReport> {
    check_dim("dataset", dataset.dim(), params.embedding_dim())?;
    let examples = dataset.examples(split, max_tweets);
    if examples.is_empty() {
        return Err(Error::invalid(format!("split {} is empty", split.as_str())));
    }
    let (counts, metrics) = evaluate(params, &examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let user_pride = user_pride(&params.user, &user_embeddings(params, &examples)?, &labels)?;
    let mut report = EvaluationReport {
        split,
        users: examples.len(),
        counts,
        metrics,
        pride_variant: PRIDE_VARIANT.to_string(),
        real_prototype_source: None,
        symptom_pride: None,
        user_pride,
        alignment: None,
        alignment_diagonal_mean: None,
        alignment_offdiagonal_mean: None,
        symptom_weights: symptom_weight_report(&params.head),
    };
    if let Some(lex) = lexicon {
        let real = real_symptom_prototypes(&dataset.split(split), lex)?;
        report.symptom_pride = Some(pride_scores(&params.symptom, &real.vectors)?);
        report.real_prototype_source = Some(real.source);
        let a = lexicon_alignment(&params.symptom, &lex.means())?;
        let (d, o) = diagonal_contrast(&a);
        report.alignment = Some(a.iter_rows().map(|r| r.to_vec()).collect());
        report.alignment_diagonal_mean = Some(d);
        report.alignment_offdiagonal_mean = Some(o);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    pub m: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Test F1 per seed.
    pub f1: Vec<f64>,
    pub mean_f1: f64,
    pub min_f1: f64,
    pub max_f1: f64,
}

/// Trains once per `(m, k, seed)` and reports test F1. Every grid point
/// uses the same seeds.
pub fn prototype_sweep(
    dataset: &Dataset,
    base: &BasePrototypeSet,
    cfg: &TrainConfig,
    m_values: &[usize],
    k_values: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if m_values.is_empty() || k_values.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep grid and seed list must be non-empty"));
    }
    let cut = cfg.max_tweets_per_user;
    let (tr, va, te) = (
        dataset.examples(SplitName::Train, cut),
        dataset.examples(SplitName::Val, cut),
        dataset.examples(SplitName::Test, cut),
    );
    let mut rows = Vec::new();
    for &m in m_values {
        for &k in k_values {
            let mut f1 = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let point = TrainConfig { m, k, seed, ..*cfg };
                let out = train(&tr, &va, base, &point)?;
                f1.push(evaluate(&out.state.params, &te)?.1.f1);
                log::info!("sweep m={m} k={k} seed={seed}: test F1 {:.4}", f1.last().unwrap());
            }
            let mean = f1.iter().sum::<f64>() / f1.len() as f64;
            rows.push(SweepRow {
                dataset: dataset.manifest.name.clone(),
                m,
                k,
                seeds: seeds.to_vec(),
                min_f1: f1.iter().copied().fold(f64::INFINITY, f64::min),
                max_f1: f1.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_f1: mean,
                f1,
            });
        }
    }
    Ok(rows)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

fn symptom_header(first: &str) -> Vec<String> {
    std::iter::once(first.to_string()).chain(SymptomId::all().map(|s| s.code())).collect()
}

/// A 9 x 9 symptom matrix with `S1..S9` headers.
pub fn write_symptom_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    let run = |w: &mut csv::Writer<_>| -> csv::Result<()> {
        w.write_record(symptom_header("symptom"))?;
        for (j, row) in m.iter_rows().enumerate() {
            let mut rec = vec![SymptomId::from_index(j).code()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_error(path, e))
}

/// One row per symptom and per user class.
pub fn write_pride_csv(path: &Path, report: &EvaluationReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let run = |w: &mut csv::Writer<_>| -> csv::Result<()> {
        w.write_record(["level", "category", "name", "pride", "pride_variant"])?;
        if let Some(p) = &report.symptom_pride {
            for (j, v) in p.iter().enumerate() {
                let s = SymptomId::from_index(j);
                w.write_record([
                    "symptom".to_string(),
                    s.code(),
                    s.name().to_string(),
                    v.to_string(),
                    PRIDE_VARIANT.to_string(),
                ])?;
            }
        }
        for (c, v) in report.user_pride.iter().enumerate() {
            w.write_record([
                "user".to_string(),
                c.to_string(),
                CLASS_NAMES[c].to_string(),
                v.to_string(),
                PRIDE_VARIANT.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_error(path, e))
}

pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let run = |w: &mut csv::Writer<_>| -> csv::Result<()> {
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_error(path, e))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let run = |w: &mut csv::Writer<_>| -> csv::Result<()> {
        w.write_record(["dataset", "m", "k", "seeds", "f1", "mean_f1", "min_f1", "max_f1"])?;
        for r in rows {
            let join = |v: Vec<String>| v.join(";");
            w.write_record([
                r.dataset.clone(),
                r.m.to_string(),
                r.k.to_string(),
                join(r.seeds.iter().map(|s| s.to_string()).collect()),
                join(r.f1.iter().map(|s| s.to_string()).collect()),
                r.mean_f1.to_string(),
                r.min_f1.to_string(),
                r.max_f1.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_error(path, e))
}
