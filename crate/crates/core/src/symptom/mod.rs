//! Symptom prototype space: sampling around base prototypes, tweet-symptom
//! similarity and assignment, and the symptom loss.
//!
//! Prototypes live in a `(9 * m) x d` matrix; row `j * m + k` holds
//! prototype `k` of symptom `j` (both zero-based).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    cosine_backward, cosine_similarity, norm, softmax_entropy_grad, sq_dist, triplet_loss_grad,
    Matrix,
};
use crate::ot::{sinkhorn_with_grads, GradSides, PointCloud, SinkhornConfig};
use crate::rng::Rng;

pub const NUM_SYMPTOMS: usize = 9;

pub const SYMPTOM_NAMES: [&str; NUM_SYMPTOMS] = [
    "Depressed Mood",
    "Loss of Interest or Pleasure",
    "Sleep Disturbance",
    "Fatigue or Low Energy",
    "Changes in Appetite",
    "Feelings of Guilt or Worthlessness",
    "Difficulty Concentrating",
    "Psychomotor Agitation or Retardation",
    "Suicidal Thoughts",
];

/// PHQ-9 symptom, numbered `S1..=S9`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SymptomId(u8);

impl SymptomId {
    /// From the one-based symptom number.
    pub fn new(number: usize) -> Result<Self> {
        if (1..=NUM_SYMPTOMS).contains(&number) {
            Ok(Self(number as u8))
        } else {
            Err(Error::invalid(format!("symptom number {number} outside 1..=9")))
        }
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < NUM_SYMPTOMS, "symptom index {index}");
        Self(index as u8 + 1)
    }

    /// Zero-based index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn number(self) -> usize {
        self.0 as usize
    }

    pub fn code(self) -> String {
        format!("S{}", self.0)
    }

    pub fn name(self) -> &'static str {
        SYMPTOM_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = SymptomId> {
        (0..NUM_SYMPTOMS).map(SymptomId::from_index)
    }

    /// Accepts `"S4"`, `"4"`, or a full symptom name (case-insensitive).
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        let digits = t.strip_prefix(['S', 's']).unwrap_or(t);
        if let Ok(n) = digits.parse::<usize>() {
            return Self::new(n);
        }
        SYMPTOM_NAMES
            .iter()
            .position(|name| name.eq_ignore_ascii_case(t))
            .map(Self::from_index)
            .ok_or_else(|| Error::invalid(format!("unknown symptom {s:?}")))
    }
}

impl TryFrom<u8> for SymptomId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v as usize)
    }
}

impl From<SymptomId> for u8 {
    fn from(s: SymptomId) -> u8 {
        s.0
    }
}

impl std::fmt::Display for SymptomId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "S{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Llm,
    Lexicon,
    LexiconTweet,
}

/// One anchor vector per symptom.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePrototypeSet {
    vectors: Matrix,
    provenance: Provenance,
}

impl BasePrototypeSet {
    pub fn new(vectors: Matrix, provenance: Provenance) -> Result<Self> {
        if vectors.rows() != NUM_SYMPTOMS {
            return Err(Error::invalid(format!(
                "base prototype set needs {NUM_SYMPTOMS} vectors, got {}",
                vectors.rows()
            )));
        }
        if vectors.cols() == 0 {
            return Err(Error::invalid("base prototypes have zero dimension"));
        }
        for (j, v) in vectors.iter_rows().enumerate() {
            let id = SymptomId::from_index(j);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("base prototype {id}")));
            }
            if norm(v) == 0.0 {
                return Err(Error::invalid(format!("base prototype {id} is the zero vector")));
            }
        }
        Ok(Self { vectors, provenance })
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn get(&self, s: SymptomId) -> &[f64] {
        self.vectors.row(s.index())
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomPrototypeSpace {
    prototypes: Matrix,
    m: usize,
    sigma: f64,
}

impl SymptomPrototypeSpace {
    pub fn from_matrix(prototypes: Matrix, m: usize, sigma: f64) -> Result<Self> {
        if m == 0 || prototypes.rows() != NUM_SYMPTOMS * m {
            return Err(Error::shape(format!(
                "symptom space with m={m} needs {} rows, got {}",
                NUM_SYMPTOMS * m,
                prototypes.rows()
            )));
        }
        if !prototypes.is_finite() {
            return Err(Error::NonFinite("symptom prototypes".into()));
        }
        Ok(Self { prototypes, m, sigma })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn row_index(&self, j: usize, k: usize) -> usize {
        j * self.m + k
    }

    pub fn prototype(&self, j: usize, k: usize) -> &[f64] {
        self.prototypes.row(self.row_index(j, k))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.prototypes
    }

    /// Rows belonging to symptom `j` as an `m x d` matrix.
    pub fn symptom_block(&self, j: usize) -> Matrix {
        let idx: Vec<usize> = (0..self.m).map(|k| self.row_index(j, k)).collect();
        self.prototypes.select_rows(&idx)
    }

    /// Mean of the `m` prototypes of symptom `j`.
    pub fn mean_prototype(&self, j: usize) -> Vec<f64> {
        self.symptom_block(j).column_means().expect("m >= 1")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymptomLossWeights {
    /// Sinkhorn (or triplet) weight.
    pub lambda1: f64,
    /// Reconstruction weight.
    pub lambda2: f64,
}

impl Default for SymptomLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl SymptomLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// Draws `m` prototypes per symptom, each coordinate from
/// `N(base_j, sigma^2)`, in symptom-major then prototype order.
pub fn sample_prototypes(
    base: &BasePrototypeSet,
    m: usize,
    sigma: f64,
    seed: u64,
) -> Result<SymptomPrototypeSpace> {
    if m == 0 {
        return Err(Error::invalid("m must be >= 1"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let d = base.dim();
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(NUM_SYMPTOMS * m * d);
    for j in 0..NUM_SYMPTOMS {
        let anchor = base.vectors.row(j);
        for _ in 0..m {
            data.extend(anchor.iter().map(|&c| c + sigma * rng.normal()));
        }
    }
    SymptomPrototypeSpace::from_matrix(Matrix::from_vec(NUM_SYMPTOMS * m, d, data)?, m, sigma)
}

/// `sim[i][j][k] = cos(e_i, p_k^j)`, stored as an `n x (9 m)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymptomSims {
    values: Matrix,
    m: usize,
}

impl SymptomSims {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values.get(i, j * self.m + k)
    }

    /// All `9 m` similarities of tweet `i`, symptom-major.
    pub fn tweet(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.values
    }

    /// Builds a tensor directly from `n x (9 m)` values.
    pub fn from_matrix(values: Matrix, m: usize) -> Result<Self> {
        if m == 0 || values.cols() != NUM_SYMPTOMS * m {
            return Err(Error::shape(format!(
                "similarity tensor width {} does not match m={m}",
                values.cols()
            )));
        }
        Ok(Self { values, m })
    }
}

pub fn symptom_similarities(tweets: &Matrix, space: &SymptomPrototypeSpace) -> Result<SymptomSims> {
    if tweets.cols() != space.dim() {
        return Err(Error::shape(format!(
            "tweet dim {} vs prototype dim {}",
            tweets.cols(),
            space.dim()
        )));
    }
    let mut values = Matrix::zeros(tweets.rows(), space.len());
    for (i, e) in tweets.iter_rows().enumerate() {
        for (r, p) in space.matrix().iter_rows().enumerate() {
            values.set(i, r, cosine_similarity(e, p)?);
        }
    }
    Ok(SymptomSims { values, m: space.m() })
}

/// Back-propagates `d loss / d sims` into the prototype gradient; the
/// tweet embeddings are constants.
pub fn similarity_backward(
    tweets: &Matrix,
    space: &SymptomPrototypeSpace,
    upstream: &Matrix,
    grad: &mut Matrix,
) -> Result<()> {
    for (i, e) in tweets.iter_rows().enumerate() {
        for r in 0..space.len() {
            let u = upstream.get(i, r);
            if u != 0.0 {
                cosine_backward(e, space.matrix().row(r), u, None, Some(grad.row_mut(r)))?;
            }
        }
    }
    Ok(())
}

/// Per-tweet mean similarity to each symptom, `n x 9`.
pub fn mean_symptom_sims(sims: &SymptomSims) -> Matrix {
    let m = sims.m;
    let mut out = Matrix::zeros(sims.n(), NUM_SYMPTOMS);
    for i in 0..sims.n() {
        let row = sims.tweet(i);
        for j in 0..NUM_SYMPTOMS {
            out.set(i, j, row[j * m..(j + 1) * m].iter().sum::<f64>() / m as f64);
        }
    }
    out
}

pub(crate) fn argmax_first(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// `s_i = argmax_j mean_k sim[i][j][k]`, ties to the lowest symptom.
pub fn assign_symptoms(sims: &SymptomSims) -> Vec<SymptomId> {
    let means = mean_symptom_sims(sims);
    means
        .iter_rows()
        .map(|row| SymptomId::from_index(argmax_first(row.iter().copied())))
        .collect()
}

/// `c_i = argmax_{j,k} sim[i][j][k]` as a prototype row index, ties to the
/// lowest `(j, k)`.
pub fn nearest_prototypes(sims: &SymptomSims) -> Vec<usize> {
    (0..sims.n())
        .map(|i| argmax_first(sims.tweet(i).iter().copied()))
        .collect()
}

/// Tweet rows grouped by assigned symptom.
#[derive(Debug, Clone, PartialEq)]
pub struct SymptomGroups {
    members: Vec<Vec<usize>>,
    points: Vec<Matrix>,
}

impl SymptomGroups {
    pub fn members(&self, s: SymptomId) -> &[usize] {
        &self.members[s.index()]
    }

    pub fn points(&self, s: SymptomId) -> &Matrix {
        &self.points[s.index()]
    }

    /// Uniform cloud over the group, `None` when empty.
    pub fn cloud(&self, s: SymptomId) -> Option<PointCloud> {
        let p = &self.points[s.index()];
        (p.rows() > 0).then(|| PointCloud::uniform(p.clone()).expect("non-empty"))
    }

    pub fn non_empty(&self) -> usize {
        self.members.iter().filter(|m| !m.is_empty()).count()
    }
}

pub fn group_by_symptom(tweets: &Matrix, labels: &[SymptomId]) -> Result<SymptomGroups> {
    if labels.len() != tweets.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} tweets",
            labels.len(),
            tweets.rows()
        )));
    }
    let mut members = vec![Vec::new(); NUM_SYMPTOMS];
    for (i, s) in labels.iter().enumerate() {
        members[s.index()].push(i);
    }
    let points = members.iter().map(|idx| tweets.select_rows(idx)).collect();
    Ok(SymptomGroups { members, points })
}

/// Loss value with its gradient with respect to the prototype matrix.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
    /// False when a Sinkhorn solve hit `max_iters` or no term was active.
    pub converged: bool,
}

/// Mean Sinkhorn cost between each non-empty tweet group and its
/// symptom's prototypes; empty groups are skipped and the divisor shrinks.
pub fn symptom_sinkhorn_loss(
    groups: &SymptomGroups,
    space: &SymptomPrototypeSpace,
    cfg: &SinkhornConfig,
) -> Result<LossGrad> {
    let mut grad = space.matrix().zeros_like();
    let active = groups.non_empty();
    if active == 0 {
        log::warn!("every symptom group is empty; sinkhorn loss is 0");
        return Ok(LossGrad {
            value: 0.0,
            grad,
            converged: false,
        });
    }
    let scale = 1.0 / active as f64;
    let mut value = 0.0;
    let mut converged = true;
    for s in SymptomId::all() {
        let Some(cloud) = groups.cloud(s) else { continue };
        if cloud.dim() != space.dim() {
            return Err(Error::shape("tweet groups and prototypes differ in dim"));
        }
        let protos = PointCloud::uniform(space.symptom_block(s.index()))?;
        let r = sinkhorn_with_grads(&cloud, &protos, cfg, GradSides::B_ONLY)?;
        value += r.output.value;
        converged &= r.output.converged;
        for k in 0..space.m() {
            let row = grad.row_mut(space.row_index(s.index(), k));
            for (g, v) in row.iter_mut().zip(r.grad_b.row(k)) {
                *g += scale * v;
            }
        }
    }
    Ok(LossGrad {
        value: value * scale,
        grad,
        converged,
    })
}

/// Mean squared distance between each tweet and its prototype `nearest[i]`
/// (a prototype row index).
pub fn symptom_mse_loss_frozen(
    tweets: &Matrix,
    nearest: &[usize],
    space: &SymptomPrototypeSpace,
) -> Result<LossGrad> {
    let n = tweets.rows();
    if n == 0 {
        return Err(Error::invalid("reconstruction loss over zero tweets"));
    }
    if nearest.len() != n {
        return Err(Error::shape("one nearest prototype per tweet"));
    }
    let mut grad = space.matrix().zeros_like();
    let mut total = 0.0;
    let scale = 2.0 / n as f64;
    for (e, &r) in tweets.iter_rows().zip(nearest) {
        let p = space.matrix().row(r);
        total += sq_dist(e, p);
        for ((g, ei), pi) in grad.row_mut(r).iter_mut().zip(e).zip(p) {
            *g -= scale * (ei - pi);
        }
    }
    Ok(LossGrad {
        value: total / n as f64,
        grad,
        converged: true,
    })
}

/// Reconstruction loss against the most similar prototype of each tweet.
pub fn symptom_mse_loss(
    tweets: &Matrix,
    sims: &SymptomSims,
    space: &SymptomPrototypeSpace,
) -> Result<LossGrad> {
    symptom_mse_loss_frozen(tweets, &nearest_prototypes(sims), space)
}

/// Discrete choices made from the similarities at the start of a step and
/// held fixed while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct SymptomAssignments {
    pub labels: Vec<SymptomId>,
    /// Most similar prototype row per tweet.
    pub nearest: Vec<usize>,
    /// Most similar prototype row within the assigned symptom.
    pub positive: Vec<usize>,
    /// Most similar prototype row outside the assigned symptom.
    pub negative: Vec<usize>,
}

impl SymptomAssignments {
    pub fn compute(sims: &SymptomSims) -> Self {
        let labels = assign_symptoms(sims);
        let nearest = nearest_prototypes(sims);
        let m = sims.m();
        let mut positive = Vec::with_capacity(labels.len());
        let mut negative = Vec::with_capacity(labels.len());
        for (i, s) in labels.iter().enumerate() {
            let row = sims.tweet(i);
            let own = s.index() * m;
            positive.push(own + argmax_first(row[own..own + m].iter().copied()));
            let others: Vec<usize> = (0..row.len()).filter(|r| r / m != s.index()).collect();
            negative.push(others[argmax_first(others.iter().map(|&r| row[r]))]);
        }
        Self {
            labels,
            nearest,
            positive,
            negative,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SymptomLossOutput {
    pub total: f64,
    pub sinkhorn: f64,
    pub mse: f64,
    pub grad: Matrix,
    pub converged: bool,
}

/// `lambda1 * L_sinkhorn + lambda2 * L_mse` under fixed assignments.
pub fn symptom_loss_frozen(
    tweets: &Matrix,
    space: &SymptomPrototypeSpace,
    assignments: &SymptomAssignments,
    weights: &SymptomLossWeights,
    cfg: &SinkhornConfig,
) -> Result<SymptomLossOutput> {
    weights.validate()?;
    let mut grad = space.matrix().zeros_like();
    let mut out = SymptomLossOutput {
        total: 0.0,
        sinkhorn: 0.0,
        mse: 0.0,
        grad: space.matrix().zeros_like(),
        converged: true,
    };
    if weights.lambda1 > 0.0 {
        let groups = group_by_symptom(tweets, &assignments.labels)?;
        let s = symptom_sinkhorn_loss(&groups, space, cfg)?;
        out.sinkhorn = s.value;
        out.converged &= s.converged;
        accumulate(&mut grad, weights.lambda1, &s.grad);
    }
    if weights.lambda2 > 0.0 {
        let m = symptom_mse_loss_frozen(tweets, &assignments.nearest, space)?;
        out.mse = m.value;
        accumulate(&mut grad, weights.lambda2, &m.grad);
    }
    out.total = weights.lambda1 * out.sinkhorn + weights.lambda2 * out.mse;
    out.grad = grad;
    Ok(out)
}

/// Computes similarities and assignments, then [`symptom_loss_frozen`].
pub fn symptom_loss(
    tweets: &Matrix,
    space: &SymptomPrototypeSpace,
    weights: &SymptomLossWeights,
    cfg: &SinkhornConfig,
) -> Result<SymptomLossOutput> {
    let sims = symptom_similarities(tweets, space)?;
    let assignments = SymptomAssignments::compute(&sims);
    symptom_loss_frozen(tweets, space, &assignments, weights, cfg)
}

/// Mean triplet hinge with anchor = tweet, positive = best prototype of the
/// assigned symptom, negative = best prototype of any other symptom.
pub fn symptom_triplet_loss(
    tweets: &Matrix,
    space: &SymptomPrototypeSpace,
    assignments: &SymptomAssignments,
    margin: f64,
) -> Result<LossGrad> {
    let n = tweets.rows();
    if n == 0 {
        return Err(Error::invalid("triplet loss over zero tweets"));
    }
    let mut grad = space.matrix().zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / n as f64;
    for (i, e) in tweets.iter_rows().enumerate() {
        let (pos, neg) = (assignments.positive[i], assignments.negative[i]);
        let (v, g) = triplet_loss_grad(e, space.matrix().row(pos), space.matrix().row(neg), margin);
        total += v;
        if v > 0.0 {
            crate::numeric::axpy(scale, &g.positive, grad.row_mut(pos));
            crate::numeric::axpy(scale, &g.negative, grad.row_mut(neg));
        }
    }
    Ok(LossGrad {
        value: total * scale,
        grad,
        converged: true,
    })
}

/// Mean entropy of `softmax` over each tweet's 9 mean symptom similarities.
pub fn symptom_entropy_loss(
    tweets: &Matrix,
    space: &SymptomPrototypeSpace,
    sims: &SymptomSims,
) -> Result<LossGrad> {
    let n = tweets.rows();
    if n == 0 {
        return Err(Error::invalid("entropy loss over zero tweets"));
    }
    let m = space.m();
    let means = mean_symptom_sims(sims);
    let mut upstream = Matrix::zeros(n, space.len());
    let mut total = 0.0;
    for (i, row) in means.iter_rows().enumerate() {
        let (h, dh) = softmax_entropy_grad(row);
        total += h;
        for (j, g) in dh.iter().enumerate() {
            for k in 0..m {
                upstream.set(i, j * m + k, g / (m as f64 * n as f64));
            }
        }
    }
    let mut grad = space.matrix().zeros_like();
    similarity_backward(tweets, space, &upstream, &mut grad)?;
    Ok(LossGrad {
        value: total / n as f64,
        grad,
        converged: true,
    })
}

pub(crate) fn accumulate(into: &mut Matrix, scale: f64, g: &Matrix) {
    for (a, b) in into.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a += scale * b;
    }
}
