//! The full pipeline: symptom similarities, user encoding, user-prototype
//! similarities and the linear head, with one backward pass over all
//! trainable tensors.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_user_backward, encode_user_traced, EncoderConfig, EncoderParams, EncoderTrace};
use crate::error::{Error, Result};
use crate::head::{bce_backward, build_features, classify, HeadParams, Prediction, UserFeatureVector};
use crate::numeric::{axpy, Matrix};
use crate::ot::SinkhornConfig;
use crate::params::Params;
use crate::rng::Rng;
use crate::symptom::{
    mean_symptom_sims, sample_prototypes, similarity_backward, symptom_entropy_loss, symptom_loss_frozen,
    symptom_mse_loss_frozen, symptom_similarities, symptom_triplet_loss, BasePrototypeSet, SymptomAssignments,
    SymptomLossWeights, SymptomPrototypeSpace, SymptomSims, NUM_SYMPTOMS,
};
use crate::user_proto::{
    init_user_prototypes, user_entropy_loss, user_loss_frozen, user_mse_loss, user_prototype_similarities,
    user_similarity_backward, user_triplet_loss, UserAssignments, UserPrototypeSpace, UserTerm,
};

impl Params for SymptomPrototypeSpace {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![self.matrix()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![self.matrix_mut()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "sinkhorn+mse")]
    SinkhornMse,
    #[serde(rename = "sinkhorn-only")]
    SinkhornOnly,
    #[serde(rename = "triplet+mse+entropy")]
    TripletMseEntropy,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [
        LossVariant::SinkhornMse,
        LossVariant::SinkhornOnly,
        LossVariant::TripletMseEntropy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::SinkhornMse => "sinkhorn+mse",
            LossVariant::SinkhornOnly => "sinkhorn-only",
            LossVariant::TripletMseEntropy => "triplet+mse+entropy",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub symptom_weights: SymptomLossWeights,
    /// Falls back to `symptom_weights` when unset.
    pub user_weights: Option<SymptomLossWeights>,
    pub triplet_margin: f64,
    pub entropy_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::SinkhornMse,
            symptom_weights: SymptomLossWeights::default(),
            user_weights: None,
            triplet_margin: 1.0,
            entropy_weight: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.symptom_weights.validate()?;
        if let Some(w) = &self.user_weights {
            w.validate()?;
        }
        if !(self.triplet_margin >= 0.0 && self.entropy_weight >= 0.0) {
            return Err(Error::invalid("triplet margin and entropy weight must be >= 0"));
        }
        Ok(())
    }

    fn effective(&self, w: SymptomLossWeights) -> SymptomLossWeights {
        match self.variant {
            LossVariant::SinkhornOnly => SymptomLossWeights { lambda2: 0.0, ..w },
            _ => w,
        }
    }

    pub fn symptom_level(&self) -> SymptomLossWeights {
        self.effective(self.symptom_weights)
    }

    pub fn user_level(&self) -> SymptomLossWeights {
        self.effective(self.user_weights.unwrap_or(self.symptom_weights))
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub symptom: SymptomPrototypeSpace,
    pub user: UserPrototypeSpace,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl Params for ModelParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.symptom.tensors();
        t.extend(self.user.tensors());
        t.extend(self.encoder.tensors());
        t.extend(self.head.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.symptom.tensors_mut();
        t.extend(self.user.tensors_mut());
        t.extend(self.encoder.tensors_mut());
        t.extend(self.head.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    SymptomPrototypes,
    UserPrototypes,
    Encoder,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::SymptomPrototypes,
        ParamGroup::UserPrototypes,
        ParamGroup::Encoder,
        ParamGroup::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::SymptomPrototypes => "symptom_prototypes",
            ParamGroup::UserPrototypes => "user_prototypes",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Head => "head",
        }
    }
}

impl ModelParams {
    /// Seeds each component from an independent stream of `seed`; the
    /// encoder additionally mixes in its own configured seed.
    pub fn init(
        base: &BasePrototypeSet,
        m: usize,
        sigma: f64,
        k: usize,
        encoder: &EncoderConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let symptom = sample_prototypes(base, m, sigma, rng.fork())?;
        let enc_cfg = EncoderConfig {
            seed: rng.fork() ^ encoder.seed,
            ..*encoder
        };
        let encoder = EncoderParams::init(&enc_cfg, base.dim())?;
        let user = init_user_prototypes(k, encoder.output_dim(), rng.fork())?;
        Ok(Self {
            symptom,
            user,
            encoder,
            head: HeadParams::zeros(k),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.symptom.dim()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// Half-open range of `group` inside [`Params::flatten`].
    pub fn group_range(&self, group: ParamGroup) -> std::ops::Range<usize> {
        let sizes = [
            self.symptom.num_params(),
            self.user.num_params(),
            self.encoder.num_params(),
            self.head.num_params(),
        ];
        let i = ParamGroup::ALL.iter().position(|g| *g == group).expect("group");
        let start: usize = sizes[..i].iter().sum();
        start..start + sizes[i]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embedding_dim();
        if self.encoder.input_dim() != d + NUM_SYMPTOMS {
            return Err(Error::Incompatible(format!(
                "encoder input width {} does not match embedding dim {d}",
                self.encoder.input_dim()
            )));
        }
        if self.user.dim() != self.encoder.output_dim() || self.head.k() != self.user.k() {
            return Err(Error::Incompatible("user prototypes, encoder and head disagree".into()));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}

/// One user's tweet embeddings (already truncated) and label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tweets: Matrix,
    pub label: usize,
}

/// Forward-pass values for one user.
pub struct UserForward {
    pub sims: SymptomSims,
    /// `n x 9` mean similarity per symptom.
    pub sympsims: Matrix,
    pub embedding: Vec<f64>,
    pub proto_sims: Vec<f64>,
    pub features: UserFeatureVector,
    pub prediction: Prediction,
    trace: EncoderTrace,
}

pub fn forward_user(params: &ModelParams, tweets: &Matrix) -> Result<UserForward> {
    if tweets.cols() != params.embedding_dim() {
        return Err(Error::Incompatible(format!(
            "tweets have dim {}, model expects {}",
            tweets.cols(),
            params.embedding_dim()
        )));
    }
    let sims = symptom_similarities(tweets, &params.symptom)?;
    let sympsims = mean_symptom_sims(&sims);
    let trace = encode_user_traced(tweets, &sympsims, &params.encoder)?;
    let embedding = trace.output().to_vec();
    let proto_sims = user_prototype_similarities(&embedding, &params.user)?;
    let features = build_features(&sympsims, &proto_sims)?;
    let prediction = classify(&features, &params.head)?;
    Ok(UserForward {
        sims,
        sympsims,
        embedding,
        proto_sims,
        features,
        prediction,
        trace,
    })
}

pub fn predict(params: &ModelParams, tweets: &Matrix) -> Result<Prediction> {
    Ok(forward_user(params, tweets)?.prediction)
}

/// Discrete choices held fixed while differentiating one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenAssignments {
    pub symptom: SymptomAssignments,
    pub user: UserAssignments,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub total: f64,
    pub symp: f64,
    pub user: f64,
    pub bce: f64,
    /// False when any Sinkhorn solve stopped at its iteration cap.
    pub converged: bool,
}

fn pooled(forwards: &[UserForward], batch: &[&Example], m: usize) -> Result<(Matrix, SymptomSims)> {
    let d = batch[0].tweets.cols();
    let tweets: Vec<&Matrix> = batch.iter().map(|e| &e.tweets).collect();
    let sims: Vec<&Matrix> = forwards.iter().map(|f| f.sims.as_matrix()).collect();
    let sims = Matrix::vstack(&sims, NUM_SYMPTOMS * m)?;
    Ok((Matrix::vstack(&tweets, d)?, SymptomSims::from_matrix(sims, m)?))
}

fn embeddings(forwards: &[UserForward], dim: usize) -> Result<Matrix> {
    let rows: Vec<&[f64]> = forwards.iter().map(|f| f.embedding.as_slice()).collect();
    Matrix::from_rows(&rows, dim)
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { term: term.into() })
    }
}

fn blame(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::DegenerateVector => Error::Divergence { term: term.into() },
        other => other,
    }
}

fn forward_batch(params: &ModelParams, batch: &[&Example]) -> Result<Vec<UserForward>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    batch.par_iter().map(|ex| forward_user(params, &ex.tweets)).collect()
}

/// Assignments that [`batch_loss`] would compute for this batch.
pub fn batch_assignments(params: &ModelParams, batch: &[&Example]) -> Result<FrozenAssignments> {
    let forwards = forward_batch(params, batch)?;
    assignments_from(params, batch, &forwards)
}

fn assignments_from(params: &ModelParams, batch: &[&Example], forwards: &[UserForward]) -> Result<FrozenAssignments> {
    let (_, sims) = pooled(forwards, batch, params.symptom.m())?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let emb = embeddings(forwards, params.user.dim())?;
    Ok(FrozenAssignments {
        symptom: SymptomAssignments::compute(&sims),
        user: UserAssignments::compute(&emb, &labels, &params.user)?,
    })
}

fn symptom_term(
    params: &ModelParams,
    tweets: &Matrix,
    sims: &SymptomSims,
    asg: &SymptomAssignments,
    loss: &LossConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<(f64, Matrix, bool)> {
    let w = loss.symptom_level();
    let space = &params.symptom;
    match loss.variant {
        LossVariant::SinkhornMse | LossVariant::SinkhornOnly => {
            let o = symptom_loss_frozen(tweets, space, asg, &w, sinkhorn)?;
            Ok((o.total, o.grad, o.converged))
        }
        LossVariant::TripletMseEntropy => {
            let mut grad = space.matrix().zeros_like();
            let mut total = 0.0;
            let parts = [
                (w.lambda1, symptom_triplet_loss(tweets, space, asg, loss.triplet_margin)?),
                (w.lambda2, symptom_mse_loss_frozen(tweets, &asg.nearest, space)?),
                (loss.entropy_weight, symptom_entropy_loss(tweets, space, sims)?),
            ];
            for (scale, part) in &parts {
                total += scale * part.value;
                axpy(*scale, part.grad.as_slice(), grad.as_mut_slice());
            }
            Ok((total, grad, true))
        }
    }
}

fn user_term(
    params: &ModelParams,
    emb: &Matrix,
    labels: &[usize],
    asg: &UserAssignments,
    loss: &LossConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<UserTerm> {
    let w = loss.user_level();
    let space = &params.user;
    match loss.variant {
        LossVariant::SinkhornMse | LossVariant::SinkhornOnly => {
            let o = user_loss_frozen(emb, labels, space, asg, &w, sinkhorn)?;
            Ok(UserTerm {
                value: o.total,
                grad_embeddings: o.grad_embeddings,
                grad_prototypes: o.grad_prototypes,
                converged: o.converged,
            })
        }
        LossVariant::TripletMseEntropy => {
            let parts = [
                (w.lambda1, user_triplet_loss(emb, space, asg, loss.triplet_margin)?),
                (w.lambda2, user_mse_loss(emb, space, &asg.nearest)?),
                (loss.entropy_weight, user_entropy_loss(emb, space)?),
            ];
            let mut acc = UserTerm {
                value: 0.0,
                grad_embeddings: emb.zeros_like(),
                grad_prototypes: space.matrix().zeros_like(),
                converged: true,
            };
            for (scale, part) in &parts {
                acc.value += scale * part.value;
                axpy(*scale, part.grad_embeddings.as_slice(), acc.grad_embeddings.as_mut_slice());
                axpy(*scale, part.grad_prototypes.as_slice(), acc.grad_prototypes.as_mut_slice());
            }
            Ok(acc)
        }
    }
}

/// Total loss `L_symp + L_user + L_BCE` over a batch and its gradient with
/// respect to every parameter. `frozen` pins the discrete assignments;
/// when `None` they are computed from the current parameters.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[&Example],
    loss: &LossConfig,
    sinkhorn: &SinkhornConfig,
    frozen: Option<&FrozenAssignments>,
) -> Result<(BatchLoss, ModelParams)> {
    let forwards = forward_batch(params, batch).map_err(blame("forward pass"))?;
    for f in &forwards {
        if !f.embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { term: "user embedding".into() });
        }
        if !f.prediction.probs.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { term: "L_BCE".into() });
        }
    }
    let owned;
    let asg = match frozen {
        Some(a) => a,
        None => {
            owned = assignments_from(params, batch, &forwards)?;
            &owned
        }
    };
    let m = params.symptom.m();
    let (tweets, sims) = pooled(&forwards, batch, m)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let emb = embeddings(&forwards, params.user.dim())?;
    let mut grads = params.zeros_like();

    let (symp, g_symp, conv_symp) = symptom_term(params, &tweets, &sims, &asg.symptom, loss, sinkhorn).map_err(blame("L_symp"))?;
    check_finite("L_symp", symp)?;
    grads.symptom.matrix_mut().add_assign(&g_symp)?;

    let user = user_term(params, &emb, &labels, &asg.user, loss, sinkhorn).map_err(blame("L_user"))?;
    check_finite("L_user", user.value)?;
    grads.user.matrix_mut().add_assign(&user.grad_prototypes)?;

    let scale = 1.0 / batch.len() as f64;
    let mut bce = 0.0;
    let mut d_emb = user.grad_embeddings;
    let mut d_sympsims = Vec::with_capacity(batch.len());
    for (i, (f, ex)) in forwards.iter().zip(batch).enumerate() {
        let (l, d_feat) = bce_backward(&f.features, &params.head, &f.prediction, ex.label, scale, &mut grads.head)?;
        bce += scale * l;
        user_similarity_backward(
            &f.embedding,
            &params.user,
            &d_feat[NUM_SYMPTOMS..],
            d_emb.row_mut(i),
            grads.user.matrix_mut(),
        )?;
        let n = ex.tweets.rows();
        let mut ds = Matrix::zeros(n, NUM_SYMPTOMS);
        for r in 0..n {
            axpy(1.0 / n as f64, &d_feat[..NUM_SYMPTOMS], ds.row_mut(r));
        }
        d_sympsims.push(ds);
    }
    check_finite("L_BCE", bce)?;

    // encoder and symptom-similarity backward, per user in parallel,
    // reduced in user order
    let per_user: Vec<(EncoderParams, Matrix)> = forwards
        .par_iter()
        .zip(batch.par_iter())
        .zip(d_sympsims.into_par_iter())
        .enumerate()
        .map(|(i, ((f, ex), mut ds))| {
            let mut g_enc = params.encoder.zeros_like();
            let from_enc = encode_user_backward(&params.encoder, &f.trace, d_emb.row(i), &mut g_enc)?;
            ds.add_assign(&from_enc)?;
            let mut upstream = Matrix::zeros(ds.rows(), NUM_SYMPTOMS * m);
            for r in 0..ds.rows() {
                for j in 0..NUM_SYMPTOMS {
                    let v = ds.get(r, j) / m as f64;
                    for k in 0..m {
                        upstream.set(r, j * m + k, v);
                    }
                }
            }
            let mut g_sym = params.symptom.matrix().zeros_like();
            similarity_backward(&ex.tweets, &params.symptom, &upstream, &mut g_sym)?;
            Ok((g_enc, g_sym))
        })
        .collect::<Result<_>>()?;
    for (g_enc, g_sym) in &per_user {
        for (acc, g) in grads.encoder.tensors_mut().into_iter().zip(g_enc.tensors()) {
            acc.add_assign(g)?;
        }
        grads.symptom.matrix_mut().add_assign(g_sym)?;
    }

    let total = crate::head::total_loss(symp, user.value, bce);
    check_finite("L", total)?;
    if !grads.is_finite() {
        return Err(Error::Divergence { term: "gradient".into() });
    }
    Ok((
        BatchLoss {
            total,
            symp,
            user: user.value,
            bce,
            converged: conv_symp && user.converged,
        },
        grads,
    ))
}

/// Solver settings for finite-difference checks: tight enough that the
/// envelope gradient is exact to ~1e-10, with an iteration cap so nearly
/// degenerate plans (whose slow mode barely moves the value) stay cheap.
/// A capped solve is still a smooth function of the inputs.
pub fn gradcheck_sinkhorn(base: &SinkhornConfig) -> SinkhornConfig {
    SinkhornConfig {
        max_iters: 20_000,
        convergence_tol: 1e-12,
        ..*base
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub report: crate::numeric::GradCheckReport,
}

/// Central-difference check of [`batch_loss`] gradients for each parameter
/// group, assignments frozen at `params`.
pub fn grad_check_groups(
    params: &ModelParams,
    batch: &[&Example],
    loss: &LossConfig,
    sinkhorn: &SinkhornConfig,
    tol: f64,
) -> Result<Vec<GroupCheck>> {
    let frozen = batch_assignments(params, batch)?;
    let (_, grads) = batch_loss(params, batch, loss, sinkhorn, Some(&frozen))?;
    let flat = params.flatten();
    let g = grads.flatten();
    let mut out = Vec::with_capacity(ParamGroup::ALL.len());
    for group in ParamGroup::ALL {
        let range = params.group_range(group);
        let report = crate::numeric::grad_check(
            |x| {
                let mut full = flat.clone();
                full[range.clone()].copy_from_slice(x);
                let mut p = params.clone();
                p.assign_flat(&full);
                batch_loss(&p, batch, loss, sinkhorn, Some(&frozen))
                    .map(|(l, _)| l.total)
                    .unwrap_or(f64::NAN)
            },
            &g[range.clone()],
            &flat[range.clone()],
            tol,
        )?;
        out.push(GroupCheck { group, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
