//! Per-class user prototypes and the supervised user-level losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    axpy, cosine_backward, cosine_similarity, softmax_entropy_grad, sq_dist, triplet_loss_grad, Matrix,
};
use crate::ot::{sinkhorn_with_grads, GradSides, PointCloud, SinkhornConfig};
use crate::params::Params;
use crate::rng::Rng;
use crate::symptom::{argmax_first, SymptomLossWeights};

pub const NUM_CLASSES: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["non-depressed", "depressed"];

/// Initialization scale of user prototypes.
pub const USER_PROTO_INIT_STD: f64 = 0.02;

/// `2k x D` prototypes, row `c * k + i` is prototype `i` of class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPrototypeSpace {
    prototypes: Matrix,
    k: usize,
}

impl Params for UserPrototypeSpace {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.prototypes]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.prototypes]
    }
}

impl UserPrototypeSpace {
    pub fn from_matrix(prototypes: Matrix, k: usize) -> Result<Self> {
        if k == 0 || prototypes.rows() != NUM_CLASSES * k || prototypes.cols() == 0 {
            return Err(Error::shape(format!(
                "user prototypes {:?} for k={k}",
                prototypes.shape()
            )));
        }
        if !prototypes.is_finite() {
            return Err(Error::NonFinite("user prototypes".into()));
        }
        Ok(Self { prototypes, k })
    }

    pub fn k(&self) -> usize {
        self.k
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

    pub fn row_index(&self, class: usize, i: usize) -> usize {
        class * self.k + i
    }

    pub fn class_of(&self, row: usize) -> usize {
        row / self.k
    }

    pub fn prototype(&self, class: usize, i: usize) -> &[f64] {
        self.prototypes.row(self.row_index(class, i))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.prototypes
    }

    pub fn class_block(&self, class: usize) -> Matrix {
        let idx: Vec<usize> = (0..self.k).map(|i| self.row_index(class, i)).collect();
        self.prototypes.select_rows(&idx)
    }
}

/// `2k x dim` i.i.d. `N(0, 0.02^2)` entries.
pub fn init_user_prototypes(k: usize, dim: usize, seed: u64) -> Result<UserPrototypeSpace> {
    if k == 0 || dim == 0 {
        return Err(Error::invalid("user prototypes need k >= 1 and dim >= 1"));
    }
    let mut rng = Rng::new(seed);
    let data = (0..NUM_CLASSES * k * dim)
        .map(|_| USER_PROTO_INIT_STD * rng.normal())
        .collect();
    UserPrototypeSpace::from_matrix(Matrix::from_vec(NUM_CLASSES * k, dim, data)?, k)
}

/// Cosine similarity to every prototype, class-0 block first.
pub fn user_prototype_similarities(e: &[f64], space: &UserPrototypeSpace) -> Result<Vec<f64>> {
    space
        .matrix()
        .iter_rows()
        .map(|p| cosine_similarity(e, p))
        .collect()
}

/// Back-propagates `upstream` (one entry per prototype) through
/// [`user_prototype_similarities`].
pub fn user_similarity_backward(
    e: &[f64],
    space: &UserPrototypeSpace,
    upstream: &[f64],
    grad_e: &mut [f64],
    grad_protos: &mut Matrix,
) -> Result<()> {
    for (r, &u) in upstream.iter().enumerate() {
        if u != 0.0 {
            cosine_backward(e, space.matrix().row(r), u, Some(grad_e), Some(grad_protos.row_mut(r)))?;
        }
    }
    Ok(())
}

fn check_labels(embeddings: &Matrix, labels: &[usize], space: &UserPrototypeSpace) -> Result<()> {
    if embeddings.rows() == 0 {
        return Err(Error::invalid("user loss over an empty batch"));
    }
    if labels.len() != embeddings.rows() {
        return Err(Error::shape("one label per user embedding"));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::invalid(format!("label {l} is not 0 or 1")));
    }
    if embeddings.cols() != space.dim() {
        return Err(Error::shape(format!(
            "user embeddings have dim {}, prototypes {}",
            embeddings.cols(),
            space.dim()
        )));
    }
    Ok(())
}

/// Prototype choices made once per step from the ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UserAssignments {
    /// Same-class prototype row nearest in squared Euclidean distance.
    pub nearest: Vec<usize>,
    /// Most cosine-similar same-class prototype row.
    pub positive: Vec<usize>,
    /// Most cosine-similar other-class prototype row.
    pub negative: Vec<usize>,
}

impl UserAssignments {
    pub fn compute(embeddings: &Matrix, labels: &[usize], space: &UserPrototypeSpace) -> Result<Self> {
        check_labels(embeddings, labels, space)?;
        let k = space.k();
        let mut out = Self {
            nearest: Vec::new(),
            positive: Vec::new(),
            negative: Vec::new(),
        };
        for (e, &y) in embeddings.iter_rows().zip(labels) {
            let own: Vec<usize> = (0..k).map(|i| space.row_index(y, i)).collect();
            let other: Vec<usize> = (0..k).map(|i| space.row_index(1 - y, i)).collect();
            let d = own.iter().map(|&r| -sq_dist(e, space.matrix().row(r)));
            out.nearest.push(own[argmax_first(d)]);
            let sims = user_prototype_similarities(e, space).unwrap_or_else(|_| vec![0.0; space.len()]);
            out.positive.push(own[argmax_first(own.iter().map(|&r| sims[r]))]);
            out.negative.push(other[argmax_first(other.iter().map(|&r| sims[r]))]);
        }
        Ok(out)
    }
}

/// A user-level loss term with gradients to embeddings and prototypes.
#[derive(Debug, Clone)]
pub struct UserTerm {
    pub value: f64,
    pub grad_embeddings: Matrix,
    pub grad_prototypes: Matrix,
    pub converged: bool,
}

impl UserTerm {
    fn zero(embeddings: &Matrix, space: &UserPrototypeSpace) -> Self {
        Self {
            value: 0.0,
            grad_embeddings: embeddings.zeros_like(),
            grad_prototypes: space.matrix().zeros_like(),
            converged: true,
        }
    }

    fn add_scaled(&mut self, scale: f64, other: &UserTerm) {
        self.value += scale * other.value;
        axpy(scale, other.grad_embeddings.as_slice(), self.grad_embeddings.as_mut_slice());
        axpy(scale, other.grad_prototypes.as_slice(), self.grad_prototypes.as_mut_slice());
        self.converged &= other.converged;
    }
}

/// Mean over non-empty classes of the Sinkhorn cost between the class's
/// user embeddings and its prototypes.
pub fn user_sinkhorn_loss(
    embeddings: &Matrix,
    labels: &[usize],
    space: &UserPrototypeSpace,
    cfg: &SinkhornConfig,
) -> Result<UserTerm> {
    check_labels(embeddings, labels, space)?;
    let mut out = UserTerm::zero(embeddings, space);
    let members: Vec<Vec<usize>> = (0..NUM_CLASSES)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let active = members.iter().filter(|m| !m.is_empty()).count();
    if active < NUM_CLASSES {
        log::warn!("batch contains a single class; user sinkhorn term uses that class only");
    }
    let scale = 1.0 / active as f64;
    for (c, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let cloud = PointCloud::uniform(embeddings.select_rows(idx))?;
        let protos = PointCloud::uniform(space.class_block(c))?;
        let r = sinkhorn_with_grads(&cloud, &protos, cfg, GradSides::BOTH)?;
        out.value += scale * r.output.value;
        out.converged &= r.output.converged;
        for (row, &i) in idx.iter().enumerate() {
            axpy(scale, r.grad_a.row(row), out.grad_embeddings.row_mut(i));
        }
        for i in 0..space.k() {
            axpy(scale, r.grad_b.row(i), out.grad_prototypes.row_mut(space.row_index(c, i)));
        }
    }
    Ok(out)
}

/// Mean squared distance of each embedding to its frozen same-class prototype.
pub fn user_mse_loss(embeddings: &Matrix, space: &UserPrototypeSpace, nearest: &[usize]) -> Result<UserTerm> {
    let n = embeddings.rows();
    if n == 0 || nearest.len() != n {
        return Err(Error::shape("one nearest prototype per user"));
    }
    let mut out = UserTerm::zero(embeddings, space);
    let scale = 2.0 / n as f64;
    for (i, (e, &r)) in embeddings.iter_rows().zip(nearest).enumerate() {
        let p = space.matrix().row(r);
        out.value += sq_dist(e, p) / n as f64;
        for j in 0..e.len() {
            let diff = scale * (e[j] - p[j]);
            out.grad_embeddings.row_mut(i)[j] += diff;
            out.grad_prototypes.row_mut(r)[j] -= diff;
        }
    }
    Ok(out)
}

/// Mean triplet hinge: anchor = user embedding, positive / negative from
/// the frozen assignments.
pub fn user_triplet_loss(
    embeddings: &Matrix,
    space: &UserPrototypeSpace,
    asg: &UserAssignments,
    margin: f64,
) -> Result<UserTerm> {
    let n = embeddings.rows();
    if n == 0 || asg.positive.len() != n {
        return Err(Error::shape("one triplet per user"));
    }
    let mut out = UserTerm::zero(embeddings, space);
    let scale = 1.0 / n as f64;
    for (i, e) in embeddings.iter_rows().enumerate() {
        let (pos, neg) = (asg.positive[i], asg.negative[i]);
        let (v, g) = triplet_loss_grad(e, space.matrix().row(pos), space.matrix().row(neg), margin);
        out.value += scale * v;
        if v > 0.0 {
            axpy(scale, &g.anchor, out.grad_embeddings.row_mut(i));
            axpy(scale, &g.positive, out.grad_prototypes.row_mut(pos));
            axpy(scale, &g.negative, out.grad_prototypes.row_mut(neg));
        }
    }
    Ok(out)
}

/// Mean entropy of the softmax over each user's per-class mean prototype
/// similarity.
pub fn user_entropy_loss(embeddings: &Matrix, space: &UserPrototypeSpace) -> Result<UserTerm> {
    let n = embeddings.rows();
    if n == 0 {
        return Err(Error::invalid("entropy over an empty batch"));
    }
    let k = space.k();
    let mut out = UserTerm::zero(embeddings, space);
    for (i, e) in embeddings.iter_rows().enumerate() {
        let sims = user_prototype_similarities(e, space)?;
        let logits: Vec<f64> = (0..NUM_CLASSES)
            .map(|c| sims[c * k..(c + 1) * k].iter().sum::<f64>() / k as f64)
            .collect();
        let (h, dh) = softmax_entropy_grad(&logits);
        out.value += h / n as f64;
        let upstream: Vec<f64> = (0..space.len())
            .map(|r| dh[space.class_of(r)] / (k * n) as f64)
            .collect();
        let mut ge = vec![0.0; e.len()];
        user_similarity_backward(e, space, &upstream, &mut ge, &mut out.grad_prototypes)?;
        axpy(1.0, &ge, out.grad_embeddings.row_mut(i));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct UserLossOutput {
    pub total: f64,
    pub sinkhorn: f64,
    pub mse: f64,
    pub grad_embeddings: Matrix,
    pub grad_prototypes: Matrix,
    pub converged: bool,
}

/// `lambda1 * sinkhorn + lambda2 * mse` with classes taken from the labels.
pub fn user_loss_frozen(
    embeddings: &Matrix,
    labels: &[usize],
    space: &UserPrototypeSpace,
    asg: &UserAssignments,
    weights: &SymptomLossWeights,
    cfg: &SinkhornConfig,
) -> Result<UserLossOutput> {
    weights.validate()?;
    check_labels(embeddings, labels, space)?;
    let mut acc = UserTerm::zero(embeddings, space);
    let (mut sinkhorn, mut mse) = (0.0, 0.0);
    if weights.lambda1 > 0.0 {
        let t = user_sinkhorn_loss(embeddings, labels, space, cfg)?;
        sinkhorn = t.value;
        acc.add_scaled(weights.lambda1, &t);
    }
    if weights.lambda2 > 0.0 {
        let t = user_mse_loss(embeddings, space, &asg.nearest)?;
        mse = t.value;
        acc.add_scaled(weights.lambda2, &t);
    }
    Ok(UserLossOutput {
        total: acc.value,
        sinkhorn,
        mse,
        grad_embeddings: acc.grad_embeddings,
        grad_prototypes: acc.grad_prototypes,
        converged: acc.converged,
    })
}

pub fn user_loss(
    embeddings: &Matrix,
    labels: &[usize],
    space: &UserPrototypeSpace,
    weights: &SymptomLossWeights,
    cfg: &SinkhornConfig,
) -> Result<UserLossOutput> {
    let asg = UserAssignments::compute(embeddings, labels, space)?;
    user_loss_frozen(embeddings, labels, space, &asg, weights, cfg)
}
