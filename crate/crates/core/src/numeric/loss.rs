use crate::error::{Error, Result};

use super::matrix::{axpy, dot, norm, sq_dist, Matrix};

/// Probability floor applied before taking logs in [`bce_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("vector dims {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Back-propagates `upstream * d cos(a, b)` into the optional gradient
/// buffers. Uses the unclamped cosine, which equals the clamped one for
/// all but rounding-level inputs.
pub fn cosine_backward(
    a: &[f64],
    b: &[f64],
    upstream: f64,
    grad_a: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) -> Result<()> {
    check_dims(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let cos = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    // d cos / da = b / (|a||b|) - cos * a / |a|^2
    if let Some(g) = grad_a {
        axpy(upstream * inv, b, g);
        axpy(-upstream * cos / (na * na), a, g);
    }
    if let Some(g) = grad_b {
        axpy(upstream * inv, a, g);
        axpy(-upstream * cos / (nb * nb), b, g);
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) {
        return Err(Error::invalid(format!("{what}: entries must be finite and non-negative")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{what}: sums to {sum}, expected 1")));
    }
    Ok(())
}

/// `-ln(probs[label])` for a two-class distribution, floored at [`PROB_FLOOR`].
pub fn bce_loss(probs: &[f64], label: usize) -> Result<f64> {
    if probs.len() != 2 {
        return Err(Error::invalid(format!("expected 2 class probabilities, got {}", probs.len())));
    }
    if label > 1 {
        return Err(Error::invalid(format!("label {label} is not 0 or 1")));
    }
    check_distribution(probs, "probabilities")?;
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// Gradient of `bce_loss(softmax(logits), label)` with respect to the
/// logits. Zero once the floor is active, since the loss is then constant.
pub fn softmax_bce_logit_grad(probs: &[f64], label: usize) -> Vec<f64> {
    if probs[label] <= PROB_FLOOR {
        return vec![0.0; probs.len()];
    }
    probs
        .iter()
        .enumerate()
        .map(|(c, p)| p - if c == label { 1.0 } else { 0.0 })
        .collect()
}

/// Mean over rows of the squared Euclidean distance between paired rows.
pub fn mse_pairs(inputs: &Matrix, targets: &Matrix) -> Result<f64> {
    inputs.ensure_same_shape(targets, "mse_pairs")?;
    if inputs.rows() == 0 {
        return Err(Error::invalid("mse_pairs over zero rows"));
    }
    let total: f64 = inputs
        .iter_rows()
        .zip(targets.iter_rows())
        .map(|(a, b)| sq_dist(a, b))
        .sum();
    Ok(total / inputs.rows() as f64)
}

/// Hinge triplet loss on squared Euclidean distances.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (sq_dist(anchor, positive) - sq_dist(anchor, negative) + margin).max(0.0)
}

pub struct TripletGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Value and gradients of [`triplet_loss`]. At the hinge the inactive
/// branch is taken.
pub fn triplet_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> (f64, TripletGrads) {
    let value = triplet_loss(anchor, positive, negative, margin);
    let d = anchor.len();
    let mut g = TripletGrads {
        anchor: vec![0.0; d],
        positive: vec![0.0; d],
        negative: vec![0.0; d],
    };
    if value > 0.0 {
        for i in 0..d {
            g.anchor[i] = 2.0 * (negative[i] - positive[i]);
            g.positive[i] = -2.0 * (anchor[i] - positive[i]);
            g.negative[i] = 2.0 * (anchor[i] - negative[i]);
        }
    }
    (value, g)
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Mean row entropy of a row-stochastic matrix.
pub fn entropy_loss(assignment_probs: &Matrix) -> Result<f64> {
    if assignment_probs.rows() == 0 {
        return Err(Error::invalid("entropy over zero rows"));
    }
    let mut total = 0.0;
    for (i, row) in assignment_probs.iter_rows().enumerate() {
        check_distribution(row, &format!("row {i}"))?;
        total += entropy(row);
    }
    Ok(total / assignment_probs.rows() as f64)
}

/// Entropy of `softmax(logits)` and its gradient with respect to the logits:
/// `dH/dz_j = -p_j (ln p_j + H)`.
pub fn softmax_entropy_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let h = entropy(&p);
    let grad = p
        .iter()
        .map(|&pj| if pj > 0.0 { -pj * (pj.ln() + h) } else { 0.0 })
        .collect();
    (h, grad)
}
