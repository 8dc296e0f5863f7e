//! Dense linear algebra, similarity, elementary losses and the
//! finite-difference gradient check.

mod gradcheck;
mod loss;
mod matrix;

pub use gradcheck::{
    grad_check, numeric_gradient, relative_error, GradCheckReport, FD_STEP, REL_ERROR_FLOOR,
};
pub use loss::{
    bce_loss, cosine_backward, cosine_similarity, entropy, entropy_loss, mse_pairs, softmax,
    softmax_bce_logit_grad, softmax_entropy_grad, triplet_loss, triplet_loss_grad, TripletGrads,
    PROB_FLOOR,
};
pub use matrix::{axpy, dot, mean_rows, norm, normalize, sq_dist, Matrix};
