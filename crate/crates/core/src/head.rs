//! Transparent linear head over symptom scores and user-prototype
//! similarities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, bce_loss, softmax, softmax_bce_logit_grad, Matrix};
use crate::params::Params;
use crate::symptom::{SymptomId, NUM_SYMPTOMS};
use crate::user_proto::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `2 x (9 + 2k)`; the first 9 columns weigh symptoms S1..S9.
    pub weight: Matrix,
    /// `1 x 2`
    pub bias: Matrix,
}

impl Params for HeadParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl HeadParams {
    pub fn zeros(k: usize) -> Self {
        Self {
            weight: Matrix::zeros(NUM_CLASSES, NUM_SYMPTOMS + NUM_CLASSES * k),
            bias: Matrix::zeros(1, NUM_CLASSES),
        }
    }

    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != NUM_CLASSES || bias.len() != NUM_CLASSES {
            return Err(Error::shape("head needs 2 output rows and 2 biases"));
        }
        if weight.cols() < NUM_SYMPTOMS || (weight.cols() - NUM_SYMPTOMS) % NUM_CLASSES != 0 {
            return Err(Error::shape(format!("head width {} is not 9 + 2k", weight.cols())));
        }
        Ok(Self {
            weight,
            bias: Matrix::from_vec(1, NUM_CLASSES, bias)?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn k(&self) -> usize {
        (self.feature_dim() - NUM_SYMPTOMS) / NUM_CLASSES
    }
}

/// 9 symptom scores followed by 2k user-prototype similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserFeatureVector(pub Vec<f64>);

impl UserFeatureVector {
    pub fn symptom_scores(&self) -> &[f64] {
        &self.0[..NUM_SYMPTOMS]
    }

    pub fn prototype_sims(&self) -> &[f64] {
        &self.0[NUM_SYMPTOMS..]
    }
}

/// Column means of the `n x 9` symptom similarities, then `proto_sims`.
pub fn build_features(sympsims: &Matrix, proto_sims: &[f64]) -> Result<UserFeatureVector> {
    if sympsims.rows() == 0 {
        return Err(Error::invalid("features of a user with no tweets"));
    }
    if sympsims.cols() != NUM_SYMPTOMS {
        return Err(Error::shape(format!("symptom similarities have {} columns", sympsims.cols())));
    }
    let mut f = sympsims.column_means()?;
    f.extend_from_slice(proto_sims);
    Ok(UserFeatureVector(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; NUM_CLASSES],
    pub label: usize,
}

pub fn logits(features: &UserFeatureVector, params: &HeadParams) -> Result<Vec<f64>> {
    if features.0.len() != params.feature_dim() {
        return Err(Error::shape(format!(
            "{} features for a head of width {}",
            features.0.len(),
            params.feature_dim()
        )));
    }
    let mut z = params.weight.matvec(&features.0)?;
    axpy(1.0, params.bias.as_slice(), &mut z);
    Ok(z)
}

/// `softmax(W f + b)`; equal logits resolve to class 0.
pub fn classify(features: &UserFeatureVector, params: &HeadParams) -> Result<Prediction> {
    let z = logits(features, params)?;
    let p = softmax(&z);
    Ok(Prediction {
        probs: [p[0], p[1]],
        label: usize::from(z[1] > z[0]),
    })
}

/// Cross-entropy of one prediction, with `scale * dL/dW` and `scale * dL/db`
/// added to `grads`. Returns `scale * dL/df`.
pub fn bce_backward(
    features: &UserFeatureVector,
    params: &HeadParams,
    prediction: &Prediction,
    label: usize,
    scale: f64,
    grads: &mut HeadParams,
) -> Result<(f64, Vec<f64>)> {
    let loss = bce_loss(&prediction.probs, label)?;
    let mut dz = softmax_bce_logit_grad(&prediction.probs, label);
    dz.iter_mut().for_each(|g| *g *= scale);
    for (c, g) in dz.iter().enumerate() {
        axpy(*g, &features.0, grads.weight.row_mut(c));
    }
    axpy(1.0, &dz, grads.bias.as_mut_slice());
    Ok((loss, params.weight.t_matvec(&dz)?))
}

/// The full objective is the unweighted sum of its three parts.
pub fn total_loss(l_symp: f64, l_user: f64, l_bce: f64) -> f64 {
    l_symp + l_user + l_bce
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomWeight {
    pub symptom: SymptomId,
    pub code: String,
    pub name: String,
    pub non_depressed: f64,
    pub depressed: f64,
    pub total: f64,
}

/// Absolute head weights of the 9 symptom columns, per class and summed,
/// in symptom order.
pub fn symptom_weight_report(params: &HeadParams) -> Vec<SymptomWeight> {
    SymptomId::all()
        .map(|s| {
            let a = params.weight.get(0, s.index()).abs();
            let b = params.weight.get(1, s.index()).abs();
            SymptomWeight {
                symptom: s,
                code: s.code(),
                name: s.name().to_string(),
                non_depressed: a,
                depressed: b,
                total: a + b,
            }
        })
        .collect()
}

/// Report entries sorted by summed weight, largest first (stable).
pub fn ranked_symptom_weights(params: &HeadParams) -> Vec<SymptomWeight> {
    let mut r = symptom_weight_report(params);
    r.sort_by(|x, y| y.total.total_cmp(&x.total));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn features() {
        let s = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]], 9).unwrap();
        let f = build_features(&s, &[0.5, -0.5]).unwrap();
        assert_eq!(f.symptom_scores(), s.row(0));
        assert_eq!(f.prototype_sims(), &[0.5, -0.5]);

        let c = Matrix::from_vec(4, 9, vec![0.3; 36]).unwrap();
        assert!(build_features(&c, &[]).unwrap().0.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(build_features(&Matrix::zeros(0, 9), &[]).is_err());

        let mut rng = Rng::new(5);
        let r = Matrix::from_vec(6, 9, (0..54).map(|_| rng.uniform_range(-1., 1.)).collect()).unwrap();
        let f = build_features(&r, &[]).unwrap();
        for j in 0..9 {
            let mut acc = 0.0;
            for i in 0..6 {
                acc += r.get(i, j);
            }
            assert!((f.0[j] - acc / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_examples() {
        let f = UserFeatureVector(vec![0.2; 13]);
        let zero = HeadParams::zeros(2);
        let p = classify(&f, &zero).unwrap();
        assert_eq!((p.probs, p.label), ([0.5, 0.5], 0));

        let mut biased = HeadParams::zeros(2);
        biased.bias.set(0, 1, 10.0);
        assert_eq!(classify(&f, &biased).unwrap().label, 1);

        // one-feature head via the raw struct
        let h = HeadParams {
            weight: Matrix::from_rows(&[[0.0], [1.0]], 1).unwrap(),
            bias: Matrix::zeros(1, 2),
        };
        let p = classify(&UserFeatureVector(vec![2.0]), &h).unwrap();
        let e2 = 2f64.exp();
        assert!((p.probs[0] - 1.0 / (1.0 + e2)).abs() < 1e-15);
        assert!((p.probs[1] - e2 / (1.0 + e2)).abs() < 1e-15);
        assert_eq!(p.label, 1);

        assert!(classify(&UserFeatureVector(vec![0.0; 12]), &zero).is_err());
        assert!(HeadParams::new(Matrix::zeros(2, 10), vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.0), 0.0);
        assert!((total_loss(0.1, 0.2, 0.3) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_near_zero_loss() {
        let mut h = HeadParams::zeros(1);
        h.bias.set(0, 1, 40.0);
        let f = UserFeatureVector(vec![0.0; 11]);
        let p = classify(&f, &h).unwrap();
        let (loss, _) = bce_backward(&f, &h, &p, 1, 1.0, &mut HeadParams::zeros(1)).unwrap();
        assert!(total_loss(0.0, 0.0, loss) < 1e-12);
    }

    #[test]
    fn weight_report() {
        let zero = symptom_weight_report(&HeadParams::zeros(3));
        assert_eq!(zero.len(), 9);
        assert!(zero.iter().all(|w| w.total == 0.0));

        let mut h = HeadParams::zeros(3);
        for j in 0..9 {
            h.weight.set(0, j, 0.1);
            h.weight.set(1, j, -0.1);
        }
        h.weight.set(1, 3, -2.0);
        h.weight.set(0, 12, 99.0);
        let ranked = ranked_symptom_weights(&h);
        assert_eq!(ranked[0].name, "Fatigue or Low Energy");
        assert_eq!(ranked[0].code, "S4");
        assert!((ranked[0].depressed - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bce_gradient() {
        let mut rng = Rng::new(11);
        let k = 2;
        let mut h = HeadParams::zeros(k);
        h.weight.as_mut_slice().iter_mut().for_each(|w| *w = rng.normal());
        h.bias.as_mut_slice().iter_mut().for_each(|w| *w = rng.normal());
        let f = UserFeatureVector((0..13).map(|_| rng.uniform_range(-1., 1.)).collect());
        for label in 0..2 {
            let p = classify(&f, &h).unwrap();
            let mut g = HeadParams::zeros(k);
            let (_, df) = bce_backward(&f, &h, &p, label, 1.0, &mut g).unwrap();
            let loss = |h: &HeadParams, f: &UserFeatureVector| bce_loss(&classify(f, h).unwrap().probs, label).unwrap();
            let r = grad_check(
                |x| {
                    let mut hh = h.clone();
                    hh.assign_flat(x);
                    loss(&hh, &f)
                },
                &g.flatten(),
                &h.flatten(),
                1e-6,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
            let r = grad_check(|x| loss(&h, &UserFeatureVector(x.to_vec())), &df, &f.0, 1e-6).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    proptest! {
        #[test]
        fn probs_and_class_swap(w in proptest::collection::vec(-3.0f64..3.0, 22), f in proptest::collection::vec(-1.0f64..1.0, 11)) {
            let h = HeadParams::new(Matrix::from_vec(2, 11, w[..22].to_vec()).unwrap(), vec![w[0], w[1]]).unwrap();
            let f = UserFeatureVector(f);
            let p = classify(&f, &h).unwrap();
            prop_assert!((p.probs[0] + p.probs[1] - 1.0).abs() < 1e-12);
            prop_assert!(p.label <= 1);

            let mut swapped = h.clone();
            for j in 0..11 {
                swapped.weight.set(0, j, h.weight.get(1, j));
                swapped.weight.set(1, j, h.weight.get(0, j));
            }
            swapped.bias = Matrix::from_vec(1, 2, vec![h.bias.get(0, 1), h.bias.get(0, 0)]).unwrap();
            let q = classify(&f, &swapped).unwrap();
            prop_assert!((p.probs[0] - q.probs[1]).abs() < 1e-12);
            prop_assert!((p.probs[1] - q.probs[0]).abs() < 1e-12);
        }

        #[test]
        fn report_ignores_prototype_columns(extra in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let mut h = HeadParams::zeros(1);
            for j in 0..9 {
                h.weight.set(1, j, j as f64);
            }
            let base = symptom_weight_report(&h);
            for (i, v) in extra.iter().enumerate() {
                h.weight.set(i / 2, 9 + i % 2, *v);
            }
            h.bias.set(0, 0, extra[0]);
            prop_assert_eq!(base, symptom_weight_report(&h));
        }
    }
}
