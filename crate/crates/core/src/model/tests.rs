use super::*;
use crate::encoder::EncoderVariant;
use crate::numeric::normalize;
use crate::symptom::{group_by_symptom, symptom_sinkhorn_loss, Provenance};

fn tight() -> SinkhornConfig {
    gradcheck_sinkhorn(&SinkhornConfig::default())
}

fn unit_rows(rng: &mut Rng, rows: usize, d: usize) -> Matrix {
    let mut m = Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.normal()).collect()).unwrap();
    for r in 0..rows {
        normalize(m.row_mut(r)).unwrap();
    }
    m
}

fn random_state(seed: u64, d: usize, variant: EncoderVariant) -> ModelParams {
    let mut rng = Rng::new(seed);
    let base = BasePrototypeSet::new(unit_rows(&mut rng, 9, d), Provenance::Lexicon).unwrap();
    let enc = EncoderConfig {
        variant,
        num_attention_layers: 1,
        hidden_dim: 6,
        output_dim: None,
        seed,
    };
    let mut p = ModelParams::init(&base, 3, 0.1, 2, &enc, seed).unwrap();
    // user prototypes at init scale are tiny; move them to the scale of the
    // embeddings so cosines are informative, and give the head nonzero weights
    let scale = 1.0 / (p.user.dim() as f64).sqrt();
    p.user.matrix_mut().as_mut_slice().iter_mut().for_each(|v| *v = scale * rng.normal());
    p.head.weight.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal());
    p.head.bias.as_mut_slice().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
    p
}

fn random_batch(seed: u64, d: usize, users: usize) -> Vec<Example> {
    let mut rng = Rng::new(seed ^ 0x5eed);
    (0..users)
        .map(|u| {
            let n = 1 + rng.below(6);
            Example {
                tweets: unit_rows(&mut rng, n, d),
                label: u % 2,
            }
        })
        .collect()
}

#[test]
fn init_is_deterministic_and_consistent() {
    let a = random_state(3, 5, EncoderVariant::MeanPoolFfn);
    let b = random_state(3, 5, EncoderVariant::MeanPoolFfn);
    assert_eq!(a, b);
    a.validate().unwrap();
    assert_eq!(a.head.weight.shape(), (2, 13));
    assert_eq!(a.user.matrix().shape(), (4, 5));
    let total: usize = ParamGroup::ALL.iter().map(|g| a.group_range(*g).len()).sum();
    assert_eq!(total, a.num_params());
    assert_eq!(a.group_range(ParamGroup::SymptomPrototypes), 0..27 * 5);

    let fresh = ModelParams::init(
        &BasePrototypeSet::new(unit_rows(&mut Rng::new(0), 9, 4), Provenance::Lexicon).unwrap(),
        7,
        0.025,
        3,
        &EncoderConfig::default(),
        1,
    )
    .unwrap();
    assert!(fresh.head.weight.as_slice().iter().all(|&w| w == 0.0));
    let x = unit_rows(&mut Rng::new(2), 3, 4);
    assert_eq!(predict(&fresh, &x).unwrap().probs, [0.5, 0.5]);
}

#[test]
fn variant_parsing() {
    for v in LossVariant::ALL {
        assert_eq!(v.as_str().parse::<LossVariant>().unwrap(), v);
    }
    assert!("sinkhorn".parse::<LossVariant>().is_err());
    let cfg = LossConfig {
        variant: LossVariant::SinkhornOnly,
        ..Default::default()
    };
    assert_eq!(cfg.symptom_level().lambda2, 0.0);
    assert_eq!(cfg.user_level().lambda2, 0.0);
}

#[test]
fn sinkhorn_only_symptom_term_is_the_sinkhorn_loss() {
    let params = random_state(4, 6, EncoderVariant::MeanPoolFfn);
    let data = random_batch(4, 6, 4);
    let batch: Vec<&Example> = data.iter().collect();
    let forwards = forward_batch(&params, &batch).unwrap();
    let (tweets, sims) = pooled(&forwards, &batch, 3).unwrap();
    let asg = SymptomAssignments::compute(&sims);
    let cfg = LossConfig {
        variant: LossVariant::SinkhornOnly,
        ..Default::default()
    };
    let (v, g, _) = symptom_term(&params, &tweets, &sims, &asg, &cfg, &SinkhornConfig::default()).unwrap();
    let groups = group_by_symptom(&tweets, &asg.labels).unwrap();
    let direct = symptom_sinkhorn_loss(&groups, &params.symptom, &SinkhornConfig::default()).unwrap();
    assert_eq!(v, direct.value);
    assert_eq!(g, direct.grad);
}

#[test]
fn triplet_variant_on_prototypes() {
    let mut rng = Rng::new(5);
    let d = 12;
    // orthonormal base so every prototype is its own nearest neighbour
    let mut base = Matrix::zeros(9, d);
    for j in 0..9 {
        base.set(j, j, 1.0);
    }
    let base = BasePrototypeSet::new(base, Provenance::Lexicon).unwrap();
    let params = ModelParams::init(&base, 1, 0.0, 1, &EncoderConfig::default(), 0).unwrap();
    let tweets = params.symptom.matrix().select_rows(&[0, 3, 5]);
    let asg = SymptomAssignments::compute(&symptom_similarities(&tweets, &params.symptom).unwrap());
    let sims = symptom_similarities(&tweets, &params.symptom).unwrap();
    let space = &params.symptom;
    let margin = 0.5; // distances between orthonormal prototypes are 2
    assert_eq!(symptom_triplet_loss(&tweets, space, &asg, margin).unwrap().value, 0.0);
    assert_eq!(symptom_mse_loss_frozen(&tweets, &asg.nearest, space).unwrap().value, 0.0);
    let h = symptom_entropy_loss(&tweets, space, &sims).unwrap().value;
    assert!(h > 0.0 && h < (9f64).ln());
    let _ = rng.normal();
}

#[test]
fn losses_finite_for_all_variants() {
    for variant in LossVariant::ALL {
        let params = random_state(6, 8, EncoderVariant::SelfAttention);
        let data = random_batch(6, 8, 5);
        let batch: Vec<&Example> = data.iter().collect();
        let cfg = LossConfig { variant, ..Default::default() };
        let (l, g) = batch_loss(&params, &batch, &cfg, &SinkhornConfig::default(), None).unwrap();
        assert!(l.total.is_finite() && g.is_finite(), "{variant}");
        assert!((l.total - (l.symp + l.user + l.bce)).abs() < 1e-12);
    }
}

#[test]
fn gradients_pass_check_for_every_variant_and_group() {
    for (seed, variant) in LossVariant::ALL.into_iter().enumerate() {
        for enc in [EncoderVariant::MeanPoolFfn, EncoderVariant::SelfAttention] {
            let params = random_state(seed as u64, 6, enc);
            let data = random_batch(seed as u64, 6, 4);
            let batch: Vec<&Example> = data.iter().collect();
            let cfg = LossConfig { variant, ..Default::default() };
            for c in grad_check_groups(&params, &batch, &cfg, &tight(), 1e-3).unwrap() {
                assert!(c.report.passed, "{variant} {enc:?} {:?}: {:?}", c.group, c.report);
            }
        }
    }
}

#[test]
fn gradient_is_sum_of_components() {
    // zeroing the head isolates L_symp + L_user; the BCE part alone is the
    // remainder
    let params = random_state(9, 6, EncoderVariant::MeanPoolFfn);
    let data = random_batch(9, 6, 4);
    let batch: Vec<&Example> = data.iter().collect();
    let cfg = LossConfig::default();
    let frozen = batch_assignments(&params, &batch).unwrap();
    let (full, g_full) = batch_loss(&params, &batch, &cfg, &tight(), Some(&frozen)).unwrap();
    let no_proto = LossConfig {
        symptom_weights: SymptomLossWeights { lambda1: 0.0, lambda2: 0.0 },
        ..cfg
    };
    let (bce_only, g_bce) = batch_loss(&params, &batch, &no_proto, &tight(), Some(&frozen)).unwrap();
    assert_eq!(bce_only.symp + bce_only.user, 0.0);
    assert!((full.bce - bce_only.bce).abs() < 1e-15);
    // head gradient comes from BCE only
    assert_eq!(g_full.head, g_bce.head);
}

#[test]
fn divergence_names_the_term() {
    let mut params = random_state(2, 6, EncoderVariant::MeanPoolFfn);
    params.encoder.b2.as_mut_slice().iter_mut().for_each(|v| *v = 1e300);
    let data = random_batch(2, 6, 3);
    let batch: Vec<&Example> = data.iter().collect();
    let err = batch_loss(&params, &batch, &LossConfig::default(), &SinkhornConfig::default(), None).unwrap_err();
    match err {
        Error::Divergence { term } => assert!(term.starts_with("L_") || term.contains("embedding"), "{term}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn rejects_mismatched_dims() {
    let params = random_state(1, 6, EncoderVariant::MeanPoolFfn);
    let x = unit_rows(&mut Rng::new(1), 2, 5);
    assert!(matches!(predict(&params, &x), Err(Error::Incompatible(_))));
    let batch: Vec<&Example> = Vec::new();
    assert!(batch_loss(&params, &batch, &LossConfig::default(), &tight(), None).is_err());
}

#[test]
fn gradient_check_at_d16() {
    // d = 16, m = 3, k = 2 with up to 12 tweets per user
    let params = random_state(21, 16, EncoderVariant::MeanPoolFfn);
    let mut data = random_batch(21, 16, 4);
    data[0].tweets = unit_rows(&mut Rng::new(1), 12, 16);
    let batch: Vec<&Example> = data.iter().collect();
    for c in grad_check_groups(&params, &batch, &LossConfig::default(), &tight(), 1e-3).unwrap() {
        assert!(c.report.passed, "{:?}: {:?}", c.group, c.report);
    }
}
