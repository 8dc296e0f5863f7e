//! User encoder: maps a user's tweet matrix, widened with per-tweet
//! symptom similarities, to a single user embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax, Matrix};
use crate::params::Params;
use crate::rng::Rng;
use crate::symptom::{SymptomSims, NUM_SYMPTOMS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// Per-tweet two-layer tanh network, then mean over tweets.
    MeanPoolFfn,
    /// Stacked single-head self-attention with residuals, mean pooling,
    /// then the two-layer network.
    SelfAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub num_attention_layers: usize,
    pub hidden_dim: usize,
    /// Defaults to the tweet embedding dimension.
    pub output_dim: Option<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::MeanPoolFfn,
            num_attention_layers: 2,
            hidden_dim: 64,
            output_dim: None,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.output_dim == Some(0) {
            return Err(Error::invalid("encoder dims must be >= 1"));
        }
        if self.variant == EncoderVariant::SelfAttention && self.num_attention_layers == 0 {
            return Err(Error::invalid("self-attention encoder needs >= 1 layer"));
        }
        Ok(())
    }

    pub fn output_dim_for(&self, embedding_dim: usize) -> usize {
        self.output_dim.unwrap_or(embedding_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

/// Row-vector convention: `h = tanh(x W1 + b1)`, `o = h W2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub variant: EncoderVariant,
    pub attention: Vec<AttentionLayer>,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Params for EncoderParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.attention {
            out.extend([&l.wq, &l.wk, &l.wv]);
        }
        out.extend([&self.w1, &self.b1, &self.w2, &self.b2]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.attention {
            out.extend([&mut l.wq, &mut l.wk, &mut l.wv]);
        }
        out.extend([&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]);
        out
    }
}

fn uniform_init(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl EncoderParams {
    /// Seeded initialization, uniform in `±1/sqrt(fan_in)`.
    pub fn init(cfg: &EncoderConfig, embedding_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let w = embedding_dim + NUM_SYMPTOMS;
        let (h, o) = (cfg.hidden_dim, cfg.output_dim_for(embedding_dim));
        let mut rng = Rng::new(cfg.seed);
        let layers = match cfg.variant {
            EncoderVariant::MeanPoolFfn => 0,
            EncoderVariant::SelfAttention => cfg.num_attention_layers,
        };
        let attention = (0..layers)
            .map(|_| AttentionLayer {
                wq: uniform_init(&mut rng, w, w, w),
                wk: uniform_init(&mut rng, w, w, w),
                wv: uniform_init(&mut rng, w, w, w),
            })
            .collect();
        Ok(Self {
            variant: cfg.variant,
            attention,
            w1: uniform_init(&mut rng, w, h, w),
            b1: uniform_init(&mut rng, 1, h, w),
            w2: uniform_init(&mut rng, h, o, h),
            b2: uniform_init(&mut rng, 1, o, h),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

/// `SympSims[i][j] = mean_k sim[i][j][k]`, an `n x 9` matrix.
pub fn compute_sympsims(sims: &SymptomSims) -> Matrix {
    crate::symptom::mean_symptom_sims(sims)
}

struct AttentionTrace {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
}

/// Intermediate values kept for the backward pass.
pub struct EncoderTrace {
    input: Matrix,
    layers: Vec<AttentionTrace>,
    /// mean-pool-ffn: `n x h` hidden rows; self-attention: `1 x h`.
    hidden: Matrix,
    /// self-attention: pooled attention output, `1 x w`.
    pooled: Option<Matrix>,
    output: Vec<f64>,
}

impl EncoderTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn dense_tanh(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut z = x.matmul(w)?;
    for i in 0..z.rows() {
        for (v, bias) in z.row_mut(i).iter_mut().zip(b.as_slice()) {
            *v = (*v + bias).tanh();
        }
    }
    Ok(z)
}

fn attention_forward(layer: &AttentionLayer, x: Matrix) -> Result<(Matrix, AttentionTrace)> {
    let q = x.matmul(&layer.wq)?;
    let k = x.matmul(&layer.wk)?;
    let v = x.matmul(&layer.wv)?;
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let mut scores = q.matmul_t(&k)?;
    scores.scale(scale);
    let mut attn = Matrix::zeros(scores.rows(), scores.cols());
    for i in 0..scores.rows() {
        attn.row_mut(i).copy_from_slice(&softmax(scores.row(i)));
    }
    let mut out = attn.matmul(&v)?;
    out.add_assign(&x)?;
    Ok((out, AttentionTrace { input: x, q, k, v, attn }))
}

/// Returns `d loss / d input` and accumulates weight gradients.
fn attention_backward(
    layer: &AttentionLayer,
    trace: &AttentionTrace,
    d_out: &Matrix,
    grads: &mut AttentionLayer,
) -> Result<Matrix> {
    let scale = 1.0 / (trace.input.cols() as f64).sqrt();
    let d_attn = d_out.matmul_t(&trace.v)?;
    let d_v = trace.attn.t_matmul(d_out)?;
    let n = trace.attn.rows();
    let mut d_scores = Matrix::zeros(n, n);
    for i in 0..n {
        let a = trace.attn.row(i);
        let da = d_attn.row(i);
        let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for j in 0..n {
            d_scores.set(i, j, scale * a[j] * (da[j] - inner));
        }
    }
    let d_q = d_scores.matmul(&trace.k)?;
    let d_k = d_scores.t_matmul(&trace.q)?;
    grads.wq.add_assign(&trace.input.t_matmul(&d_q)?)?;
    grads.wk.add_assign(&trace.input.t_matmul(&d_k)?)?;
    grads.wv.add_assign(&trace.input.t_matmul(&d_v)?)?;
    let mut d_in = d_out.clone();
    d_in.add_assign(&d_q.matmul_t(&layer.wq)?)?;
    d_in.add_assign(&d_k.matmul_t(&layer.wk)?)?;
    d_in.add_assign(&d_v.matmul_t(&layer.wv)?)?;
    Ok(d_in)
}

/// `e_u = UserEncoder(E ⊕ SympSims)`.
pub fn encode_user(tweets: &Matrix, sympsims: &Matrix, params: &EncoderParams) -> Result<Vec<f64>> {
    Ok(encode_user_traced(tweets, sympsims, params)?.output)
}

pub fn encode_user_traced(
    tweets: &Matrix,
    sympsims: &Matrix,
    params: &EncoderParams,
) -> Result<EncoderTrace> {
    if tweets.rows() == 0 {
        return Err(Error::invalid("cannot encode a user with no tweets"));
    }
    if sympsims.shape() != (tweets.rows(), NUM_SYMPTOMS) {
        return Err(Error::shape(format!(
            "symptom similarities {:?} for {} tweets",
            sympsims.shape(),
            tweets.rows()
        )));
    }
    let input = tweets.hconcat(sympsims)?;
    if input.cols() != params.input_dim() {
        return Err(Error::shape(format!(
            "encoder expects width {}, got {}",
            params.input_dim(),
            input.cols()
        )));
    }
    match params.variant {
        EncoderVariant::MeanPoolFfn => {
            let hidden = dense_tanh(&input, &params.w1, &params.b1)?;
            let pooled_h = hidden.column_means()?;
            let mut output = params.w2.t_matvec(&pooled_h)?;
            output.iter_mut().zip(params.b2.as_slice()).for_each(|(o, b)| *o += b);
            Ok(EncoderTrace {
                input,
                layers: Vec::new(),
                hidden,
                pooled: None,
                output,
            })
        }
        EncoderVariant::SelfAttention => {
            let mut x = input.clone();
            let mut layers = Vec::with_capacity(params.attention.len());
            for layer in &params.attention {
                let (next, trace) = attention_forward(layer, x)?;
                layers.push(trace);
                x = next;
            }
            let pooled = Matrix::from_vec(1, x.cols(), x.column_means()?)?;
            let hidden = dense_tanh(&pooled, &params.w1, &params.b1)?;
            let mut output = params.w2.t_matvec(hidden.row(0))?;
            output.iter_mut().zip(params.b2.as_slice()).for_each(|(o, b)| *o += b);
            Ok(EncoderTrace {
                input,
                layers,
                hidden,
                pooled: Some(pooled),
                output,
            })
        }
    }
}

/// Gradients of a scalar loss with respect to the encoder parameters and
/// to the `n x 9` symptom-similarity input, given `d loss / d e_u`.
pub fn encode_user_backward(
    params: &EncoderParams,
    trace: &EncoderTrace,
    d_output: &[f64],
    grads: &mut EncoderParams,
) -> Result<Matrix> {
    if d_output.len() != params.output_dim() {
        return Err(Error::shape("upstream gradient width"));
    }
    let n = trace.input.rows();
    let d_input = match params.variant {
        EncoderVariant::MeanPoolFfn => {
            let pooled_h = trace.hidden.column_means()?;
            grads.w2.add_outer(1.0, &pooled_h, d_output);
            crate::numeric::axpy(1.0, d_output, grads.b2.as_mut_slice());
            let d_h = params.w2.matvec(d_output)?;
            let inv_n = 1.0 / n as f64;
            let mut d_z = Matrix::zeros(n, d_h.len());
            for i in 0..n {
                for ((dz, h), dh) in d_z.row_mut(i).iter_mut().zip(trace.hidden.row(i)).zip(&d_h) {
                    *dz = dh * inv_n * (1.0 - h * h);
                }
            }
            grads.w1.add_assign(&trace.input.t_matmul(&d_z)?)?;
            let col = d_z.column_means()?;
            crate::numeric::axpy(n as f64, &col, grads.b1.as_mut_slice());
            d_z.matmul_t(&params.w1)?
        }
        EncoderVariant::SelfAttention => {
            let pooled = trace.pooled.as_ref().expect("attention trace");
            let h = trace.hidden.row(0);
            grads.w2.add_outer(1.0, h, d_output);
            crate::numeric::axpy(1.0, d_output, grads.b2.as_mut_slice());
            let d_h = params.w2.matvec(d_output)?;
            let d_z: Vec<f64> = d_h.iter().zip(h).map(|(dh, hv)| dh * (1.0 - hv * hv)).collect();
            grads.w1.add_outer(1.0, pooled.row(0), &d_z);
            crate::numeric::axpy(1.0, &d_z, grads.b1.as_mut_slice());
            let d_pooled = params.w1.matvec(&d_z)?;
            let mut d_x = Matrix::zeros(n, d_pooled.len());
            for i in 0..n {
                crate::numeric::axpy(1.0 / n as f64, &d_pooled, d_x.row_mut(i));
            }
            for ((layer, t), g) in params
                .attention
                .iter()
                .zip(&trace.layers)
                .zip(grads.attention.iter_mut())
                .rev()
            {
                d_x = attention_backward(layer, t, &d_x, g)?;
            }
            d_x
        }
    };
    let d = d_input.cols() - NUM_SYMPTOMS;
    let mut d_sympsims = Matrix::zeros(n, NUM_SYMPTOMS);
    for i in 0..n {
        d_sympsims.row_mut(i).copy_from_slice(&d_input.row(i)[d..]);
    }
    Ok(d_sympsims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{dot, grad_check};
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn sympsims(rng: &mut Rng, n: usize) -> Matrix {
        Matrix::from_vec(n, 9, (0..n * 9).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    fn cfg(variant: EncoderVariant, seed: u64) -> EncoderConfig {
        EncoderConfig {
            variant,
            num_attention_layers: 2,
            hidden_dim: 5,
            output_dim: Some(4),
            seed,
        }
    }

    #[test]
    fn sympsims_is_mean_over_prototypes() {
        let mut rng = Rng::new(1);
        let (n, m) = (4, 3);
        let values = Matrix::from_vec(n, 9 * m, (0..n * 9 * m).map(|_| rng.uniform_range(-1., 1.)).collect()).unwrap();
        let sims = SymptomSims::from_matrix(values.clone(), m).unwrap();
        let got = compute_sympsims(&sims);
        for i in 0..n {
            for j in 0..9 {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += values.get(i, j * m + k);
                }
                assert!((got.get(i, j) - acc / m as f64).abs() < 1e-15);
            }
        }
        let single = SymptomSims::from_matrix(values.select_rows(&[0]).clone(), m).unwrap();
        assert_eq!(compute_sympsims(&single).row(0), got.row(0));

        let halves = SymptomSims::from_matrix(Matrix::from_vec(2, 9, vec![0.5; 18]).unwrap(), 1).unwrap();
        assert!(compute_sympsims(&halves).as_slice().iter().all(|&v| v == 0.5));
        // m = 1 leaves the slice untouched
        assert_eq!(compute_sympsims(&halves), *halves.as_matrix());
    }

    #[test]
    fn single_tweet_is_affine_image() {
        // identity first layer in the linear regime is still tanh'd, so check
        // against the explicit formula
        let mut rng = Rng::new(2);
        let params = EncoderParams::init(&cfg(EncoderVariant::MeanPoolFfn, 3), 3).unwrap();
        let e = random(&mut rng, 1, 3);
        let s = sympsims(&mut rng, 1);
        let x: Vec<f64> = e.row(0).iter().chain(s.row(0)).copied().collect();
        let h: Vec<f64> = (0..5)
            .map(|c| {
                let col: Vec<f64> = (0..12).map(|r| params.w1.get(r, c)).collect();
                (dot(&x, &col) + params.b1.get(0, c)).tanh()
            })
            .collect();
        let want: Vec<f64> = (0..4)
            .map(|c| {
                let col: Vec<f64> = (0..5).map(|r| params.w2.get(r, c)).collect();
                dot(&h, &col) + params.b2.get(0, c)
            })
            .collect();
        let got = encode_user(&e, &s, &params).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let params = EncoderParams::init(&cfg(EncoderVariant::MeanPoolFfn, 3), 3).unwrap();
        assert!(encode_user(&Matrix::zeros(0, 3), &Matrix::zeros(0, 9), &params).is_err());
        let e = Matrix::from_vec(1, 4, vec![1.; 4]).unwrap();
        let s = Matrix::zeros(1, 9);
        assert!(matches!(encode_user(&e, &s, &params), Err(Error::Shape(_))));
        let bad = EncoderConfig { hidden_dim: 0, ..Default::default() };
        assert!(EncoderParams::init(&bad, 3).is_err());
    }

    #[test]
    fn output_dim_defaults_to_embedding_dim() {
        let params = EncoderParams::init(&EncoderConfig::default(), 7).unwrap();
        assert_eq!(params.output_dim(), 7);
        assert_eq!(params.input_dim(), 16);
        let attn = EncoderConfig { variant: EncoderVariant::SelfAttention, ..Default::default() };
        let params = EncoderParams::init(&attn, 7).unwrap();
        assert_eq!(params.attention.len(), 2);
        assert_eq!(params.tensors().len(), 2 * 3 + 4);
    }

    fn check_grads(variant: EncoderVariant, seed: u64) {
        let mut rng = Rng::new(seed);
        let d = 3;
        let params = EncoderParams::init(&cfg(variant, seed), d).unwrap();
        let n = 1 + rng.below(5);
        let e = random(&mut rng, n, d);
        let s = sympsims(&mut rng, n);
        let upstream: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let trace = encode_user_traced(&e, &s, &params).unwrap();
        let mut grads = params.zeros_like();
        let d_s = encode_user_backward(&params, &trace, &upstream, &mut grads).unwrap();

        let loss = |p: &EncoderParams, s: &Matrix| dot(&encode_user(&e, s, p).unwrap(), &upstream);
        let flat = params.flatten();
        let r = grad_check(
            |x| {
                let mut p = params.clone();
                p.assign_flat(x);
                loss(&p, &s)
            },
            &grads.flatten(),
            &flat,
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "{variant:?} params: {r:?}");

        let r = grad_check(
            |x| loss(&params, &Matrix::from_vec(n, 9, x.to_vec()).unwrap()),
            d_s.as_slice(),
            s.as_slice(),
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "{variant:?} sympsims: {r:?}");
    }

    #[test]
    fn gradients_mean_pool() {
        for seed in 0..5 {
            check_grads(EncoderVariant::MeanPoolFfn, seed);
        }
    }

    #[test]
    fn gradients_self_attention() {
        for seed in 0..5 {
            check_grads(EncoderVariant::SelfAttention, seed);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permutation_and_duplication_invariant(seed in 0u64..1000, attention in any::<bool>()) {
            let variant = if attention { EncoderVariant::SelfAttention } else { EncoderVariant::MeanPoolFfn };
            let mut rng = Rng::new(seed);
            let params = EncoderParams::init(&cfg(variant, seed), 3).unwrap();
            let n = 2 + rng.below(4);
            let e = random(&mut rng, n, 3);
            let s = sympsims(&mut rng, n);
            let base = encode_user(&e, &s, &params).unwrap();
            prop_assert_eq!(base.len(), 4);

            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let permuted = encode_user(&e.select_rows(&perm), &s.select_rows(&perm), &params).unwrap();
            let dup: Vec<usize> = (0..n).chain(0..n).collect();
            let doubled = encode_user(&e.select_rows(&dup), &s.select_rows(&dup), &params).unwrap();
            for i in 0..4 {
                prop_assert!((base[i] - permuted[i]).abs() < 1e-10);
                prop_assert!((base[i] - doubled[i]).abs() < 1e-10);
            }
        }
    }
}
