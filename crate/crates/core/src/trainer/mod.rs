//! Mini-batch training with early stopping on validation F1, and
//! checkpoint files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{prf1, ConfusionCounts, Prf1};
use crate::numeric::bce_loss;
use crate::model::{batch_loss, predict, Example, LossConfig, ModelParams};
use crate::optim::{optimizer_step, AdamState, OptimizerConfig};
use crate::ot::SinkhornConfig;
use crate::params::Params;
use crate::rng::Rng;
use crate::symptom::BasePrototypeSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_tweets_per_user: usize,
    pub seed: u64,
    /// Prototypes per symptom.
    pub m: usize,
    /// User prototypes per class.
    pub k: usize,
    /// Spread of symptom prototypes around their base.
    pub sigma: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub sinkhorn: SinkhornConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            max_tweets_per_user: 200,
            seed: 0,
            m: 7,
            k: 3,
            sigma: 0.025,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("max_tweets_per_user", self.max_tweets_per_user),
            ("m", self.m),
            ("k", self.k),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid("sigma must be >= 0"));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.sinkhorn.validate()?;
        self.encoder.validate()
    }

    /// Hex SHA-256 of the JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Tracks the best validation F1. An epoch improves on the best when its
/// F1 is strictly higher, or equal with a strictly lower validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records `score` and `loss` for `epoch`; true when it is the new best.
    pub fn update(&mut self, epoch: usize, score: f64, loss: f64) -> bool {
        let better = match self.best {
            _ if score.is_nan() => false,
            None => true,
            Some((_, b, l)) => score > b || (score == b && loss < l),
        };
        if better {
            self.best = Some((epoch, score, loss));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _, _)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(_, s, _)| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: ModelParams,
    pub optimizer: AdamState<ModelParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch losses averaged with weights proportional to batch size.
    pub loss: f64,
    pub l_symp: f64,
    pub l_user: f64,
    pub l_bce: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    /// Mean cross-entropy of the validation predictions.
    pub val_bce: f64,
    /// Batches whose Sinkhorn solves hit the iteration cap.
    pub unconverged_batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State of the best validation epoch.
    pub state: ModelState,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub log: Vec<EpochLog>,
}

pub fn truncate(tweets: &crate::numeric::Matrix, max: usize) -> crate::numeric::Matrix {
    if tweets.rows() <= max {
        tweets.clone()
    } else {
        tweets.select_rows(&(0..max).collect::<Vec<_>>())
    }
}

/// Positive-class metrics of the model on `data`.
pub fn evaluate(params: &ModelParams, data: &[Example]) -> Result<(ConfusionCounts, Prf1)> {
    let (counts, metrics, _) = evaluate_with_loss(params, data)?;
    Ok((counts, metrics))
}

/// [`evaluate`] plus the mean cross-entropy of the predictions.
pub fn evaluate_with_loss(params: &ModelParams, data: &[Example]) -> Result<(ConfusionCounts, Prf1, f64)> {
    use rayon::prelude::*;
    let predicted: Vec<(usize, f64)> = data
        .par_iter()
        .map(|ex| {
            let p = predict(params, &ex.tweets)?;
            Ok((p.label, bce_loss(&p.probs, ex.label)?))
        })
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = data.iter().map(|e| e.label).collect();
    let labels: Vec<usize> = predicted.iter().map(|p| p.0).collect();
    let counts = ConfusionCounts::from_labels(&truth, &labels);
    let loss = predicted.iter().map(|p| p.1).sum::<f64>() / data.len().max(1) as f64;
    Ok((counts, prf1(&counts), loss))
}

/// Trains from a fresh initialization. Each user's tweets are cut to the
/// first `max_tweets_per_user` rows.
pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    base: &BasePrototypeSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("train and validation splits must be non-empty"));
    }
    let d = base.dim();
    if let Some(ex) = train_set.iter().chain(val_set).find(|e| e.tweets.cols() != d) {
        return Err(Error::shape(format!(
            "tweet dim {} differs from prototype dim {d}",
            ex.tweets.cols()
        )));
    }
    let cut = |s: &[Example]| -> Vec<Example> {
        s.iter()
            .map(|e| Example {
                tweets: truncate(&e.tweets, cfg.max_tweets_per_user),
                label: e.label,
            })
            .collect()
    };
    let (train_set, val_set) = (cut(train_set), cut(val_set));

    let mut rng = Rng::new(cfg.seed);
    let params = ModelParams::init(base, cfg.m, cfg.sigma, cfg.k, &cfg.encoder, rng.fork())?;
    let mut shuffler = Rng::new(rng.fork());
    let mut state = ModelState {
        optimizer: AdamState::new(&params),
        params,
    };
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = state.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        shuffler.shuffle(&mut order);
        let mut sums = [0.0; 4];
        let mut unconverged = 0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_loss(&state.params, &batch, &cfg.loss, &cfg.sinkhorn, None)?;
            let w = batch.len() as f64 / train_set.len() as f64;
            for (s, v) in sums.iter_mut().zip([loss.total, loss.symp, loss.user, loss.bce]) {
                *s += w * v;
            }
            unconverged += usize::from(!loss.converged);
            batches += 1;
            optimizer_step(&mut state.params, &grads, &mut state.optimizer, cfg.learning_rate, &cfg.optimizer)
                .map_err(|_| Error::Divergence { term: "gradient".into() })?;
            if !state.params.is_finite() {
                return Err(Error::Divergence { term: "parameters".into() });
            }
        }
        if unconverged > 0 {
            log::warn!("epoch {epoch}: sinkhorn hit max_iters in {unconverged} of {batches} batches");
        }
        let (_, val, val_bce) = evaluate_with_loss(&state.params, &val_set)?;
        log::info!(
            "epoch {epoch}: loss {:.4} (symp {:.4}, user {:.4}, bce {:.4}) val P {:.3} R {:.3} F1 {:.3} bce {:.4}",
            sums[0],
            sums[1],
            sums[2],
            sums[3],
            val.precision,
            val.recall,
            val.f1,
            val_bce
        );
        log.push(EpochLog {
            epoch,
            loss: sums[0],
            l_symp: sums[1],
            l_user: sums[2],
            l_bce: sums[3],
            val_precision: val.precision,
            val_recall: val.recall,
            val_f1: val.f1,
            val_bce,
            unconverged_batches: unconverged,
        });
        if stopper.update(epoch, val.f1, val_bce) {
            best = state.clone();
        }
        if stopper.should_stop() {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        state: best,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val_f1: stopper.best_score().unwrap_or(0.0),
        log,
    })
}

pub const CHECKPOINT_FORMAT: &str = "protodep-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub embedding_dim: usize,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub config: TrainConfig,
    pub state: ModelState,
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, outcome: &TrainOutcome) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            embedding_dim: outcome.state.params.embedding_dim(),
            best_epoch: outcome.best_epoch,
            best_val_f1: outcome.best_val_f1,
            config: *cfg,
            state: outcome.state.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: Option<String>,
        }
        let header: Header = serde_json::from_slice(bytes)
            .map_err(|e| Error::Incompatible(format!("checkpoint is not valid JSON: {e}")))?;
        match header.format.as_deref() {
            Some(CHECKPOINT_FORMAT) => {}
            Some(other) => {
                return Err(Error::Incompatible(format!(
                    "checkpoint format {other:?}, expected {CHECKPOINT_FORMAT:?}"
                )))
            }
            None => return Err(Error::Incompatible("checkpoint has no format version".into())),
        }
        let ckpt: Checkpoint = serde_json::from_slice(bytes)
            .map_err(|e| Error::Incompatible(format!("checkpoint body: {e}")))?;
        ckpt.state.params.validate()?;
        if ckpt.state.params.embedding_dim() != ckpt.embedding_dim {
            return Err(Error::Incompatible("checkpoint header and parameters disagree on dim".into()));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(Error::Incompatible("checkpoint config hash mismatch".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors with [`Error::Incompatible`] when the model was trained on a
    /// different embedding dimension.
    pub fn ensure_dim(&self, dim: usize) -> Result<()> {
        if dim != self.embedding_dim {
            return Err(Error::Incompatible(format!(
                "checkpoint expects {}-dim embeddings, data has {dim}",
                self.embedding_dim
            )));
        }
        Ok(())
    }
}
