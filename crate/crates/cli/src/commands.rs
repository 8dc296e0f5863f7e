use std::path::Path;

use protodep::dataio::{
    generate_synthetic, load_base_prototypes, load_dataset, load_lexicon, write_synthetic, Dataset, Lexicon,
    SplitName, SyntheticSpec, BASE_PROTOTYPES_FILE,
};
use protodep::evaluation::{
    evaluate_split, explain_user, prototype_sweep, write_pride_csv, write_rows_csv, write_sweep_csv,
    write_symptom_matrix_csv,
};
use protodep::metrics::{ConfusionCounts, Prf1};
use protodep::model::{gradcheck_sinkhorn, grad_check_groups, Example, ModelParams};
use protodep::numeric::Matrix;
use protodep::rng::Rng;
use protodep::trainer::{evaluate, train as fit, Checkpoint, TrainConfig};
use protodep::Error;
use serde::Serialize;

use crate::config::RunConfig;
use crate::failure::Failure;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const PRF1_FILE: &str = "prf1.json";

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path, Failure> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    cfg.write_resolved(&cfg.out)?;
    Ok(&cfg.out)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let dir = cfg.data_dir()?;
    if !dir.exists() {
        return Err(Failure::input(format!("dataset path {} does not exist", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

fn load_lexicon_opt(cfg: &RunConfig, dim: usize) -> Result<Option<Lexicon>, Failure> {
    Ok(match &cfg.lexicon {
        Some(p) => Some(load_lexicon(p, dim)?),
        None => None,
    })
}

#[derive(Serialize)]
struct Prf1Report {
    split: SplitName,
    users: usize,
    counts: ConfusionCounts,
    precision: f64,
    recall: f64,
    f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_val_f1: Option<f64>,
}

impl Prf1Report {
    fn new(split: SplitName, users: usize, counts: ConfusionCounts, m: Prf1) -> Self {
        Self {
            split,
            users,
            counts,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            best_epoch: None,
            best_val_f1: None,
        }
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let ds = load_data(cfg)?;
    let base_path = match &cfg.base_prototypes {
        Some(p) => p.clone(),
        None => cfg.data_dir()?.join(BASE_PROTOTYPES_FILE),
    };
    let base = load_base_prototypes(&base_path, ds.dim())?;
    let out = prepare_out(cfg)?;
    let tc = &cfg.train;
    let examples = |s| ds.examples(s, tc.max_tweets_per_user);
    let (tr, va, te) = (examples(SplitName::Train), examples(SplitName::Val), examples(SplitName::Test));
    let outcome = fit(&tr, &va, &base, tc)?;
    let ckpt = Checkpoint::new(tc, &outcome);
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    write_rows_csv(&out.join(EPOCH_LOG_FILE), &outcome.log)?;
    let mut report = if te.is_empty() {
        let (c, m) = evaluate(&outcome.state.params, &va)?;
        Prf1Report::new(SplitName::Val, va.len(), c, m)
    } else {
        let (c, m) = evaluate(&outcome.state.params, &te)?;
        Prf1Report::new(SplitName::Test, te.len(), c, m)
    };
    report.best_epoch = Some(outcome.best_epoch);
    report.best_val_f1 = Some(outcome.best_val_f1);
    write_json(&out.join(PRF1_FILE), &report)?;
    println!(
        "trained {} epochs, best epoch {} (val F1 {:.4}); {} F1 {:.4}; outputs in {}",
        outcome.log.len(),
        outcome.best_epoch,
        outcome.best_val_f1,
        report.split.as_str(),
        report.f1,
        out.display()
    );
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, ds: &Dataset) -> Result<Checkpoint, Failure> {
    let ckpt = Checkpoint::load(cfg.checkpoint_path()?)?;
    ckpt.ensure_dim(ds.dim())?;
    Ok(ckpt)
}

pub fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let ds = load_data(cfg)?;
    let ckpt = load_checkpoint(cfg, &ds)?;
    let lexicon = load_lexicon_opt(cfg, ds.dim())?;
    let out = prepare_out(cfg)?;
    let params = &ckpt.state.params;
    let report = evaluate_split(params, &ds, cfg.split, ckpt.config.max_tweets_per_user, lexicon.as_ref())?;
    write_json(
        &out.join(PRF1_FILE),
        &Prf1Report::new(cfg.split, report.users, report.counts, report.metrics),
    )?;
    write_json(&out.join("eval.json"), &report)?;
    write_pride_csv(&out.join("pride.csv"), &report)?;
    write_rows_csv(&out.join("symptom_weights.csv"), &report.symptom_weights)?;
    match &report.alignment {
        Some(rows) => {
            let m = Matrix::from_rows(rows, rows.len())?;
            write_symptom_matrix_csv(&out.join("alignment.csv"), &m)?;
        }
        None => println!("notice: no lexicon given, skipping alignment.csv and symptom PRIDE"),
    }
    println!(
        "{} users on {}: P {:.4} R {:.4} F1 {:.4}; outputs in {}",
        report.users,
        cfg.split.as_str(),
        report.metrics.precision,
        report.metrics.recall,
        report.metrics.f1,
        out.display()
    );
    Ok(())
}

pub fn explain(cfg: &RunConfig) -> Result<(), Failure> {
    let ds = load_data(cfg)?;
    let id = cfg
        .user_id
        .as_deref()
        .ok_or_else(|| Failure::input("no user given (use --user-id)"))?;
    let ckpt = load_checkpoint(cfg, &ds)?;
    let user = ds.user(id).ok_or_else(|| Error::UnknownUser(id.to_string()))?;
    let report = explain_user(user, &ckpt.state.params, cfg.top_q, ckpt.config.max_tweets_per_user)?;
    let out = prepare_out(cfg)?;
    let stem = format!("explain_{}", sanitize(id));
    write_json(&out.join(format!("{stem}.json")), &report)?;
    let text = report.to_text();
    write_file(&out.join(format!("{stem}.txt")), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let data = generate_synthetic(&cfg.synth)?;
    let out = prepare_out(cfg)?;
    write_synthetic(&data, out)?;
    println!(
        "wrote {} synthetic users (dim {}) to {}",
        data.dataset.users.len(),
        cfg.synth.dim,
        out.display()
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<(), Failure> {
    let ds = load_data(cfg)?;
    let base_path = match &cfg.base_prototypes {
        Some(p) => p.clone(),
        None => cfg.data_dir()?.join(BASE_PROTOTYPES_FILE),
    };
    let base = load_base_prototypes(&base_path, ds.dim())?;
    let out = prepare_out(cfg)?;
    let s = &cfg.sweep;
    let rows = prototype_sweep(&ds, &base, &cfg.train, &s.m_values, &s.k_values, &s.seeds)?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    write_json(&out.join("sweep.json"), &rows)?;
    for r in &rows {
        println!(
            "m={} k={}: mean F1 {:.4} (range {:.4}..{:.4})",
            r.m, r.k, r.mean_f1, r.min_f1, r.max_f1
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    group: &'static str,
    max_rel_error: f64,
    tolerance: f64,
    passed: bool,
}

/// Fresh parameters with a random head, checked on a small batch of random
/// unit tweets, or on the first training users of `--data` when given.
pub fn gradcheck(cfg: &RunConfig) -> Result<(), Failure> {
    let g = &cfg.gradcheck;
    let seed = cfg.train.seed;
    let (examples, base) = match &cfg.data {
        Some(_) => {
            let ds = load_data(cfg)?;
            let base_path = match &cfg.base_prototypes {
                Some(p) => p.clone(),
                None => cfg.data_dir()?.join(BASE_PROTOTYPES_FILE),
            };
            let base = load_base_prototypes(&base_path, ds.dim())?;
            let mut ex = ds.examples(SplitName::Train, g.max_tweets);
            ex.truncate(g.users);
            (ex, base)
        }
        None => {
            let data = generate_synthetic(&SyntheticSpec {
                users: g.users.max(2),
                dim: g.dim,
                min_tweets: 1,
                max_tweets: g.max_tweets,
                seed,
                ..Default::default()
            })?;
            let ex: Vec<Example> = data.dataset.users.iter().map(|u| u.example(g.max_tweets)).collect();
            (ex, data.base)
        }
    };
    let tc = TrainConfig { m: g.m, k: g.k, ..cfg.train };
    let mut params = ModelParams::init(&base, tc.m, tc.sigma, tc.k, &tc.encoder, seed)?;
    let mut rng = Rng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    for v in params.head.weight.as_mut_slice() {
        *v = rng.normal();
    }
    let batch: Vec<&Example> = examples.iter().collect();
    let checks = grad_check_groups(&params, &batch, &tc.loss, &gradcheck_sinkhorn(&tc.sinkhorn), g.tolerance)?;
    let rows: Vec<GradcheckRow> = checks
        .iter()
        .map(|c| GradcheckRow {
            group: c.group.as_str(),
            max_rel_error: c.report.max_rel_error,
            tolerance: c.report.tolerance,
            passed: c.report.passed,
        })
        .collect();
    let out = prepare_out(cfg)?;
    write_json(&out.join("gradcheck.json"), &rows)?;
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &rows {
        println!("{:<20} max rel error {:.3e}", r.group, r.max_rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {:.0e})", g.tolerance);
    if rows.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::numeric(format!(
            "gradient check failed: max relative error {worst:.3e} > {:.0e}",
            g.tolerance
        )))
    }
}
