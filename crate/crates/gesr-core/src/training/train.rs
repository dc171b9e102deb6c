//! Training loop: user-keyed train/eval split, minibatch gradient
//! accumulation, Adam updates, and held-out NE evaluation.

use std::time::Instant;

use rand::seq::SliceRandom as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha20Rng;

use crate::error::{GesrError, Result};
use crate::features::RankingRequest;
use crate::model::{GesrModel, ItemSource};
use crate::numerics::graph::{sigmoid, Graph, ParamStore};
use crate::numerics::matrix::DenseMatrix;
use crate::training::ne::ne_metric;
use crate::training::optimizer::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: AdamConfig,
    /// Requests whose gradients are accumulated into one optimizer step.
    pub batch: usize,
    /// Seed for epoch shuffling and stochastic-length sampling.
    pub shuffle_seed: u64,
    /// When set, training sequences are subsampled to this length each
    /// epoch (stochastic length); evaluation always sees full sequences.
    pub sl_target: Option<usize>,
    /// Any per-request loss above this counts as divergence.
    pub max_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            optimizer: AdamConfig::default(),
            batch: 8,
            shuffle_seed: 17,
            sl_target: None,
            max_loss: 75.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(GesrError::Config(
                "epochs and batch must be positive".to_string(),
            ));
        }
        if !(self.max_loss > 0.0) {
            return Err(GesrError::Config(format!(
                "max_loss {} must be > 0",
                self.max_loss
            )));
        }
        if self.sl_target == Some(0) {
            return Err(GesrError::Config("sl_target must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainRunResult {
    /// Mean per-request loss for each epoch, in order.
    pub epoch_losses: Vec<f64>,
    /// Held-out NE per task after the final epoch.
    pub eval_ne: Vec<f64>,
    pub train_seconds: f64,
    /// Candidates scored per wall-clock second across all training epochs.
    pub examples_per_second: f64,
}

/// Deterministic user-keyed split: every fourth user (id % 4 == 3) is held
/// out. Keying on the user rather than the request keeps all of one user's
/// requests on the same side, so evaluation never sees a training user.
pub fn split_by_user(data: &[RankingRequest]) -> (Vec<&RankingRequest>, Vec<&RankingRequest>) {
    data.iter().partition(|r| r.user_id % 4 != 3)
}

fn labels_matrix(req: &RankingRequest, tasks: usize) -> Result<DenseMatrix> {
    let labels = req
        .labels
        .as_ref()
        .ok_or_else(|| GesrError::Input(format!("request for user {} has no labels", req.user_id)))?;
    let mut m = DenseMatrix::zeros(labels.len(), tasks);
    for (i, row) in labels.iter().enumerate() {
        for (t, &y) in row.iter().enumerate() {
            m.set(i, t, f64::from(y));
        }
    }
    Ok(m)
}

fn sl_seed(shuffle_seed: u64, epoch: usize, index: usize) -> u64 {
    let mut x = shuffle_seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(epoch as u64)
        .wrapping_mul(0xBF58476D1CE4E5B9)
        .wrapping_add(index as u64);
    x ^= x >> 29;
    x.wrapping_mul(0x94D049BB133111EB)
}

/// Per-task held-out NE: inference forward on every request, sigmoid to
/// probabilities, one `ne_metric` call per task.
pub fn evaluate(model: &GesrModel, requests: &[&RankingRequest]) -> Result<Vec<f64>> {
    let tasks = model.config().tasks;
    let mut preds: Vec<Vec<f64>> = vec![Vec::new(); tasks];
    let mut labels: Vec<Vec<f64>> = vec![Vec::new(); tasks];
    for req in requests {
        let label_rows = req
            .labels
            .as_ref()
            .ok_or_else(|| GesrError::Input("evaluation request has no labels".to_string()))?;
        let logits = model.model_forward(req)?;
        for (i, row) in label_rows.iter().enumerate() {
            for t in 0..tasks {
                preds[t].push(sigmoid(logits.get(i, t)));
                labels[t].push(f64::from(row[t]));
            }
        }
    }
    (0..tasks).map(|t| ne_metric(&preds[t], &labels[t])).collect()
}

/// Splits `data` by user, trains on the training side, and reports final
/// held-out NE. The model's parameters are updated in place. Identical
/// (model seed, data, config) triples produce identical numbers apart from
/// the wall-clock fields.
pub fn train_model(
    model: &mut GesrModel,
    data: &[RankingRequest],
    cfg: &TrainConfig,
) -> Result<TrainRunResult> {
    cfg.validate()?;
    let (train_set, eval_set) = split_by_user(data);
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(GesrError::Input(format!(
            "split produced {} train / {} eval requests; need both non-empty",
            train_set.len(),
            eval_set.len()
        )));
    }
    // The optimizer works on the store directly while graphs replay the
    // model's wiring, so take the store out for the duration of the loop.
    let mut store = std::mem::replace(&mut model.store, ParamStore::new());
    let outcome = train_loop(model, &mut store, &train_set, cfg);
    model.store = store;
    model.reset_version();
    let (epoch_losses, train_seconds, examples) = outcome?;
    let eval_ne = evaluate(model, &eval_set)?;
    Ok(TrainRunResult {
        epoch_losses,
        eval_ne,
        train_seconds,
        examples_per_second: examples as f64 / train_seconds.max(1e-9),
    })
}

fn train_loop(
    model: &GesrModel,
    store: &mut ParamStore,
    train_set: &[&RankingRequest],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, f64, usize)> {
    let tasks = model.config().tasks;
    let mut opt = Adam::new(cfg.optimizer, store)
        .map_err(|e| GesrError::Config(format!("optimizer: {e}")))?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut examples = 0usize;
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.shuffle_seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            store.zero_grads();
            let inv = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let req = train_set[idx];
                let prep = match cfg.sl_target {
                    Some(target) => model.prepare_stochastic(
                        req,
                        target,
                        sl_seed(cfg.shuffle_seed, epoch, idx),
                    )?,
                    None => model.prepare(req)?,
                };
                let labels = labels_matrix(req, tasks)?;
                let mut g = Graph::recording();
                let art = model.build_logits(&mut g, store, &prep, ItemSource::Direct)?;
                let loss = g.bce_mean(art.logits, &labels)?;
                let loss_value = g.scalar(loss)?;
                if !loss_value.is_finite() || loss_value > cfg.max_loss {
                    return Err(GesrError::Training {
                        epoch,
                        detail: format!("loss {loss_value} (limit {})", cfg.max_loss),
                    });
                }
                loss_sum += loss_value;
                examples += req.candidates.len();
                let scaled = g.scale(loss, inv);
                g.backward(scaled, store)?;
            }
            opt.step(store).map_err(|e| GesrError::Training {
                epoch,
                detail: e.to_string(),
            })?;
        }
        epoch_losses.push(loss_sum / train_set.len() as f64);
    }
    Ok((epoch_losses, started.elapsed().as_secs_f64(), examples))
}
