//! Training: class-weighted binary cross-entropy, Adam updates, patience-3
//! early stopping, and the finite-difference gradient check.

use super::model::{sigmoid_scalar, FusionModel};
use super::{FusionError, SegmentBatch, SegmentSet};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Class-weighted binary cross-entropy on probabilities. With weights
/// `(1, 1)` this reduces to the plain mean BCE.
pub fn weighted_bce(probs: &Array1<f64>, labels: &Array1<f64>, weights: (f64, f64)) -> f64 {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels.iter())
        .map(|(&p, &y)| {
            let w = if y >= 0.5 { weights.1 } else { weights.0 };
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Loss and logit gradient of the class-weighted BCE computed directly from
/// logits (numerically stable form).
pub fn weighted_bce_from_logits(
    logits: &Array1<f64>,
    labels: &Array1<f64>,
    weights: (f64, f64),
) -> (f64, Array1<f64>) {
    let n = logits.len() as f64;
    let mut grad = Array1::<f64>::zeros(logits.len());
    let mut loss = 0.0;
    for (i, (&z, &y)) in logits.iter().zip(labels.iter()).enumerate() {
        let w = if y >= 0.5 { weights.1 } else { weights.0 };
        loss += w * (softplus(z) - y * z);
        grad[i] = w * (sigmoid_scalar(z) - y) / n;
    }
    (loss / n, grad)
}

/// Stops when the monitored loss has not improved for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, wait: 0 }
    }

    /// Feeds one epoch's validation loss; returns true when training should
    /// stop after this epoch.
    pub fn update(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    /// Delimited-text form: `epoch,train_loss,val_loss,train_accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,train_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.4}\n",
                e.epoch, e.train_loss, e.val_loss, e.train_accuracy
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_hyperparams(h: &super::FusionHyperparams, max_epochs: usize, seed: u64) -> Self {
        TrainOptions {
            max_epochs,
            patience: 3,
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            seed,
        }
    }
}

fn adam_step(model: &mut FusionModel, lr: f64) {
    model.adam_step += 1;
    let t = model.adam_step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    model.for_each_param(&mut |p| {
        azip_update(p, lr, bias1, bias2);
    });
}

fn azip_update(p: &mut super::layers::Param, lr: f64, bias1: f64, bias2: f64) {
    let g = &p.grad;
    p.m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
    p.v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
    for ((val, &m), &v) in p.value.iter_mut().zip(p.m.iter()).zip(p.v.iter()) {
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        *val -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Unweighted mean BCE of the model on a set, in inference mode; the early
/// stopping objective.
pub fn validation_loss(model: &FusionModel, set: &SegmentSet) -> Result<f64, FusionError> {
    if set.is_empty() {
        return Err(FusionError::EmptyTrainingSet);
    }
    let batch = set.full_batch();
    let probs = model.predict(&batch)?;
    Ok(weighted_bce(&probs, &batch.labels, (1.0, 1.0)))
}

fn segment_accuracy(probs: &Array1<f64>, labels: &Array1<f64>) -> f64 {
    let correct = probs
        .iter()
        .zip(labels.iter())
        .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count();
    correct as f64 / probs.len().max(1) as f64
}

/// Minimizes the class-weighted BCE with Adam, stopping early on
/// validation loss with the configured patience. Training and validation
/// partitions must not share interview ids.
pub fn train(
    model: &mut FusionModel,
    train_set: &SegmentSet,
    val_set: &SegmentSet,
    weights: (f64, f64),
    opts: &TrainOptions,
) -> Result<TrainHistory, FusionError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(FusionError::EmptyTrainingSet);
    }
    let shared: Vec<u32> =
        train_set.interview_ids().intersection(&val_set.interview_ids()).copied().collect();
    if !shared.is_empty() {
        return Err(FusionError::LeakageDetected(shared));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut stopper = EarlyStopping::new(opts.patience);
    let mut history = TrainHistory::default();
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=opts.max_epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct_weight = 0.0;
        let mut n_batches = 0usize;
        for chunk in indices.chunks(opts.batch_size) {
            let batch = train_set.batch(chunk);
            model.zero_grads();
            let logits = model.forward_train(&batch)?;
            let (loss, dlogits) = weighted_bce_from_logits(&logits, &batch.labels, weights);
            if !loss.is_finite() {
                return Err(FusionError::NonFiniteLoss { epoch });
            }
            model.backward(&dlogits);
            adam_step(model, opts.learning_rate);
            epoch_loss += loss;
            let probs = logits.mapv(sigmoid_scalar);
            correct_weight += segment_accuracy(&probs, &batch.labels) * chunk.len() as f64;
            n_batches += 1;
        }
        let train_loss = epoch_loss / n_batches.max(1) as f64;
        let train_accuracy = correct_weight / train_set.len() as f64;
        let val_loss = validation_loss(model, val_set)?;
        if !val_loss.is_finite() {
            return Err(FusionError::NonFiniteLoss { epoch });
        }
        history.epochs.push(EpochStats { epoch, train_loss, val_loss, train_accuracy });
        if stopper.update(val_loss) {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}

/// Training-mode loss without touching gradients; the forward half of the
/// gradient check.
pub fn loss_on_batch(
    model: &mut FusionModel,
    batch: &SegmentBatch,
    weights: (f64, f64),
) -> Result<f64, FusionError> {
    let logits = model.forward_train(batch)?;
    Ok(weighted_bce_from_logits(&logits, &batch.labels, weights).0)
}

/// Zeroes gradients, runs forward + backward, returns the loss. Gradients
/// are left in the parameters for inspection.
pub fn loss_and_grad(
    model: &mut FusionModel,
    batch: &SegmentBatch,
    weights: (f64, f64),
) -> Result<f64, FusionError> {
    model.zero_grads();
    let logits = model.forward_train(batch)?;
    let (loss, dlogits) = weighted_bce_from_logits(&logits, &batch.labels, weights);
    model.backward(&dlogits);
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (flat parameter index, analytic, numeric) for the worst element.
    pub worst: (usize, f64, f64),
}

/// Compares analytic gradients with central finite differences on
/// `n_params` randomly chosen parameters. Dropout rates must be zero so
/// the training-mode forward is deterministic.
pub fn gradient_check(
    model: &mut FusionModel,
    batch: &SegmentBatch,
    weights: (f64, f64),
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport, FusionError> {
    use rand::Rng;
    let total = model.parameter_count();
    let _ = loss_and_grad(model, batch, weights)?;
    let analytic: Vec<(usize, f64)> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_params)
            .map(|_| {
                let idx = rng.gen_range(0..total);
                (idx, model.gradient_at(idx))
            })
            .collect()
    };

    let h = 1e-5;
    let mut max_rel_err = 0.0f64;
    let mut worst = (0usize, 0.0f64, 0.0f64);
    for &(idx, a) in &analytic {
        model.perturb_parameter(idx, h);
        let up = loss_on_batch(model, batch, weights)?;
        model.perturb_parameter(idx, -2.0 * h);
        let down = loss_on_batch(model, batch, weights)?;
        model.perturb_parameter(idx, h);
        let numeric = (up - down) / (2.0 * h);
        let denom = a.abs().max(numeric.abs());
        let rel = if denom < 1e-8 { (a - numeric).abs() } else { (a - numeric).abs() / denom };
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = (idx, a, numeric);
        }
    }
    Ok(GradCheckReport { checked: analytic.len(), max_rel_err, worst })
}
