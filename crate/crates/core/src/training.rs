//! MSE training with Adam, cosine annealing and early stopping.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::read_features;
use crate::error::{Error, Result};
use crate::evaluate::{pcc, rmse};
use crate::model::{EstimatorModel, Prepared};
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tape, Tensor};
use crate::wer::ScoredPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Cosine half-period in epochs; the rate stays at `lr_min` afterwards.
    pub t_max_epochs: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 0.0,
            t_max_epochs: 15,
            max_epochs: 40,
            patience: 5,
            batch_size: 16,
            seed: 0,
            dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_max >= 0.0) || !self.lr_max.is_finite() {
            return bad("lr_max must be a finite non-negative number");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("lr_min must lie in [0, lr_max]");
        }
        if self.t_max_epochs == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return bad("t_max_epochs, max_epochs and batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Stable 64-bit digest of the configuration, stored in model metadata.
    pub fn digest(&self, extra: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(format!("{self:?}|{extra}").as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}

/// Mean squared difference. Inputs are not range-checked, so the same
/// function serves unclamped baselines.
pub fn mse_loss<T: Scalar>(estimates: &[T], targets: &[T]) -> Result<T> {
    if estimates.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} estimates vs {} targets",
            estimates.len(),
            targets.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::Data("mse of empty inputs".into()));
    }
    let sq: Vec<T> = estimates
        .iter()
        .zip(targets)
        .map(|(&e, &t)| (e - t) * (e - t))
        .collect();
    Ok(crate::scalar::pairwise_sum(&sq) / T::from_usize(sq.len()).unwrap())
}

/// Cosine-annealed learning rate; flat at `lr_min` from `t_max_epochs` on.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let t = epoch.min(cfg.t_max_epochs) as f64 / cfg.t_max_epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            hyper: AdamHyper::default(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::shape(format!("adam: shape mismatch for parameter {i}")));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let b1 = T::lit(h.beta1);
    let b2 = T::lit(h.beta2);
    let c1 = T::lit(1.0 - h.beta1.powi(state.step as i32));
    let c2 = T::lit(1.0 - h.beta2.powi(state.step as i32));
    let lr = T::lit(lr);
    let eps = T::lit(h.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[k] = b1 * m[k] + (T::one() - b1) * g;
            v[k] = b2 * v[k] + (T::one() - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A training/evaluation instance with features already reduced as far as
/// the model architecture allows.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub id: String,
    pub input: Prepared<T>,
    pub target: T,
}

/// Loads features for scored pairs (paths relative to `base`).
pub fn prepare_examples<T: Scalar>(
    model: &EstimatorModel<T>,
    pairs: &[ScoredPair],
    base: &Path,
) -> Result<Vec<Example<T>>> {
    pairs
        .iter()
        .map(|p| {
            let (sp, tp) = p.record.feature_paths(base);
            let input = model.prepare(&read_features(&sp)?, &read_features(&tp)?)?;
            Ok(Example {
                id: p.record.id.clone(),
                input,
                target: T::lit(p.wer),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub dev_mse: f64,
    pub lr: f64,
}

/// Mutable optimisation state carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub adam: AdamState<T>,
    pub best_dev_loss: f64,
    pub epochs_since_best: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest dev MSE.
    pub model: EstimatorModel<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_mse: f64,
}

/// Eval-mode estimates for prepared examples.
pub fn predict<T: Scalar>(model: &EstimatorModel<T>, examples: &[Example<T>]) -> Result<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(256) {
        let mut tape = Tape::new();
        let params = model.register(&mut tape);
        let batch: Vec<&Prepared<T>> = chunk.iter().map(|e| &e.input).collect();
        let y = model.tape_batch(&mut tape, &params, &batch, Mode::Eval, &mut rng)?;
        out.extend_from_slice(tape.value(y).data());
    }
    Ok(out)
}

fn dev_mse<T: Scalar>(model: &EstimatorModel<T>, dev: &[Example<T>]) -> Result<f64> {
    let est = predict(model, dev)?;
    let tgt: Vec<T> = dev.iter().map(|e| e.target).collect();
    Ok(mse_loss(&est, &tgt)?.widen())
}

/// Minibatch training on `train`, selecting the best epoch on `dev`.
pub fn train<T: Scalar>(
    mut model: EstimatorModel<T>,
    train: &[Example<T>],
    dev: &[Example<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data("training and dev splits must be non-empty".into()));
    }
    model.config.dropout = cfg.dropout;
    model.metadata.seed = cfg.seed;
    model.metadata.config_hash = cfg.digest(&format!("{:?}", model.config));

    let mut state = TrainState {
        epoch: 0,
        adam: AdamState::new(&model.params()),
        best_dev_loss: f64::INFINITY,
        epochs_since_best: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    while state.epoch < cfg.max_epochs {
        let lr = cosine_lr(state.epoch, cfg);
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let batch: Vec<&Prepared<T>> = chunk.iter().map(|&i| &train[i].input).collect();
            let y = model.tape_batch(&mut tape, &params, &batch, Mode::Train, &mut state.rng)?;
            let targets = Tensor::new(chunk.len(), 1, chunk.iter().map(|&i| train[i].target).collect())?;
            let t = tape.constant(targets);
            let diff = tape.sub(y, t)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean(sq)?;
            let value = tape.value(loss).item()?.widen();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {} batch {b} (lr {lr:e})",
                    state.epoch
                )));
            }
            loss_sum += value * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor<T>> = params
                .ids()
                .iter()
                .zip(model.params())
                .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
                .collect();
            adam_step(&mut model.params_mut(), &g, &mut state.adam, lr)?;
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameters after epoch {}",
                state.epoch
            )));
        }
        let dev_loss = dev_mse(&model, dev)?;
        history.push(EpochRecord {
            epoch: state.epoch,
            train_mse: loss_sum / train.len() as f64,
            dev_mse: dev_loss,
            lr,
        });
        if dev_loss < state.best_dev_loss {
            state.best_dev_loss = dev_loss;
            state.epochs_since_best = 0;
            best = model.clone();
            best_epoch = state.epoch;
        } else {
            state.epochs_since_best += 1;
        }
        state.epoch += 1;
        if state.epochs_since_best >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_dev_mse: state.best_dev_loss,
    })
}

/// `epoch,train_mse,dev_mse,lr` rows with a header.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mse,dev_mse,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{:.10},{:.10},{:e}", r.epoch, r.train_mse, r.dev_mse, r.lr);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub rmse: Vec<f64>,
    pub pcc: Vec<f64>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub pcc_mean: f64,
    pub pcc_std: f64,
}

impl SeedSummary {
    pub fn from_runs(seeds: Vec<u64>, rmse: Vec<f64>, pcc: Vec<f64>) -> Self {
        let stats = |v: &[f64]| {
            let n = v.len().max(1) as f64;
            let m = v.iter().sum::<f64>() / n;
            (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
        };
        let (rmse_mean, rmse_std) = stats(&rmse);
        let (pcc_mean, pcc_std) = stats(&pcc);
        Self {
            seeds,
            rmse,
            pcc,
            rmse_mean,
            rmse_std,
            pcc_mean,
            pcc_std,
        }
    }

    /// `.1012±.003`-style cells.
    pub fn render(&self) -> String {
        format!(
            "RMSE {:.4}±{:.4}  PCC {:.4}±{:.4}  over seeds {:?}",
            self.rmse_mean, self.rmse_std, self.pcc_mean, self.pcc_std, self.seeds
        )
    }
}

/// Trains one model per seed and summarises dev RMSE/PCC as mean ± std.
pub fn train_seeds<T: Scalar>(
    init: impl Fn(u64) -> Result<EstimatorModel<T>>,
    train_set: &[Example<T>],
    dev: &[Example<T>],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(Vec<TrainOutcome<T>>, SeedSummary)> {
    let mut outcomes = Vec::new();
    let (mut r, mut p) = (Vec::new(), Vec::new());
    let targets: Vec<T> = dev.iter().map(|e| e.target).collect();
    for &seed in seeds {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let out = train(init(seed)?, train_set, dev, &run_cfg)?;
        let est = predict(&out.model, dev)?;
        r.push(rmse(&targets, &est)?.widen());
        p.push(pcc(&targets, &est)?.widen());
        outcomes.push(out);
    }
    Ok((outcomes, SeedSummary::from_runs(seeds.to_vec(), r, p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Aggregator, ModelConfig};

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.5], &[0.0]).unwrap(), 0.25);
        assert_eq!(mse_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(mse_loss(&[1.0], &[0.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn cosine_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg), 1e-3);
        assert!(cosine_lr(15, &cfg).abs() < 1e-18);
        assert!(cosine_lr(30, &cfg).abs() < 1e-18);
        let mid = 0.5 * (cosine_lr(7, &cfg) + cosine_lr(8, &cfg));
        assert!((mid - 5e-4).abs() < 1e-5);
        for e in 0..15 {
            assert!(cosine_lr(e + 1, &cfg) <= cosine_lr(e, &cfg));
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 2)], &mut st, 1e-3).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m_hat = g, v_hat = g^2 on the first step, so the update is
        // lr * g / (|g| + eps).
        for g in [0.3f64, -2.5, 1e-3] {
            let mut p = Tensor::scalar(0.0);
            let mut st = AdamState::new(&[&p]);
            adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut st, 1e-3).unwrap();
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p.data()[0] - expected).abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn adam_reversal_moves_back() {
        let g = 0.7;
        let lr = 1e-3;
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut st, lr).unwrap();
        let after_one = p.data()[0];
        adam_step(&mut [&mut p], &[Tensor::scalar(-g)], &mut st, lr).unwrap();
        // Closed form for the second step: m = 0.09g - 0.1g, v = (0.000999 + 0.001) g^2.
        let m_hat = (0.9 * 0.1 * g - 0.1 * g) / (1.0 - 0.81);
        let v_hat = (0.999 * 0.001 * g * g + 0.001 * g * g) / (1.0 - 0.998001);
        let expected = after_one - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!(p.data()[0] > after_one && p.data()[0].abs() < lr);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::row(vec![1.0, 2.0]);
        let mut st = AdamState::new(&[&p]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(2, 1)], &mut st, 1e-3).is_err());
    }

    fn toy(n: usize, seed: u64) -> Vec<Example<f64>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let t = crate::tensor::sigmoid(x[0] - 2.0 * x[3] + 0.5 * x[5]);
                Example {
                    id: format!("e{i}"),
                    input: Prepared::Pooled(Tensor::row(x)),
                    target: t,
                }
            })
            .collect()
    }

    fn toy_model() -> EstimatorModel<f64> {
        EstimatorModel::init(ModelConfig::new(Aggregator::AvgPool, 4, 2), 3).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let data = toy(40, 1);
        let cfg = TrainConfig {
            lr_max: 0.0,
            max_epochs: 3,
            ..Default::default()
        };
        let m0 = toy_model();
        let out = train(m0.clone(), &data, &data, &cfg).unwrap();
        assert_eq!(out.model.params(), m0.params());
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let data = toy(120, 2);
        let dev = toy(40, 3);
        let cfg = TrainConfig {
            max_epochs: 6,
            batch_size: 16,
            seed: 9,
            ..Default::default()
        };
        let a = train(toy_model(), &data, &dev, &cfg).unwrap();
        let b = train(toy_model(), &data, &dev, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert!(a.history.len() <= cfg.max_epochs);
        let last = a.history.last().unwrap().dev_mse;
        assert!(a.best_dev_mse <= last);
        assert_eq!(a.model.metadata.seed, 9);
        assert_ne!(a.model.metadata.config_hash, 0);
    }

    #[test]
    fn empty_split_rejected() {
        let data = toy(4, 1);
        assert!(matches!(
            train(toy_model(), &[], &data, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn history_csv_header() {
        let csv = history_csv(&[EpochRecord {
            epoch: 0,
            train_mse: 0.5,
            dev_mse: 0.25,
            lr: 1e-3,
        }]);
        assert!(csv.starts_with("epoch,train_mse,dev_mse,lr\n0,"));
    }
}
