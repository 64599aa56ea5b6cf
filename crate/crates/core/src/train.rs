//! Optimizers, schedules and the training/evaluation loops.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{BankSampler, ForwardCtx, Model, Param, PeerCtx};
use crate::rng::{derive, seeded};
use crate::scalar::Scalar;
use crate::tensor::{cross_entropy, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrDecay {
    None,
    /// Multiply by `factor` at each listed epoch (1-based).
    Step { at_epochs: Vec<usize>, factor: f64 },
}

impl LrDecay {
    /// The classic CIFAR schedule: 0.1x at epochs 100, 175 and 250.
    pub fn step_100_175_250() -> Self {
        LrDecay::Step {
            at_epochs: vec![100, 175, 250],
            factor: 0.1,
        }
    }

    /// Learning rate in effect during `epoch` (1-based):
    /// base * factor^(#thresholds <= epoch).
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrDecay::None => base,
            LrDecay::Step { at_epochs, factor } => {
                let k = at_epochs.iter().filter(|&&t| t <= epoch).count();
                base * factor.powi(k as i32)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr: f64,
    /// L2 regularization coefficient, applied as coupled weight decay on
    /// weights (not biases or batch-norm parameters).
    pub weight_decay: f64,
    pub lr_decay: LrDecay,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            epochs: 1,
            batch_size: 32,
            momentum: 0.9,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_decay: LrDecay::None,
            seed: 0,
        }
    }
}

struct ParamState<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam (beta 0.9/0.999, eps 1e-8) or SGD with momentum; `step` consumes and
/// clears the accumulated gradients.
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: Vec<ParamState<T>>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &[Param<T>], cfg: &TrainConfig) -> Self {
        let state = params
            .iter()
            .map(|p| ParamState {
                m: vec![T::zero(); p.tensor.numel()],
                v: vec![T::zero(); p.tensor.numel()],
            })
            .collect();
        Optimizer {
            kind,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            state,
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &[Param<T>]) {
        self.t += 1;
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.weight_decay);
        match self.kind {
            OptimizerKind::SgdMomentum => {
                let mu = T::from_f64(self.momentum);
                for (p, st) in params.iter().zip(&mut self.state) {
                    let grad = p.tensor.grad();
                    let mut data = p.tensor.data_mut();
                    for (i, w) in data.iter_mut().enumerate() {
                        let mut g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                        if p.decay {
                            g += wd * *w;
                        }
                        st.m[i] = mu * st.m[i] + g;
                        *w -= lr * st.m[i];
                    }
                    drop(data);
                    p.tensor.zero_grad();
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::from_f64(0.9);
                let b2 = T::from_f64(0.999);
                let eps = T::from_f64(1e-8);
                let bc1 = T::one() - T::from_f64(0.9f64.powi(self.t));
                let bc2 = T::one() - T::from_f64(0.999f64.powi(self.t));
                for (p, st) in params.iter().zip(&mut self.state) {
                    let grad = p.tensor.grad();
                    let mut data = p.tensor.data_mut();
                    for (i, w) in data.iter_mut().enumerate() {
                        let mut g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                        if p.decay {
                            g += wd * *w;
                        }
                        st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                        st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                        let mhat = st.m[i] / bc1;
                        let vhat = st.v[i] / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    drop(data);
                    p.tensor.zero_grad();
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub type MetricLog = Vec<MetricRow>;

#[derive(Clone, Debug)]
pub struct EvalConfig {
    /// Peer bank size N (PR models only).
    pub bank_n: usize,
    /// Monte Carlo runs M.
    pub mc_runs: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Evaluate on a stratified subset of at most this many examples.
    pub max_examples: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bank_n: 50,
            mc_runs: 10,
            seed: 0,
            batch_size: 100,
            max_examples: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub nll: f64,
    pub examples: usize,
}

/// Accuracy (and NLL of the predictive distribution) over a split. PR
/// models average softmax outputs over `mc_runs` independently sampled peer
/// banks drawn from `bank_pool`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset<T>,
    bank_pool: Option<&Tensor<T>>,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    let eval_ds;
    let ds = match cfg.max_examples {
        Some(cap) if cap < dataset.len() => {
            eval_ds = dataset.subset_stratified(cap, derive(cfg.seed, 0x5eb5))?;
            &eval_ds
        }
        _ => dataset,
    };
    let n = ds.len();
    let classes = ds.num_classes;
    let runs = if model.is_pr() { cfg.mc_runs } else { 1 };
    let tape = Tape::disabled();

    let mut probs = vec![0.0f64; n * classes];
    for run in 0..runs {
        let bank_features = if model.is_pr() {
            let pool = bank_pool.ok_or_else(|| {
                Error::invalid_argument("evaluating a PR model needs a peer bank pool")
            })?;
            let sampler = BankSampler {
                pool,
                n: cfg.bank_n,
                seed: cfg.seed,
            };
            Some(model.precompute_bank(&sampler.bank(run)?)?)
        } else {
            None
        };
        let mut start = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (images, _) = ds.batch(&idx);
            let logits = model.forward_eval(&images, bank_features.as_ref())?;
            let p = logits.softmax(1, &tape)?;
            let pd = p.data();
            for (dst, &v) in probs[start * classes..end * classes].iter_mut().zip(pd.iter()) {
                *dst += v.as_f64();
            }
            start = end;
        }
    }
    let inv = 1.0 / runs as f64;
    let mut correct = 0usize;
    let mut nll = 0.0f64;
    for i in 0..n {
        let row = &probs[i * classes..(i + 1) * classes];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == ds.labels[i] {
            correct += 1;
        }
        nll -= (row[ds.labels[i]] * inv + 1e-12).ln();
    }
    Ok(EvalOutcome {
        accuracy: correct as f64 / n as f64,
        nll: nll / n as f64,
        examples: n,
    })
}

/// Train `model` on shuffled mini-batches. PR variants build a fresh peer
/// graph from each batch; evaluation rows are appended per epoch when an
/// eval split is supplied. Checkpoints are written to `checkpoint.0` every
/// `checkpoint.1` epochs. A non-finite loss aborts with the last good
/// checkpoint referenced.
pub fn train<T: Scalar>(
    model: &Model<T>,
    train_ds: &Dataset<T>,
    eval: Option<(&Dataset<T>, &EvalConfig)>,
    config: &TrainConfig,
    checkpoint: Option<(&Path, usize)>,
) -> Result<MetricLog> {
    let params = model.params();
    let mut opt = Optimizer::new(config.optimizer, &params, config);
    let mut log = MetricLog::new();
    let n = train_ds.len();
    let mut last_checkpoint: Option<PathBuf> = None;

    for epoch in 1..=config.epochs {
        let lr = config.lr_decay.lr_at(config.lr, epoch);
        opt.set_lr(lr);
        let start = Instant::now();

        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = seeded(derive(config.seed, epoch as u64 * 2));
        order.shuffle(&mut shuffle_rng);
        let mut forward_rng = seeded(derive(config.seed, epoch as u64 * 2 + 1));

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = train_ds.batch(chunk);
            let tape = Tape::new();
            let mut ctx = ForwardCtx {
                tape: &tape,
                train: true,
                rng: &mut forward_rng,
                peers: if model.is_pr() {
                    PeerCtx::Batch
                } else {
                    PeerCtx::None
                },
            };
            let logits = model.forward(&images, &mut ctx)?;
            let loss = cross_entropy(&logits, &labels, &tape)?;
            let loss_val = loss.item().as_f64();
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_checkpoint,
                });
            }
            for (pred, &want) in logits.argmax_rows().iter().zip(&labels) {
                if *pred == want {
                    correct += 1;
                }
            }
            tape.backward(&loss)?;
            opt.step(&params);
            loss_sum += loss_val;
            batches += 1;
        }

        log.push(MetricRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / batches.max(1) as f64,
            accuracy: correct as f64 / n as f64,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        });

        if let Some((eval_ds, eval_cfg)) = eval {
            let t0 = Instant::now();
            let outcome = evaluate(model, eval_ds, Some(&train_ds.images), eval_cfg)?;
            log.push(MetricRow {
                epoch,
                split: "test".into(),
                loss: outcome.nll,
                accuracy: outcome.accuracy,
                lr,
                wall_seconds: t0.elapsed().as_secs_f64(),
            });
        }

        if let Some((dir, every)) = checkpoint {
            if every > 0 && epoch % every == 0 {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
                model.save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    Ok(log)
}

/// Shuffled index order of epoch `epoch` under `seed` (exposed so tests can
/// assert determinism of the batch schedule).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded(derive(seed, epoch as u64 * 2));
    order.shuffle(&mut rng);
    order
}

/// Mean L2 norm of the images in a `[N,C,H,W]` tensor (the E||x||_2 term of
/// the universal-perturbation budget).
pub fn expected_l2_norm<T: Scalar>(images: &Tensor<T>) -> f64 {
    let s = images.shape();
    let img_len: usize = s[1..].iter().product();
    let data = images.data();
    let mut total = 0.0f64;
    for img in data.chunks(img_len) {
        total += img.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    }
    total / s[0] as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_is_exact() {
        let decay = LrDecay::step_100_175_250();
        assert_eq!(decay.lr_at(0.1, 1), 0.1);
        assert_eq!(decay.lr_at(0.1, 99), 0.1);
        assert_eq!(decay.lr_at(0.1, 100), 0.1 * 0.1);
        assert_eq!(decay.lr_at(0.1, 174), 0.1 * 0.1);
        assert_eq!(decay.lr_at(0.1, 175), 0.1 * 0.1 * 0.1);
        assert_eq!(decay.lr_at(0.1, 300), 0.1 * 0.1f64.powi(3));
        assert_eq!(LrDecay::None.lr_at(0.5, 1000), 0.5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // loss(w) = (w - 3)^2 has its minimum at w = 3.
        let w = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap().with_grad();
        let params = vec![Param {
            name: "w".into(),
            tensor: w.clone(),
            decay: false,
        }];
        let cfg = TrainConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(OptimizerKind::Adam, &params, &cfg);
        for _ in 0..500 {
            let tape = Tape::new();
            let diff = w.add_scalar(-3.0, &tape);
            let loss = diff.mul(&diff, &tape).unwrap().sum(&tape);
            tape.backward(&loss).unwrap();
            opt.step(&params);
        }
        let wv = w.to_vec()[0];
        assert!((wv - 3.0).abs() < 1e-3, "w = {wv}");
    }

    #[test]
    fn sgd_weight_decay_shrinks_exactly() {
        let w = Tensor::<f64>::from_vec(&[2], vec![2.0, -4.0]).unwrap().with_grad();
        let params = vec![Param {
            name: "w".into(),
            tensor: w.clone(),
            decay: true,
        }];
        let cfg = TrainConfig {
            optimizer: OptimizerKind::SgdMomentum,
            lr: 0.1,
            weight_decay: 0.01,
            momentum: 0.9,
            ..Default::default()
        };
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, &params, &cfg);
        // One step with no data gradient: w' = (1 - lr * wd) * w.
        opt.step(&params);
        let factor = 1.0 - 0.1 * 0.01;
        let got = w.to_vec();
        assert!((got[0] - 2.0 * factor).abs() < 1e-12);
        assert!((got[1] - (-4.0) * factor).abs() < 1e-12);
    }

    #[test]
    fn epoch_order_is_seeded() {
        assert_eq!(epoch_order(10, 7, 1), epoch_order(10, 7, 1));
        assert_ne!(epoch_order(10, 7, 1), epoch_order(10, 7, 2));
    }

    #[test]
    fn expected_norm_of_unit_images() {
        let images = Tensor::<f32>::ones(&[3, 1, 2, 2]);
        let e = expected_l2_norm(&images);
        assert!((e - 2.0).abs() < 1e-6); // sqrt(4) per image
    }
}
