//! Linear probes trained on frozen representations.
//!
//! A probe is a fresh linear layer `logits = R W^T + b` fitted with
//! minibatch Adam on the mean cross-entropy, with a cosine learning-rate
//! schedule evaluated per step. Training is single-threaded and fully
//! determined by the inputs and [`ProbeConfig`].

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::{read_tensor, write_tensor, TensorData, TensorFile, TensorIoError};
use crate::Matrix;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("representation has {got} features, probe expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error("probe metadata: {0}")]
    Metadata(String),
}

type Result<T> = std::result::Result<T, ProbeError>;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub base_learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            base_learning_rate: 0.005,
            batch_size: 1024,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(ProbeError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !self.base_learning_rate.is_finite() || self.base_learning_rate <= 0.0 {
            return Err(ProbeError::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ProbeError::InvalidConfig("batch size must be positive".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(ProbeError::InvalidConfig("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Probe parameters: `weight` is C×D, `bias` has length C.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeWeights {
    pub weight: Matrix,
    pub bias: DVector<f64>,
}

impl ProbeWeights {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ProbeWeights {
            weight: Matrix::zeros(classes, dim),
            bias: DVector::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// `base * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(ProbeError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(base * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

pub fn probe_predict(w: &ProbeWeights, r: &Matrix) -> Result<Matrix> {
    if r.ncols() != w.dim() {
        return Err(ProbeError::DimensionMismatch {
            expected: w.dim(),
            got: r.ncols(),
        });
    }
    let mut logits = r * w.weight.transpose();
    for mut row in logits.row_iter_mut() {
        row += w.bias.transpose();
    }
    Ok(logits)
}

/// Mean cross-entropy of the probe on `(r, labels)` and its gradient with
/// respect to weight and bias.
pub fn cross_entropy_grad(w: &ProbeWeights, r: &Matrix, labels: &[usize]) -> Result<(f64, ProbeWeights)> {
    let mut g = probe_predict(w, r)?;
    let n = r.nrows() as f64;
    let mut loss = 0.0;
    for (mut row, &y) in g.row_iter_mut().zip(labels) {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
        loss -= row[y].ln();
        row[y] -= 1.0;
        row /= n;
    }
    let grad = ProbeWeights {
        weight: g.tr_mul(r),
        bias: g.row_sum().transpose(),
    };
    Ok((loss / n, grad))
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(row) => Err(ProbeError::LabelOutOfRange {
            row,
            label: labels[row],
            classes,
        }),
        None => Ok(()),
    }
}

struct Adam {
    m: ProbeWeights,
    v: ProbeWeights,
    t: i32,
}

impl Adam {
    fn new(classes: usize, dim: usize) -> Self {
        Adam {
            m: ProbeWeights::zeros(classes, dim),
            v: ProbeWeights::zeros(classes, dim),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ProbeWeights, grad: &ProbeWeights, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        };
        update(
            params.weight.as_mut_slice(),
            grad.weight.as_slice(),
            self.m.weight.as_mut_slice(),
            self.v.weight.as_mut_slice(),
        );
        update(
            params.bias.as_mut_slice(),
            grad.bias.as_slice(),
            self.m.bias.as_mut_slice(),
            self.v.bias.as_mut_slice(),
        );
    }
}

/// Uniform(-1/sqrt(D), 1/sqrt(D)) initialization for weight and bias.
pub fn init_probe(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> ProbeWeights {
    let bound = 1.0 / (dim.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    // row-major draw order keeps the layout independent of storage order
    let weight = Matrix::from_row_iterator(classes, dim, (0..classes * dim).map(|_| dist.sample(rng)));
    let bias = DVector::from_iterator(classes, (0..classes).map(|_| dist.sample(rng)));
    ProbeWeights { weight, bias }
}

/// Per-epoch record of the full-training-set loss, useful for monitoring.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epoch_loss: Vec<f64>,
}

pub fn train_probe(r: &Matrix, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ProbeWeights> {
    train_probe_logged(r, labels, classes, cfg).map(|(w, _)| w)
}

/// As [`train_probe`], also returning the full-set loss after every epoch.
pub fn train_probe_logged(
    r: &Matrix,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(ProbeWeights, TrainingLog)> {
    cfg.validate()?;
    let n = r.nrows();
    if n == 0 {
        return Err(ProbeError::EmptyTrainingSet);
    }
    if labels.len() != n {
        return Err(ProbeError::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if classes == 0 {
        return Err(ProbeError::InvalidConfig("class count must be positive".into()));
    }
    check_labels(labels, classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_probe(classes, r.ncols(), &mut rng);
    let mut adam = Adam::new(classes, r.ncols());
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainingLog::default();
    let mut step = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = r.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, mut grad) = cross_entropy_grad(&params, &x, &y)?;
            if cfg.weight_decay > 0.0 {
                grad.weight += &params.weight * cfg.weight_decay;
                grad.bias += &params.bias * cfg.weight_decay;
            }
            let lr = cosine_lr(step, total_steps, cfg.base_learning_rate)?;
            adam.step(&mut params, &grad, lr);
            step += 1;
        }
        log.epoch_loss.push(cross_entropy_grad(&params, r, labels)?.0);
    }
    Ok((params, log))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let preds = crate::funcsim::predictions(logits);
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Serialize, Deserialize)]
struct ProbeMetadata {
    config: ProbeConfig,
    classes: usize,
    dim: usize,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    init: String,
    schedule: String,
}

/// Writes `<stem>.weight.npy`, `<stem>.bias.npy` (float64) and
/// `<stem>.probe.json` with the training configuration.
pub fn save_probe(dir: &Path, stem: &str, w: &ProbeWeights, cfg: &ProbeConfig) -> Result<()> {
    write_tensor(
        dir.join(format!("{stem}.weight.npy")),
        &TensorFile::from_matrix_f64(&w.weight),
    )?;
    let bias = TensorFile::new(vec![w.classes()], TensorData::F64(w.bias.as_slice().to_vec()))?;
    write_tensor(dir.join(format!("{stem}.bias.npy")), &bias)?;
    let meta = ProbeMetadata {
        config: cfg.clone(),
        classes: w.classes(),
        dim: w.dim(),
        adam_beta1: ADAM_BETA1,
        adam_beta2: ADAM_BETA2,
        adam_eps: ADAM_EPS,
        init: "uniform(-1/sqrt(D), 1/sqrt(D))".into(),
        schedule: "cosine".into(),
    };
    let path = dir.join(format!("{stem}.probe.json"));
    let text = serde_json::to_string_pretty(&meta).map_err(|e| ProbeError::Metadata(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|source| TensorIoError::IoFailure { path, source })?;
    Ok(())
}

pub fn load_probe(dir: &Path, stem: &str) -> Result<(ProbeWeights, ProbeConfig)> {
    let weight = read_tensor(dir.join(format!("{stem}.weight.npy")))?.to_matrix()?;
    let bias = match read_tensor(dir.join(format!("{stem}.bias.npy")))? {
        TensorFile {
            data: TensorData::F64(v),
            ..
        } => DVector::from_vec(v),
        other => {
            return Err(ProbeError::Metadata(format!(
                "bias must be float64, got {:?}",
                other.dtype()
            )))
        }
    };
    let path = dir.join(format!("{stem}.probe.json"));
    let text = std::fs::read_to_string(&path).map_err(|source| TensorIoError::IoFailure { path, source })?;
    let meta: ProbeMetadata = serde_json::from_str(&text).map_err(|e| ProbeError::Metadata(e.to_string()))?;
    if bias.len() != weight.nrows() || meta.dim != weight.ncols() {
        return Err(ProbeError::Metadata("weight, bias and metadata disagree".into()));
    }
    Ok((ProbeWeights { weight, bias }, meta.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.005).unwrap(), 0.005);
        assert_eq!(cosine_lr(100, 100, 0.005).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_lr(50, 100, 0.005).unwrap(), 0.0025, epsilon = 1e-18);
        assert!(matches!(
            cosine_lr(101, 100, 1.0),
            Err(ProbeError::StepOutOfRange { .. })
        ));
        assert!(matches!(cosine_lr(0, 0, 1.0), Err(ProbeError::StepOutOfRange { .. })));
    }

    #[test]
    fn predict_is_affine() {
        let w = ProbeWeights {
            weight: Matrix::from_row_slice(2, 2, &[2.0, 3.0, 5.0, 7.0]),
            bias: DVector::from_vec(vec![0.0, 0.0]),
        };
        let r = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(probe_predict(&w, &r).unwrap().as_slice(), &[2.0, 5.0]);
        assert!(matches!(
            probe_predict(&w, &Matrix::zeros(1, 3)),
            Err(ProbeError::DimensionMismatch { expected: 2, got: 3 })
        ));

        let zero = ProbeWeights::zeros(3, 2);
        let logits = probe_predict(&zero, &Matrix::from_row_slice(2, 2, &[1., 2., 3., 4.])).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert_eq!(crate::funcsim::agreement(&logits, &logits.clone()).unwrap(), 1.0);
    }

    #[test]
    fn linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ProbeWeights {
            weight: Matrix::from_fn(3, 4, |_, _| rng.sample(StandardNormal)),
            bias: DVector::zeros(3),
        };
        let r1 = Matrix::from_fn(5, 4, |_, _| rng.sample(StandardNormal));
        let r2 = Matrix::from_fn(5, 4, |_, _| rng.sample(StandardNormal));
        let (a, b) = (1.7, -0.4);
        let lhs = probe_predict(&w, &(&r1 * a + &r2 * b)).unwrap();
        let rhs = probe_predict(&w, &r1).unwrap() * a + probe_predict(&w, &r2).unwrap() * b;
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let r = Matrix::from_fn(5, 4, |_, _| rng.sample(StandardNormal));
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let w = init_probe(3, 4, &mut rng);
            let (_, grad) = cross_entropy_grad(&w, &r, &labels).unwrap();
            let h = 1e-5;
            let loss = |w: &ProbeWeights| cross_entropy_grad(w, &r, &labels).unwrap().0;
            for idx in 0..w.weight.len() {
                let (mut plus, mut minus) = (w.clone(), w.clone());
                plus.weight.as_mut_slice()[idx] += h;
                minus.weight.as_mut_slice()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grad.weight.as_slice()[idx];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
            }
            for idx in 0..w.bias.len() {
                let (mut plus, mut minus) = (w.clone(), w.clone());
                plus.bias[idx] += h;
                minus.bias[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((fd - grad.bias[idx]).abs() <= 1e-4 * grad.bias[idx].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn identity_design_is_fit_exactly() {
        let c = 4;
        let r = Matrix::identity(c, c);
        let labels: Vec<usize> = (0..c).collect();
        let cfg = ProbeConfig {
            epochs: 200,
            base_learning_rate: 0.05,
            ..ProbeConfig::default()
        };
        let w = train_probe(&r, &labels, c, &cfg).unwrap();
        assert_eq!(accuracy(&probe_predict(&w, &r).unwrap(), &labels), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Matrix::from_fn(40, 3, |_, _| rng.sample(StandardNormal));
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let cfg = ProbeConfig {
            epochs: 3,
            batch_size: 8,
            seed: 9,
            ..ProbeConfig::default()
        };
        let a = train_probe(&r, &labels, 3, &cfg).unwrap();
        let b = train_probe(&r, &labels, 3, &cfg).unwrap();
        assert!(a
            .weight
            .iter()
            .zip(b.weight.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a
            .bias
            .iter()
            .zip(b.bias.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bad_inputs() {
        let r = Matrix::zeros(3, 2);
        let cfg = ProbeConfig::default();
        assert!(matches!(
            train_probe(&r, &[0, 1, 2], 2, &cfg),
            Err(ProbeError::LabelOutOfRange {
                row: 2,
                label: 2,
                classes: 2
            })
        ));
        assert!(matches!(
            train_probe(&Matrix::zeros(0, 2), &[], 2, &cfg),
            Err(ProbeError::EmptyTrainingSet)
        ));
        let zero_epochs = ProbeConfig { epochs: 0, ..cfg };
        assert!(matches!(
            train_probe(&r, &[0, 1, 1], 2, &zero_epochs),
            Err(ProbeError::InvalidConfig(_))
        ));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = init_probe(3, 5, &mut rng);
        let cfg = ProbeConfig {
            seed: 17,
            ..ProbeConfig::default()
        };
        save_probe(dir.path(), "m", &w, &cfg).unwrap();
        let (back, back_cfg) = load_probe(dir.path(), "m").unwrap();
        assert_eq!(back, w);
        assert_eq!(back_cfg, cfg);
    }
}
