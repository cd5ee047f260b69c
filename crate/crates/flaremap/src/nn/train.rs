//! Binary cross-entropy training with minibatch SGD or Adam and
//! patience-based early stopping.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::model::{Gradients, Model};
use super::tensor::Tensor;
use super::NnError;

/// Probabilities are clipped to [EPS, 1 - EPS] inside the loss so a saturated
/// sigmoid cannot produce an infinite log.
const BCE_CLIP: f64 = 1e-7;

/// Classification threshold: a score of exactly 0.5 counts as positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// One training or validation example: an input of shape
/// `[channels, height, width]` and a 0/1 label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub label: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// A validation loss must beat the best seen so far by strictly more
    /// than this to count as an improvement.
    pub es_min_delta: f64,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub es_patience: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            es_min_delta: 0.002,
            es_patience: 5,
            optimizer: OptimizerKind::Adam,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: &str| Err(NnError::Config(msg.to_string()));
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be finite and positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !self.es_min_delta.is_finite() || self.es_min_delta < 0.0 {
            return bad("es_min_delta must be finite and non-negative");
        }
        if self.es_patience == 0 {
            return bad("es_patience must be at least 1");
        }
        Ok(())
    }
}

/// Per-epoch record. `best_epoch` tracks the epoch whose weights would be
/// restored if training stopped now; `stopped_early` is set on the final
/// record when patience ran out before `max_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mean binary cross-entropy over a batch. Labels must be exactly 0.0 or
/// 1.0; predictions are clipped to [1e-7, 1 - 1e-7] before the log.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64, NnError> {
    let (loss, _) = bce_loss_and_grad(probs, labels)?;
    Ok(loss)
}

/// Loss plus d(loss)/d(prob) per element. The gradient is zero where the
/// prediction lies outside the clip range, matching the clipped forward
/// value exactly.
pub fn bce_loss_and_grad(probs: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if probs.len() != labels.len() {
        return Err(NnError::Shape {
            context: "loss predictions vs labels".to_string(),
            lhs: vec![probs.len()],
            rhs: vec![labels.len()],
        });
    }
    if probs.is_empty() {
        return Err(NnError::EmptySplit("loss"));
    }
    for &y in labels {
        if y != 0.0 && y != 1.0 {
            return Err(NnError::BadLabel(y));
        }
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let clipped = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        total += -(y * clipped.ln() + (1.0 - y) * (1.0 - clipped).ln());
        let inside = p > BCE_CLIP && p < 1.0 - BCE_CLIP;
        grad.push(if inside {
            (-y / clipped + (1.0 - y) / (1.0 - clipped)) / n
        } else {
            0.0
        });
    }
    Ok((total / n, grad))
}

/// SGD or Adam over the model's parameter slots. Adam keeps first and
/// second moment buffers per parameter tensor with bias correction
/// (beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u32,
    moments: Vec<Option<AdamSlot>>,
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m_weight: Vec<f64>,
    v_weight: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, model: &Model) -> Optimizer {
        let moments = model
            .layers()
            .iter()
            .map(|layer| {
                layer.params().map(|(w, b)| AdamSlot {
                    m_weight: vec![0.0; w.len()],
                    v_weight: vec![0.0; w.len()],
                    m_bias: vec![0.0; b.len()],
                    v_bias: vec![0.0; b.len()],
                })
            })
            .collect();
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            moments,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<(), NnError> {
        if grads.layers.len() != model.layers().len() {
            return Err(NnError::Shape {
                context: "optimizer gradients vs model layers".to_string(),
                lhs: vec![grads.layers.len()],
                rhs: vec![model.layers().len()],
            });
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        let t = self.step_count;
        for (i, layer) in model.layers_mut().iter_mut().enumerate() {
            let Some(grad) = &grads.layers[i] else { continue };
            let Some((weight, bias)) = layer.params_mut() else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    sgd_update(weight.data_mut(), grad.weight.data(), lr);
                    sgd_update(bias.data_mut(), grad.bias.data(), lr);
                }
                OptimizerKind::Adam => {
                    let slot = self.moments[i].as_mut().expect("moment slot exists for param layer");
                    adam_update(weight.data_mut(), grad.weight.data(), &mut slot.m_weight, &mut slot.v_weight, lr, t);
                    adam_update(bias.data_mut(), grad.bias.data(), &mut slot.m_bias, &mut slot.v_bias, lr, t);
                }
            }
        }
        Ok(())
    }
}

fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u32) {
    let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience counter over validation loss.
///
/// The reference is the running minimum: an epoch improves only when its
/// loss undercuts the best loss seen so far by strictly more than
/// `min_delta`. Slow drifts where each epoch shaves off less than
/// `min_delta` therefore exhaust patience even though the loss is falling.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    min_delta: f64,
    patience: usize,
    best_val: f64,
    best_epoch: usize,
    counter: usize,
}

impl EarlyStopping {
    pub fn new(min_delta: f64, patience: usize) -> EarlyStopping {
        EarlyStopping {
            min_delta,
            patience,
            best_val: f64::INFINITY,
            best_epoch: 0,
            counter: 0,
        }
    }

    /// Feed one epoch's validation loss. `Improved` means the caller should
    /// snapshot the weights; `Stop` means patience just ran out.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> EsDecision {
        let improvement = self.best_val - val_loss;
        self.best_val = self.best_val.min(val_loss);
        if improvement > self.min_delta {
            self.best_epoch = epoch;
            self.counter = 0;
            EsDecision::Improved
        } else {
            self.counter += 1;
            if self.counter >= self.patience {
                EsDecision::Stop
            } else {
                EsDecision::NoImprovement
            }
        }
    }

    /// Epoch of the most recent snapshot-worthy improvement.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_val(&self) -> f64 {
        self.best_val
    }
}

fn stack_batch(samples: &[Sample], indices: &[usize]) -> Result<(Tensor, Vec<f64>), NnError> {
    let first = &samples[indices[0]].input;
    let per_sample = first.shape().to_vec();
    let mut shape = Vec::with_capacity(per_sample.len() + 1);
    shape.push(indices.len());
    shape.extend_from_slice(&per_sample);
    let mut data = Vec::with_capacity(indices.len() * first.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let sample = &samples[idx];
        if sample.input.shape() != per_sample.as_slice() {
            return Err(NnError::Shape {
                context: "sample shapes within a batch".to_string(),
                lhs: sample.input.shape().to_vec(),
                rhs: per_sample,
            });
        }
        data.extend_from_slice(sample.input.data());
        labels.push(sample.label);
    }
    Ok((Tensor::new(shape, data)?, labels))
}

/// Run every sample through the model in batches and return its score,
/// preserving order.
pub fn score_samples(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>, NnError> {
    if batch_size == 0 {
        return Err(NnError::Config("batch_size must be at least 1".to_string()));
    }
    let indices: Vec<usize> = (0..samples.len()).collect();
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in indices.chunks(batch_size) {
        let (batch, _) = stack_batch(samples, chunk)?;
        scores.extend(model.predict(&batch)?);
    }
    Ok(scores)
}

fn evaluate_split(model: &Model, samples: &[Sample], batch_size: usize) -> Result<(f64, f64), NnError> {
    let scores = score_samples(model, samples, batch_size)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let loss = bce_loss(&scores, &labels)?;
    let correct = scores
        .iter()
        .zip(&labels)
        .filter(|(&p, &y)| {
            let predicted = if p >= DECISION_THRESHOLD { 1.0 } else { 0.0 };
            predicted == y
        })
        .count();
    Ok((loss, correct as f64 / samples.len() as f64))
}

/// Train in place. Returns per-epoch history; on return the model holds the
/// weights of `best_epoch` (the early-stopping snapshot), not necessarily
/// the last epoch's.
///
/// Runs are bitwise deterministic for a fixed config and inputs: batch
/// order comes from a ChaCha stream seeded with `config.seed` and all
/// arithmetic is sequential f64.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainReport, NnError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(NnError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(NnError::EmptySplit("val"));
    }
    for s in train_set.iter().chain(val_set) {
        if s.label != 0.0 && s.label != 1.0 {
            return Err(NnError::BadLabel(s.label));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model);
    let mut stopper = EarlyStopping::new(config.es_min_delta, config.es_patience);
    let mut snapshot = model.clone();
    let mut history: Vec<EpochStats> = Vec::new();
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let (batch, labels) = stack_batch(train_set, chunk)?;
            let fwd = model.forward(&batch)?;
            let probs = fwd.output().data().to_vec();
            let (batch_loss, grad) = bce_loss_and_grad(&probs, &labels)?;
            loss_sum += batch_loss * chunk.len() as f64;
            let upstream = Tensor::new(vec![chunk.len(), 1], grad)?;
            let grads = model.backward(&fwd, &upstream)?;
            optimizer.step(model, &grads)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, val_accuracy) = evaluate_split(model, val_set, config.batch_size)?;

        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(NnError::Diverged {
                epoch,
                stats: history,
            });
        }

        let decision = stopper.observe(epoch, val_loss);
        if decision == EsDecision::Improved {
            snapshot = model.clone();
        }
        let stopping = decision == EsDecision::Stop;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            best_epoch: stopper.best_epoch(),
            stopped_early: stopping,
        });
        if stopping {
            stopped_early = true;
            break;
        }
    }

    *model = snapshot;
    Ok(TrainReport {
        history,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_val(),
        stopped_early,
    })
}

/// Write the epoch history as CSV with a fixed four-column header.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<(), NnError> {
    let io_err = |source: std::io::Error| NnError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    writeln!(out, "epoch,train_loss,val_loss,val_accuracy").map_err(io_err)?;
    for row in history {
        writeln!(
            out,
            "{},{},{},{}",
            row.epoch, row.train_loss, row.val_loss, row.val_accuracy
        )
        .map_err(io_err)?;
    }
    std::fs::write(path, out).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::LayerSpec;
    use rand::Rng;

    #[test]
    fn bce_matches_hand_computed_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - ln2).abs() < 1e-12);
        // A fully saturated prediction costs -ln(1 - 1e-7), about 1e-7.
        let saturated = bce_loss(&[1.0], &[1.0]).unwrap();
        assert!((saturated - 1.0000000494736474e-7).abs() < 1e-15);
        let pair = bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap();
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((pair - expected).abs() < 1e-12);
        assert!((pair - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn bce_rejects_soft_labels() {
        assert!(matches!(
            bce_loss(&[0.5], &[0.5]),
            Err(NnError::BadLabel(l)) if l == 0.5
        ));
        assert!(bce_loss(&[0.5], &[-1.0]).is_err());
    }

    #[test]
    fn bce_clips_extreme_predictions_to_finite_loss() {
        for p in [0.0, 1.0, -3.0, 7.5] {
            for y in [0.0, 1.0] {
                let loss = bce_loss(&[p], &[y]).unwrap();
                assert!(loss.is_finite(), "p={p} y={y}");
            }
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let probs = [0.2, 0.5, 0.73, 0.91];
        let labels = [0.0, 1.0, 1.0, 0.0];
        let (_, grad) = bce_loss_and_grad(&probs, &labels).unwrap();
        let h = 1e-6;
        for i in 0..probs.len() {
            let mut plus = probs;
            plus[i] += h;
            let mut minus = probs;
            minus[i] -= h;
            let fd = (bce_loss(&plus, &labels).unwrap() - bce_loss(&minus, &labels).unwrap()) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-6, "element {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn bce_gradient_is_zero_outside_clip_range() {
        let (_, grad) = bce_loss_and_grad(&[0.0, 1.0, 0.5], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[1], 0.0);
        assert!(grad[2] < 0.0);
    }

    #[test]
    fn early_stopping_walks_the_slow_drift_sequence() {
        // Each epoch after the second improves on its predecessor by less
        // than min_delta, so patience runs out even though loss is falling.
        let losses = [1.0, 0.9, 0.899, 0.898, 0.8975, 0.897, 0.8969];
        let mut es = EarlyStopping::new(0.002, 5);
        let mut decisions = Vec::new();
        for (i, &loss) in losses.iter().enumerate() {
            decisions.push(es.observe(i + 1, loss));
        }
        use EsDecision::*;
        assert_eq!(
            decisions,
            vec![Improved, Improved, NoImprovement, NoImprovement, NoImprovement, NoImprovement, Stop]
        );
        assert_eq!(es.best_epoch(), 2);
        assert_eq!(es.best_val(), 0.8969);
    }

    #[test]
    fn early_stopping_constant_loss_stops_after_patience() {
        let mut es = EarlyStopping::new(0.0, 3);
        assert_eq!(es.observe(1, 0.5), EsDecision::Improved);
        assert_eq!(es.observe(2, 0.5), EsDecision::NoImprovement);
        assert_eq!(es.observe(3, 0.5), EsDecision::NoImprovement);
        assert_eq!(es.observe(4, 0.5), EsDecision::Stop);
        assert_eq!(es.best_epoch(), 1);
    }

    #[test]
    fn early_stopping_requires_strict_improvement() {
        // Values chosen to be exactly representable so the comparison with
        // min_delta is not perturbed by rounding.
        let mut es = EarlyStopping::new(0.25, 2);
        assert_eq!(es.observe(1, 1.0), EsDecision::Improved);
        // A drop of exactly min_delta is not enough.
        assert_eq!(es.observe(2, 0.75), EsDecision::NoImprovement);
        // 0.3125 below the running best (0.75) clears min_delta.
        assert_eq!(es.observe(3, 0.4375), EsDecision::Improved);
        assert_eq!(es.best_epoch(), 3);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for breaker in [
            &|c: &mut TrainConfig| c.learning_rate = 0.0,
            &|c: &mut TrainConfig| c.learning_rate = f64::NAN,
            &|c: &mut TrainConfig| c.batch_size = 0,
            &|c: &mut TrainConfig| c.max_epochs = 0,
            &|c: &mut TrainConfig| c.es_min_delta = -0.1,
            &|c: &mut TrainConfig| c.es_patience = 0,
        ] as [&dyn Fn(&mut TrainConfig); 6]
        {
            let mut config = TrainConfig::default();
            breaker(&mut config);
            assert!(matches!(config.validate(), Err(NnError::Config(_))));
        }
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut model = dense_model(0.4);
        let grads = fake_grads(&model, 0.3, -0.2);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.01, &model);
        opt.step(&mut model, &grads).unwrap();
        let (w, b) = model.layers()[1].params().unwrap();
        assert_eq!(w.data()[0], 0.4 - 0.01 * 0.3);
        assert_eq!(b.data()[0], 0.0 - 0.01 * -0.2);
    }

    #[test]
    fn adam_first_step_moves_by_signed_learning_rate() {
        // After one bias-corrected step, m_hat = g and v_hat = g^2, so the
        // update collapses to lr * sign(g) up to epsilon.
        let mut model = dense_model(0.4);
        let grads = fake_grads(&model, 0.3, -0.2);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &model);
        opt.step(&mut model, &grads).unwrap();
        let (w, b) = model.layers()[1].params().unwrap();
        assert!((w.data()[0] - (0.4 - 0.01)).abs() < 1e-9);
        assert!((b.data()[0] - 0.01).abs() < 1e-9);
    }

    fn dense_model(weight: f64) -> Model {
        let mut model = Model::with_zero_params(
            [1, 1, 1],
            &[LayerSpec::Flatten, LayerSpec::Dense { units: 1 }],
        )
        .unwrap();
        model.layers_mut()[1].params_mut().unwrap().0.data_mut()[0] = weight;
        model
    }

    fn fake_grads(model: &Model, weight_grad: f64, bias_grad: f64) -> Gradients {
        let mut layers: Vec<Option<crate::nn::layers::LayerGrads>> = vec![None; model.layers().len()];
        layers[1] = Some(crate::nn::layers::LayerGrads {
            weight: Tensor::new(vec![1, 1], vec![weight_grad]).unwrap(),
            bias: Tensor::new(vec![1], vec![bias_grad]).unwrap(),
        });
        Gradients {
            layers,
            input: Tensor::zeros(&[1, 1, 1, 1]),
        }
    }

    /// Two well-separated point clouds in a 2-feature input.
    fn separable_samples(count_per_class: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for i in 0..(2 * count_per_class) {
            let label = (i % 2) as f64;
            let center = if label == 1.0 { 1.0 } else { -1.0 };
            let a = center + rng.random_range(-0.25..0.25);
            let b = rng.random_range(-0.25..0.25);
            samples.push(Sample {
                input: Tensor::new(vec![2, 1, 1], vec![a, b]).unwrap(),
                label,
            });
        }
        samples
    }

    fn toy_classifier(seed: u64) -> Model {
        Model::init(
            [2, 1, 1],
            &[LayerSpec::Flatten, LayerSpec::Dense { units: 1 }, LayerSpec::Sigmoid],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn separable_problem_trains_to_perfect_accuracy() {
        let train_set = separable_samples(20, 1);
        let val_set = separable_samples(8, 2);
        let mut model = toy_classifier(7);
        let config = TrainConfig {
            learning_rate: 0.5,
            batch_size: 64,
            max_epochs: 10,
            es_min_delta: 0.0,
            es_patience: 10,
            optimizer: OptimizerKind::Sgd,
            seed: 3,
        };
        let report = train(&mut model, &train_set, &val_set, &config).unwrap();
        assert_eq!(report.history.len(), 10);
        for pair in report.history.windows(2) {
            assert!(
                pair[1].train_loss < pair[0].train_loss,
                "train loss must fall every epoch on this problem: {} -> {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
        let last = report.history.last().unwrap();
        assert_eq!(last.val_accuracy, 1.0);
    }

    #[test]
    fn training_is_bitwise_deterministic_per_seed() {
        let train_set = separable_samples(10, 4);
        let val_set = separable_samples(4, 5);
        let config = TrainConfig {
            learning_rate: 0.1,
            batch_size: 4,
            max_epochs: 4,
            optimizer: OptimizerKind::Adam,
            seed: 9,
            ..TrainConfig::default()
        };
        let weights = |config: &TrainConfig| {
            let mut model = toy_classifier(1);
            let report = train(&mut model, &train_set, &val_set, config).unwrap();
            let (w, b) = model.layers()[1].params().unwrap();
            let bits: Vec<u64> = w.data().iter().chain(b.data()).map(|v| v.to_bits()).collect();
            (bits, report.history)
        };
        let (bits_a, hist_a) = weights(&config);
        let (bits_b, hist_b) = weights(&config);
        assert_eq!(bits_a, bits_b);
        assert_eq!(hist_a, hist_b);
        let (bits_c, _) = weights(&TrainConfig { seed: 10, ..config });
        assert_ne!(bits_a, bits_c);
    }

    #[test]
    fn early_stopping_restores_best_epoch_weights() {
        // An absurd learning rate makes later epochs worse; the returned
        // model must carry the snapshot from the best epoch, which predicts
        // identically to a fresh run truncated at that epoch.
        let train_set = separable_samples(10, 6);
        let val_set = separable_samples(6, 7);
        let config = TrainConfig {
            learning_rate: 20.0,
            batch_size: 4,
            max_epochs: 30,
            es_min_delta: 0.0,
            es_patience: 3,
            optimizer: OptimizerKind::Sgd,
            seed: 11,
        };
        let mut model = toy_classifier(2);
        let report = train(&mut model, &train_set, &val_set, &config).unwrap();
        let best = report.best_epoch;
        assert!(best >= 1);

        let mut replay = toy_classifier(2);
        let truncated = TrainConfig {
            max_epochs: best,
            es_patience: usize::MAX,
            ..config
        };
        let _ = train(&mut replay, &train_set, &val_set, &truncated).unwrap();
        assert_eq!(replay, model);
    }

    #[test]
    fn stopped_early_is_flagged_on_the_final_epoch_only() {
        let train_set = separable_samples(10, 8);
        let val_set = separable_samples(4, 9);
        let mut model = toy_classifier(3);
        let config = TrainConfig {
            learning_rate: 1e-9,
            batch_size: 8,
            max_epochs: 50,
            es_min_delta: 0.5,
            es_patience: 4,
            optimizer: OptimizerKind::Sgd,
            seed: 12,
        };
        let report = train(&mut model, &train_set, &val_set, &config).unwrap();
        // Epoch 1 improves on +inf; then four stalls exhaust patience.
        assert_eq!(report.history.len(), 5);
        assert!(report.stopped_early);
        let flags: Vec<bool> = report.history.iter().map(|s| s.stopped_early).collect();
        assert_eq!(flags, vec![false, false, false, false, true]);
        assert_eq!(report.best_epoch, 1);
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let mut train_set = separable_samples(4, 13);
        train_set[2].input = Tensor::new(vec![2, 1, 1], vec![f64::NAN, 0.0]).unwrap();
        let val_set = separable_samples(2, 14);
        let mut model = toy_classifier(4);
        let err = train(&mut model, &train_set, &val_set, &TrainConfig::default()).unwrap_err();
        match err {
            NnError::Diverged { epoch, stats } => {
                assert_eq!(epoch, 1);
                assert!(stats.is_empty());
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn history_csv_has_fixed_header_and_one_row_per_epoch() {
        let history = vec![
            EpochStats {
                epoch: 1,
                train_loss: 0.75,
                val_loss: 0.6931471805599453,
                val_accuracy: 0.5,
                best_epoch: 1,
                stopped_early: false,
            },
            EpochStats {
                epoch: 2,
                train_loss: 0.5,
                val_loss: 0.25,
                val_accuracy: 1.0,
                best_epoch: 2,
                stopped_early: false,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history_csv(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss,val_accuracy");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,0.75,0.6931471805599453,0.5");
        assert_eq!(lines[2], "2,0.5,0.25,1");
    }

    #[test]
    fn score_samples_matches_single_sample_predicts() {
        let samples = separable_samples(5, 15);
        let model = toy_classifier(5);
        let batched = score_samples(&model, &samples, 3).unwrap();
        for (i, sample) in samples.iter().enumerate() {
            let mut shape = vec![1];
            shape.extend_from_slice(sample.input.shape());
            let single = Tensor::new(shape, sample.input.data().to_vec()).unwrap();
            let p = model.predict(&single).unwrap()[0];
            assert_eq!(batched[i], p, "sample {i}");
        }
    }

    #[test]
    fn empty_splits_are_rejected() {
        let samples = separable_samples(2, 16);
        let mut model = toy_classifier(6);
        assert!(matches!(
            train(&mut model, &[], &samples, &TrainConfig::default()),
            Err(NnError::EmptySplit("train"))
        ));
        assert!(matches!(
            train(&mut model, &samples, &[], &TrainConfig::default()),
            Err(NnError::EmptySplit("val"))
        ));
    }
}
