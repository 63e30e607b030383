//! Adam training loop for the sequence classifier.
//!
//! [`train`] fits a [`Model`] on a [`Dataset`], evaluates on a held-out
//! split, and returns a [`TrainReport`] with per-epoch metrics, the final
//! test accuracy, and how evenly the router spread queries over heads.
//! Everything is seeded; the same inputs give bitwise-identical runs.

use super::model::{Model, ModelConfig};
use super::Dataset;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimization settings. Defaults ride the copy task to high accuracy in a
/// couple thousand steps.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions { lr: 1e-3, batch: 8, steps: 2000, seed: 42 }
    }
}

/// Metrics aggregated over one pass through the training data.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches.
    pub mean_loss: f64,
    /// Training accuracy over the epoch's batches.
    pub accuracy: f64,
}

/// What a training run produced, beyond the weights themselves.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Mean batch loss at every optimization step, in order.
    pub step_losses: Vec<f64>,
    pub final_test_accuracy: f64,
    /// Per layer: fraction of test-set queries routed to each head.
    /// Rows sum to 1.
    pub router_utilization: Vec<Vec<f64>>,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// Human-readable run summary.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch {:>3}  loss {:.4}  train-acc {:.4}\n",
                e.epoch, e.mean_loss, e.accuracy
            ));
        }
        out.push_str(&format!("test accuracy {:.4}\n", self.final_test_accuracy));
        for (l, hist) in self.router_utilization.iter().enumerate() {
            let cells: Vec<String> = hist.iter().map(|f| format!("{:.3}", f)).collect();
            out.push_str(&format!("layer {} head utilization [{}]\n", l, cells.join(", ")));
        }
        out.push_str(&format!("wall time {:.1}s\n", self.wall_seconds));
        out
    }

    /// Per-epoch metrics as CSV (`epoch,loss,accuracy`).
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{}\n",
                e.epoch,
                crate::bench::fmt_sig(e.mean_loss, 6),
                crate::bench::fmt_sig(e.accuracy, 6)
            ));
        }
        out
    }
}

/// First-moment/second-moment optimizer state, shaped like the model.
struct Adam {
    m: Model,
    v: Model,
    t: u64,
}

impl Adam {
    fn new(model: &Model) -> Adam {
        Adam { m: model.zeros_like(), v: model.zeros_like(), t: 0 }
    }

    fn step(&mut self, model: &mut Model, grads: &mut Model, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let mts = self.m.tensors_mut();
        let vts = self.v.tensors_mut();
        let gts = grads.tensors_mut();
        for ((((_, w), (_, m)), (_, v)), (_, g)) in
            model.tensors_mut().into_iter().zip(mts).zip(vts).zip(gts)
        {
            for (((wv, mv), vv), gv) in
                w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *wv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Accuracy on a dataset, plus per-layer head-usage counts from the traces.
fn evaluate(model: &Model, data: &Dataset, seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let heads = model.cfg.attention.heads;
    let mut counts = vec![vec![0u64; heads]; model.cfg.layers];
    let mut correct = 0usize;
    for (i, (seq, &label)) in data.sequences.iter().zip(&data.labels).enumerate() {
        let (logits, trace) = model.forward(seq, seed ^ (i as u64).wrapping_mul(0x9E37_79B9))?;
        if crate::layer::argmax_lowest(logits.row(0)) == label {
            correct += 1;
        }
        for (l, lt) in trace.layers.iter().enumerate() {
            for &h in &lt.attn.routing.head_of {
                counts[l][h] += 1;
            }
        }
    }
    let total: u64 = counts[0].iter().sum();
    let hist = counts
        .into_iter()
        .map(|layer| layer.into_iter().map(|c| c as f64 / total as f64).collect())
        .collect();
    Ok((correct as f64 / data.len() as f64, hist))
}

/// Trains a fresh model and reports how it went.
///
/// Runs `opts.steps` Adam updates over shuffled mini-batches, re-shuffling
/// at each epoch boundary. A non-finite batch loss aborts with
/// [`Error::Diverged`] rather than training on garbage.
pub fn train(
    cfg: &ModelConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    opts: &TrainOptions,
) -> Result<(Model, TrainReport)> {
    train_data.validate()?;
    test_data.validate()?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train",
            msg: "both splits need at least one example".into(),
        });
    }
    if opts.batch == 0 || opts.batch > train_data.len() {
        return Err(Error::InvalidArgument {
            op: "train",
            msg: format!("batch {} outside 1..={}", opts.batch, train_data.len()),
        });
    }
    if cfg.num_classes != train_data.num_classes {
        return Err(Error::InvalidConfig(format!(
            "model has {} classes but data has {}",
            cfg.num_classes, train_data.num_classes
        )));
    }

    let started = Instant::now();
    let seq_len = train_data.seq_len();
    let mut model = Model::init(cfg, train_data.vocab_size, seq_len, opts.seed)?;
    let mut adam = Adam::new(&model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5117_5EED);

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;
    let mut epoch = 0usize;

    let mut step_losses = Vec::with_capacity(opts.steps);
    let mut epochs = Vec::new();
    let mut epoch_loss_sum = 0.0;
    let mut epoch_correct = 0usize;
    let mut epoch_seen = 0usize;

    for step in 0..opts.steps {
        if cursor + opts.batch > order.len() {
            // epoch boundary: record metrics, reshuffle, restart
            if epoch_seen > 0 {
                epochs.push(EpochStats {
                    epoch,
                    mean_loss: epoch_loss_sum / (epoch_seen / opts.batch).max(1) as f64,
                    accuracy: epoch_correct as f64 / epoch_seen as f64,
                });
            }
            epoch += 1;
            epoch_loss_sum = 0.0;
            epoch_correct = 0;
            epoch_seen = 0;
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }

        let mut grads = model.zeros_like();
        let mut batch_loss = 0.0;
        for k in 0..opts.batch {
            let idx = order[cursor + k];
            let routing_seed =
                opts.seed ^ (step as u64) << 20 ^ (idx as u64).wrapping_mul(0x9E37_79B9);
            let (logits, trace) = model.forward(&train_data.sequences[idx], routing_seed)?;
            if crate::layer::argmax_lowest(logits.row(0)) == train_data.labels[idx] {
                epoch_correct += 1;
            }
            batch_loss +=
                model.backward(&logits, &trace, train_data.labels[idx], &mut grads)?;
        }
        cursor += opts.batch;
        epoch_seen += opts.batch;

        batch_loss /= opts.batch as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        step_losses.push(batch_loss);
        epoch_loss_sum += batch_loss;

        for (_, g) in grads.tensors_mut() {
            g.scale_in_place(1.0 / opts.batch as f64);
        }
        adam.step(&mut model, &mut grads, opts.lr);
    }
    // close out the partial epoch so short runs still report something
    if epoch_seen > 0 {
        epochs.push(EpochStats {
            epoch,
            mean_loss: epoch_loss_sum / (epoch_seen / opts.batch).max(1) as f64,
            accuracy: epoch_correct as f64 / epoch_seen as f64,
        });
    }

    let (final_test_accuracy, router_utilization) =
        evaluate(&model, test_data, opts.seed ^ 0x7E57)?;
    let report = TrainReport {
        epochs,
        step_losses,
        final_test_accuracy,
        router_utilization,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::FeatureFn;
    use crate::config::Rate;
    use crate::layer::AdamraConfig;
    use crate::tasks::gen_copy_task;

    fn tiny_model_config() -> ModelConfig {
        let mut attention =
            AdamraConfig::new(8, 2, 2, vec![Rate::ONE, Rate::new(1, 2).unwrap()]).unwrap();
        attention.phi = FeatureFn::EluPlusOne;
        ModelConfig {
            layers: 1,
            d: 8,
            ffn_hidden: 16,
            attention,
            pos_embedding: true,
            num_classes: 2,
        }
    }

    fn tiny_splits(seed: u64) -> (Dataset, Dataset) {
        let mut data = gen_copy_task(seed, 8, 6, 120).unwrap();
        let test = data.split_off(24, "test").unwrap();
        (data, test)
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let cfg = tiny_model_config();
        let (tr, te) = tiny_splits(0);
        let opts = TrainOptions { lr: 0.0, batch: 4, steps: 5, seed: 9 };
        let (model, report) = train(&cfg, &tr, &te, &opts).unwrap();
        let fresh = Model::init(&cfg, tr.vocab_size, tr.seq_len(), 9).unwrap();
        let mut a = model;
        let mut b = fresh;
        let bts = b.tensors_mut();
        for ((_, wa), (_, wb)) in a.tensors_mut().into_iter().zip(bts) {
            assert_eq!(wa.data(), wb.data());
        }
        assert_eq!(report.step_losses.len(), 5);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = tiny_model_config();
        let (tr, te) = tiny_splits(1);
        let opts = TrainOptions { lr: 1e-3, batch: 4, steps: 12, seed: 5 };
        let (_, r1) = train(&cfg, &tr, &te, &opts).unwrap();
        let (_, r2) = train(&cfg, &tr, &te, &opts).unwrap();
        assert_eq!(r1.step_losses, r2.step_losses);
        assert_eq!(r1.final_test_accuracy, r2.final_test_accuracy);
        assert_eq!(r1.router_utilization, r2.router_utilization);
    }

    #[test]
    fn early_loss_trends_down_for_most_seeds() {
        // full-width defaults on the real task: over the first 50 steps the
        // running mean of the loss must fall for at least 3 of 4 seeds
        let cfg = ModelConfig::default_for(2);
        let mut improved = 0;
        for seed in [42u64, 43, 44, 45] {
            let mut data = gen_copy_task(seed, 64, 8, 800).unwrap();
            let test = data.split_off(160, "test").unwrap();
            let opts = TrainOptions { steps: 50, seed, ..TrainOptions::default() };
            let (_, report) = train(&cfg, &data, &test, &opts).unwrap();
            assert!(report.step_losses.iter().all(|l| l.is_finite()));
            let first: f64 = report.step_losses[..10].iter().sum::<f64>() / 10.0;
            let last: f64 = report.step_losses[40..].iter().sum::<f64>() / 10.0;
            if last < first {
                improved += 1;
            }
        }
        assert!(improved >= 3, "loss fell for only {} of 4 seeds", improved);
    }

    #[test]
    fn utilization_rows_are_distributions() {
        let cfg = tiny_model_config();
        let (tr, te) = tiny_splits(3);
        let opts = TrainOptions { lr: 1e-3, batch: 4, steps: 8, seed: 1 };
        let (_, report) = train(&cfg, &tr, &te, &opts).unwrap();
        assert_eq!(report.router_utilization.len(), cfg.layers);
        for row in &report.router_utilization {
            assert_eq!(row.len(), cfg.attention.heads);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "histogram sums to {}", sum);
            assert!(row.iter().all(|&f| (0.0..=1.0).contains(&f)));
        }
        assert!(report.wall_seconds > 0.0);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let cfg = tiny_model_config();
        let (tr, te) = tiny_splits(4);
        let opts = TrainOptions { lr: 1e18, batch: 8, steps: 400, seed: 2 };
        match train(&cfg, &tr, &te, &opts) {
            Err(Error::Diverged { .. }) => {}
            Err(other) => panic!("expected divergence, got {:?}", other),
            // Adam's per-coordinate normalization is hard to blow up; if it
            // survives, the losses must at least still all be finite
            Ok((_, report)) => {
                assert!(report.step_losses.iter().all(|l| l.is_finite()))
            }
        }
    }

    #[test]
    fn train_rejects_mismatched_shapes() {
        let cfg = tiny_model_config();
        let (tr, te) = tiny_splits(5);
        let opts = TrainOptions { batch: 1000, ..TrainOptions::default() };
        assert!(train(&cfg, &tr, &te, &opts).is_err());

        let mut wrong = tiny_model_config();
        wrong.num_classes = 7;
        assert!(train(&wrong, &tr, &te, &TrainOptions::default()).is_err());
    }
}
