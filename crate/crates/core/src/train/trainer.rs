use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VisionModel};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

use super::data::{all_offsets, gen_stripes_with_offsets, Dataset};
use super::idx::load_idx_dataset;
use super::optim::{adamw_step, cosine_lr, AdamWState, Schedule};

/// Which bar offsets each stripes split may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripesSplit {
    /// Train and test both draw from every offset.
    All,
    /// Train on even offsets, test on odd ones.
    EvenOdd,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Stripes {
        train_samples: usize,
        test_samples: usize,
        split: StripesSplit,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

/// Default stripes train and test set size.
pub const DEFAULT_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    /// Defaults to a tenth of `total_steps`.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    /// Accuracy is measured every `eval_every` steps and at the last step;
    /// 0 means only at the last step.
    pub eval_every: usize,
    pub data: DataSpec,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 32,
            total_steps: 200,
            seed: 0,
            label_smoothing: 0.1,
            base_lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: None,
            weight_decay: 0.05,
            eval_every: 50,
            data: DataSpec::Stripes {
                train_samples: DEFAULT_SAMPLES,
                test_samples: DEFAULT_SAMPLES,
                split: StripesSplit::All,
            },
            metrics_path: "metrics.csv".into(),
            checkpoint_path: "model.ckpt".into(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        let warmup = self.warmup_steps.unwrap_or(self.total_steps / 10);
        Schedule::new(warmup, self.total_steps, self.base_lr, self.min_lr)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.model.num_classes < 2 {
            return Err(Error::Config("training needs num_classes >= 2".into()));
        }
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Train and test sets, checked against the model's input shape.
    pub fn datasets<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        let m = &self.model;
        let (train, test) = match &self.data {
            DataSpec::Stripes {
                train_samples,
                test_samples,
                split,
            } => {
                if m.image_h != m.image_w || m.channels != 1 || m.num_classes != 2 {
                    return Err(Error::Config(
                        "stripes data needs square single-channel images and num_classes = 2".into(),
                    ));
                }
                let grid = m.image_h;
                let offsets = all_offsets(grid);
                let (tr, te): (Vec<usize>, Vec<usize>) = match split {
                    StripesSplit::All => (offsets.clone(), offsets),
                    StripesSplit::EvenOdd => offsets.iter().partition(|&&o| o % 2 == 0),
                };
                let seed = SeededRng::new(self.seed);
                (
                    gen_stripes_with_offsets(*train_samples, grid, seed.fork(1).seed(), &tr)?,
                    gen_stripes_with_offsets(*test_samples, grid, seed.fork(2).seed(), &te)?,
                )
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx_dataset(train_images, train_labels, m.num_classes)?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => load_idx_dataset(i, l, m.num_classes)?,
                    (None, None) => train.clone(),
                    _ => {
                        return Err(Error::Config(
                            "test_images and test_labels must be given together".into(),
                        ))
                    }
                };
                (train, test)
            }
        };
        for (name, ds) in [("train", &train), ("test", &test)] {
            if ds.image_shape() != (m.image_h, m.image_w, m.channels) {
                return Err(Error::Config(format!(
                    "{name} images are {:?}, model expects {}x{}x{}",
                    ds.image_shape(),
                    m.image_h,
                    m.image_w,
                    m.channels
                )));
            }
        }
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        Ok((train, test))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsHistory {
    pub steps: Vec<StepMetrics>,
}

impl MetricsHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn last_eval(&self) -> Option<&StepMetrics> {
        self.steps.iter().rev().find(|s| s.train_acc.is_some())
    }

    /// `step,lr,loss,train_acc,test_acc`, accuracy fields empty between
    /// evaluations.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,train_acc,test_acc\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.step,
                s.lr,
                s.loss,
                opt(s.train_acc),
                opt(s.test_acc)
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(k.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy; an empty dataset scores 0.
pub fn evaluate<T: Scalar>(model: &VisionModel<T>, dataset: &Dataset<T>) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, labels) = dataset.batch(chunk);
        let logits = model.forward(&images)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Deterministic epoch-by-epoch shuffled batches.
struct BatchOrder {
    rng: SeededRng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, rng: SeededRng) -> Self {
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

pub struct TrainOutcome<T = f32> {
    pub model: VisionModel<T>,
    pub history: MetricsHistory,
}

/// Runs the configured number of AdamW steps on in-memory data. Nothing
/// is written to disk.
pub fn train_on<T: Scalar>(
    cfg: &TrainConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let schedule = cfg.schedule()?;
    let root = SeededRng::new(cfg.seed);
    let mut model = VisionModel::<T>::init(&cfg.model, root.fork(3).seed())?;
    let mut batches = BatchOrder::new(train.len(), root.fork(4));
    let mut state = AdamWState::<T>::new(cfg.weight_decay);
    let mut history = MetricsHistory::default();

    for step in 1..=cfg.total_steps {
        let (images, labels) = train.batch(&batches.next(cfg.batch_size));
        let (loss, _, grads) = model.loss_and_grads(&images, &labels, cfg.label_smoothing)?;
        let lr = cosine_lr(step, &schedule);
        adamw_step(&mut model.registry_mut(), &grads, &mut state, lr)?;

        let eval_now = step == cfg.total_steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let (train_acc, test_acc) = if eval_now {
            (Some(evaluate(&model, train)?), Some(evaluate(&model, test)?))
        } else {
            (None, None)
        };
        let m = StepMetrics {
            step,
            lr,
            loss,
            train_acc,
            test_acc,
        };
        on_step(&m);
        history.steps.push(m);
    }
    Ok(TrainOutcome { model, history })
}

/// Loads the configured data, trains in f32, and writes the metrics CSV
/// and final checkpoint under `out_dir`.
pub fn train_loop(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome<f32>> {
    cfg.validate()?;
    let (train, test) = cfg.datasets::<f32>()?;
    let outcome = train_on(cfg, &train, &test, |_| {})?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    outcome.history.write_csv(out_dir.join(&cfg.metrics_path))?;
    checkpoint::save(&outcome.model, out_dir.join(&cfg.checkpoint_path))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        let l = Tensor::<f32>::from_f64([3, 3], &[1., 1., 0., 0., 2., 2., 5., 5., 5.]).unwrap();
        assert_eq!(argmax_rows(&l), vec![0, 1, 0]);
    }

    #[test]
    fn constant_logits_score_half_on_balanced_data() {
        let cfg = ModelConfig {
            patch_size: 4,
            dim: 4,
            ..ModelConfig::default()
        };
        let mut model = VisionModel::<f32>::init(&cfg, 0).unwrap();
        model.head.weight = Tensor::zeros(model.head.weight.shape().to_vec());
        let ds: Dataset<f32> = crate::train::gen_stripes(10, 8, 0).unwrap();
        assert_eq!(evaluate(&model, &ds).unwrap(), 0.5);
        model.head.bias = Tensor::from_f64([2], &[3.0, 3.0]).unwrap();
        assert_eq!(evaluate(&model, &ds).unwrap(), 0.5);
    }

    #[test]
    fn batch_order_covers_each_epoch() {
        let mut b = BatchOrder::new(5, SeededRng::new(1));
        let mut first: Vec<usize> = b.next(3);
        first.extend(b.next(2));
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.next(7).len(), 7);
    }

    #[test]
    fn csv_leaves_accuracy_blank_between_evals() {
        let h = MetricsHistory {
            steps: vec![
                StepMetrics { step: 1, lr: 0.5, loss: 0.25, train_acc: None, test_acc: None },
                StepMetrics { step: 2, lr: 0.5, loss: 0.125, train_acc: Some(1.0), test_acc: Some(0.5) },
            ],
        };
        assert_eq!(h.to_csv(), "step,lr,loss,train_acc,test_acc\n1,0.5,0.25,,\n2,0.5,0.125,1,0.5\n");
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = TrainConfig {
            total_steps: 0,
            model: ModelConfig {
                patch_size: 4,
                dim: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let (tr, te) = cfg.datasets::<f32>().unwrap();
        let out = train_on(&cfg, &tr, &te, |_| {}).unwrap();
        assert!(out.history.steps.is_empty());
        let init = VisionModel::<f32>::init(&cfg.model, SeededRng::new(0).fork(3).seed()).unwrap();
        assert_eq!(out.model, init);
    }

    #[test]
    fn short_run_is_deterministic() {
        let cfg = TrainConfig {
            total_steps: 5,
            batch_size: 8,
            eval_every: 2,
            model: ModelConfig {
                patch_size: 2,
                dim: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let (tr, te) = cfg.datasets::<f32>().unwrap();
        let a = train_on(&cfg, &tr, &te, |_| {}).unwrap();
        let b = train_on(&cfg, &tr, &te, |_| {}).unwrap();
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        assert_eq!(a.history.steps.len(), 5);
        assert!(a.history.steps[1].train_acc.is_some());
        assert!(a.history.steps[2].train_acc.is_none());
    }

    #[test]
    fn mismatched_images_fail_before_training() {
        let cfg = TrainConfig {
            model: ModelConfig {
                image_h: 8,
                image_w: 4,
                patch_size: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.datasets::<f32>(), Err(Error::Config(_))));
    }
}
