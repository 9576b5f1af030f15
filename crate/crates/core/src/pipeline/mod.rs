//! The four adaptation steps: source training, unpaired translation GAN,
//! source translation, and fine-tuning on the translated set; plus
//! evaluation and checkpoints.

mod checkpoint;
mod gan;
mod run;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, LabeledPatch, Split};
use crate::error::{Error, Result};
use crate::losses::segmentation_loss;
use crate::metrics::{aggregate, ConfusionMatrix, MetricHistory, MetricsReport};
use crate::networks::{Generator, Network, Segmenter};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use gan::{
    held_out_d_accuracy, train_gan, DMonitor, GanEpoch, GanNets, GanResult, GanTrainConfig, StopReason,
};
pub use run::{
    gan_history, run_pipeline, save_sample_grid, write_config_snapshot, write_gan_run, write_seg_run,
    PipelineConfig, PipelineOutcome, RunLayout, StepSummary,
};

/// Progress sink: receives one status line per epoch.
pub type Log<'a> = &'a mut dyn FnMut(&str);

/// Discards progress lines.
pub fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ignore_index: Option<usize>,
    pub shuffle: bool,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 1,
            adam: AdamConfig::segmenter(),
            ignore_index: None,
            shuffle: true,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Stacks patches into an `N×C×H×W` batch and concatenates their labels.
pub fn make_batch(patches: &[&LabeledPatch]) -> Result<(Tensor<f32>, Option<Vec<usize>>)> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let s = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(patches.len() * first.image.numel());
    let mut labels = Some(Vec::new());
    for p in patches {
        data.extend_from_slice(p.image.data());
        match (&mut labels, &p.mask) {
            (Some(l), Some(m)) => l.extend(m.data.iter().map(|&v| v as usize)),
            _ => labels = None,
        }
    }
    Ok((Tensor::new([patches.len(), s[0], s[1], s[2]], data)?, labels))
}

/// Confusion of `seg`'s argmax predictions against the masks of `ds`.
pub fn confusion(seg: &Segmenter, ds: &DomainDataset) -> Result<ConfusionMatrix> {
    ds.require_labeled()?;
    check_classes(seg, ds)?;
    let mut cm = ConfusionMatrix::new(ds.num_classes());
    for p in &ds.patches {
        let pred = seg.predict(&p.batch())?;
        cm.accumulate(&pred, &p.mask.as_ref().expect("labeled").labels())?;
    }
    Ok(cm)
}

/// Argmax predictions → confusion → aggregate report.
pub fn evaluate(seg: &Segmenter, ds: &DomainDataset) -> Result<MetricsReport> {
    aggregate(&confusion(seg, ds)?)
}

fn check_classes(seg: &Segmenter, ds: &DomainDataset) -> Result<()> {
    if seg.num_classes() != ds.num_classes() {
        return Err(Error::Data(format!(
            "segmenter predicts {} classes, dataset {} has {}",
            seg.num_classes(),
            ds.name,
            ds.num_classes()
        )));
    }
    if let Some((c, _, _)) = ds.patch_shape() {
        if c != seg.config().in_channels {
            return Err(Error::Data(format!(
                "segmenter takes {} channels, dataset {} has {c}",
                seg.config().in_channels,
                ds.name
            )));
        }
    }
    Ok(())
}

/// One training epoch of a segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct SegRun {
    /// Evaluation before any update (epoch 0).
    pub initial: MetricsReport,
    /// One entry per training epoch, starting at epoch 1.
    pub history: Vec<SegEpoch>,
    /// Parameters of the epoch with the highest evaluation pixel accuracy.
    pub best: Segmenter,
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

impl SegRun {
    /// `(epoch, metric, class, value)` rows; epoch 0 holds the initial
    /// evaluation.
    pub fn metric_history(&self, class_names: &[String]) -> MetricHistory {
        let mut h = MetricHistory::new();
        h.push_report(0, "eval_", &self.initial, class_names);
        for e in &self.history {
            h.push_scalar(e.epoch, "train_loss", e.train_loss);
            h.push_report(e.epoch, "eval_", &e.report, class_names);
        }
        h
    }
}

/// Trains `seg` in place on `train`, evaluating on `eval` after every
/// epoch, and keeps the best-evaluating parameters.
pub fn fit_segmenter(
    seg: &mut Segmenter,
    train: &DomainDataset,
    eval: &DomainDataset,
    cfg: &SegTrainConfig,
    seed: u64,
    label: &str,
    log: Log<'_>,
) -> Result<SegRun> {
    cfg.validate()?;
    train.require_labeled()?;
    if train.is_empty() {
        return Err(Error::Data(format!("{}: no training patches", train.name)));
    }
    check_classes(seg, train)?;
    let initial = evaluate(seg, eval)?;
    let mut best = seg.clone();
    let mut best_epoch = 0;
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut adam = Adam::new(cfg.adam, seg.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let patches: Vec<&LabeledPatch> = chunk.iter().map(|&i| &train.patches[i]).collect();
            let (x, labels) = make_batch(&patches)?;
            let labels = labels.expect("labeled");
            let mut g = Graph::new();
            let vars = seg.params().bind(&mut g, true);
            let xv = g.constant(x);
            let logits = seg.forward(&mut g, &vars, xv)?;
            let (loss, _) = segmentation_loss(&mut g, logits, &labels, cfg.ignore_index)?;
            g.backward(loss)?;
            let grads = seg.params().grads(&g, &vars);
            adam.step(seg.params_mut().tensors_mut(), &grads)?;
            loss_sum += g.value(loss).item() as f64;
            batches += 1;
        }
        let report = evaluate(seg, eval)?;
        let train_loss = loss_sum / batches as f64;
        log(&format!(
            "[{label}] epoch {epoch}/{} loss {train_loss:.4} eval pixel acc {:.4} mIoU {}",
            cfg.epochs,
            report.pixel_accuracy,
            report
                .mean_iou
                .mean
                .map_or_else(|| "undef".to_string(), |v| format!("{v:.4}"))
        ));
        if report.pixel_accuracy > best_accuracy {
            best_accuracy = report.pixel_accuracy;
            best_epoch = epoch;
            best = seg.clone();
        }
        history.push(SegEpoch {
            epoch,
            train_loss,
            report,
        });
    }
    Ok(SegRun {
        initial,
        history,
        best,
        best_epoch,
        best_accuracy,
    })
}

fn train_and_validation(source: &DomainDataset) -> (DomainDataset, DomainDataset) {
    let train = source.split(Split::Train);
    let test = source.split(Split::Test);
    if test.is_empty() {
        (train.clone(), train)
    } else {
        (train, test)
    }
}

/// Step 1: trains a fresh segmenter on the labeled source set (train split)
/// and returns the run whose `best` is the best-validation model.
pub fn step1_train_segmenter(
    source: &DomainDataset,
    seg: Segmenter,
    cfg: &SegTrainConfig,
    seed: u64,
    log: Log<'_>,
) -> Result<SegRun> {
    source.require_labeled()?;
    let (train, val) = train_and_validation(source);
    let mut seg = seg;
    fit_segmenter(&mut seg, &train, &val, cfg, seed, "step1", log)
}

/// Step 3: replaces every image by its translation; masks, order, origins
/// and split tags are kept.
pub fn step3_translate(g_st: &Generator, source: &DomainDataset) -> Result<DomainDataset> {
    if let Some((c, _, _)) = source.patch_shape() {
        if c != g_st.config().in_channels {
            return Err(Error::Data(format!(
                "generator takes {} channels, {} has {c}",
                g_st.config().in_channels,
                source.name
            )));
        }
    }
    let mut patches = Vec::with_capacity(source.len());
    for p in &source.patches {
        let y = g_st.translate(&p.batch())?;
        let s = p.image.shape();
        patches.push(LabeledPatch {
            image: y.reshape([g_st.config().out_channels, s[1], s[2]])?,
            mask: p.mask.clone(),
            origin: p.origin.clone(),
            split: p.split,
        });
    }
    DomainDataset::new(format!("{}_translated", source.name), source.schema.clone(), patches)
}

/// Step 4: fine-tunes a copy of `m_s` on the translated set, evaluating on
/// the labeled target evaluation set before training and after each epoch.
pub fn step4_finetune(
    m_s: &Segmenter,
    translated: &DomainDataset,
    target_eval: &DomainDataset,
    cfg: &SegTrainConfig,
    seed: u64,
    log: Log<'_>,
) -> Result<SegRun> {
    translated.require_labeled()?;
    if translated.num_classes() != m_s.num_classes() || target_eval.num_classes() != m_s.num_classes() {
        return Err(Error::Data(format!(
            "class counts differ: segmenter {}, translated {}, target {}",
            m_s.num_classes(),
            translated.num_classes(),
            target_eval.num_classes()
        )));
    }
    let train = translated.split(Split::Train);
    let train = if train.is_empty() { translated.clone() } else { train };
    let mut seg = m_s.clone();
    fit_segmenter(&mut seg, &train, target_eval, cfg, seed, "step4", log)
}

/// Per-channel mean of all images in `ds`.
pub fn channel_means(ds: &DomainDataset) -> Vec<f64> {
    let Some((c, h, w)) = ds.patch_shape() else {
        return Vec::new();
    };
    let plane = h * w;
    let mut sums = vec![0.0f64; c];
    for p in &ds.patches {
        for (k, s) in sums.iter_mut().enumerate() {
            *s += p.image.data()[k * plane..(k + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
    }
    let n = (ds.len() * plane) as f64;
    sums.into_iter().map(|s| s / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSchema, Mask, Origin};
    use crate::networks::SegmenterConfig;

    fn two_class_set(n: usize, seed: u64) -> DomainDataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut schema = DatasetSchema::isprs();
        schema.class_names.truncate(2);
        schema.palette.truncate(2);
        let patches = (0..n)
            .map(|i| {
                let mask: Vec<u8> = (0..256).map(|_| rng.random_range(0..2)).collect();
                let image = Tensor::from_fn([3, 16, 16], |k| {
                    let m = mask[k % 256];
                    if m == 1 { 0.6 } else { -0.6 }
                });
                LabeledPatch {
                    image,
                    mask: Some(Mask::new(16, 16, mask).unwrap()),
                    origin: Origin {
                        image: format!("p{i}"),
                        row: 0,
                        col: 0,
                    },
                    split: if i % 4 == 3 { Split::Test } else { Split::Train },
                }
            })
            .collect();
        DomainDataset::new("toy", schema, patches).unwrap()
    }

    fn tiny_seg() -> Segmenter {
        Segmenter::init(
            SegmenterConfig {
                num_classes: 2,
                widths: [4, 8, 8],
                ..SegmenterConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn separable_problem_is_learned_quickly() {
        let ds = two_class_set(16, 0);
        let cfg = SegTrainConfig {
            epochs: 5,
            adam: AdamConfig::with_lr(1e-2),
            ..SegTrainConfig::default()
        };
        let run = step1_train_segmenter(&ds, tiny_seg(), &cfg, 0, &mut quiet()).unwrap();
        assert_eq!(run.history.len(), 5);
        assert!(run.history.iter().all(|e| e.train_loss.is_finite()));
        let train_acc = evaluate(&run.best, &ds.split(Split::Train)).unwrap().pixel_accuracy;
        assert!(train_acc > 0.95, "{train_acc}");
        let max = run
            .history
            .iter()
            .map(|e| e.report.pixel_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(run.best_accuracy, max);
    }

    #[test]
    fn finetune_warm_start_and_history_length() {
        let ds = two_class_set(8, 1);
        let seg = tiny_seg();
        let cfg = SegTrainConfig {
            epochs: 2,
            ..SegTrainConfig::default()
        };
        let run = step4_finetune(&seg, &ds, &ds, &cfg, 3, &mut quiet()).unwrap();
        assert_eq!(run.history.len(), 2);
        assert_eq!(run.initial.confusion, confusion(&seg, &ds).unwrap());
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let ds = two_class_set(4, 2);
        let seg = Segmenter::init(
            SegmenterConfig {
                widths: [4, 8, 8],
                ..SegmenterConfig::default()
            },
            0,
        )
        .unwrap();
        assert!(evaluate(&seg, &ds).is_err());
        assert!(step4_finetune(&seg, &ds, &ds, &SegTrainConfig::default(), 0, &mut quiet()).is_err());
    }

    #[test]
    fn constant_prediction_confusion_matches_hand_count() {
        let ds = two_class_set(3, 4);
        let mut seg = tiny_seg();
        // zero every weight, then bias the head towards class 1
        for (name, t) in seg.params().names().to_vec().iter().zip(0..) {
            let data = seg.params_mut().tensors_mut()[t].data_mut();
            let fill = if name == "head.bias" { 0.0 } else if name.ends_with("gamma") { 1.0 } else { 0.0 };
            data.fill(fill);
            if name == "head.bias" {
                data[1] = 1.0;
            }
        }
        let cm = confusion(&seg, &ds).unwrap();
        let ones: u64 = ds
            .patches
            .iter()
            .map(|p| p.mask.as_ref().unwrap().data.iter().filter(|&&v| v == 1).count() as u64)
            .sum();
        let total = (ds.len() * 256) as u64;
        assert_eq!(cm.rows(), vec![vec![0, total - ones], vec![0, ones]]);
    }
}
