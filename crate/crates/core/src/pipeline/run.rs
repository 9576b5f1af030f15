//! End-to-end runs and the run-directory layout:
//!
//! ```text
//! <out>/config.toml            resolved configuration, written first
//! <out>/step1_segmenter/       model_best.ckpt, history.csv, summary.json
//! <out>/step2_gan/             g_st/g_ts/d_s/d_t.ckpt, history.csv, batches.csv,
//!                              summary.json, samples/epoch_NNNN.png
//! <out>/step3_translate/       translated dataset (manifest + PNGs), summary.json
//! <out>/step4_finetune/        model_best.ckpt, history.csv, summary.json, report.txt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    evaluate, step1_train_segmenter, step3_translate, step4_finetune, train_gan, Checkpoint,
    GanEpoch, GanNets, GanResult, GanTrainConfig, Log, SegRun, SegTrainConfig, StopReason,
};
use crate::data::{denormalize, save_dataset, DomainDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{compare_table, MetricHistory, MetricsReport};
use crate::networks::{
    DiscriminatorConfig, GeneratorConfig, Segmenter, SegmenterConfig,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub segmenter: SegmenterConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub step1: SegTrainConfig,
    pub step2: GanTrainConfig,
    pub step4: SegTrainConfig,
    /// Epochs between translated-sample grids (0 disables them).
    pub sample_every: usize,
    /// Patches per domain in each sample grid.
    pub sample_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            segmenter: SegmenterConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            step1: SegTrainConfig::default(),
            step2: GanTrainConfig::default(),
            step4: SegTrainConfig::default(),
            sample_every: 5,
            sample_count: 4,
        }
    }
}

impl PipelineConfig {
    /// Narrow networks and short schedules that run the synthetic
    /// sensor-shift benchmark end to end in minutes on one CPU core.
    pub fn benchmark() -> Self {
        let seg = SegTrainConfig {
            epochs: 3,
            adam: crate::tensor::AdamConfig::with_lr(1e-3),
            ..SegTrainConfig::default()
        };
        Self {
            segmenter: SegmenterConfig {
                widths: [16, 32, 64],
                ..SegmenterConfig::default()
            },
            generator: GeneratorConfig::with_base_width(16),
            discriminator: DiscriminatorConfig {
                widths: [16, 32, 64, 128, 256],
                ..DiscriminatorConfig::default()
            },
            step1: seg.clone(),
            step2: GanTrainConfig {
                max_epochs: 5,
                identity_init_steps: 300,
                ..GanTrainConfig::default()
            },
            step4: seg,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.segmenter.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.step1.validate()?;
        self.step2.validate()?;
        self.step4.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn step1(&self) -> PathBuf {
        self.root.join("step1_segmenter")
    }

    pub fn step2(&self) -> PathBuf {
        self.root.join("step2_gan")
    }

    pub fn step3(&self) -> PathBuf {
        self.root.join("step3_translate")
    }

    pub fn step4(&self) -> PathBuf {
        self.root.join("step4_finetune")
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serializing {}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

fn write_history(path: &Path, h: &MetricHistory) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    h.write_csv(std::io::BufWriter::new(f))
}

/// Writes the frozen copy of a resolved config.
pub fn write_config_snapshot<S: Serialize>(path: &Path, cfg: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("serializing config: {e}")))?;
    write_text(path, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: String,
    pub best_epoch: usize,
    pub best_pixel_accuracy: f64,
    pub initial: MetricsReport,
    pub best: MetricsReport,
    pub mask_checksum: String,
}

fn seg_summary(step: &str, run: &SegRun, mask_checksum: String) -> StepSummary {
    let best = run
        .history
        .iter()
        .find(|e| e.epoch == run.best_epoch)
        .map(|e| e.report.clone())
        .unwrap_or_else(|| run.initial.clone());
    StepSummary {
        step: step.into(),
        best_epoch: run.best_epoch,
        best_pixel_accuracy: run.best_accuracy,
        initial: run.initial.clone(),
        best,
        mask_checksum,
    }
}

/// Writes a segmenter step directory: best checkpoint, history and summary.
pub fn write_seg_run(dir: &Path, step: &str, run: &SegRun, seed: u64, train: &DomainDataset) -> Result<StepSummary> {
    mkdir(dir)?;
    Checkpoint::from_network(&run.best, run.best_epoch as u64, seed).save(&dir.join("model_best.ckpt"))?;
    write_history(&dir.join("history.csv"), &run.metric_history(&train.schema.class_names))?;
    let summary = seg_summary(step, run, train.mask_checksum());
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes the translation model's checkpoints, loss curves and summary.
pub fn write_gan_run(dir: &Path, result: &GanResult, seed: u64) -> Result<()> {
    mkdir(dir)?;
    let epoch = result.history.last().map_or(0, |e| e.epoch) as u64;
    let n = &result.nets;
    Checkpoint::from_network(&n.g_st, epoch, seed).save(&dir.join("g_st.ckpt"))?;
    Checkpoint::from_network(&n.g_ts, epoch, seed).save(&dir.join("g_ts.ckpt"))?;
    Checkpoint::from_network(&n.d_s, epoch, seed).save(&dir.join("d_s.ckpt"))?;
    Checkpoint::from_network(&n.d_t, epoch, seed).save(&dir.join("d_t.ckpt"))?;
    write_history(&dir.join("history.csv"), &gan_history(&result.history))?;
    let mut batches = MetricHistory::new();
    for (i, t) in result.batch_terms.iter().enumerate() {
        for (name, v) in gan_terms(t) {
            batches.push_scalar(i + 1, name, v);
        }
    }
    write_history(&dir.join("batches.csv"), &batches)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        stop: &'a StopReason,
        epochs: usize,
        last: Option<&'a GanEpoch>,
    }
    write_json(
        &dir.join("summary.json"),
        &Summary {
            stop: &result.stop,
            epochs: result.history.len(),
            last: result.history.last(),
        },
    )
}

fn gan_terms(t: &crate::losses::GanLossTerms) -> [(&'static str, f64); 6] {
    [
        ("d_loss_real", t.d_loss_real),
        ("d_loss_fake", t.d_loss_fake),
        ("g_adv_st", t.g_adv_st),
        ("g_adv_ts", t.g_adv_ts),
        ("cycle_loss", t.cycle_loss),
        ("g_total", t.g_total),
    ]
}

/// Per-epoch GAN curves in the long `epoch,metric,class,value` format.
pub fn gan_history(history: &[GanEpoch]) -> MetricHistory {
    let mut h = MetricHistory::new();
    for e in history {
        for (name, v) in gan_terms(&e.terms) {
            h.push_scalar(e.epoch, name, v);
        }
        h.push_scalar(e.epoch, "d_accuracy_train", e.d_accuracy_train);
        h.push_scalar(e.epoch, "rolling_d_accuracy", e.rolling_d_accuracy);
        h.push_scalar(e.epoch, "rolling_g_total", e.rolling_g_total);
        if let Some(a) = e.d_accuracy_held_out {
            h.push_scalar(e.epoch, "d_accuracy_held_out", a);
        }
    }
    h
}

/// Saves a PNG grid with one row per patch: source, G_st(source),
/// G_ts(G_st(source)), target, G_ts(target), G_st(G_ts(target)).
pub fn save_sample_grid(
    path: &Path,
    nets: &GanNets,
    source: &[Tensor],
    target: &[Tensor],
) -> Result<()> {
    let rows = source.len().min(target.len());
    if rows == 0 {
        return Ok(());
    }
    let s = source[0].shape();
    let (h, w) = (s[1], s[2]);
    let cols = 6;
    let (gw, gh) = (w * cols, h * rows);
    let mut buf = vec![0u8; gw * gh * 3];
    for r in 0..rows {
        let xs = source[r].clone().reshape([1, s[0], h, w])?;
        let xt = target[r].clone().reshape([1, s[0], h, w])?;
        let ft = nets.g_st.translate(&xs)?;
        let rs = nets.g_ts.translate(&ft)?;
        let fs = nets.g_ts.translate(&xt)?;
        let rt = nets.g_st.translate(&fs)?;
        for (c, img) in [&xs, &ft, &rs, &xt, &fs, &rt].into_iter().enumerate() {
            let d = img.data();
            for y in 0..h {
                for x in 0..w {
                    let o = ((r * h + y) * gw + c * w + x) * 3;
                    for k in 0..3.min(s[0]) {
                        buf[o + k] = denormalize(d[(k * h + y) * w + x]);
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    image::RgbImage::from_raw(gw as u32, gh as u32, buf)
        .expect("buffer size")
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub step1: SegRun,
    /// Step-1 model evaluated on the source test split.
    pub source_report: MetricsReport,
    pub gan: GanResult,
    pub translated: DomainDataset,
    pub step4: SegRun,
}

impl PipelineOutcome {
    /// Step-1 model on the target evaluation set.
    pub fn before(&self) -> &MetricsReport {
        &self.step4.initial
    }

    /// Best fine-tuned model on the target evaluation set.
    pub fn after(&self) -> &MetricsReport {
        self.step4
            .history
            .iter()
            .find(|e| e.epoch == self.step4.best_epoch)
            .map_or(&self.step4.initial, |e| &e.report)
    }
}

/// Runs steps 1–4. With `out` set, the resolved config is written first and
/// each step's artifacts land in the run-directory layout above.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    target_eval: &DomainDataset,
    out: Option<&Path>,
    log: Log<'_>,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let layout = out.map(RunLayout::new);
    if let Some(l) = &layout {
        write_config_snapshot(&l.config(), cfg)?;
    }
    let seed = cfg.seed;

    let seg = Segmenter::init(cfg.segmenter.clone(), seed)?;
    let step1 = step1_train_segmenter(source, seg, &cfg.step1, seed, log)?;
    let source_test = {
        let t = source.split(Split::Test);
        if t.is_empty() { source.clone() } else { t }
    };
    let source_report = evaluate(&step1.best, &source_test)?;
    if let Some(l) = &layout {
        write_seg_run(&l.step1(), "step1", &step1, seed, source)?;
    }

    let nets = GanNets::init(&cfg.generator, &cfg.discriminator, seed)?;
    let take = |ds: &DomainDataset| -> Vec<Tensor> {
        ds.patches
            .iter()
            .take(cfg.sample_count)
            .map(|p| p.image.clone())
            .collect()
    };
    let (sample_s, sample_t) = (take(source), take(target));
    let samples_dir = layout.as_ref().map(|l| l.step2().join("samples"));
    let mut on_epoch = |e: &GanEpoch, nets: &GanNets| -> Result<()> {
        match &samples_dir {
            Some(dir) if cfg.sample_every > 0 && e.epoch.is_multiple_of(cfg.sample_every) => save_sample_grid(
                &dir.join(format!("epoch_{:04}.png", e.epoch)),
                nets,
                &sample_s,
                &sample_t,
            ),
            _ => Ok(()),
        }
    };
    let gan = train_gan(nets, source, target, &cfg.step2, seed, log, &mut on_epoch)?;
    if let Some(l) = &layout {
        write_gan_run(&l.step2(), &gan, seed)?;
        if let Some(dir) = &samples_dir {
            save_sample_grid(&dir.join("final.png"), &gan.nets, &sample_s, &sample_t)?;
        }
    }

    let translated = step3_translate(&gan.nets.g_st, source)?;
    if translated.mask_checksum() != source.mask_checksum() {
        return Err(Error::Data("translation altered the masks".into()));
    }
    if let Some(l) = &layout {
        save_dataset(&l.step3(), &translated)?;
        write_json(
            &l.step3().join("summary.json"),
            &serde_json::json!({
                "patches": translated.len(),
                "mask_checksum": translated.mask_checksum(),
                "source_channel_means": super::channel_means(source),
                "translated_channel_means": super::channel_means(&translated),
                "target_channel_means": super::channel_means(target),
            }),
        )?;
    }

    let step4 = step4_finetune(&step1.best, &translated, target_eval, &cfg.step4, seed, log)?;
    let outcome = PipelineOutcome {
        step1,
        source_report,
        gan,
        translated,
        step4,
    };
    if let Some(l) = &layout {
        write_seg_run(&l.step4(), "step4", &outcome.step4, seed, &outcome.translated)?;
        let table = compare_table(outcome.before(), outcome.after(), &target_eval.schema.class_names)?;
        write_text(&l.step4().join("report.txt"), &table)?;
    }
    Ok(outcome)
}
