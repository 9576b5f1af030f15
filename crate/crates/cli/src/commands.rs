use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use geoadapt::data::{
    class_distribution, load_dataset, save_dataset, synth_generate, tile_to_dataset, DatasetSchema,
    DomainDataset, Split, TilePolicy,
};
use geoadapt::metrics::{compare_table, MetricsReport};
use geoadapt::pipeline::{
    evaluate, save_sample_grid, step1_train_segmenter, step3_translate, step4_finetune, train_gan,
    write_gan_run, write_seg_run, Checkpoint, DMonitor, GanEpoch, GanNets,
    StopReason,
};
use geoadapt::networks::Segmenter;
use geoadapt::AdamConfig;

use crate::config::{resolve, Resolved};
use crate::{Cli, Command, Failure, Global};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Tile side in pixels (multiple of 16, at least 32)
    #[arg(long)]
    pub tile_size: Option<usize>,
    /// Number of classes (4 to 6)
    #[arg(long)]
    pub classes: Option<usize>,
    /// Labeled source training patches
    #[arg(long)]
    pub source_train: Option<usize>,
    /// Labeled source test patches
    #[arg(long)]
    pub source_test: Option<usize>,
    /// Unlabeled target training patches
    #[arg(long)]
    pub target_train: Option<usize>,
    /// Unlabeled target test patches
    #[arg(long)]
    pub target_test: Option<usize>,
    /// Labeled target evaluation patches
    #[arg(long)]
    pub target_eval: Option<usize>,
    /// Per-pixel noise standard deviation in 8-bit units
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Apply the spectral (sensor) shift to the target
    #[arg(long, value_name = "BOOL")]
    pub sensor_shift: Option<bool>,
    /// Apply the ground-resolution shift to the target
    #[arg(long, value_name = "BOOL")]
    pub resolution_shift: Option<bool>,
    /// Apply the class-appearance shift to the target
    #[arg(long, value_name = "BOOL")]
    pub class_shift: Option<bool>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    /// Discard partial tiles at the right and bottom edges
    Drop,
    /// Mirror-pad the edges so every pixel lands in a tile
    ReflectPad,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Input image (repeatable)
    #[arg(long = "image", required = true, value_name = "PNG")]
    pub images: Vec<PathBuf>,
    /// Color-coded label image for each --image, in the same order
    #[arg(long = "mask", value_name = "PNG")]
    pub masks: Vec<PathBuf>,
    /// Tile side in pixels (multiple of 16)
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Handling of edge remainders
    #[arg(long, value_enum, default_value = "drop")]
    pub policy: PolicyArg,
    /// Dataset name recorded in the manifest
    #[arg(long, default_value = "tiles")]
    pub name: String,
    /// Input channels to keep, in order (e.g. 3,0,1 for IR-R-G from RGBI)
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub channel_map: Option<Vec<usize>>,
    /// Split tag given to every tile
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Dataset directory (containing manifest.toml)
    pub dataset: PathBuf,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SegTrainFlags {
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Patches per batch
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    /// Labeled source dataset directory
    #[arg(long, value_name = "DIR")]
    pub source: PathBuf,
    #[command(flatten)]
    pub train: SegTrainFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MonitorArg {
    HeldOut,
    Training,
}

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    /// Source dataset directory (labels unused)
    #[arg(long, value_name = "DIR")]
    pub source: PathBuf,
    /// Target dataset directory (labels unused)
    #[arg(long, value_name = "DIR")]
    pub target: PathBuf,
    /// Safety cap on epochs when the stop rule does not fire
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Patches per batch
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the cycle-consistency term
    #[arg(long)]
    pub lambda_cycle: Option<f64>,
    /// Stop once discriminator accuracy exceeds this
    #[arg(long)]
    pub d_accuracy_min: Option<f64>,
    /// ... and the rolling generator loss is below this
    #[arg(long)]
    pub g_loss_max: Option<f64>,
    /// Batches in the rolling windows
    #[arg(long)]
    pub window: Option<usize>,
    /// Where discriminator accuracy is measured
    #[arg(long, value_enum)]
    pub monitor: Option<MonitorArg>,
    /// Identity warm-up updates for both generators
    #[arg(long)]
    pub identity_steps: Option<usize>,
    /// Epochs between sample grids (0 disables them)
    #[arg(long)]
    pub sample_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Source→target generator checkpoint (g_st.ckpt)
    #[arg(long, value_name = "CKPT")]
    pub generator: PathBuf,
    /// Labeled source dataset directory
    #[arg(long, value_name = "DIR")]
    pub source: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Source segmenter checkpoint (step 1 model_best.ckpt)
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Translated labeled dataset directory
    #[arg(long, value_name = "DIR")]
    pub translated: PathBuf,
    /// Labeled target dataset used only for evaluation
    #[arg(long, value_name = "DIR")]
    pub target_eval: PathBuf,
    #[command(flatten)]
    pub train: SegTrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Segmenter checkpoint
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Labeled dataset directory
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON before adaptation
    #[arg(long, value_name = "JSON")]
    pub before: PathBuf,
    /// Report JSON after adaptation
    #[arg(long, value_name = "JSON")]
    pub after: PathBuf,
    /// Class names for the rows, comma separated
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub class_names: Option<Vec<String>>,
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn out_dir(global: &Global) -> Result<&Path, Failure> {
    global
        .out_dir
        .as_deref()
        .ok_or_else(|| Failure::usage("this command writes files: pass --out-dir DIR"))
}

fn load(dir: &Path) -> Result<DomainDataset, Failure> {
    load_dataset(dir).map_err(Failure::from)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Failure::data(format!("{}: {e}", d.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

/// Writes the frozen config copy into `dir`; each step directory gets its own.
fn freeze(cfg: &Resolved, dir: &Path) -> Result<(), Failure> {
    write(&dir.join("config.toml"), &cfg.to_toml()?)
}

fn record(cfg: &mut Resolved, key: &str, path: &Path) {
    cfg.inputs.insert(key.into(), path.display().to_string());
}

fn apply_seg_flags(t: &mut geoadapt::pipeline::SegTrainConfig, f: &SegTrainFlags) {
    if let Some(e) = f.epochs {
        t.epochs = e;
    }
    if let Some(b) = f.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = f.lr {
        t.adam = AdamConfig { lr, ..t.adam };
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Tile(_) => "tile",
        Command::Stats(_) => "stats",
        Command::TrainSeg(_) => "train-seg",
        Command::TrainGan(_) => "train-gan",
        Command::Translate(_) => "translate",
        Command::Finetune(_) => "finetune",
        Command::Eval(_) => "eval",
        Command::Report(_) => "report",
    };
    let mut cfg = resolve(&cli.global, name)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Failure::usage(format!("--threads: {e}")))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => synth(g, &mut cfg, a),
        Command::Tile(a) => tile(g, &mut cfg, a),
        Command::Stats(a) => stats(a),
        Command::TrainSeg(a) => train_seg(g, &mut cfg, a),
        Command::TrainGan(a) => train_gan_cmd(g, &mut cfg, a),
        Command::Translate(a) => translate(g, &mut cfg, a),
        Command::Finetune(a) => finetune(g, &mut cfg, a),
        Command::Eval(a) => eval(g, a),
        Command::Report(a) => report(g, a),
    }
}

fn synth(g: &Global, cfg: &mut Resolved, a: &SynthArgs) -> Result<(), Failure> {
    let s = &mut cfg.synth;
    let sizes = [
        (a.tile_size, &mut s.tile_size),
        (a.classes, &mut s.classes),
        (a.source_train, &mut s.source_train),
        (a.source_test, &mut s.source_test),
        (a.target_train, &mut s.target_train),
        (a.target_test, &mut s.target_test),
        (a.target_eval, &mut s.target_eval),
    ];
    for (flag, field) in sizes {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(v) = a.noise_std {
        s.noise_std = v;
    }
    if let Some(v) = a.sensor_shift {
        s.sensor_shift = v;
    }
    if let Some(v) = a.resolution_shift {
        s.resolution_shift = v;
    }
    if let Some(v) = a.class_shift {
        s.class_representation_shift = v;
    }
    if s.classes < s.class_frequencies.len() {
        // keep the leading frequencies and hand the rest to the background
        let extra: f64 = s.class_frequencies[s.classes..].iter().sum();
        s.class_frequencies.truncate(s.classes);
        s.class_frequencies[0] += extra;
    }
    cfg.validate()?;
    let out = out_dir(g)?;
    freeze(cfg, out)?;
    let data = synth_generate(&cfg.synth, cfg.seed)?;
    for ds in [&data.source, &data.target, &data.target_eval] {
        save_dataset(&out.join(&ds.name), ds)?;
        progress(&format!("wrote {} patches to {}", ds.len(), out.join(&ds.name).display()));
    }
    Ok(())
}

fn tile(g: &Global, cfg: &mut Resolved, a: &TileArgs) -> Result<(), Failure> {
    if !a.masks.is_empty() && a.masks.len() != a.images.len() {
        return Err(Failure::usage(format!(
            "{} --mask values for {} --image values",
            a.masks.len(),
            a.images.len()
        )));
    }
    let out = out_dir(g)?;
    for (i, p) in a.images.iter().enumerate() {
        record(cfg, &format!("image{i}"), p);
    }
    freeze(cfg, out)?;
    let inputs: Vec<(PathBuf, Option<PathBuf>)> = a
        .images
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), a.masks.get(i).cloned()))
        .collect();
    let policy = match a.policy {
        PolicyArg::Drop => TilePolicy::Drop,
        PolicyArg::ReflectPad => TilePolicy::ReflectPad,
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let (ds, warnings) = tile_to_dataset(
        &a.name,
        &DatasetSchema::isprs(),
        &inputs,
        a.size,
        policy,
        a.channel_map.as_deref(),
        split,
    )?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    save_dataset(out, &ds)?;
    progress(&format!("wrote {} tiles to {}", ds.len(), out.display()));
    Ok(())
}

fn stats(a: &StatsArgs) -> Result<(), Failure> {
    let ds = load(&a.dataset)?;
    let dist = class_distribution(&ds)?;
    let names = &ds.schema.class_names;
    if a.json {
        let rows: serde_json::Map<String, serde_json::Value> = names
            .iter()
            .zip(&dist)
            .map(|(n, p)| (n.clone(), serde_json::json!(p)))
            .collect();
        println!(
            "{}",
            serde_json::json!({ "dataset": ds.name, "patches": ds.len(), "percent": rows })
        );
        return Ok(());
    }
    let w = names.iter().map(String::len).max().unwrap_or(5).max(5);
    println!("{:<w$} {:>8}", "class", "percent");
    for (n, p) in names.iter().zip(&dist) {
        println!("{n:<w$} {p:>7.2}%");
    }
    println!("{:<w$} {:>7.2}%", "total", dist.iter().sum::<f64>());
    println!("({} patches in {})", ds.len(), ds.name);
    Ok(())
}

fn train_seg(g: &Global, cfg: &mut Resolved, a: &TrainSegArgs) -> Result<(), Failure> {
    apply_seg_flags(&mut cfg.pipeline.step1, &a.train);
    record(cfg, "source", &a.source);
    cfg.validate()?;
    let out = out_dir(g)?;
    freeze(cfg, &out.join("step1_segmenter"))?;
    let source = load(&a.source)?;
    let mut seg_cfg = cfg.pipeline.segmenter.clone();
    seg_cfg.num_classes = source.num_classes();
    seg_cfg.in_channels = source.patch_shape().map_or(seg_cfg.in_channels, |s| s.0);
    let seg = Segmenter::init(seg_cfg, cfg.seed)?;
    let run = step1_train_segmenter(&source, seg, &cfg.pipeline.step1, cfg.seed, &mut progress)?;
    let dir = out.join("step1_segmenter");
    write_seg_run(&dir, "step1", &run, cfg.seed, &source)?;
    progress(&format!(
        "best source validation accuracy {:.4} at epoch {}; checkpoint {}",
        run.best_accuracy,
        run.best_epoch,
        dir.join("model_best.ckpt").display()
    ));
    Ok(())
}

fn train_gan_cmd(g: &Global, cfg: &mut Resolved, a: &TrainGanArgs) -> Result<(), Failure> {
    let p = &mut cfg.pipeline;
    let t = &mut p.step2;
    if let Some(v) = a.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(lr) = a.lr {
        t.adam = AdamConfig { lr, ..t.adam };
    }
    if let Some(v) = a.lambda_cycle {
        t.lambda_cycle = v;
    }
    if let Some(v) = a.d_accuracy_min {
        t.d_accuracy_min = v;
    }
    if let Some(v) = a.g_loss_max {
        t.g_loss_max = v;
    }
    if let Some(v) = a.window {
        t.window = v;
    }
    if let Some(m) = a.monitor {
        t.monitor = match m {
            MonitorArg::HeldOut => DMonitor::HeldOut,
            MonitorArg::Training => DMonitor::Training,
        };
    }
    if let Some(v) = a.identity_steps {
        t.identity_init_steps = v;
    }
    if let Some(v) = a.sample_every {
        p.sample_every = v;
    }
    record(cfg, "source", &a.source);
    record(cfg, "target", &a.target);
    cfg.validate()?;
    let out = out_dir(g)?;
    freeze(cfg, &out.join("step2_gan"))?;
    let source = load(&a.source)?;
    let target = load(&a.target)?;
    let p = &cfg.pipeline;
    let channels = source.patch_shape().map_or(3, |s| s.0);
    let mut gen = p.generator.clone();
    gen.in_channels = channels;
    gen.out_channels = channels;
    let mut disc = p.discriminator.clone();
    disc.in_channels = channels;
    let nets = GanNets::init(&gen, &disc, cfg.seed)?;
    let dir = out.join("step2_gan");
    let take = |ds: &DomainDataset| -> Vec<_> {
        ds.patches.iter().take(p.sample_count).map(|x| x.image.clone()).collect()
    };
    let (ss, st) = (take(&source), take(&target));
    let mut on_epoch = |e: &GanEpoch, n: &GanNets| -> geoadapt::Result<()> {
        if p.sample_every > 0 && e.epoch.is_multiple_of(p.sample_every) {
            save_sample_grid(&dir.join("samples").join(format!("epoch_{:04}.png", e.epoch)), n, &ss, &st)?;
        }
        Ok(())
    };
    let result = train_gan(nets, &source, &target, &p.step2, cfg.seed, &mut progress, &mut on_epoch)?;
    write_gan_run(&dir, &result, cfg.seed)?;
    save_sample_grid(&dir.join("samples/final.png"), &result.nets, &ss, &st)?;
    match &result.stop {
        StopReason::Diverged { epoch, message } => Err(Failure::numerical(format!(
            "translation training diverged in epoch {epoch} ({message}); last finite checkpoints written to {}",
            dir.display()
        ))),
        StopReason::Converged { epoch } => {
            progress(&format!("stop rule met after epoch {epoch}; checkpoints in {}", dir.display()));
            Ok(())
        }
        StopReason::MaxEpochs { epoch } => {
            progress(&format!("reached the {epoch}-epoch cap; checkpoints in {}", dir.display()));
            Ok(())
        }
    }
}

fn translate(g: &Global, cfg: &mut Resolved, a: &TranslateArgs) -> Result<(), Failure> {
    record(cfg, "generator", &a.generator);
    record(cfg, "source", &a.source);
    let out = out_dir(g)?;
    freeze(cfg, &out.join("step3_translate"))?;
    let gen = Checkpoint::load(&a.generator)?.to_generator()?;
    let source = load(&a.source)?;
    let translated = step3_translate(&gen, &source)?;
    let dir = out.join("step3_translate");
    save_dataset(&dir, &translated)?;
    progress(&format!(
        "translated {} patches into {} (mask checksum {})",
        translated.len(),
        dir.display(),
        translated.mask_checksum()
    ));
    Ok(())
}

fn finetune(g: &Global, cfg: &mut Resolved, a: &FinetuneArgs) -> Result<(), Failure> {
    apply_seg_flags(&mut cfg.pipeline.step4, &a.train);
    record(cfg, "checkpoint", &a.checkpoint);
    record(cfg, "translated", &a.translated);
    record(cfg, "target_eval", &a.target_eval);
    cfg.validate()?;
    let out = out_dir(g)?;
    freeze(cfg, &out.join("step4_finetune"))?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let m_s = ck.to_segmenter()?;
    let translated = load(&a.translated)?;
    let target_eval = load(&a.target_eval)?;
    let run = step4_finetune(&m_s, &translated, &target_eval, &cfg.pipeline.step4, cfg.seed, &mut progress)?;
    let dir = out.join("step4_finetune");
    let summary = write_seg_run(&dir, "step4", &run, cfg.seed, &translated)?;
    write(&dir.join("before.json"), &summary.initial.to_json())?;
    write(&dir.join("after.json"), &summary.best.to_json())?;
    let table = compare_table(&summary.initial, &summary.best, &target_eval.schema.class_names)?;
    write(&dir.join("report.txt"), &table)?;
    progress(&format!(
        "target accuracy {:.4} before, best {:.4} at epoch {}",
        run.initial.pixel_accuracy, run.best_accuracy, run.best_epoch
    ));
    Ok(())
}

fn eval(g: &Global, a: &EvalArgs) -> Result<(), Failure> {
    let seg = Checkpoint::load(&a.checkpoint)?.to_segmenter()?;
    let ds = load(&a.dataset)?;
    let t = Instant::now();
    let report = evaluate(&seg, &ds)?;
    let text = report.to_text(&ds.schema.class_names);
    if let Some(out) = &g.out_dir {
        write(&out.join("eval.json"), &report.to_json())?;
        write(&out.join("eval.txt"), &text)?;
    }
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{text}");
    }
    progress(&format!("evaluated {} patches in {:.1}s", ds.len(), t.elapsed().as_secs_f64()));
    Ok(())
}

fn report(g: &Global, a: &ReportArgs) -> Result<(), Failure> {
    let before = MetricsReport::from_json(&read(&a.before)?)?;
    let after = MetricsReport::from_json(&read(&a.after)?)?;
    let names = match &a.class_names {
        Some(n) => n.clone(),
        None => {
            let isprs = DatasetSchema::isprs().class_names;
            if before.classes() <= isprs.len() {
                isprs[..before.classes()].to_vec()
            } else {
                (0..before.classes()).map(|c| format!("class {c}")).collect()
            }
        }
    };
    let table = compare_table(&before, &after, &names)?;
    if let Some(out) = &g.out_dir {
        write(&out.join("report.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}
