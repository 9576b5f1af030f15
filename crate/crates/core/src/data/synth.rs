//! Synthetic aerial scenes with exact masks, and the three domain-shift
//! factors: sensor (channel permutation + per-channel affine tone), ground
//! resolution (blur, downscale by 5/9, rescale) and class representation
//! (alternate textures and tree sizes).

use image::{imageops, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{image_from_hwc, DatasetSchema, DomainDataset, LabeledPatch, Mask, Origin, Split};
use crate::error::{Error, Result};

/// Base source-domain color of each class (impervious, building, low
/// vegetation, tree, car, clutter).
pub const SOURCE_COLORS: [[u8; 3]; 6] = [
    [163, 163, 163],
    [185, 117, 54],
    [120, 230, 85],
    [33, 72, 65],
    [25, 73, 205],
    [201, 216, 44],
];

const BUILDING: u8 = 1;
const LOW_VEG: u8 = 2;
const TREE: u8 = 3;
const CAR: u8 = 4;
const CLUTTER: u8 = 5;

/// `out[c] = gain[c] · in[permutation[c]] + offset[c]`, in 8-bit units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorShift {
    pub permutation: [usize; 3],
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl Default for SensorShift {
    fn default() -> Self {
        // Chosen so no shifted class color lands near another class's
        // source color, and nothing clips.
        Self {
            permutation: [1, 2, 0],
            gain: [1.05, 0.83, 1.12],
            offset: [-15.0, -12.0, -16.0],
        }
    }
}

impl SensorShift {
    pub fn apply_pixel(&self, px: [u8; 3]) -> [u8; 3] {
        std::array::from_fn(|c| {
            (self.gain[c] * px[self.permutation[c]] as f64 + self.offset[c])
                .round()
                .clamp(0.0, 255.0) as u8
        })
    }

    fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for &p in &self.permutation {
            if p >= 3 || seen[p] {
                return Err(Error::Param(format!(
                    "sensor permutation {:?} is not a permutation of 0..3",
                    self.permutation
                )));
            }
            seen[p] = true;
        }
        if self.gain.iter().any(|g| !(*g > 0.0)) || self.offset.iter().any(|o| !o.is_finite()) {
            return Err(Error::Param("sensor gains must be > 0 and offsets finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub tile_size: usize,
    /// Number of classes, 4 to 6; the first `classes` ISPRS classes are used.
    pub classes: usize,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
    /// Labeled target patches kept aside for evaluation only.
    pub target_eval: usize,
    /// Target fraction of pixels per class; entry 0 (impervious background)
    /// takes whatever the other classes leave.
    pub class_frequencies: Vec<f64>,
    /// Per-pixel Gaussian noise, in 8-bit units.
    pub noise_std: f64,
    pub sensor_shift: bool,
    pub resolution_shift: bool,
    pub class_representation_shift: bool,
    pub sensor: SensorShift,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            classes: 6,
            source_train: 300,
            source_test: 100,
            target_train: 300,
            target_test: 100,
            target_eval: 100,
            class_frequencies: vec![0.32, 0.25, 0.20, 0.13, 0.04, 0.06],
            noise_std: 6.0,
            sensor_shift: true,
            resolution_shift: false,
            class_representation_shift: false,
            sensor: SensorShift::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 32 || !self.tile_size.is_multiple_of(16) {
            return Err(Error::Param(format!(
                "synthetic tile size must be a multiple of 16 and >= 32, got {}",
                self.tile_size
            )));
        }
        if !(4..=6).contains(&self.classes) {
            return Err(Error::Param(format!("classes must be 4..=6, got {}", self.classes)));
        }
        if self.class_frequencies.len() != self.classes {
            return Err(Error::Param(format!(
                "{} class frequencies for {} classes",
                self.class_frequencies.len(),
                self.classes
            )));
        }
        if self.class_frequencies.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.class_frequencies.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::Param(
                "class frequencies must lie in [0, 1] and sum to 1".into(),
            ));
        }
        if self.source_train == 0 || self.target_train == 0 {
            return Err(Error::Param("source_train and target_train must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Param("noise_std must be >= 0".into()));
        }
        self.sensor.validate()
    }

    pub fn schema(&self) -> DatasetSchema {
        let mut s = DatasetSchema::isprs();
        s.class_names.truncate(self.classes);
        s.palette.truncate(self.classes);
        s
    }

    fn target_schema(&self) -> DatasetSchema {
        let mut s = self.schema();
        if self.sensor_shift {
            s.channels = self.sensor.permutation.iter().map(|&p| s.channels[p].clone()).collect();
        }
        if self.resolution_shift {
            s.resolution_cm = 9.0;
        }
        s
    }

    fn scale(&self) -> f64 {
        self.tile_size as f64 / 64.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Rect { y: i32, x: i32, h: i32, w: i32 },
    Disk { cy: i32, cx: i32, r: i32 },
    /// Union of disks.
    Blob { disks: Vec<(i32, i32, i32)> },
    /// Small square dots of side `dot`.
    Speckle { dots: Vec<(i32, i32)>, dot: i32 },
}

impl Shape {
    fn bbox(&self) -> (i32, i32, i32, i32) {
        match self {
            Shape::Rect { y, x, h, w } => (*y, *x, y + h, x + w),
            Shape::Disk { cy, cx, r } => (cy - r, cx - r, cy + r + 1, cx + r + 1),
            Shape::Blob { disks } => disks.iter().fold(
                (i32::MAX, i32::MAX, i32::MIN, i32::MIN),
                |(a, b, c, d), &(cy, cx, r)| (a.min(cy - r), b.min(cx - r), c.max(cy + r + 1), d.max(cx + r + 1)),
            ),
            Shape::Speckle { dots, dot } => dots.iter().fold(
                (i32::MAX, i32::MAX, i32::MIN, i32::MIN),
                |(a, b, c, d), &(y, x)| (a.min(y), b.min(x), c.max(y + dot), d.max(x + dot)),
            ),
        }
    }

    fn covers(&self, y: i32, x: i32) -> bool {
        let in_disk = |cy: i32, cx: i32, r: i32| (y - cy).pow(2) + (x - cx).pow(2) <= r * r;
        match self {
            Shape::Rect { y: y0, x: x0, h, w } => y >= *y0 && y < y0 + h && x >= *x0 && x < x0 + w,
            Shape::Disk { cy, cx, r } => in_disk(*cy, *cx, *r),
            Shape::Blob { disks } => disks.iter().any(|&(cy, cx, r)| in_disk(cy, cx, r)),
            Shape::Speckle { dots, dot } => dots
                .iter()
                .any(|&(dy, dx)| y >= dy && y < dy + dot && x >= dx && x < dx + dot),
        }
    }

    /// Pixels inside the tile covered by this shape.
    fn pixels(&self, size: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (y0, x0, y1, x1) = self.bbox();
        let n = size as i32;
        let (y0, x0, y1, x1) = (y0.max(0), x0.max(0), y1.min(n), x1.min(n));
        (y0..y1.max(y0))
            .flat_map(move |y| (x0..x1.max(x0)).map(move |x| (y, x)))
            .filter(|&(y, x)| self.covers(y, x))
            .map(|(y, x)| (y as usize, x as usize))
    }
}

/// One placed primitive; painted only over still-background pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Placed {
    pub class: u8,
    pub shape: Shape,
    /// Per-object brightness offset in 8-bit units.
    pub tone: i16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub objects: Vec<Placed>,
    /// Whether the alternate class representation was used.
    pub alternate: bool,
}

impl Scene {
    /// Class mask obtained by painting the objects in order.
    pub fn render_mask(&self) -> Mask {
        let mut data = vec![0u8; self.size * self.size];
        for obj in &self.objects {
            for (y, x) in obj.shape.pixels(self.size) {
                let p = &mut data[y * self.size + x];
                if *p == 0 {
                    *p = obj.class;
                }
            }
        }
        Mask::new(self.size, self.size, data).expect("square mask")
    }
}

fn rint<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> i32 {
    rng.random_range(lo.round() as i32..=hi.round().max(lo.round()) as i32)
}

fn propose<R: Rng + ?Sized>(class: u8, cfg: &SynthConfig, alternate: bool, rng: &mut R) -> Placed {
    let s = cfg.scale();
    let n = cfg.tile_size as i32;
    let pos = |rng: &mut R| (rng.random_range(-4..n), rng.random_range(-4..n));
    let shape = match class {
        BUILDING => {
            let (y, x) = pos(rng);
            Shape::Rect {
                y,
                x,
                h: rint(rng, 10.0 * s, 26.0 * s),
                w: rint(rng, 10.0 * s, 26.0 * s),
            }
        }
        CAR => {
            let (y, x) = pos(rng);
            let (long, short) = (rint(rng, 5.0 * s, 7.0 * s), rint(rng, 3.0 * s, 3.0 * s));
            if rng.random_bool(0.5) {
                Shape::Rect { y, x, h: long, w: short }
            } else {
                Shape::Rect { y, x, h: short, w: long }
            }
        }
        TREE => {
            let (cy, cx) = pos(rng);
            let r = if alternate {
                rint(rng, 6.0 * s, 10.0 * s)
            } else {
                rint(rng, 3.0 * s, 6.0 * s)
            };
            Shape::Disk { cy, cx, r }
        }
        LOW_VEG => {
            let (mut cy, mut cx) = pos(rng);
            let k = rng.random_range(3..=6);
            let mut disks = Vec::with_capacity(k);
            for _ in 0..k {
                disks.push((cy, cx, rint(rng, 3.0 * s, 7.0 * s)));
                cy += rint(rng, -5.0 * s, 5.0 * s);
                cx += rint(rng, -5.0 * s, 5.0 * s);
            }
            Shape::Blob { disks }
        }
        _ => {
            let (y, x) = pos(rng);
            if alternate {
                Shape::Rect {
                    y,
                    x,
                    h: rint(rng, 4.0 * s, 8.0 * s),
                    w: rint(rng, 4.0 * s, 8.0 * s),
                }
            } else {
                let k = rng.random_range(5..=12);
                let spread = (10.0 * s) as i32;
                let dots = (0..k)
                    .map(|_| (y + rng.random_range(0..spread), x + rng.random_range(0..spread)))
                    .collect();
                Shape::Speckle {
                    dots,
                    dot: rint(rng, 1.0 * s, 2.0 * s),
                }
            }
        }
    };
    let tone = rng.random_range(-12..=12);
    Placed { class, shape, tone }
}

/// Paint order of the foreground classes.
const PAINT_ORDER: [u8; 5] = [BUILDING, CAR, TREE, LOW_VEG, CLUTTER];

/// Samples objects class by class until each class's pixel count is as
/// close as possible to its (per-tile jittered) target.
pub fn sample_scene<R: Rng + ?Sized>(cfg: &SynthConfig, alternate: bool, rng: &mut R) -> Scene {
    let size = cfg.tile_size;
    let area = (size * size) as f64;
    let mut mask = vec![0u8; size * size];
    let mut objects = Vec::new();
    for &class in PAINT_ORDER.iter().filter(|&&c| (c as usize) < cfg.classes) {
        let target = cfg.class_frequencies[class as usize] * area * rng.random_range(0.75..1.25);
        let mut have = 0.0;
        let mut misses = 0;
        while misses < 40 {
            let obj = propose(class, cfg, alternate, rng);
            let fresh: Vec<usize> = obj
                .shape
                .pixels(size)
                .map(|(y, x)| y * size + x)
                .filter(|&i| mask[i] == 0)
                .collect();
            if fresh.is_empty() {
                misses += 1;
                continue;
            }
            let after = have + fresh.len() as f64;
            if after <= target || after - target < target - have {
                for i in fresh {
                    mask[i] = class;
                }
                have = after;
                objects.push(obj);
            } else {
                break;
            }
        }
    }
    Scene {
        size,
        objects,
        alternate,
    }
}

/// Source-sensor RGB rendering (interleaved) of a scene, before any
/// domain shift; noise is drawn from `rng`.
pub fn render_scene<R: Rng + ?Sized>(scene: &Scene, noise_std: f64, rng: &mut R) -> Vec<u8> {
    let n = scene.size;
    let mut owner: Vec<Option<usize>> = vec![None; n * n];
    for (k, obj) in scene.objects.iter().enumerate() {
        for (y, x) in obj.shape.pixels(n) {
            owner[y * n + x].get_or_insert(k);
        }
    }
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("valid std");
    let mut out = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (class, delta) = match owner[y * n + x] {
                None => (0u8, 0.0),
                Some(k) => {
                    let obj = &scene.objects[k];
                    (obj.class, texture(obj, scene.alternate, y as i32, x as i32, rng))
                }
            };
            let base = SOURCE_COLORS[class as usize];
            for c in base {
                let v = c as f64 + delta + noise.sample(rng);
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn texture<R: Rng + ?Sized>(obj: &Placed, alternate: bool, y: i32, x: i32, rng: &mut R) -> f64 {
    let tone = obj.tone as f64;
    match (obj.class, &obj.shape) {
        (TREE, Shape::Disk { cy, cx, r }) => {
            let d2 = ((y - cy).pow(2) + (x - cx).pow(2)) as f64 / ((r * r).max(1) as f64);
            tone * 0.5 - 20.0 * d2
        }
        (LOW_VEG, _) if alternate => 14.0 * (std::f64::consts::TAU * x as f64 / 6.0).sin(),
        (LOW_VEG, _) => Normal::new(0.0, 8.0).expect("valid").sample(rng),
        (CLUTTER, _) if alternate => {
            if (y / 2 + x / 2) % 2 == 0 {
                18.0
            } else {
                -18.0
            }
        }
        (CLUTTER, _) => tone * 2.0,
        _ => tone,
    }
}

fn resolution_shift(rgb: &[u8], size: usize) -> Vec<u8> {
    let img = RgbImage::from_raw(size as u32, size as u32, rgb.to_vec()).expect("rgb buffer");
    let blurred = imageops::blur(&img, 0.8);
    let small = ((size as f64) * 5.0 / 9.0).round().max(1.0) as u32;
    let down = imageops::resize(&blurred, small, small, imageops::FilterType::Triangle);
    imageops::resize(&down, size as u32, size as u32, imageops::FilterType::Triangle).into_raw()
}

/// Synthetic benchmark: labeled source, unlabeled target, and a labeled
/// target evaluation set whose masks are only for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub target_eval: DomainDataset,
}

#[derive(Clone, Copy)]
enum Stream {
    Source = 0,
    Target = 1,
    TargetEval = 2,
}

fn tile_rng(seed: u64, stream: Stream, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | index as u64);
    rng
}

/// Scene, rendered pixels (after enabled shifts when `shifted`) and mask.
pub fn synth_patch(cfg: &SynthConfig, seed: u64, shifted: bool, stream_id: u64, index: usize) -> (Vec<u8>, Mask) {
    let stream = match stream_id {
        0 => Stream::Source,
        1 => Stream::Target,
        _ => Stream::TargetEval,
    };
    let mut rng = tile_rng(seed, stream, index);
    let alternate = shifted && cfg.class_representation_shift;
    let scene = sample_scene(cfg, alternate, &mut rng);
    let mut rgb = render_scene(&scene, cfg.noise_std, &mut rng);
    if shifted && cfg.resolution_shift {
        rgb = resolution_shift(&rgb, cfg.tile_size);
    }
    if shifted && cfg.sensor_shift {
        for px in rgb.chunks_exact_mut(3) {
            let out = cfg.sensor.apply_pixel([px[0], px[1], px[2]]);
            px.copy_from_slice(&out);
        }
    }
    (rgb, scene.render_mask())
}

fn build(
    cfg: &SynthConfig,
    seed: u64,
    name: &str,
    schema: DatasetSchema,
    stream: Stream,
    counts: [(Split, usize); 2],
    labeled: bool,
) -> Result<DomainDataset> {
    let shifted = !matches!(stream, Stream::Source);
    let mut patches = Vec::new();
    let mut index = 0;
    for (split, count) in counts {
        for _ in 0..count {
            let (rgb, mask) = synth_patch(cfg, seed, shifted, stream as u64, index);
            patches.push(LabeledPatch {
                image: image_from_hwc(cfg.tile_size, cfg.tile_size, 3, &rgb)?,
                mask: labeled.then_some(mask),
                origin: Origin {
                    image: format!("{name}-{index:05}"),
                    row: 0,
                    col: 0,
                },
                split,
            });
            index += 1;
        }
    }
    DomainDataset::new(name, schema, patches)
}

/// Generates the three datasets; bit-exact per `(cfg, seed)`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let source = build(
        cfg,
        seed,
        "source",
        cfg.schema(),
        Stream::Source,
        [(Split::Train, cfg.source_train), (Split::Test, cfg.source_test)],
        true,
    )?;
    let target = build(
        cfg,
        seed,
        "target",
        cfg.target_schema(),
        Stream::Target,
        [(Split::Train, cfg.target_train), (Split::Test, cfg.target_test)],
        false,
    )?;
    let target_eval = build(
        cfg,
        seed,
        "target_eval",
        cfg.target_schema(),
        Stream::TargetEval,
        [(Split::Test, cfg.target_eval), (Split::Train, 0)],
        true,
    )?;
    Ok(SynthOutput {
        source,
        target,
        target_eval,
    })
}
