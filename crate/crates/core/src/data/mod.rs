//! Datasets of labeled aerial patches: schema and palette codec, tiling of
//! large rasters, class statistics, on-disk manifests, and the synthetic
//! two-domain generator.

mod io;
mod palette;
mod synth;
mod tile;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_dataset, read_raster, save_dataset, tile_to_dataset, Manifest, MANIFEST_FILE};
pub use palette::{decode_mask, encode_mask};
pub use synth::{
    render_scene, sample_scene, synth_generate, synth_patch, Placed, Scene, SensorShift, Shape,
    SynthConfig, SynthOutput, SOURCE_COLORS,
};
pub use tile::{tile, tile_grid, untile, Raster, Tile, TilePolicy, TileSet};

/// Channel count of every image handled by the networks.
pub const IMAGE_CHANNELS: usize = 3;

/// Class list, label colors and channel semantics of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub class_names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    pub channels: Vec<String>,
    pub resolution_cm: f64,
}

impl DatasetSchema {
    /// The six ISPRS 2D labeling classes with their conventional colors.
    pub fn isprs() -> Self {
        Self {
            class_names: [
                "impervious surfaces",
                "building",
                "low vegetation",
                "tree",
                "car",
                "clutter",
            ]
            .map(String::from)
            .to_vec(),
            palette: vec![
                [255, 255, 255],
                [0, 0, 255],
                [0, 255, 255],
                [0, 255, 0],
                [255, 255, 0],
                [255, 0, 0],
            ],
            channels: ["R", "G", "B"].map(String::from).to_vec(),
            resolution_cm: 5.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if c < 2 {
            return Err(Error::Data(format!("schema needs at least 2 classes, has {c}")));
        }
        if c > u8::MAX as usize {
            return Err(Error::Data(format!("schema has {c} classes; at most 255 supported")));
        }
        if self.palette.len() != c {
            return Err(Error::Data(format!(
                "palette has {} colors for {c} classes",
                self.palette.len()
            )));
        }
        for i in 0..c {
            for j in i + 1..c {
                if self.palette[i] == self.palette[j] {
                    return Err(Error::Data(format!(
                        "palette color {:?} is shared by classes {i} and {j}",
                        self.palette[i]
                    )));
                }
            }
        }
        if self.channels.is_empty() {
            return Err(Error::Data("schema lists no channels".into()));
        }
        if !(self.resolution_cm > 0.0) {
            return Err(Error::Data("resolution_cm must be positive".into()));
        }
        Ok(())
    }
}

impl Default for DatasetSchema {
    fn default() -> Self {
        Self::isprs()
    }
}

/// Per-pixel class indices of one patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }
}

/// Where a patch was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub image: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Normalized `C×H×W` image plus optional mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub image: Tensor<f32>,
    pub mask: Option<Mask>,
    pub origin: Origin,
    pub split: Split,
}

impl LabeledPatch {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// The image as a batch of one, `1×C×H×W`.
    pub fn batch(&self) -> Tensor<f32> {
        let s = self.image.shape();
        self.image
            .clone()
            .reshape([1, s[0], s[1], s[2]])
            .expect("rank-3 image")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub schema: DatasetSchema,
    pub patches: Vec<LabeledPatch>,
}

impl DomainDataset {
    pub fn new(name: impl Into<String>, schema: DatasetSchema, patches: Vec<LabeledPatch>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            schema,
            patches,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.schema.num_classes()
    }

    /// `(channels, height, width)` shared by every patch.
    pub fn patch_shape(&self) -> Option<(usize, usize, usize)> {
        self.patches.first().map(|p| {
            let s = p.image.shape();
            (s[0], s[1], s[2])
        })
    }

    pub fn is_labeled(&self) -> bool {
        self.patches.iter().all(|p| p.mask.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let c = self.schema.num_classes();
        let shape = self.patch_shape();
        for (i, p) in self.patches.iter().enumerate() {
            let s = p.image.shape();
            if s.len() != 3 || Some((s[0], s[1], s[2])) != shape {
                return Err(Error::Data(format!(
                    "{}: patch {i} has image shape {s:?}, expected {shape:?}",
                    self.name
                )));
            }
            if s[0] != self.schema.channels.len() {
                return Err(Error::Data(format!(
                    "{}: patch {i} has {} channels, schema lists {}",
                    self.name,
                    s[0],
                    self.schema.channels.len()
                )));
            }
            if p.image.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Data(format!(
                    "{}: patch {i} has values outside [-1, 1]",
                    self.name
                )));
            }
            if let Some(m) = &p.mask {
                if (m.height, m.width) != (s[1], s[2]) {
                    return Err(Error::Data(format!(
                        "{}: patch {i} mask is {}x{}, image is {}x{}",
                        self.name, m.height, m.width, s[1], s[2]
                    )));
                }
                if let Some(pos) = m.data.iter().position(|&v| v as usize >= c) {
                    return Err(Error::LabelOutOfRange {
                        label: m.data[pos] as usize,
                        classes: c,
                        n: i,
                        y: pos / m.width,
                        x: pos % m.width,
                    });
                }
            }
        }
        Ok(())
    }

    /// Patches carrying the given split tag, in order.
    pub fn split(&self, split: Split) -> DomainDataset {
        DomainDataset {
            name: format!("{}/{}", self.name, tag(split)),
            schema: self.schema.clone(),
            patches: self
                .patches
                .iter()
                .filter(|p| p.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn require_labeled(&self) -> Result<()> {
        match self.patches.iter().position(|p| p.mask.is_none()) {
            None => Ok(()),
            Some(i) => Err(Error::Data(format!(
                "{}: patch {i} ({}) has no mask",
                self.name, self.patches[i].origin.image
            ))),
        }
    }

    /// SHA-256 over every mask in order (hex). Unlabeled patches contribute
    /// a fixed marker so that labeled and unlabeled sets never collide.
    pub fn mask_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.patches {
            match &p.mask {
                Some(m) => {
                    h.update((m.height as u64).to_le_bytes());
                    h.update((m.width as u64).to_le_bytes());
                    h.update(&m.data);
                }
                None => h.update(b"unlabeled"),
            }
        }
        hex(&h.finalize())
    }
}

fn tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-class percentage of all labeled pixels; sums to 100.
pub fn class_distribution(ds: &DomainDataset) -> Result<Vec<f64>> {
    ds.require_labeled()?;
    let mut counts = vec![0u64; ds.num_classes()];
    for p in &ds.patches {
        for &v in &p.mask.as_ref().expect("checked").data {
            counts[v as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data(format!("{}: no labeled pixels", ds.name)));
    }
    Ok(counts
        .iter()
        .map(|&c| 100.0 * c as f64 / total as f64)
        .collect())
}

/// Maps an 8-bit intensity to `[-1, 1]`.
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_u8`], rounding and clamping to `[0, 255]`.
pub fn denormalize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Interleaved (HWC) 8-bit pixels to a planar (CHW) normalized tensor.
pub fn image_from_hwc(height: usize, width: usize, channels: usize, hwc: &[u8]) -> Result<Tensor<f32>> {
    if hwc.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "{} bytes for a {height}x{width}x{channels} image",
            hwc.len()
        )));
    }
    let plane = height * width;
    Tensor::new(
        [channels, height, width],
        (0..channels * plane)
            .map(|i| normalize_u8(hwc[(i % plane) * channels + i / plane]))
            .collect(),
    )
}

/// Planar normalized tensor back to interleaved 8-bit pixels.
pub fn image_to_hwc(image: &Tensor<f32>) -> Result<Vec<u8>> {
    image.expect_rank(3, "image")?;
    let s = image.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let d = image.data();
    Ok((0..c * plane)
        .map(|i| denormalize(d[(i % c) * plane + i / c]))
        .collect())
}

/// Ingestion helper: keeps the listed source channels in the given order.
pub fn select_channels(hwc: &[u8], channels: usize, map: &[usize]) -> Result<Vec<u8>> {
    if let Some(&bad) = map.iter().find(|&&m| m >= channels) {
        return Err(Error::Data(format!(
            "channel map refers to channel {bad} of a {channels}-channel image"
        )));
    }
    Ok(hwc
        .chunks(channels)
        .flat_map(|px| map.iter().map(move |&m| px[m]))
        .collect())
}
