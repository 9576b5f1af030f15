//! On-disk datasets: PNG images, palette-coded PNG masks, and a TOML
//! manifest listing the schema, files, origins and split tags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    decode_mask, encode_mask, image_from_hwc, image_to_hwc, select_channels, tile, DatasetSchema,
    DomainDataset, LabeledPatch, Mask, Origin, Raster, Split, TilePolicy,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// Source channels kept, in order, when reading image files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_map: Option<Vec<usize>>,
    pub schema: DatasetSchema,
    #[serde(default)]
    pub patches: Vec<PatchEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub split: Split,
    pub origin: Origin,
}

fn write_png(path: &Path, w: usize, h: usize, rgb: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::Shape(format!("bad buffer for {}", path.display())))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a PNG as an interleaved raster with its native channel count
/// (grayscale is widened to RGB, 16-bit is reduced to 8-bit).
pub fn read_raster(path: &Path) -> Result<Raster<u8>> {
    if !path.exists() {
        return Err(Error::Data(format!("{} does not exist", path.display())));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_alpha() {
        Raster::new(4, h, w, img.to_rgba8().into_raw())
    } else {
        Raster::new(3, h, w, img.to_rgb8().into_raw())
    }
}

/// Writes `ds` under `dir` (images/, masks/, manifest.toml).
pub fn save_dataset(dir: &Path, ds: &DomainDataset) -> Result<()> {
    ds.validate()?;
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(ds.len());
    for (i, p) in ds.patches.iter().enumerate() {
        let (h, w) = (p.height(), p.width());
        let image = format!("images/{i:05}.png");
        write_png(&dir.join(&image), w, h, image_to_hwc(&p.image)?)?;
        let mask = match &p.mask {
            Some(m) => {
                let rel = format!("masks/{i:05}.png");
                write_png(&dir.join(&rel), w, h, encode_mask(m, &ds.schema.palette)?)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(PatchEntry {
            image,
            mask,
            split: p.split,
            origin: p.origin.clone(),
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        channel_map: None,
        schema: ds.schema.clone(),
        patches: entries,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("serializing manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads a dataset written by [`save_dataset`] or hand-authored to the
/// same manifest format.
pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let m = read_manifest(dir)?;
    m.schema.validate()?;
    let want = m.schema.channels.len();
    let mut patches = Vec::with_capacity(m.patches.len());
    for e in &m.patches {
        let img = read_raster(&dir.join(&e.image))?;
        let default_map: Vec<usize> = (0..want).collect();
        let map = m.channel_map.as_deref().unwrap_or(&default_map);
        if map.len() != want {
            return Err(Error::Data(format!(
                "channel map selects {} channels, schema lists {want}",
                map.len()
            )));
        }
        let hwc = select_channels(&img.data, img.channels, map)?;
        let image = image_from_hwc(img.height, img.width, want, &hwc)?;
        let mask = match &e.mask {
            Some(rel) => {
                let mr = read_raster(&dir.join(rel))?;
                let rgb = select_channels(&mr.data, mr.channels, &[0, 1, 2])?;
                Some(decode_mask(&rgb, mr.height, mr.width, &m.schema.palette)?)
            }
            None => None,
        };
        patches.push(LabeledPatch {
            image,
            mask,
            origin: e.origin.clone(),
            split: e.split,
        });
    }
    DomainDataset::new(m.name, m.schema, patches)
}

/// Tiles large image (and optional color-coded label) files into a dataset.
/// Returns the dataset plus any warnings about undersized inputs.
pub fn tile_to_dataset(
    name: &str,
    schema: &DatasetSchema,
    inputs: &[(PathBuf, Option<PathBuf>)],
    size: usize,
    policy: TilePolicy,
    channel_map: Option<&[usize]>,
    split: Split,
) -> Result<(DomainDataset, Vec<String>)> {
    schema.validate()?;
    let want = schema.channels.len();
    let default_map: Vec<usize> = (0..want).collect();
    let map = channel_map.unwrap_or(&default_map);
    let mut patches = Vec::new();
    let mut warnings = Vec::new();
    for (image_path, mask_path) in inputs {
        let raw = read_raster(image_path)?;
        let img = Raster::new(
            want,
            raw.height,
            raw.width,
            select_channels(&raw.data, raw.channels, map)?,
        )?;
        let mask = match mask_path {
            Some(p) => {
                let mr = read_raster(p)?;
                let rgb = select_channels(&mr.data, mr.channels, &[0, 1, 2])?;
                let m = decode_mask(&rgb, mr.height, mr.width, &schema.palette)?;
                Some(Raster::new(1, m.height, m.width, m.data)?)
            }
            None => None,
        };
        let set = tile(&img, mask.as_ref(), size, policy)?;
        let id = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(w) = set.warning {
            warnings.push(format!("{}: {w}", image_path.display()));
        }
        for t in set.tiles {
            patches.push(LabeledPatch {
                image: image_from_hwc(size, size, want, &t.image.data)?,
                mask: t.mask.map(|m| Mask::new(size, size, m.data)).transpose()?,
                origin: Origin {
                    image: id.clone(),
                    row: t.row,
                    col: t.col,
                },
                split,
            });
        }
    }
    Ok((DomainDataset::new(name, schema.clone(), patches)?, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn save_load_round_trip() {
        let cfg = SynthConfig {
            source_train: 3,
            source_test: 1,
            target_train: 2,
            target_test: 0,
            target_eval: 1,
            ..SynthConfig::default()
        };
        let out = synth_generate(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for ds in [&out.source, &out.target] {
            let d = dir.path().join(&ds.name);
            save_dataset(&d, ds).unwrap();
            let back = load_dataset(&d).unwrap();
            assert_eq!(&back, ds);
        }
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let schema = toml::to_string(&DatasetSchema::isprs()).unwrap();
        let text = format!("name = \"x\"\nbogus = 1\n[schema]\n{schema}");
        fs::write(dir.path().join(MANIFEST_FILE), text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn tiling_files_with_channel_map() {
        let dir = tempfile::tempdir().unwrap();
        let (h, w) = (40, 70);
        let rgba: Vec<u8> = (0..h * w * 4).map(|i| (i % 256) as u8).collect();
        let path = dir.path().join("big.png");
        image::RgbaImage::from_raw(w as u32, h as u32, rgba.clone())
            .unwrap()
            .save(&path)
            .unwrap();
        let (ds, warnings) = tile_to_dataset(
            "t",
            &DatasetSchema::isprs(),
            &[(path, None)],
            32,
            TilePolicy::Drop,
            Some(&[3, 0, 1]),
            Split::Train,
        )
        .unwrap();
        assert!(warnings.is_empty());
        assert_eq!(ds.len(), 2);
        let first = image_to_hwc(&ds.patches[0].image).unwrap();
        assert_eq!(&first[..3], &[rgba[3], rgba[0], rgba[1]]);
    }
}
