//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "GEOACKPT"
//! version      u32
//! kind         u32 length + UTF-8 tag ("generator" | "discriminator" | "segmenter")
//! config       u32 length + UTF-8 JSON architecture config
//! digest       32 bytes SHA-256 of the config JSON
//! epoch        u64
//! seed         u64
//! count        u32 number of parameter entries
//! entries      count × { u32 length + UTF-8 name, u32 rank, rank × u64 dims,
//!                        prod(dims) × f32 values }
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::hex;
use crate::error::{Error, Result};
use crate::networks::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Network, NetworkKind, ParamSet,
    Segmenter, SegmenterConfig,
};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GEOACKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: NetworkKind,
    pub config_json: String,
    pub epoch: u64,
    pub seed: u64,
    pub params: ParamSet<f32>,
}

fn digest_of(s: &str) -> [u8; 32] {
    Sha256::digest(s.as_bytes()).into()
}

impl Checkpoint {
    pub fn from_network<N: Network<f32>>(net: &N, epoch: u64, seed: u64) -> Self {
        Self {
            kind: N::KIND,
            config_json: net.config_json(),
            epoch,
            seed,
            params: net.params().clone(),
        }
    }

    /// Hex SHA-256 of the architecture config.
    pub fn config_digest(&self) -> String {
        hex(&digest_of(&self.config_json))
    }

    /// A warning when `expected_json` describes a different architecture
    /// config than the one stored.
    pub fn config_warning(&self, expected_json: &str) -> Option<String> {
        (digest_of(expected_json) != digest_of(&self.config_json)).then(|| {
            format!(
                "checkpoint config digest {} differs from the requested config {}",
                self.config_digest(),
                hex(&digest_of(expected_json))
            )
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, self.kind.tag());
        put_str(&mut out, &self.config_json);
        out.extend_from_slice(&digest_of(&self.config_json));
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = match r.string()?.as_str() {
            "generator" => NetworkKind::Generator,
            "discriminator" => NetworkKind::Discriminator,
            "segmenter" => NetworkKind::Segmenter,
            other => return Err(Error::Data(format!("unknown network kind `{other}`"))),
        };
        let config_json = r.string()?;
        let digest = r.take(32)?;
        if digest != digest_of(&config_json) {
            return Err(Error::Data("checkpoint config digest does not match its config".into()));
        }
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Data("parameter too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after checkpoint entries",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            config_json,
            epoch,
            seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::CheckpointMissing(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: NetworkKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds a {}, expected a {}",
                self.kind.tag(),
                kind.tag()
            )));
        }
        Ok(())
    }

    fn config<C: serde::de::DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::CheckpointMismatch(format!("stored config does not parse: {e}")))
    }

    fn restore_into<N: Network<f32>>(&self, mut net: N) -> Result<N> {
        net.params_mut().load_from(&self.params)?;
        Ok(net)
    }

    pub fn to_segmenter(&self) -> Result<Segmenter> {
        self.expect_kind(NetworkKind::Segmenter)?;
        let cfg: SegmenterConfig = self.config()?;
        self.restore_into(Segmenter::init(cfg, 0)?)
    }

    pub fn to_generator(&self) -> Result<Generator> {
        self.expect_kind(NetworkKind::Generator)?;
        let cfg: GeneratorConfig = self.config()?;
        self.restore_into(Generator::init(cfg, 0)?)
    }

    pub fn to_discriminator(&self) -> Result<Discriminator> {
        self.expect_kind(NetworkKind::Discriminator)?;
        let cfg: DiscriminatorConfig = self.config()?;
        self.restore_into(Discriminator::init(cfg, 0)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Data("checkpoint is truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_seg() -> Segmenter {
        Segmenter::init(
            SegmenterConfig {
                widths: [4, 8, 8],
                ..SegmenterConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let seg = small_seg();
        let ck = Checkpoint::from_network(&seg, 7, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_segmenter().unwrap().params(), seg.params());
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.ckpt");
        assert!(matches!(Checkpoint::load(&missing), Err(Error::CheckpointMissing(_))));

        let ck = Checkpoint::from_network(&small_seg(), 0, 0);
        let mut bytes = ck.to_bytes();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));

        let mut wrong = ck.clone();
        wrong.params.tensors_mut()[0] = Tensor::zeros([1]);
        assert!(matches!(wrong.to_segmenter(), Err(Error::CheckpointMismatch(_))));
        assert!(matches!(ck.to_generator(), Err(Error::CheckpointMismatch(_))));

        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn config_warning_on_digest_mismatch() {
        let seg = small_seg();
        let ck = Checkpoint::from_network(&seg, 0, 0);
        assert!(ck.config_warning(&seg.config_json()).is_none());
        let other = serde_json::to_string(&SegmenterConfig::default()).unwrap();
        assert!(ck.config_warning(&other).is_some());
    }
}
