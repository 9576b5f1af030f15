//! Config resolution: preset → config file → command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use geoadapt::data::SynthConfig;
use geoadapt::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::{Failure, Global, Preset};

/// Shape of a `--config` file. Every key is optional; unknown keys are
/// rejected at every level.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    preset: Option<Preset>,
    synth: Option<toml::Table>,
    pipeline: Option<toml::Table>,
}

/// Fully resolved settings; a frozen copy is written before a command runs.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub preset: Preset,
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    /// Paths and other per-invocation inputs, for the record.
    pub inputs: BTreeMap<String, String>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn overlay<T: Clone + Serialize + for<'de> Deserialize<'de>>(base: &T, over: Option<toml::Table>, what: &str) -> Result<T, Failure> {
    let Some(over) = over else {
        return Ok(base.clone());
    };
    let mut table = match toml::Value::try_from(base) {
        Ok(toml::Value::Table(t)) => t,
        _ => return Err(Failure::usage(format!("{what}: cannot represent defaults"))),
    };
    merge(&mut table, over);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Failure::usage(format!("config [{what}]: {e}")))
}

pub fn resolve(global: &Global, command: &str) -> Result<Resolved, Failure> {
    let file = match &global.config {
        Some(path) => read_file_config(path)?,
        None => FileConfig::default(),
    };
    let preset = global.preset.or(file.preset).unwrap_or(Preset::Default);
    let base = match preset {
        Preset::Default => PipelineConfig::default(),
        Preset::Benchmark => PipelineConfig::benchmark(),
    };
    let mut pipeline = overlay(&base, file.pipeline, "pipeline")?;
    let synth = overlay(&SynthConfig::default(), file.synth, "synth")?;
    let seed = global.seed.or(file.seed).unwrap_or(pipeline.seed);
    pipeline.seed = seed;
    Ok(Resolved {
        command: command.to_string(),
        seed,
        threads: global.threads.or(file.threads).unwrap_or(0),
        preset,
        synth,
        pipeline,
        inputs: BTreeMap::new(),
    })
}

fn read_file_config(path: &Path) -> Result<FileConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

impl Resolved {
    pub fn validate(&self) -> Result<(), Failure> {
        self.pipeline.validate().map_err(Failure::from)?;
        self.synth.validate().map_err(Failure::from)
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string_pretty(self).map_err(|e| Failure::usage(format!("serializing config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global(config: Option<&Path>) -> Global {
        Global {
            seed: None,
            threads: None,
            out_dir: None,
            config: config.map(Path::to_path_buf),
            preset: None,
            error_json: false,
        }
    }

    #[test]
    fn file_values_overlay_the_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 9\npreset = \"benchmark\"\n[pipeline.step1]\nepochs = 7\n[synth]\ntile_size = 32\n").unwrap();
        let r = resolve(&global(Some(&p)), "x").unwrap();
        assert_eq!(r.seed, 9);
        assert_eq!(r.pipeline.seed, 9);
        assert_eq!(r.pipeline.step1.epochs, 7);
        // untouched keys keep the preset values, not the plain defaults
        assert_eq!(r.pipeline.segmenter.widths, PipelineConfig::benchmark().segmenter.widths);
        assert_eq!(r.synth.tile_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let dir = tempfile::tempdir().unwrap();
        for text in ["sede = 1\n", "[pipeline]\nstep9 = 1\n", "[pipeline.step2]\nlamda_cycle = 1.0\n", "[synth]\ntiles = 3\n"] {
            let p = dir.path().join("c.toml");
            fs::write(&p, text).unwrap();
            let e = resolve(&global(Some(&p)), "x").unwrap_err();
            assert_eq!(e.class, geoadapt::ErrorClass::Usage, "{text}");
        }
    }
}
