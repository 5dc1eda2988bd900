//! The run configuration file: one TOML document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tandem::corpus::{generate_synthetic, Manifest, SynthConfig};
use tandem::grid::{FusionOptions, GridData, Variant};
use tandem::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Manifest of JSONL datasets. When absent, data is generated from
    /// `[synth]` in memory.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub variants: Vec<Variant>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataSection,
    pub train: TrainConfig,
    pub fusion: FusionOptions,
    pub grid: GridSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut c: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.output.dir = base.join(&c.output.dir);
        if let Some(m) = &c.data.manifest {
            c.data.manifest = Some(base.join(m));
        }
        Ok(c)
    }

    /// Defaults, or the file at `path`, with `seed` applied everywhere.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut c = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            c.synth.seed = s;
            c.train = c.train.with_seed(s);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.data.manifest.is_none() {
            v.extend(
                self.synth
                    .violations()
                    .into_iter()
                    .map(|e| format!("synth: {e}")),
            );
            if self.train.encoder.vocab_size < self.synth.vocab_size {
                v.push(format!(
                    "train.encoder.vocab_size {} is smaller than synth.vocab_size {}",
                    self.train.encoder.vocab_size, self.synth.vocab_size
                ));
            }
        }
        v.extend(
            self.train
                .violations()
                .into_iter()
                .map(|e| format!("train: {e}")),
        );
        v.extend(
            self.fusion
                .violations()
                .into_iter()
                .map(|e| format!("fusion: {e}")),
        );
        if self.grid.variants.is_empty() {
            v.push("grid: variants must not be empty".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(v))
        }
    }

    /// Training, dev and test data. Manifest batch sizes override the
    /// sampler's.
    pub fn load_data(&mut self) -> Result<GridData, CliError> {
        match self.data.manifest.clone() {
            Some(path) => {
                let m = Manifest::load(&path)?;
                self.train.sampler.batch_size_ir = m.batch_size_ir;
                self.train.sampler.batch_size_sts = m.batch_size_sts;
                self.validate()?;
                let base = path.parent().unwrap_or(Path::new("."));
                Ok(GridData::from_manifest(&m, base)?)
            }
            None => {
                let (_, corpus) = generate_synthetic(&self.synth)?;
                Ok(GridData::from_synthetic(&corpus)?)
            }
        }
    }
}
