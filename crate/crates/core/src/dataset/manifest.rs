//! Line-oriented dataset manifests: `image_id<TAB>image_path<TAB>mask_path`.
//!
//! Metadata lives in leading `# key=value` comment lines. Relative paths
//! resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::synth::GeneratorParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// First generator stream of the split; train and test never share streams.
    pub fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 32,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub generator_seed: Option<u64>,
    pub generator_params: Option<GeneratorParams>,
    pub image_size: Option<usize>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("# split={}\n", self.split);
        if let Some(seed) = self.generator_seed {
            out += &format!("# generator_seed={seed}\n");
        }
        if let Some(size) = self.image_size {
            out += &format!("# image_size={size}\n");
        }
        if let Some(p) = &self.generator_params {
            out += &format!("# generator_params={}\n", serde_json::to_string(p).unwrap());
        }
        for e in &self.entries {
            out += &format!("{}\t{}\t{}\n", e.image_id, e.image_path.display(), e.mask_path.display());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut split = None;
        let mut generator_seed = None;
        let mut generator_params = None;
        let mut image_size = None;
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { offset: start, message };
            if let Some(meta) = line.strip_prefix('#') {
                let Some((key, value)) = meta.trim().split_once('=') else {
                    continue;
                };
                match key.trim() {
                    "split" => split = Some(value.trim().parse()?),
                    "generator_seed" => {
                        generator_seed = Some(value.trim().parse().map_err(|_| err("bad generator_seed".into()))?)
                    }
                    "image_size" => {
                        image_size = Some(value.trim().parse().map_err(|_| err("bad image_size".into()))?)
                    }
                    "generator_params" => generator_params = Some(serde_json::from_str(value.trim())?),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            if !ids.insert(fields[0].to_string()) {
                return Err(err(format!("duplicate image id '{}'", fields[0])));
            }
            entries.push(ManifestEntry {
                image_id: fields[0].to_string(),
                image_path: PathBuf::from(fields[1]),
                mask_path: PathBuf::from(fields[2]),
            });
        }
        Ok(Self {
            split: split.unwrap_or(Split::Train),
            entries,
            generator_seed,
            generator_params,
            image_size,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
