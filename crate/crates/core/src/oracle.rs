//! Label queries and the answers that come back for them, from the ground
//! truth or from a person.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GroundTruthMask;
use crate::labels::Class;
use crate::rng::{derive_seed, purpose_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Pending,
    Answered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQuery {
    pub query_id: u64,
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub round: usize,
    pub superpixel_id: Option<u32>,
    pub status: QueryStatus,
    /// Selection score and dissimilarity, when the strategy produced them.
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub phi: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    GtOracle,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAnswer {
    pub query_id: u64,
    pub class: Class,
    pub source: AnswerSource,
}

/// Reads the mask at the queried pixel.
pub fn gt_answer(mask: &GroundTruthMask, query: &LabelQuery) -> Result<LabelAnswer> {
    if query.row >= mask.height() || query.col >= mask.width() {
        return Err(Error::InvalidInput(format!(
            "query {} at ({},{}) outside {}x{} mask",
            query.query_id,
            query.row,
            query.col,
            mask.height(),
            mask.width()
        )));
    }
    Ok(LabelAnswer {
        query_id: query.query_id,
        class: Class::from_bit(mask.get(query.row, query.col)),
        source: AnswerSource::GtOracle,
    })
}

/// `n` distinct uniform pixels, fixed by the experiment seed and image id.
pub fn initial_points(image_id: &str, seed: u64, n: usize, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
    if n > height * width {
        return Err(Error::InvalidInput(format!("{n} initial points on a {height}x{width} image")));
    }
    let tag = image_id
        .bytes()
        .fold(0u64, |h, b| derive_seed(h, b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(purpose_seed(seed, "initial_points", tag));
    Ok(sample(&mut rng, height * width, n)
        .into_iter()
        .map(|i| (i / width, i % width))
        .collect())
}

/// Appends records as JSON lines and syncs them to disk before returning.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

/// Reads JSON lines; a torn final line (crash mid-append) is ignored.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    let mut offset = 0;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line.trim_end()) {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(Error::Parse {
                    offset: start,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}
