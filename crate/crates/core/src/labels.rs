//! The sparse labeled set of one image: annotated points plus the pixels
//! their labels were propagated to.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Background,
    Salient,
}

impl Class {
    pub fn from_bit(bit: u8) -> Self {
        if bit != 0 {
            Class::Salient
        } else {
            Class::Background
        }
    }

    pub fn target(self) -> f64 {
        match self {
            Class::Salient => 1.0,
            Class::Background => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Seed,
    Queried,
    Propagated,
}

impl LabelSource {
    pub fn is_point(self) -> bool {
        !matches!(self, LabelSource::Propagated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub row: usize,
    pub col: usize,
    pub class: Class,
    pub source: LabelSource,
    pub round: usize,
    /// The annotated pixel this label came from; equals `(row, col)` for points.
    pub source_point: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLabels {
    image_id: String,
    height: usize,
    width: usize,
    entries: BTreeMap<usize, LabelEntry>,
}

impl SparseLabels {
    pub fn new(image_id: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            image_id: image_id.into(),
            height,
            width,
            entries: BTreeMap::new(),
        }
    }

    /// Dense labels covering every pixel, as used by full supervision.
    pub fn dense(image_id: impl Into<String>, height: usize, width: usize, classes: &[u8]) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::shape(height * width, classes.len()));
        }
        let mut labels = Self::new(image_id, height, width);
        for (idx, &bit) in classes.iter().enumerate() {
            let (row, col) = (idx / width, idx % width);
            labels.entries.insert(
                idx,
                LabelEntry {
                    row,
                    col,
                    class: Class::from_bit(bit),
                    source: LabelSource::Seed,
                    round: 0,
                    source_point: (row, col),
                },
            );
        }
        Ok(labels)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &LabelEntry> {
        self.entries.values()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&LabelEntry> {
        self.entries.get(&(row * self.width + col))
    }

    /// Annotated points (seed and queried), in row-major order.
    pub fn points(&self) -> impl Iterator<Item = &LabelEntry> {
        self.entries.values().filter(|e| e.source.is_point())
    }

    pub fn point_count(&self) -> usize {
        self.points().count()
    }

    pub fn is_point(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_some_and(|e| e.source.is_point())
    }

    fn check_bounds(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.height || col >= self.width {
            return Err(Error::InvalidInput(format!(
                "pixel ({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Records an annotated point. Annotated pixels always keep their own class,
    /// so re-annotating an existing point is rejected.
    pub fn add_point(
        &mut self,
        row: usize,
        col: usize,
        class: Class,
        source: LabelSource,
        round: usize,
    ) -> Result<()> {
        self.check_bounds(row, col)?;
        if !source.is_point() {
            return Err(Error::InvalidInput("use add_propagated for region labels".into()));
        }
        if self.is_point(row, col) {
            return Err(Error::InvalidInput(format!("pixel ({row},{col}) is already annotated")));
        }
        self.entries.insert(
            row * self.width + col,
            LabelEntry {
                row,
                col,
                class,
                source,
                round,
                source_point: (row, col),
            },
        );
        Ok(())
    }

    /// Adds region labels spread from an annotated point. Later rounds
    /// override earlier region labels; annotated pixels are never touched.
    pub fn add_propagated(&mut self, entries: &[LabelEntry]) -> Result<()> {
        for e in entries {
            self.check_bounds(e.row, e.col)?;
            let (sr, sc) = e.source_point;
            if !self.is_point(sr, sc) {
                return Err(Error::InvalidInput(format!(
                    "propagated label at ({},{}) references unannotated pixel ({sr},{sc})",
                    e.row, e.col
                )));
            }
        }
        for e in entries {
            let idx = e.row * self.width + e.col;
            match self.entries.get(&idx) {
                Some(existing) if existing.source.is_point() => continue,
                Some(existing) if existing.round > e.round => continue,
                _ => {}
            }
            self.entries.insert(
                idx,
                LabelEntry {
                    source: LabelSource::Propagated,
                    ..*e
                },
            );
        }
        Ok(())
    }

    /// `(pixel index, target)` pairs for the loss, in row-major order.
    pub fn targets(&self) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .map(|(&idx, e)| (idx, e.class.target()))
            .collect()
    }

    /// Labels ignoring provenance, for comparisons across label sources.
    pub fn class_map(&self) -> BTreeMap<usize, Class> {
        self.entries.iter().map(|(&i, e)| (i, e.class)).collect()
    }
}
