//! SLIC-style superpixels and point-to-region label propagation.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::pnm;
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::labels::{Class, LabelEntry, LabelSource};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub target_count: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            target_count: 96,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelPartition {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
    pub seed: u64,
}

impl SuperpixelPartition {
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Pixel indices of superpixel `id`, row-major.
    pub fn members(&self, id: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Whether pixel `(row, col)` sits on the border of its superpixel.
    pub fn is_boundary(&self, row: usize, col: usize) -> bool {
        let l = self.label(row, col);
        neighbours(row, col, self.height, self.width).any(|(r, c)| self.label(r, c) != l)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let denom = self.count.saturating_sub(1).max(1) as f64;
        let values: Vec<f64> = self.labels.iter().map(|&l| l as f64 / denom).collect();
        pnm::write_gray(self.height, self.width, &values, path)
    }
}

fn neighbours(row: usize, col: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (row > 0).then(|| (row - 1, col));
    let down = (row + 1 < h).then_some((row + 1, col));
    let left = (col > 0).then(|| (row, col - 1));
    let right = (col + 1 < w).then_some((row, col + 1));
    [up, down, left, right].into_iter().flatten()
}

const COLOR_SCALE: f64 = 100.0;

struct Center {
    y: f64,
    x: f64,
    color: Vec<f64>,
}

/// Segments `image` into at most `params.target_count` 4-connected superpixels.
pub fn segment(image: &Image, params: &SlicParams, seed: u64) -> Result<SuperpixelPartition> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let s = params.target_count;
    if s == 0 || s > h * w {
        return Err(Error::InvalidInput(format!("superpixel count {s} outside 1..={}", h * w)));
    }
    if !(params.compactness > 0.0 && params.compactness.is_finite()) {
        return Err(Error::Config(format!("compactness {} must be positive", params.compactness)));
    }
    let color = |i: usize| -> Vec<f64> {
        image.data()[i * ch..(i + 1) * ch].iter().map(|v| v * COLOR_SCALE).collect()
    };

    // grid layout with ny·nx <= S
    let ny = ((s as f64 * h as f64 / w as f64).sqrt().floor() as usize).clamp(1, h.min(s));
    let nx = (s / ny).clamp(1, w);
    let step = ((h * w) as f64 / (ny * nx) as f64).sqrt();
    let mut centers: Vec<Center> = Vec::with_capacity(ny * nx);
    for j in 0..ny {
        for i in 0..nx {
            let y = (j as f64 + 0.5) * h as f64 / ny as f64;
            let x = (i as f64 + 0.5) * w as f64 / nx as f64;
            let (r, c) = ((y.floor() as usize).min(h - 1), (x.floor() as usize).min(w - 1));
            centers.push(Center {
                y,
                x,
                color: color(r * w + c),
            });
        }
    }

    let spatial_weight = (params.compactness / step).powi(2);
    let mut assign = vec![u32::MAX; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    for _ in 0..params.iterations.max(1) {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        assign.iter_mut().for_each(|a| *a = u32::MAX);
        for (k, cen) in centers.iter().enumerate() {
            let r0 = (cen.y - step).floor().max(0.0) as usize;
            let r1 = ((cen.y + step).ceil() as usize).min(h);
            let c0 = (cen.x - step).floor().max(0.0) as usize;
            let c1 = ((cen.x + step).ceil() as usize).min(w);
            for r in r0..r1 {
                for c in c0..c1 {
                    let i = r * w + c;
                    let d = distance(cen, r, c, &image.data()[i * ch..(i + 1) * ch], spatial_weight);
                    if d < dist[i] {
                        dist[i] = d;
                        assign[i] = k as u32;
                    }
                }
            }
        }
        // pixels outside every window go to the spatially nearest center
        for i in 0..h * w {
            if assign[i] == u32::MAX {
                let (r, c) = (i / w, i % w);
                let nearest = centers
                    .iter()
                    .enumerate()
                    .map(|(k, cen)| (k, (r as f64 + 0.5 - cen.y).powi(2) + (c as f64 + 0.5 - cen.x).powi(2)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(k, _)| k)
                    .expect("at least one center");
                assign[i] = nearest as u32;
            }
        }
        let mut sums = vec![(0.0, 0.0, vec![0.0; ch], 0usize); centers.len()];
        for (i, &k) in assign.iter().enumerate() {
            let e = &mut sums[k as usize];
            e.0 += (i / w) as f64 + 0.5;
            e.1 += (i % w) as f64 + 0.5;
            for (a, v) in e.2.iter_mut().zip(&image.data()[i * ch..(i + 1) * ch]) {
                *a += v * COLOR_SCALE;
            }
            e.3 += 1;
        }
        for (cen, (sy, sx, sc, n)) in centers.iter_mut().zip(sums) {
            if n > 0 {
                let n = n as f64;
                cen.y = sy / n;
                cen.x = sx / n;
                cen.color = sc.into_iter().map(|v| v / n).collect();
            }
        }
    }

    let labels = enforce_connectivity(&assign, h, w);
    let count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(SuperpixelPartition {
        height: h,
        width: w,
        labels,
        count,
        seed,
    })
}

fn distance(cen: &Center, r: usize, c: usize, px: &[f64], spatial_weight: f64) -> f64 {
    let dc: f64 = cen.color.iter().zip(px).map(|(a, b)| (a - b * COLOR_SCALE).powi(2)).sum();
    let ds = (r as f64 + 0.5 - cen.y).powi(2) + (c as f64 + 0.5 - cen.x).powi(2);
    dc + ds * spatial_weight
}

/// 4-connected components of a label map, as (component id per pixel, sizes).
fn components(labels: &[u32], h: usize, w: usize) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for (r, c) in neighbours(i / w, i % w, h, w) {
                let j = r * w + c;
                if comp[j] == usize::MAX && labels[j] == labels[start] {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Keeps the largest fragment of every cluster and merges the other
/// fragments into the largest adjacent kept region, then renumbers ids
/// contiguously in row-major order of first appearance.
fn enforce_connectivity(assign: &[u32], h: usize, w: usize) -> Vec<u32> {
    let (comp, sizes) = components(assign, h, w);
    let n = sizes.len();
    // component -> owning cluster label
    let mut owner = vec![0u32; n];
    for (i, &c) in comp.iter().enumerate() {
        owner[c] = assign[i];
    }
    // anchored: the largest component of each cluster, first in scan order on ties
    let mut best: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for c in 0..n {
        let e = best.entry(owner[c]).or_insert(c);
        if sizes[c] > sizes[*e] {
            *e = c;
        }
    }
    let mut anchor_of: Vec<Option<usize>> = vec![None; n];
    for &c in best.values() {
        anchor_of[c] = Some(c);
    }
    // size of the anchored region each anchor has grown into
    let mut region_size = sizes.clone();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &c) in comp.iter().enumerate() {
        members[c].push(i);
    }
    loop {
        let mut changed = false;
        let mut pending = false;
        for c in 0..n {
            if anchor_of[c].is_some() {
                continue;
            }
            let mut target: Option<usize> = None;
            for &i in &members[c] {
                for (r, cc) in neighbours(i / w, i % w, h, w) {
                    let Some(a) = anchor_of[comp[r * w + cc]] else { continue };
                    target = Some(match target {
                        Some(t) if region_size[t] > region_size[a] || (region_size[t] == region_size[a] && t < a) => t,
                        _ => a,
                    });
                }
            }
            match target {
                Some(a) => {
                    anchor_of[c] = Some(a);
                    region_size[a] += sizes[c];
                    owner[c] = owner[a];
                    changed = true;
                }
                None => pending = true,
            }
        }
        if !pending || !changed {
            break;
        }
    }

    let mut renumber: std::collections::HashMap<usize, u32> = std::collections::HashMap::new();
    comp.iter()
        .map(|&c| {
            let a = anchor_of[c].unwrap_or(c);
            let next = renumber.len() as u32;
            *renumber.entry(a).or_insert(next)
        })
        .collect()
}

/// Spreads an annotated point's class over its superpixel.
pub fn propagate(
    row: usize,
    col: usize,
    class: Class,
    round: usize,
    partition: &SuperpixelPartition,
) -> Result<Vec<LabelEntry>> {
    if row >= partition.height || col >= partition.width {
        return Err(Error::InvalidInput(format!(
            "point ({row},{col}) outside {}x{}",
            partition.height, partition.width
        )));
    }
    let id = partition.label(row, col);
    let w = partition.width;
    Ok(partition
        .members(id)
        .into_iter()
        .map(|i| LabelEntry {
            row: i / w,
            col: i % w,
            class,
            source: LabelSource::Propagated,
            round,
            source_point: (row, col),
        })
        .collect())
}
