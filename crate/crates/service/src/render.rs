//! Query cards: the image around a queried pixel with the pixel marked and
//! its superpixel outlined, as PNG.

use std::io::Cursor;

use atal_core::grid::Image;
use atal_core::superpixel::SuperpixelPartition;
use base64::Engine as _;
use image::{ImageFormat, Rgb, RgbImage};
use serde::Serialize;

/// Output pixels per image pixel.
pub const SCALE: u32 = 8;
/// Largest crop side in image pixels.
pub const CROP: usize = 48;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// One outline edge between pixel corners, `(row0, col0, row1, col1)` in
/// full-image corner coordinates.
pub type Segment = [usize; 4];

pub fn crop_around(h: usize, w: usize, row: usize, col: usize) -> Crop {
    let span = |n: usize, at: usize| {
        let len = n.min(CROP);
        let start = at.saturating_sub(len / 2).min(n - len);
        (start, len)
    };
    let (top, height) = span(h, row);
    let (left, width) = span(w, col);
    Crop {
        top,
        left,
        height,
        width,
    }
}

/// Boundary edges of the superpixel holding `(row, col)`.
pub fn outline(part: &SuperpixelPartition, row: usize, col: usize) -> Vec<Segment> {
    let id = part.label(row, col);
    let (h, w) = (part.height, part.width);
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && part.label(r as usize, c as usize) == id
    };
    let mut segs = Vec::new();
    for i in part.members(id) {
        let (r, c) = (i / w, i % w);
        let (ri, ci) = (r as isize, c as isize);
        if !inside(ri - 1, ci) {
            segs.push([r, c, r, c + 1]);
        }
        if !inside(ri + 1, ci) {
            segs.push([r + 1, c, r + 1, c + 1]);
        }
        if !inside(ri, ci - 1) {
            segs.push([r, c, r + 1, c]);
        }
        if !inside(ri, ci + 1) {
            segs.push([r, c + 1, r + 1, c + 1]);
        }
    }
    segs
}

fn to_rgb(img: &Image, r: usize, c: usize) -> Rgb<u8> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if img.channels() >= 3 {
        Rgb([q(img.get(r, c, 0)), q(img.get(r, c, 1)), q(img.get(r, c, 2))])
    } else {
        let g = q(img.get(r, c, 0));
        Rgb([g, g, g])
    }
}

pub fn render_png(img: &Image, part: &SuperpixelPartition, row: usize, col: usize, crop: &Crop) -> Vec<u8> {
    let (cw, ch) = (crop.width as u32 * SCALE, crop.height as u32 * SCALE);
    let mut out = RgbImage::new(cw, ch);
    for y in 0..ch {
        for x in 0..cw {
            let (r, c) = (crop.top + (y / SCALE) as usize, crop.left + (x / SCALE) as usize);
            out.put_pixel(x, y, to_rgb(img, r, c));
        }
    }
    let yellow = Rgb([255, 220, 0]);
    let mut plot = |x: i64, y: i64, color: Rgb<u8>| {
        if x >= 0 && y >= 0 && (x as u32) < cw && (y as u32) < ch {
            out.put_pixel(x as u32, y as u32, color);
        }
    };
    let to_px = |corner: usize, origin: usize| (corner as i64 - origin as i64) * SCALE as i64;
    for [r0, c0, r1, c1] in outline(part, row, col) {
        let (y0, x0) = (to_px(r0, crop.top), to_px(c0, crop.left));
        let (y1, x1) = (to_px(r1, crop.top), to_px(c1, crop.left));
        for t in 0..=SCALE as i64 {
            let (y, x) = (y0 + (y1 - y0) * t / SCALE as i64, x0 + (x1 - x0) * t / SCALE as i64);
            plot(x, y, yellow);
            plot(x - (c0 == c1) as i64, y - (r0 == r1) as i64, yellow);
        }
    }
    // red box around the queried pixel plus a short crosshair
    let red = Rgb([255, 0, 0]);
    let (top, left) = (to_px(row, crop.top), to_px(col, crop.left));
    let s = SCALE as i64;
    for t in -2..=s + 1 {
        plot(left + t, top - 2, red);
        plot(left + t, top + s + 1, red);
        plot(left - 2, top + t, red);
        plot(left + s + 1, top + t, red);
    }
    for t in 1..=s {
        plot(left + s / 2, top - 2 - t, red);
        plot(left + s / 2, top + s + 1 + t, red);
        plot(left - 2 - t, top + s / 2, red);
        plot(left + s + 1 + t, top + s / 2, red);
    }
    let mut bytes = Vec::new();
    out.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    bytes
}

pub fn base64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}
