//! Pixel rendering of synthetic cells. Class sets the cytoplasm hue; every
//! attribute flag switches one visible trait.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::image_io::RgbImage;
use super::AttributeRule;
use crate::annotation::NUM_ATTRIBUTES;

/// Geometry and appearance of one rendered cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub class: usize,
    pub attributes: [bool; NUM_ATTRIBUTES],
    /// Lobe orientation and vacuole placement.
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Hue in degrees, saturation and value of an RGB triple.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|u| u / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn class_hue(class: usize, n_classes: usize) -> f64 {
    360.0 * class as f64 / n_classes as f64
}

const CYTOPLASM_SATURATION: f64 = 0.75;

pub fn paint_background(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    for y in 0..img.height {
        for x in 0..img.width {
            let n: i32 = rng.random_range(-6..=6);
            let base = [236, 226, 230];
            img.put(x, y, base.map(|c: i32| (c + n).clamp(0, 255) as u8));
        }
    }
}

/// Pale unannotated discs standing in for red cells and debris.
pub fn paint_distractor(img: &mut RgbImage, d: &Disc) {
    let ring = hsv_to_rgb(350.0, 0.28, 0.93);
    let center = hsv_to_rgb(350.0, 0.14, 0.96);
    for_each_pixel(img, d.cx, d.cy, d.r, d.r, |img, x, y, dist| {
        img.put(x, y, if dist < 0.55 { center } else { ring });
    });
}

fn for_each_pixel(
    img: &mut RgbImage,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    mut f: impl FnMut(&mut RgbImage, u32, u32, f64),
) {
    let x0 = (cx - rx).floor().max(0.0) as u32;
    let x1 = ((cx + rx).ceil() as u32).min(img.width - 1);
    let y0 = (cy - ry).floor().max(0.0) as u32;
    let y1 = ((cy + ry).ceil() as u32).min(img.height - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist <= 1.0 {
                f(img, x, y, dist);
            }
        }
    }
}

fn active(cell: &CellSpec, rules: &[AttributeRule; NUM_ATTRIBUTES], rule: AttributeRule) -> bool {
    rules.iter().zip(&cell.attributes).any(|(&r, &flag)| r == rule && flag)
}

pub fn paint_cell(img: &mut RgbImage, cell: &CellSpec, n_classes: usize, rules: &[AttributeRule; NUM_ATTRIBUTES]) {
    let r = cell.rx.min(cell.ry);
    let hue = class_hue(cell.class, n_classes);
    let value = if active(cell, rules, AttributeRule::DarkCytoplasm) {
        0.5
    } else {
        0.88
    };
    let cytoplasm = hsv_to_rgb(hue, CYTOPLASM_SATURATION, value);
    let outline = active(cell, rules, AttributeRule::Outline);
    let ring_width = (2.5 / r).max(0.12);
    let nucleus_color = if active(cell, rules, AttributeRule::DarkChromatin) {
        [45, 45, 50]
    } else {
        [150, 150, 155]
    };
    let nucleus_r = if active(cell, rules, AttributeRule::LargeNucleus) {
        0.5 * r
    } else {
        0.3 * r
    };
    let lobed = active(cell, rules, AttributeRule::LobedNucleus);
    let vacuoles = active(cell, rules, AttributeRule::Vacuoles);

    let lobes: Vec<(f64, f64, f64)> = if lobed {
        (0..3)
            .map(|k| {
                let a = cell.phase + k as f64 * std::f64::consts::TAU / 3.0;
                (
                    cell.cx + 0.6 * nucleus_r * a.cos(),
                    cell.cy + 0.6 * nucleus_r * a.sin(),
                    0.5 * nucleus_r,
                )
            })
            .collect()
    } else {
        vec![(cell.cx, cell.cy, nucleus_r)]
    };
    let holes: Vec<(f64, f64, f64)> = if vacuoles {
        (0..5)
            .map(|k| {
                let a = cell.phase + 0.4 + k as f64 * std::f64::consts::TAU / 5.0;
                (cell.cx + 0.74 * r * a.cos(), cell.cy + 0.74 * r * a.sin(), 0.13 * r)
            })
            .collect()
    } else {
        Vec::new()
    };

    for_each_pixel(img, cell.cx, cell.cy, cell.rx, cell.ry, |img, x, y, dist| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let inside = |c: &(f64, f64, f64)| (px - c.0).powi(2) + (py - c.1).powi(2) <= c.2 * c.2;
        let color = if outline && dist > 1.0 - ring_width {
            [40, 35, 45]
        } else if lobes.iter().any(inside) {
            nucleus_color
        } else if holes.iter().any(inside) {
            [250, 250, 250]
        } else {
            cytoplasm
        };
        img.put(x, y, color);
    });
}
