//! Rule-based scoring of generated images.

use super::scene::{Caption, Color, Scene};
use crate::error::Result;
use crate::image::Image;

/// Chroma above which a pixel counts as foreground. The background is gray
/// (chroma 0) and palette colours have chroma 2.
pub const FG_CHROMA: f32 = 0.6;

pub fn is_foreground(rgb: [f32; 3]) -> bool {
    let hi = rgb.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lo = rgb.iter().copied().fold(f32::INFINITY, f32::min);
    hi - lo > FG_CHROMA
}

pub fn foreground_mask(img: &Image) -> Vec<bool> {
    let n = img.side();
    (0..n * n)
        .map(|k| is_foreground(img.pixel(k / n, k % n)))
        .collect()
}

/// 4-connected components, largest first, as lists of flat indices.
pub fn components(mask: &[bool], side: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(k) = stack.pop() {
            comp.push(k);
            let (y, x) = (k / side, k % side);
            let mut push = |ny: usize, nx: usize| {
                let q = ny * side + nx;
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(y - 1, x);
            }
            if y + 1 < side {
                push(y + 1, x);
            }
            if x > 0 {
                push(y, x - 1);
            }
            if x + 1 < side {
                push(y, x + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort_by_key(|c| std::cmp::Reverse(c.len()));
    out
}

/// Area and perimeter of the marching-squares contour around `mask`
/// (iso-level one half between pixel centres).
pub fn contour_area_perimeter(mask: &[bool], side: usize) -> (f64, f64) {
    let at = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < side
            && (x as usize) < side
            && mask[y as usize * side + x as usize]
    };
    let half_diag = std::f64::consts::SQRT_2 / 2.0;
    let (mut area, mut perim) = (0.0, 0.0);
    for y in -1..side as isize {
        for x in -1..side as isize {
            let c = [at(y, x), at(y, x + 1), at(y + 1, x + 1), at(y + 1, x)];
            let n = c.iter().filter(|&&b| b).count();
            match n {
                1 => {
                    area += 0.125;
                    perim += half_diag;
                }
                2 if c[0] == c[2] => {
                    // Diagonal pair: two separate corners.
                    area += 0.25;
                    perim += 2.0 * half_diag;
                }
                2 => {
                    area += 0.5;
                    perim += 1.0;
                }
                3 => {
                    area += 0.875;
                    perim += half_diag;
                }
                4 => area += 1.0,
                _ => {}
            }
        }
    }
    (area, perim)
}

/// Isoperimetric quotient 4πA/P² of a pixel set's contour, clamped to 1.
pub fn compactness(pixels: &[usize], side: usize) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    let mut mask = vec![false; side * side];
    for &k in pixels {
        mask[k] = true;
    }
    let (a, p) = contour_area_perimeter(&mask, side);
    (4.0 * std::f64::consts::PI * a / (p * p)).min(1.0)
}

/// Compactness of the largest foreground component, scaled by the share
/// of foreground it holds so stray fragments count against the image.
pub fn structure_oracle(img: &Image) -> f64 {
    let side = img.side();
    let mask = foreground_mask(img);
    let comps = components(&mask, side);
    let Some(main) = comps.first() else {
        return 0.0;
    };
    let total: usize = comps.iter().map(Vec::len).sum();
    compactness(main, side) * main.len() as f64 / total as f64
}

/// Per-term breakdown of the alignment score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub color: f64,
    pub occupancy: f64,
    pub shape: f64,
    pub score: f64,
}

pub const COLOR_WEIGHT: f64 = 0.4;
pub const OCCUPANCY_WEIGHT: f64 = 0.3;
pub const SHAPE_WEIGHT: f64 = 0.3;

struct RegionStats {
    fg: usize,
    counts: [usize; 4],
    fill: f64,
}

fn region_stats(mask: &[bool], img: &Image, caption: &Caption) -> RegionStats {
    let side = img.side();
    let (t, b, l, r) = caption.position.region(side);
    let mut counts = [0usize; 4];
    let mut inside = vec![false; side * side];
    for y in t..b {
        for x in l..r {
            let k = y * side + x;
            if mask[k] {
                inside[k] = true;
                let c = Color::classify(img.pixel(y, x));
                counts[Color::ALL.iter().position(|&p| p == c).unwrap()] += 1;
            }
        }
    }
    let fg = counts.iter().sum();
    let fill = match components(&inside, side).first() {
        Some(main) => {
            let (mut y0, mut y1, mut x0, mut x1) = (side, 0, side, 0);
            for &k in main {
                let (y, x) = (k / side, k % side);
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
            main.len() as f64 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64
        }
        None => 0.0,
    };
    RegionStats { fg, counts, fill }
}

/// Agreement between an image and the caption's colour, size and shape,
/// measured in the caption's region.
pub fn alignment_terms(img: &Image, caption: &Caption) -> Alignment {
    let mask = foreground_mask(img);
    let got = region_stats(&mask, img, caption);
    // Expected geometry comes from rendering the caption's own scene.
    let reference = Scene {
        shape: caption.shape,
        color: caption.color,
        size: caption.size,
        position: caption.position,
        background: 0.2,
    }
    .render(img.side());
    let want = region_stats(&foreground_mask(&reference), &reference, caption);

    let ci = Color::ALL.iter().position(|&c| c == caption.color).unwrap();
    let dominant = got
        .counts
        .iter()
        .enumerate()
        .all(|(k, &n)| k == ci || n < got.counts[ci]);
    let color = if got.fg > 0 && dominant {
        got.counts[ci] as f64 / got.fg as f64
    } else {
        0.0
    };
    let occupancy = (1.0 - (got.fg as f64 / want.fg as f64 - 1.0).abs()).max(0.0);
    let shape = if got.fg > 0 {
        (1.0 - (got.fill - want.fill).abs() / 0.2).max(0.0)
    } else {
        0.0
    };
    Alignment {
        color,
        occupancy,
        shape,
        score: COLOR_WEIGHT * color + OCCUPANCY_WEIGHT * occupancy + SHAPE_WEIGHT * shape,
    }
}

pub fn alignment_oracle(img: &Image, caption: &str) -> Result<f64> {
    Ok(alignment_terms(img, &Caption::parse(caption)?).score)
}
