//! Procedural six-style corpus standing in for real mural photographs.
//!
//! Each style owns a hue band, an arc radius distribution for its strokes,
//! a stroke width and a background texture period. All constants below are
//! frozen so downstream accuracy thresholds stay stable.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{save_image, EraLabel, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Side of generated training images.
pub const SAMPLE_SIDE: usize = 400;
/// Side of generated paintings for dating; rendered at twice the stroke scale.
pub const PAINTING_SIDE: usize = 1200;
pub const HUE_HALF_WIDTH: f64 = 20.0;
pub const MIN_PER_CLASS: usize = 10;

/// Split sizes of the reference protocol, used as apportionment weights.
pub const SPLIT_WEIGHTS: [(Split, usize); 3] = [(Split::Train, 3000), (Split::Test, 700), (Split::Val, 160)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    /// Center of the hue band in degrees.
    pub hue: f64,
    /// Median arc radius in pixels at the 400 px sample scale.
    pub arc_radius: f64,
    pub stroke_width: f64,
    pub texture_period: f64,
}

const STYLES: [Style; 6] = [
    Style { hue: 0.0, arc_radius: 12.0, stroke_width: 2.0, texture_period: 8.0 },
    Style { hue: 60.0, arc_radius: 20.0, stroke_width: 3.0, texture_period: 12.0 },
    Style { hue: 120.0, arc_radius: 32.0, stroke_width: 4.0, texture_period: 17.0 },
    Style { hue: 180.0, arc_radius: 50.0, stroke_width: 5.0, texture_period: 24.0 },
    Style { hue: 240.0, arc_radius: 78.0, stroke_width: 6.5, texture_period: 34.0 },
    Style { hue: 300.0, arc_radius: 120.0, stroke_width: 8.0, texture_period: 48.0 },
];

pub fn style(era: EraLabel) -> Style {
    STYLES[era.index()]
}

/// HSV with `h` in degrees to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue of an RGB color in degrees, `None` for greys.
pub fn rgb_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let d = max - r.min(g).min(b);
    if d <= 1e-12 {
        return None;
    }
    let h = if max == r {
        60.0 * ((g - b) / d)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    Some(h.rem_euclid(360.0))
}

/// Draws a palette color of the style: hue inside the band, saturation and
/// value inside the given ranges.
pub fn palette_color(style: &Style, rng: &mut impl Rng, sat: (f64, f64), val: (f64, f64)) -> [f64; 3] {
    let h = style.hue + rng.random_range(-HUE_HALF_WIDTH + 2.0..HUE_HALF_WIDTH - 2.0);
    hsv_to_rgb(h, rng.random_range(sat.0..sat.1), rng.random_range(val.0..val.1))
}

/// Renders one image of the style. `scale` multiplies every length
/// (radius, width, texture period).
pub fn render(era: EraLabel, side: usize, scale: f64, rng: &mut impl Rng) -> RgbImage {
    let st = style(era);
    let bg_h = st.hue + rng.random_range(-8.0..8.0);
    let bg_s = rng.random_range(0.25..0.4);
    let bg_v = rng.random_range(0.72..0.82);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let period = st.texture_period * scale;
    let (ct, sn) = (theta.cos(), theta.sin());
    let mut img = RgbImage::from_fn(side, side, |x, y| {
        let t = (x as f64 * ct + y as f64 * sn) / period;
        let v = bg_v + 0.12 * (std::f64::consts::TAU * t + phase).sin();
        hsv_to_rgb(bg_h, bg_s, v)
    });

    let width = st.stroke_width * scale;
    let mean_radius = st.arc_radius * scale;
    // about a quarter of the canvas covered by strokes
    let arcs = ((0.25 * (side * side) as f64) / (mean_radius * std::f64::consts::PI * width)).ceil() as usize;
    for _ in 0..arcs {
        let r = mean_radius * (0.25 * (rng.random::<f64>() * 2.0 - 1.0) * 1.7).exp();
        let cx = rng.random_range(-r..side as f64 + r);
        let cy = rng.random_range(-r..side as f64 + r);
        let start: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let extent = rng.random_range(0.5..1.5) * std::f64::consts::PI;
        let color = palette_color(&st, rng, (0.6, 0.9), (0.25, 0.5));
        draw_arc(&mut img, cx, cy, r, start, extent, width, color);
    }
    img
}

/// Anti-aliased circular arc of the given stroke width.
#[allow(clippy::too_many_arguments)]
fn draw_arc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, start: f64, extent: f64, width: f64, color: [f64; 3]) {
    let half = width / 2.0;
    let reach = r + half + 1.0;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil().max(0.0) as usize).min(img.width());
    let y1 = ((cy + reach).ceil().max(0.0) as usize).min(img.height());
    let ends = [start, start + extent].map(|a| (cx + r * a.cos(), cy + r * a.sin()));
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let rel = (dy.atan2(dx) - start).rem_euclid(std::f64::consts::TAU);
            let d = if rel <= extent {
                ((dx * dx + dy * dy).sqrt() - r).abs()
            } else {
                ends.iter()
                    .map(|&(ex, ey)| ((px - ex).powi(2) + (py - ey).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            };
            let alpha = (half + 0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let old = img.get(x, y);
                img.set(x, y, [0, 1, 2].map(|c| old[c] + alpha * (color[c] - old[c])));
            }
        }
    }
}

/// Per-class split sizes: largest-remainder apportionment of `per_class`
/// over the 3000/700/160 weights, remainders to the larger fraction first.
pub fn split_counts(per_class: usize) -> [(Split, usize); 3] {
    let total: usize = SPLIT_WEIGHTS.iter().map(|w| w.1).sum();
    let exact: Vec<f64> = SPLIT_WEIGHTS.iter().map(|w| (per_class * w.1) as f64 / total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = per_class - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    [0, 1, 2].map(|i| (SPLIT_WEIGHTS[i].0, counts[i]))
}

fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Writes `per_class` 400x400 PNGs per era under `out/images/<era>/` and a
/// `manifest.csv` with reference-protocol split proportions.
pub fn gen_synthetic_corpus(out: &Path, per_class: usize, seed: u64) -> Result<Manifest> {
    if per_class < MIN_PER_CLASS {
        return Err(Error::InvalidArgument(format!("per_class must be at least {MIN_PER_CLASS}")));
    }
    let counts = split_counts(per_class);
    let mut entries = Vec::new();
    for era in EraLabel::ALL {
        let dir = out.join("images").join(era.name());
        std::fs::create_dir_all(&dir)?;
        let mut index = 0;
        for (split, n) in counts {
            for _ in 0..n {
                let mut rng = image_rng(seed, (era.index() * 1_000_000 + index) as u64);
                let img = render(era, SAMPLE_SIDE, 1.0, &mut rng);
                let rel = PathBuf::from("images").join(era.name()).join(format!("{}_{index:04}.png", era.name()));
                save_image(&img, &out.join(&rel))?;
                entries.push(ManifestEntry {
                    path: rel,
                    label: Some(era),
                    split,
                });
                index += 1;
            }
        }
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.write(&out.join("manifest.csv"))?;
    Ok(manifest)
}

/// Writes `count` 1200x1200 paintings cycling through the eras, listed as
/// labelled predict rows in `paintings.csv`.
pub fn gen_synthetic_paintings(out: &Path, count: usize, seed: u64) -> Result<Manifest> {
    let dir = out.join("paintings");
    std::fs::create_dir_all(&dir)?;
    let mut entries = Vec::new();
    for i in 0..count {
        let era = EraLabel::ALL[i % EraLabel::COUNT];
        let mut rng = image_rng(seed, (10_000_000 + i) as u64);
        let img = render(era, PAINTING_SIDE, 2.0, &mut rng);
        let rel = PathBuf::from("paintings").join(format!("painting_{i:02}.png"));
        save_image(&img, &out.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            label: Some(era),
            split: Split::Predict,
        });
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.write(&out.join("paintings.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_follow_reference_proportions() {
        assert_eq!(split_counts(100), [(Split::Train, 78), (Split::Test, 18), (Split::Val, 4)]);
        let c = split_counts(3860);
        assert_eq!([c[0].1, c[1].1, c[2].1], [3000, 700, 160]);
        for n in 10..300 {
            assert_eq!(split_counts(n).iter().map(|c| c.1).sum::<usize>(), n);
        }
    }

    #[test]
    fn hue_bands_are_disjoint_with_margin() {
        for a in 0..6 {
            for b in a + 1..6 {
                let d = (STYLES[a].hue - STYLES[b].hue).rem_euclid(360.0);
                let gap = d.min(360.0 - d) - 2.0 * HUE_HALF_WIDTH;
                assert!(gap >= 10.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for era in EraLabel::ALL {
            let st = style(era);
            for _ in 0..200 {
                let h = rgb_hue(palette_color(&st, &mut rng, (0.3, 0.9), (0.3, 0.9))).unwrap();
                let d = (h - st.hue).rem_euclid(360.0);
                assert!(d.min(360.0 - d) <= HUE_HALF_WIDTH + 1e-9);
            }
        }
    }

    #[test]
    fn hsv_round_trip() {
        for h in [0.0, 30.0, 75.0, 150.0, 200.0, 280.0, 330.0] {
            let rgb = hsv_to_rgb(h, 0.7, 0.6);
            assert!((rgb_hue(rgb).unwrap() - h).abs() < 1e-9);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render(EraLabel::MiddleTang, 64, 0.5, &mut image_rng(3, 7));
        let b = render(EraLabel::MiddleTang, 64, 0.5, &mut image_rng(3, 7));
        assert_eq!(a, b);
        let c = render(EraLabel::MiddleTang, 64, 0.5, &mut image_rng(3, 8));
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
