//! Gaussian scale space, difference-of-Gaussian extrema, and SIFT descriptors
//! (keypoint-based and dense multi-scale).

use std::f64::consts::{PI, TAU};

use crate::descriptor::{DescriptorSet, Geometry};
use crate::raster::Plane;

/// Conventional SIFT base blur.
pub const DEFAULT_SIGMA0: f64 = 1.6;
pub const DEFAULT_LEVELS_PER_OCTAVE: usize = 3;
/// Minimum |DoG| for a keypoint, for images in `[0, 1]`.
pub const DEFAULT_CONTRAST_FLOOR: f64 = 0.01;
pub const DESCRIPTOR_LEN: usize = 128;
const CLAMP: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLevel {
    pub sigma: f64,
    pub image: Plane,
}

#[derive(Debug, Clone)]
pub struct ScaleSpace {
    pub base: Plane,
    pub levels: Vec<ScaleLevel>,
}

/// Differences of adjacent scale-space levels. Layer `c` carries the sigma of level `c`.
#[derive(Debug, Clone)]
pub struct DogStack {
    pub layers: Vec<ScaleLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyPoint {
    pub x: usize,
    pub y: usize,
    pub scale_index: usize,
    pub sigma: f64,
    pub orientation: f64,
}

/// Unit-sum Gaussian taps truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable convolution with a symmetric odd-length kernel, replicated border.
pub fn convolve_separable(img: &Plane, taps: &[f64]) -> Plane {
    let (w, h) = (img.width(), img.height());
    let r = (taps.len() / 2) as isize;
    let mut tmp = Plane::new(w, h);
    let mut row = vec![0.0; w + 2 * r as usize];
    for y in 0..h {
        for (i, v) in row.iter_mut().enumerate() {
            *v = img.get_clamped(i as isize - r, y as isize);
        }
        let out = &mut tmp.data_mut()[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            *o = taps.iter().zip(&row[x..]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = Plane::new(w, h);
    let mut acc = vec![0.0; w];
    for y in 0..h {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, &t) in taps.iter().enumerate() {
            let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
            let src = &tmp.data()[sy * w..(sy + 1) * w];
            for (a, &s) in acc.iter_mut().zip(src) {
                *a += t * s;
            }
        }
        out.data_mut()[y * w..(y + 1) * w].copy_from_slice(&acc);
    }
    out
}

pub fn gaussian_blur(img: &Plane, sigma: f64) -> Plane {
    convolve_separable(img, &gaussian_kernel(sigma))
}

/// Level `c` is the base blurred with `sigma0 * 2^(c / levels_per_octave)`.
pub fn build_scale_space(gray: &Plane, sigma0: f64, levels_per_octave: usize, num_levels: usize) -> ScaleSpace {
    assert!(sigma0 > 0.0 && num_levels >= 3 && levels_per_octave >= 1);
    let levels = (0..num_levels)
        .map(|c| {
            let sigma = sigma0 * 2f64.powf(c as f64 / levels_per_octave as f64);
            ScaleLevel {
                sigma,
                image: gaussian_blur(gray, sigma),
            }
        })
        .collect();
    ScaleSpace {
        base: gray.clone(),
        levels,
    }
}

pub fn dog(space: &ScaleSpace) -> DogStack {
    assert!(space.levels.len() >= 2);
    let layers = space
        .levels
        .windows(2)
        .map(|pair| {
            let (lo, hi) = (&pair[0], &pair[1]);
            let data = hi.image.data().iter().zip(lo.image.data()).map(|(a, b)| a - b).collect();
            ScaleLevel {
                sigma: lo.sigma,
                image: Plane::from_raw(lo.image.width(), lo.image.height(), data).unwrap(),
            }
        })
        .collect();
    DogStack { layers }
}

/// Strict 3x3x3 extrema with `|D| >= contrast_floor`, excluding border pixels
/// and the outermost layers.
pub fn detect_keypoints(stack: &DogStack, contrast_floor: f64) -> Vec<KeyPoint> {
    let layers = &stack.layers;
    assert!(layers.len() >= 3, "need at least three DoG layers");
    let (w, h) = (layers[0].image.width(), layers[0].image.height());
    let mut out = Vec::new();
    for c in 1..layers.len() - 1 {
        let planes = [&layers[c - 1].image, &layers[c].image, &layers[c + 1].image];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let v = planes[1].get(x, y);
                if v.abs() < contrast_floor {
                    continue;
                }
                let mut is_max = true;
                let mut is_min = true;
                'scan: for (p, plane) in planes.iter().enumerate() {
                    for ny in y - 1..=y + 1 {
                        for nx in x - 1..=x + 1 {
                            if p == 1 && nx == x && ny == y {
                                continue;
                            }
                            let n = plane.get(nx, ny);
                            is_max &= v > n;
                            is_min &= v < n;
                            if !is_max && !is_min {
                                break 'scan;
                            }
                        }
                    }
                }
                if is_max || is_min {
                    out.push(KeyPoint {
                        x,
                        y,
                        scale_index: c,
                        sigma: layers[c].sigma,
                        orientation: 0.0,
                    });
                }
            }
        }
    }
    out
}

/// Central-difference gradient at one pixel: `(magnitude, atan2(fy, fx))`.
#[inline]
fn gradient_at(level: &Plane, x: isize, y: isize) -> (f64, f64) {
    let fx = level.get_clamped(x + 1, y) - level.get_clamped(x - 1, y);
    let fy = level.get_clamped(x, y + 1) - level.get_clamped(x, y - 1);
    ((fx * fx + fy * fy).sqrt(), fy.atan2(fx))
}

/// Gradient magnitude and orientation (radians in `(-pi, pi]`) for every pixel.
pub fn gradient(level: &Plane) -> (Plane, Plane) {
    let (w, h) = (level.width(), level.height());
    let mut mag = Plane::new(w, h);
    let mut ori = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (g, t) = gradient_at(level, x as isize, y as isize);
            mag.set(x, y, g);
            ori.set(x, y, t);
        }
    }
    (mag, ori)
}

const ORI_BINS: usize = 36;

/// Orientations of every 36-bin histogram bin reaching 80% of the peak.
/// Bins are centered on multiples of 10 degrees; results lie in `[0, 2 pi)`.
/// An all-zero window yields `[0]`.
pub fn principal_orientations(x: usize, y: usize, magnitude: &Plane, orientation: &Plane, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).round() as isize;
    let sw = 1.5 * sigma;
    let mut hist = [0.0; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let px = (x as isize + dx).clamp(0, magnitude.width() as isize - 1) as usize;
            let py = (y as isize + dy).clamp(0, magnitude.height() as isize - 1) as usize;
            let g = magnitude.get(px, py);
            if g == 0.0 {
                continue;
            }
            let weight = (-((dx * dx + dy * dy) as f64) / (2.0 * sw * sw)).exp();
            let t = orientation.get(px, py).rem_euclid(TAU);
            let bin = (t / TAU * ORI_BINS as f64).round() as usize % ORI_BINS;
            hist[bin] += g * weight;
        }
    }
    let peak = hist.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return vec![0.0];
    }
    hist.iter()
        .enumerate()
        .filter(|(_, &v)| v >= 0.8 * peak)
        .map(|(b, _)| b as f64 * TAU / ORI_BINS as f64)
        .collect()
}

/// Where and how large a descriptor window is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
    /// Scale-space level the gradients are read from.
    pub level: usize,
    /// Side of one of the 4x4 spatial cells, in pixels.
    pub bin_size: f64,
    pub orientation: f64,
}

impl SamplePoint {
    /// Descriptor frame for a detected keypoint: cells of `3 sigma` pixels.
    pub fn from_keypoint(kp: &KeyPoint) -> Self {
        Self {
            x: kp.x as f64,
            y: kp.y as f64,
            level: kp.scale_index,
            bin_size: 3.0 * kp.sigma,
            orientation: kp.orientation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftDescriptor {
    pub vector: Vec<f64>,
    pub point: SamplePoint,
}

/// L2 normalize, clamp components at 0.2, renormalize, repeated until no
/// component exceeds the clamp. Zero stays zero.
///
/// With fewer than 25 nonzero components no unit vector fits under the
/// clamp; those end equal at `1 / sqrt(nnz)`.
pub fn normalize_descriptor(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    for _ in 0..v.len() {
        if v.iter().all(|&x| x <= CLAMP + 1e-12) {
            break;
        }
        v.iter_mut().for_each(|x| *x = x.min(CLAMP));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Rotated 4x4x8 SIFT descriptor with trilinear binning and a Gaussian window
/// of half the window width.
pub fn sift_at(point: &SamplePoint, space: &ScaleSpace) -> SiftDescriptor {
    let level = &space.levels[point.level].image;
    let bin = point.bin_size;
    let (sin, cos) = point.orientation.sin_cos();
    let radius = (bin * std::f64::consts::SQRT_2 * 2.5).ceil() as isize;
    let cx = point.x.round() as isize;
    let cy = point.y.round() as isize;
    let mut hist = [0.0f64; DESCRIPTOR_LEN];
    for py in cy - radius..=cy + radius {
        for px in cx - radius..=cx + radius {
            let dx = px as f64 - point.x;
            let dy = py as f64 - point.y;
            let u = (cos * dx + sin * dy) / bin;
            let v = (-sin * dx + cos * dy) / bin;
            let bu = u + 1.5;
            let bv = v + 1.5;
            if bu <= -1.0 || bu >= 4.0 || bv <= -1.0 || bv >= 4.0 {
                continue;
            }
            let (g, theta) = gradient_at(level, px, py);
            if g == 0.0 {
                continue;
            }
            let weight = g * (-(u * u + v * v) / 8.0).exp();
            let bo = (theta - point.orientation).rem_euclid(TAU) / TAU * 8.0;
            trilinear(&mut hist, bu, bv, bo, weight);
        }
    }
    normalize_descriptor(&mut hist);
    SiftDescriptor {
        vector: hist.to_vec(),
        point: *point,
    }
}

#[inline]
fn trilinear(hist: &mut [f64; DESCRIPTOR_LEN], bu: f64, bv: f64, bo: f64, weight: f64) {
    let (u0, v0, o0) = (bu.floor(), bv.floor(), bo.floor());
    let (fu, fv, fo) = (bu - u0, bv - v0, bo - o0);
    for (du, wu) in [(0, 1.0 - fu), (1, fu)] {
        let iu = u0 as isize + du;
        if !(0..4).contains(&iu) {
            continue;
        }
        for (dv, wv) in [(0, 1.0 - fv), (1, fv)] {
            let iv = v0 as isize + dv;
            if !(0..4).contains(&iv) {
                continue;
            }
            for (d_o, wo) in [(0, 1.0 - fo), (1, fo)] {
                let io = (o0 as usize + d_o) % 8;
                hist[(iv as usize * 4 + iu as usize) * 8 + io] += weight * wu * wv * wo;
            }
        }
    }
}

/// Detects keypoints, assigns principal orientations and describes each
/// orientation separately.
pub fn keypoint_sift(gray: &Plane, contrast_floor: f64) -> DescriptorSet {
    let space = build_scale_space(gray, DEFAULT_SIGMA0, DEFAULT_LEVELS_PER_OCTAVE, DEFAULT_LEVELS_PER_OCTAVE + 3);
    let stack = dog(&space);
    let mut set = DescriptorSet::new(DESCRIPTOR_LEN);
    let mut grads: Vec<Option<(Plane, Plane)>> = vec![None; space.levels.len()];
    for kp in detect_keypoints(&stack, contrast_floor) {
        let (mag, ori) = grads[kp.scale_index].get_or_insert_with(|| gradient(&space.levels[kp.scale_index].image));
        for orientation in principal_orientations(kp.x, kp.y, mag, ori, kp.sigma) {
            let point = SamplePoint::from_keypoint(&KeyPoint { orientation, ..kp });
            let d = sift_at(&point, &space);
            set.push(
                &d.vector,
                Geometry {
                    x: kp.x as f64,
                    y: kp.y as f64,
                    scale: point.bin_size,
                },
            );
        }
    }
    set
}

/// Cell size in pixels for dense scale `s` (0-based): 4, 6, 8, 10, 12, ...
pub fn dense_bin_size(s: usize) -> usize {
    4 + 2 * s
}

/// Number of grid positions along one axis of `len` pixels.
pub fn dense_grid_count(len: usize, step: usize, bin: usize) -> usize {
    let window = 4 * bin;
    if len < window {
        0
    } else {
        (len - window) / step + 1
    }
}

/// Upright dense SIFT on a regular grid at `num_scales` cell sizes.
///
/// Scale `s` reads gradients from the image blurred with
/// `1.6 * 2^(s/3)`. Spatial binning is bilinear with a flat window, which
/// makes each orientation channel a separable triangular filter that is
/// evaluated once per image and then sampled at the cell centers.
pub fn dense_sift(gray: &Plane, step: usize, num_scales: usize) -> DescriptorSet {
    assert!(step >= 1 && num_scales >= 1);
    let (w, h) = (gray.width(), gray.height());
    let mut set = DescriptorSet::new(DESCRIPTOR_LEN);
    for s in 0..num_scales {
        let bin = dense_bin_size(s);
        let nx = dense_grid_count(w, step, bin);
        let ny = dense_grid_count(h, step, bin);
        if nx == 0 || ny == 0 {
            continue;
        }
        let sigma = DEFAULT_SIGMA0 * 2f64.powf(s as f64 / DEFAULT_LEVELS_PER_OCTAVE as f64);
        let level = gaussian_blur(gray, sigma);
        let channels = orientation_channels(&level, bin);
        let half = 2 * bin;
        let mut v = [0.0f64; DESCRIPTOR_LEN];
        for gy in 0..ny {
            let cy = half + gy * step;
            for gx in 0..nx {
                let cx = half + gx * step;
                for j in 0..4 {
                    // cell centers sit at c + (j - 1.5) * bin, an integer for even bins
                    let py = (cy as isize + ((2 * j as isize - 3) * bin as isize) / 2) as usize;
                    for i in 0..4 {
                        let px = (cx as isize + ((2 * i as isize - 3) * bin as isize) / 2) as usize;
                        for (o, ch) in channels.iter().enumerate() {
                            v[(j * 4 + i) * 8 + o] = ch.get(px, py);
                        }
                    }
                }
                normalize_descriptor(&mut v);
                set.push(
                    &v,
                    Geometry {
                        x: cx as f64,
                        y: cy as f64,
                        scale: bin as f64,
                    },
                );
            }
        }
    }
    set
}

/// Eight orientation-binned gradient-magnitude maps, each filtered by a
/// triangular kernel of half-width `bin`.
fn orientation_channels(level: &Plane, bin: usize) -> Vec<Plane> {
    let (w, h) = (level.width(), level.height());
    let mut channels = vec![Plane::new(w, h); 8];
    for y in 0..h {
        for x in 0..w {
            let (g, t) = gradient_at(level, x as isize, y as isize);
            if g == 0.0 {
                continue;
            }
            let bo = t.rem_euclid(TAU) / TAU * 8.0;
            let o0 = bo.floor();
            let f = bo - o0;
            let o0 = o0 as usize % 8;
            let idx = y * w + x;
            channels[o0].data_mut()[idx] += g * (1.0 - f);
            channels[(o0 + 1) % 8].data_mut()[idx] += g * f;
        }
    }
    let taps: Vec<f64> = (-(bin as isize) + 1..bin as isize)
        .map(|d| 1.0 - (d.abs() as f64) / bin as f64)
        .collect();
    channels.iter().map(|c| convolve_separable(c, &taps)).collect()
}

/// Angle difference wrapped to `[-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    (a - b + PI).rem_euclid(TAU) - PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(w: usize, h: usize, v: f64) -> Plane {
        Plane::from_fn(w, h, |_, _| v)
    }

    #[test]
    fn constant_image_stays_constant() {
        let space = build_scale_space(&constant(40, 30, 0.5), 1.6, 3, 4);
        for level in &space.levels {
            assert!(level.image.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        }
        let stack = dog(&space);
        assert_eq!(stack.layers.len(), 3);
        assert!(stack.layers.iter().all(|l| l.image.data().iter().all(|&v| v.abs() < 1e-12)));
        assert!(detect_keypoints(&stack, 0.0).is_empty());
    }

    #[test]
    fn sigma_schedule() {
        let space = build_scale_space(&constant(16, 16, 0.0), 1.6, 3, 5);
        let expected = [1.6, 2.0159, 2.5398, 3.2, 4.0317];
        for (level, e) in space.levels.iter().zip(expected) {
            assert!((level.sigma - e).abs() < 1e-3, "{} vs {e}", level.sigma);
        }
    }

    fn analytic_gaussian(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> Vec<f64> {
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| {
                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                (-r2 / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma)
            })
            .collect()
    }

    #[test]
    fn impulse_response_is_gaussian() {
        let mut img = Plane::new(41, 41);
        img.set(20, 20, 1.0);
        let space = build_scale_space(&img, 1.6, 3, 4);
        for level in &space.levels {
            let oracle = analytic_gaussian(41, 41, 20.0, 20.0, level.sigma);
            let err: f64 = level.image.data().iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / norm < 0.02, "sigma {}: rel err {}", level.sigma, err / norm);
        }
    }

    #[test]
    fn impulse_dog_matches_difference_of_sampled_gaussians() {
        let mut img = Plane::new(41, 41);
        img.set(20, 20, 1.0);
        let space = build_scale_space(&img, 1.6, 3, 4);
        let stack = dog(&space);
        // oracle: the same normalized sampled kernels applied as an outer product
        let sampled = |sigma: f64| {
            let k = gaussian_kernel(sigma);
            let r = (k.len() / 2) as isize;
            Plane::from_fn(41, 41, |x, y| {
                let (dx, dy) = (x as isize - 20, y as isize - 20);
                if dx.abs() > r || dy.abs() > r {
                    0.0
                } else {
                    k[(dx + r) as usize] * k[(dy + r) as usize]
                }
            })
        };
        for (c, layer) in stack.layers.iter().enumerate() {
            let hi = sampled(space.levels[c + 1].sigma);
            let lo = sampled(space.levels[c].sigma);
            for i in 0..41 * 41 {
                let expected = hi.data()[i] - lo.data()[i];
                assert!((layer.image.data()[i] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bright_dot_yields_nearby_keypoint() {
        // radius 3.5: the DoG response at the center peaks near sigma = r / sqrt(2),
        // inside the stack rather than on its excluded outer layers
        let img = Plane::from_fn(48, 48, |x, y| {
            let d2 = (x as f64 - 24.0).powi(2) + (y as f64 - 24.0).powi(2);
            if d2 <= 3.5f64.powi(2) { 1.0 } else { 0.0 }
        });
        let space = build_scale_space(&img, 1.6, 3, 5);
        let kps = detect_keypoints(&dog(&space), 0.01);
        assert!(kps.iter().any(|k| (k.x as f64 - 24.0).abs() <= 2.0 && (k.y as f64 - 24.0).abs() <= 2.0));
    }

    #[test]
    fn ramp_has_no_keypoints() {
        let img = Plane::from_fn(40, 40, |x, _| x as f64 / 40.0);
        let space = build_scale_space(&img, 1.6, 3, 5);
        assert!(detect_keypoints(&dog(&space), 0.0).is_empty());
    }

    #[test]
    fn gradient_of_ramps() {
        let w = 20.0;
        let (g, t) = gradient(&Plane::from_fn(20, 20, |x, _| x as f64 / w));
        for y in 1..19 {
            for x in 1..19 {
                assert!((g.get(x, y) - 2.0 / w).abs() < 1e-12);
                assert!(t.get(x, y).abs() < 1e-12);
            }
        }
        let (_, t) = gradient(&Plane::from_fn(20, 20, |_, y| y as f64 / 20.0));
        assert!((t.get(5, 5) - PI / 2.0).abs() < 1e-12);
        let (g, t) = gradient(&constant(10, 10, 0.3));
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orientation_histogram_rules() {
        let mag = constant(21, 21, 1.0);
        let ori = constant(21, 21, 0.0);
        assert_eq!(principal_orientations(10, 10, &mag, &ori, 2.0), vec![0.0]);

        // left half points right, right half points down; symmetric around the center column
        let ori2 = Plane::from_fn(21, 21, |x, _| if x < 10 { 0.0 } else if x > 10 { PI / 2.0 } else { PI });
        let mag2 = Plane::from_fn(21, 21, |x, _| if x == 10 { 0.0 } else { 1.0 });
        let found = principal_orientations(10, 10, &mag2, &ori2, 2.0);
        assert_eq!(found.len(), 2);
        assert!(found.iter().any(|&a| a.abs() < 1e-12));
        assert!(found.iter().any(|&a| (a - PI / 2.0).abs() < 1e-12));

        assert_eq!(principal_orientations(10, 10, &Plane::new(21, 21), &ori, 2.0), vec![0.0]);
    }

    fn textured(w: usize, h: usize) -> Plane {
        Plane::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2 * (x * 0.31 + y * 0.07).sin() + 0.15 * (y * 0.23 - x * 0.11).cos()
                + 0.1 * ((x - 20.0).powi(2) + (y - 14.0).powi(2)).sqrt().sin()
        })
    }

    #[test]
    fn descriptor_shape_and_zero_guard() {
        let space = build_scale_space(&textured(48, 48), 1.6, 3, 4);
        let p = SamplePoint { x: 24.0, y: 24.0, level: 1, bin_size: 3.0, orientation: 0.3 };
        let d = sift_at(&p, &space);
        assert_eq!(d.vector.len(), 128);
        let norm: f64 = d.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(d.vector.iter().all(|&v| (0.0..=0.2 + 1e-6).contains(&v)));

        let flat = build_scale_space(&constant(48, 48, 0.4), 1.6, 3, 4);
        assert!(sift_at(&p, &flat).vector.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn descriptor_is_rotation_invariant_for_quarter_turns() {
        let img = textured(61, 61);
        let rot = img.rotate90();
        let describe = |plane: &Plane, x: usize, y: usize| {
            let space = build_scale_space(plane, 1.6, 3, 4);
            let (mag, ori) = gradient(&space.levels[1].image);
            let sigma = space.levels[1].sigma;
            let orientation = principal_orientations(x, y, &mag, &ori, sigma)[0];
            let p = SamplePoint { x: x as f64, y: y as f64, level: 1, bin_size: 3.0, orientation };
            (orientation, sift_at(&p, &space).vector)
        };
        let (o1, d1) = describe(&img, 27, 33);
        // (x, y) -> (y, W - 1 - x) under the counterclockwise quarter turn
        let (o2, d2) = describe(&rot, 33, 60 - 27);
        assert!((angle_diff(o1, o2).abs() - PI / 2.0).abs() < 1e-9, "{o1} {o2}");
        let err: f64 = d1.iter().zip(&d2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = d1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 0.15, "relative error {}", err / norm);
    }

    #[test]
    fn dense_grid_count_matches_closed_form() {
        assert_eq!(dense_grid_count(400, 4, 4), 97);
        let set = dense_sift(&textured(400, 400), 4, 1);
        assert_eq!(set.len(), 97 * 97);
        assert_eq!(set.geometry()[0].x, 8.0);
        assert_eq!(set.geometry().last().unwrap().x, 392.0);
        assert_eq!(set.dim(), 128);
        // step as large as the image: at most one column per scale
        let tiny = dense_sift(&textured(40, 40), 40, 2);
        assert!(tiny.len() <= 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dense_count_property(w in 16usize..90, h in 16usize..90, step in 1usize..12, scales in 1usize..4) {
            let img = Plane::from_fn(w, h, |x, y| ((x * 13 + y * 7) % 17) as f64 / 17.0);
            let set = dense_sift(&img, step, scales);
            let expected: usize = (0..scales)
                .map(|s| dense_grid_count(w, step, dense_bin_size(s)) * dense_grid_count(h, step, dense_bin_size(s)))
                .sum();
            prop_assert_eq!(set.len(), expected);
            for row in set.rows() {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                let nnz = row.iter().filter(|&&v| v > 0.0).count();
                if nnz >= 25 {
                    prop_assert!(row.iter().all(|&v| v <= 0.2 + 1e-6));
                } else {
                    let top = row.iter().cloned().fold(0.0, f64::max);
                    prop_assert!(row.iter().all(|&v| v == 0.0 || (v - top).abs() < 1e-9));
                }
            }
        }

        #[test]
        fn blur_preserves_mean(seed in 0u64..1000, sigma in 0.8f64..3.0, frame in 0.0f64..1.0) {
            // random interior on a constant frame wider than the kernel radius
            let pad = (3.0 * sigma).ceil() as usize + 1;
            let img = Plane::from_fn(64, 64, |x, y| {
                if x < pad || y < pad || x >= 64 - pad || y >= 64 - pad {
                    return frame;
                }
                let h = (x as u64 * 73856093) ^ (y as u64 * 19349663) ^ seed.wrapping_mul(83492791);
                (h % 1000) as f64 / 1000.0
            });
            let blurred = gaussian_blur(&img, sigma);
            prop_assert!((blurred.mean() - img.mean()).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_preserves_mean_exactly_on_border_neutral_image() {
        // image constant on a frame wider than the kernel radius: replication adds
        // exactly the mass it would lose, so the mean is preserved to rounding.
        let img = Plane::from_fn(64, 64, |x, y| {
            if (10..54).contains(&x) && (10..54).contains(&y) {
                ((x * 31 + y * 17) % 23) as f64 / 23.0
            } else {
                0.25
            }
        });
        let blurred = gaussian_blur(&img, 2.0);
        assert!((blurred.mean() - img.mean()).abs() < 1e-9);
    }

    #[test]
    fn keypoint_pipeline_produces_valid_descriptors() {
        let set = keypoint_sift(&textured(64, 64), DEFAULT_CONTRAST_FLOOR);
        for row in set.rows() {
            assert_eq!(row.len(), 128);
        }
    }
}
