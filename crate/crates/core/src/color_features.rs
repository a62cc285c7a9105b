//! Color descriptors: color names (11-term probabilities), discriminative
//! color partitions trained by information-bottleneck merging, and the
//! regional color co-occurrence matrix over a learned Lab codebook.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{Container, ModelKind};
use crate::corpus::{srgb_to_lab, EraLabel, LabeledImage};
use crate::descriptor::{DescriptorSet, Geometry};
use crate::encoding::{kmeans_fit, subsample_rows, KmeansModel};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const COLOR_NAMES: [&str; 11] = [
    "black", "blue", "brown", "grey", "green", "orange", "pink", "purple", "red", "white", "yellow",
];
pub const NUM_COLOR_NAMES: usize = 11;

/// Per-RGB-bin probabilities of the eleven color names.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorNameTable {
    resolution: usize,
    probs: Vec<[f64; NUM_COLOR_NAMES]>,
}

/// Name index for the analytic fallback table.
///
/// HSV rules, in order: `V < 0.15` black; `S < 0.12` white if `V > 0.85`
/// else grey; otherwise by hue: red `[345, 15)`, orange `[15, 45)` (brown
/// when `V < 0.6`), yellow `[45, 70)`, green `[70, 170)`, blue `[170, 260)`,
/// purple `[260, 300)`, pink `[300, 345)`.
pub fn fallback_color_name(rgb: [f64; 3]) -> usize {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    let s = if max > 0.0 { (max - min) / max } else { 0.0 };
    let name = |n: &str| COLOR_NAMES.iter().position(|&c| c == n).unwrap();
    if v < 0.15 {
        return name("black");
    }
    if s < 0.12 {
        return if v > 0.85 { name("white") } else { name("grey") };
    }
    let delta = max - min;
    let mut hue = if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    if hue < 0.0 {
        hue += 360.0;
    }
    match hue {
        h if !(15.0..345.0).contains(&h) => name("red"),
        h if h < 45.0 => {
            if v < 0.6 {
                name("brown")
            } else {
                name("orange")
            }
        }
        h if h < 70.0 => name("yellow"),
        h if h < 170.0 => name("green"),
        h if h < 260.0 => name("blue"),
        h if h < 300.0 => name("purple"),
        _ => name("pink"),
    }
}

impl ColorNameTable {
    pub const DEFAULT_RESOLUTION: usize = 16;

    /// One-hot table from [`fallback_color_name`] evaluated at bin centers.
    pub fn fallback(resolution: usize) -> Self {
        let mut probs = Vec::with_capacity(resolution.pow(3));
        for r in 0..resolution {
            for g in 0..resolution {
                for b in 0..resolution {
                    let c = |i: usize| (i as f64 + 0.5) / resolution as f64;
                    let mut row = [0.0; NUM_COLOR_NAMES];
                    row[fallback_color_name([c(r), c(g), c(b)])] = 1.0;
                    probs.push(row);
                }
            }
        }
        Self { resolution, probs }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    fn bin(&self, rgb: [f64; 3]) -> usize {
        let q = |v: f64| ((v * self.resolution as f64) as usize).min(self.resolution - 1);
        (q(rgb[0]) * self.resolution + q(rgb[1])) * self.resolution + q(rgb[2])
    }

    /// Name probabilities of the bin containing `rgb`.
    #[inline]
    pub fn lookup(&self, rgb: [f64; 3]) -> &[f64; NUM_COLOR_NAMES] {
        &self.probs[self.bin(rgb)]
    }

    /// Reads `r,g,b,black,...,yellow` rows, one per RGB bin center.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows: Vec<Vec<f64>> = reader
            .records()
            .map(|rec| {
                let rec = rec?;
                rec.iter()
                    .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Config(format!("color name table: {e}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let resolution = (rows.len() as f64).cbrt().round() as usize;
        if resolution == 0 || resolution.pow(3) != rows.len() {
            return Err(Error::Config(format!("color name table has {} rows, not a cube", rows.len())));
        }
        let mut table = Self {
            resolution,
            probs: vec![[f64::NAN; NUM_COLOR_NAMES]; rows.len()],
        };
        for row in rows {
            if row.len() != 3 + NUM_COLOR_NAMES {
                return Err(Error::Config("color name table rows need 14 columns".into()));
            }
            let mut p = [0.0; NUM_COLOR_NAMES];
            p.copy_from_slice(&row[3..]);
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Config("color name table row is not a probability vector".into()));
            }
            // values may be given in [0, 1] or [0, 255]
            let scale = if row[..3].iter().any(|&v| v > 1.0) { 255.0 } else { 1.0 };
            let bin = table.bin([row[0] / scale, row[1] / scale, row[2] / scale]);
            table.probs[bin] = p;
        }
        if table.probs.iter().any(|p| p[0].is_nan()) {
            return Err(Error::Config("color name table does not cover every bin".into()));
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["r", "g", "b"];
        header.extend(COLOR_NAMES);
        w.write_record(&header)?;
        let res = self.resolution;
        for (i, p) in self.probs.iter().enumerate() {
            let (r, g, b) = (i / (res * res), (i / res) % res, i % res);
            let c = |v: usize| format!("{}", (v as f64 + 0.5) / res as f64);
            let mut rec = vec![c(r), c(g), c(b)];
            rec.extend(p.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean color-name probability vector over a region.
pub fn cn_descriptor(region: &RgbImage, table: &ColorNameTable) -> [f64; NUM_COLOR_NAMES] {
    let mut acc = [0.0; NUM_COLOR_NAMES];
    for px in region.pixels() {
        for (a, p) in acc.iter_mut().zip(table.lookup(px)) {
            *a += p;
        }
    }
    let n = (region.width() * region.height()) as f64;
    acc.map(|v| v / n)
}

/// Quantized Lab bin of a pixel: `L` over `[0, 100]`, `a` and `b` over `[-128, 128)`.
#[inline]
pub fn lab_bin(lab: [f64; 3], bins: usize) -> usize {
    let q = |v: f64, lo: f64, span: f64| (((v - lo) / span * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    (q(lab[0], 0.0, 100.0) * bins + q(lab[1], -128.0, 256.0)) * bins + q(lab[2], -128.0, 256.0)
}

/// Partition of the quantized Lab cube into `r` discriminative categories.
#[derive(Debug, Clone, PartialEq)]
pub struct DdPartition {
    r: usize,
    bins: usize,
    assignment: Vec<usize>,
}

/// One agglomeration step: cluster `b` merged into cluster `a` (ids are
/// indices into the initial list of occupied bins).
#[derive(Debug, Clone, PartialEq)]
pub struct MergeStep {
    pub a: usize,
    pub b: usize,
    pub loss: f64,
    pub mutual_information: f64,
}

/// Occupied Lab bins with their per-class pixel counts.
#[derive(Debug, Clone)]
pub struct DdCounts {
    pub bins: usize,
    pub classes: usize,
    pub occupied: Vec<usize>,
    pub joint: Vec<Vec<f64>>,
}

/// `sum_c a_c ln(a_c / s)` with `0 ln 0 = 0`.
#[inline]
fn plogp(row: &[f64], total: f64) -> f64 {
    row.iter().filter(|&&a| a > 0.0).map(|&a| a * (a / total).ln()).sum()
}

/// Mutual information between cluster and class for a joint probability table.
pub fn mutual_information(joint: &[Vec<f64>]) -> f64 {
    let classes = joint.first().map_or(0, Vec::len);
    let pc: Vec<f64> = (0..classes).map(|c| joint.iter().map(|r| r[c]).sum()).collect();
    joint
        .iter()
        .map(|row| {
            let pk: f64 = row.iter().sum();
            row.iter()
                .zip(&pc)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| p * (p / (pk * q)).ln())
                .sum::<f64>()
        })
        .sum()
}

impl DdPartition {
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    pub fn category_of_bin(&self, bin: usize) -> usize {
        self.assignment[bin]
    }

    #[inline]
    pub fn category(&self, rgb: [f64; 3]) -> usize {
        self.assignment[lab_bin(srgb_to_lab(rgb), self.bins)]
    }

    pub fn to_container(&self) -> Container {
        Container::new(
            ModelKind::DdPartition,
            self.r,
            self.bins,
            self.assignment.iter().map(|&a| a as f64).collect(),
        )
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (r, bins) = (c.k as usize, c.d as usize);
        c.expect_len(bins.pow(3))?;
        Ok(Self {
            r,
            bins,
            assignment: c.payload.iter().map(|&v| v as usize).collect(),
        })
    }
}

/// Per-bin class counts over every pixel of the labelled images.
pub fn dd_counts(images: &[LabeledImage], bins: usize) -> Result<DdCounts> {
    let mut counter = DdCounter::new(bins);
    for img in images {
        if let Some(label) = img.label {
            counter.add(&img.pixels, label);
        }
    }
    counter.finish()
}

/// Streaming form of [`dd_counts`]: raw per-bin, per-era pixel counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DdCounter {
    bins: usize,
    counts: Vec<[f64; EraLabel::COUNT]>,
}

impl DdCounter {
    pub fn new(bins: usize) -> Self {
        Self {
            bins,
            counts: vec![[0.0; EraLabel::COUNT]; bins.pow(3)],
        }
    }

    pub fn add(&mut self, img: &RgbImage, label: EraLabel) {
        for px in img.pixels() {
            self.counts[lab_bin(srgb_to_lab(px), self.bins)][label.index()] += 1.0;
        }
    }

    pub fn merge(&mut self, other: &DdCounter) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for c in 0..EraLabel::COUNT {
                a[c] += b[c];
            }
        }
    }

    pub fn to_container(&self) -> Container {
        Container::new(
            ModelKind::Matrix,
            self.counts.len(),
            EraLabel::COUNT,
            self.counts.iter().flatten().copied().collect(),
        )
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cells = c.k as usize;
        let bins = (cells as f64).cbrt().round() as usize;
        if bins.pow(3) != cells || c.d as usize != EraLabel::COUNT {
            return Err(Error::Container(format!("{}x{} is not a DD count table", c.k, c.d)));
        }
        c.expect_len(cells * EraLabel::COUNT)?;
        Ok(Self {
            bins,
            counts: c
                .payload
                .chunks_exact(EraLabel::COUNT)
                .map(|ch| std::array::from_fn(|i| ch[i]))
                .collect(),
        })
    }

    /// Joint probabilities over occupied bins and the classes that occur.
    pub fn finish(&self) -> Result<DdCounts> {
        let class_ids: Vec<usize> = (0..EraLabel::COUNT)
            .filter(|&c| self.counts.iter().any(|row| row[c] > 0.0))
            .collect();
        if class_ids.len() < 2 {
            return Err(Error::TooFewClasses);
        }
        let total: f64 = self.counts.iter().flat_map(|c| c.iter()).sum();
        let mut occupied = Vec::new();
        let mut joint = Vec::new();
        for (bin, row) in self.counts.iter().enumerate() {
            if row.iter().any(|&v| v > 0.0) {
                occupied.push(bin);
                joint.push(class_ids.iter().map(|&c| row[c] / total).collect());
            }
        }
        Ok(DdCounts {
            bins: self.bins,
            classes: class_ids.len(),
            occupied,
            joint,
        })
    }
}

/// Greedy agglomerative information bottleneck over occupied Lab bins:
/// repeatedly merge the pair of clusters that loses the least mutual
/// information with the class label until `r` clusters remain. Ties go to
/// the lexicographically smallest pair.
pub fn train_dd_partition(images: &[LabeledImage], r: usize, bins: usize) -> Result<DdPartition> {
    Ok(train_dd_partition_traced(&dd_counts(images, bins)?, r)?.0)
}

pub fn train_dd_partition_traced(counts: &DdCounts, r: usize) -> Result<(DdPartition, Vec<MergeStep>)> {
    let n = counts.occupied.len();
    if r == 0 || n < r {
        return Err(Error::TooFewBins { occupied: n, requested: r });
    }
    let mut joint = counts.joint.clone();
    let mut mass: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    let mut alive = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let merge_loss = |ja: &[f64], ma: f64, jb: &[f64], mb: f64| {
        let merged: Vec<f64> = ja.iter().zip(jb).map(|(a, b)| a + b).collect();
        (plogp(ja, ma) + plogp(jb, mb) - plogp(&merged, ma + mb)).max(0.0)
    };
    let mut cost = vec![f64::INFINITY; n * n];
    for i in 0..n {
        for j in i + 1..n {
            cost[i * n + j] = merge_loss(&joint[i], mass[i], &joint[j], mass[j]);
        }
    }
    let mut mi = mutual_information(&joint);
    let mut trace = Vec::with_capacity(n - r);
    for _ in 0..n - r {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in (0..n).filter(|&i| alive[i]) {
            for j in (i + 1..n).filter(|&j| alive[j]) {
                if cost[i * n + j] < best.2 {
                    best = (i, j, cost[i * n + j]);
                }
            }
        }
        let (a, b, loss) = best;
        let jb = std::mem::take(&mut joint[b]);
        for (x, y) in joint[a].iter_mut().zip(&jb) {
            *x += y;
        }
        mass[a] += mass[b];
        alive[b] = false;
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        for o in (0..n).filter(|&o| alive[o] && o != a) {
            let (i, j) = if o < a { (o, a) } else { (a, o) };
            cost[i * n + j] = merge_loss(&joint[i], mass[i], &joint[j], mass[j]);
        }
        mi -= loss;
        trace.push(MergeStep {
            a,
            b,
            loss,
            mutual_information: mi,
        });
    }

    let bins = counts.bins;
    let mut assignment = vec![usize::MAX; bins.pow(3)];
    for (cat, cluster) in (0..n).filter(|&i| alive[i]).enumerate() {
        for &m in &members[cluster] {
            assignment[counts.occupied[m]] = cat;
        }
    }
    // unseen bins take the category of the nearest occupied bin
    let coords = |bin: usize| [(bin / (bins * bins)) as f64, ((bin / bins) % bins) as f64, (bin % bins) as f64];
    let occupied: Vec<(usize, [f64; 3])> = counts.occupied.iter().map(|&b| (b, coords(b))).collect();
    for bin in 0..bins.pow(3) {
        if assignment[bin] == usize::MAX {
            let c = coords(bin);
            let nearest = occupied
                .iter()
                .min_by(|x, y| {
                    let d = |p: &[f64; 3]| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
                    d(&x.1).total_cmp(&d(&y.1))
                })
                .unwrap()
                .0;
            assignment[bin] = assignment[nearest];
        }
    }
    Ok((DdPartition { r, bins, assignment }, trace))
}

/// Normalized histogram of DD categories over a region.
pub fn dd_descriptor(region: &RgbImage, part: &DdPartition) -> Vec<f64> {
    let mut hist = vec![0.0; part.r];
    for px in region.pixels() {
        hist[part.category(px)] += 1.0;
    }
    let n = (region.width() * region.height()) as f64;
    hist.iter_mut().for_each(|v| *v /= n);
    hist
}

/// Per-pixel feature vectors over square patches of the given sides, with
/// top-left corners on a `step` grid. Patch means come from summed-area tables.
pub fn dense_patch_means(
    width: usize,
    height: usize,
    dim: usize,
    pixel_feature: impl Fn(usize, usize, &mut [f64]),
    step: usize,
    patch_sides: &[usize],
) -> DescriptorSet {
    let stride = width + 1;
    let mut sat = vec![0.0; (width + 1) * (height + 1) * dim];
    let mut f = vec![0.0; dim];
    for y in 0..height {
        for x in 0..width {
            f.iter_mut().for_each(|v| *v = 0.0);
            pixel_feature(x, y, &mut f);
            for k in 0..dim {
                let at = |xx: usize, yy: usize| (yy * stride + xx) * dim + k;
                sat[at(x + 1, y + 1)] = f[k] + sat[at(x, y + 1)] + sat[at(x + 1, y)] - sat[at(x, y)];
            }
        }
    }
    let mut set = DescriptorSet::new(dim);
    let mut v = vec![0.0; dim];
    for &side in patch_sides {
        if side > width || side > height {
            continue;
        }
        let area = (side * side) as f64;
        for y0 in (0..=height - side).step_by(step) {
            for x0 in (0..=width - side).step_by(step) {
                let (x1, y1) = (x0 + side, y0 + side);
                for (k, out) in v.iter_mut().enumerate() {
                    let at = |xx: usize, yy: usize| sat[(yy * stride + xx) * dim + k];
                    *out = (at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0)) / area;
                }
                set.push(
                    &v,
                    Geometry {
                        x: x0 as f64 + side as f64 / 2.0,
                        y: y0 as f64 + side as f64 / 2.0,
                        scale: side as f64,
                    },
                );
            }
        }
    }
    set
}

/// Local CN descriptors on a dense grid (one 11-d vector per patch).
pub fn dense_cn(img: &RgbImage, table: &ColorNameTable, step: usize, patch_sides: &[usize]) -> DescriptorSet {
    dense_patch_means(
        img.width(),
        img.height(),
        NUM_COLOR_NAMES,
        |x, y, out| out.copy_from_slice(table.lookup(img.get(x, y))),
        step,
        patch_sides,
    )
}

/// Local DD descriptors on a dense grid (one r-d vector per patch).
pub fn dense_dd(img: &RgbImage, part: &DdPartition, step: usize, patch_sides: &[usize]) -> DescriptorSet {
    let cats: Vec<usize> = img.pixels().map(|px| part.category(px)).collect();
    dense_patch_means(
        img.width(),
        img.height(),
        part.r(),
        |x, y, out| out[cats[y * img.width() + x]] = 1.0,
        step,
        patch_sides,
    )
}

/// Lab color codebook used by RCC.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorCodebook {
    pub centers: Array2<f64>,
}

/// Pixel cap for codebook training.
pub const DEFAULT_CODEBOOK_SAMPLE_CAP: usize = 200_000;
pub const DEFAULT_COLOR_CODES: usize = 128;

impl ColorCodebook {
    pub fn code_count(&self) -> usize {
        self.centers.nrows()
    }

    /// Nearest code of a Lab color (lowest index on ties).
    #[inline]
    pub fn nearest(&self, lab: [f64; 3]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centers.outer_iter().enumerate() {
            let d = (lab[0] - c[0]).powi(2) + (lab[1] - c[1]).powi(2) + (lab[2] - c[2]).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn to_container(&self) -> Container {
        KmeansModel {
            centers: self.centers.clone(),
            inertia: 0.0,
        }
        .to_container(ModelKind::ColorCodebook)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        Ok(Self {
            centers: KmeansModel::from_container(c)?.centers,
        })
    }
}

/// k-means over a uniform subsample (at most 200k) of the images' Lab pixels.
pub fn train_color_codebook(images: &[&RgbImage], codes: usize, seed: u64) -> Result<ColorCodebook> {
    train_color_codebook_capped(images, codes, seed, DEFAULT_CODEBOOK_SAMPLE_CAP)
}

pub fn train_color_codebook_capped(images: &[&RgbImage], codes: usize, seed: u64, cap: usize) -> Result<ColorCodebook> {
    let sizes: Vec<usize> = images.iter().map(|i| i.width() * i.height()).collect();
    let total: usize = sizes.iter().sum();
    if total < codes || codes == 0 {
        return Err(Error::InsufficientPixels {
            available: total,
            requested: codes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = subsample_rows(total, cap.max(codes), &mut rng);
    let mut data = Vec::with_capacity(picks.len() * 3);
    let (mut img, mut offset) = (0, 0);
    for p in picks {
        while p >= offset + sizes[img] {
            offset += sizes[img];
            img += 1;
        }
        let local = p - offset;
        let w = images[img].width();
        data.extend(srgb_to_lab(images[img].get(local % w, local / w)));
    }
    let data = Array2::from_shape_vec((data.len() / 3, 3), data).unwrap();
    let fit = kmeans_fit(data.view(), codes, seed, 100, 1e-6)?;
    Ok(ColorCodebook {
        centers: fit.model.centers,
    })
}

/// `codes x codes` co-occurrence matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RccMatrix {
    pub codes: usize,
    pub values: Vec<f64>,
}

/// Bounds of cell `i` out of `grid` along an axis of `len` pixels; the last
/// cell absorbs the remainder.
fn cell_range(i: usize, grid: usize, len: usize) -> std::ops::Range<usize> {
    let size = len / grid;
    let start = i * size;
    let end = if i + 1 == grid { len } else { start + size };
    start..end
}

/// Ordered 4-adjacent cell pairs of a `grid x grid` layout, cells numbered row-major.
pub fn grid_adjacency(grid: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let a = gy * grid + gx;
            if gx + 1 < grid {
                pairs.push((a, a + 1));
                pairs.push((a + 1, a));
            }
            if gy + 1 < grid {
                pairs.push((a, a + grid));
                pairs.push((a + grid, a));
            }
        }
    }
    pairs
}

/// Sum of `H_a^T H_b` over the given ordered pairs, then L1 normalized.
pub fn accumulate_cooccurrence(histograms: &[Vec<f64>], pairs: &[(usize, usize)], codes: usize) -> RccMatrix {
    let sparse: Vec<Vec<(usize, f64)>> = histograms
        .iter()
        .map(|h| h.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (i, v)).collect())
        .collect();
    let mut values = vec![0.0; codes * codes];
    for &(a, b) in pairs {
        for &(i, hi) in &sparse[a] {
            for &(j, hj) in &sparse[b] {
                values[i * codes + j] += hi * hj;
            }
        }
    }
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        values.iter_mut().for_each(|v| *v /= total);
    }
    RccMatrix { codes, values }
}

/// Per-cell code histograms for a `grid x grid` partition of the image.
pub fn cell_histograms(img: &RgbImage, book: &ColorCodebook, grid: usize) -> Vec<Vec<f64>> {
    let codes = book.code_count();
    let mut hists = vec![vec![0.0; codes]; grid * grid];
    for gy in 0..grid {
        for y in cell_range(gy, grid, img.height()) {
            for gx in 0..grid {
                let h = &mut hists[gy * grid + gx];
                for x in cell_range(gx, grid, img.width()) {
                    h[book.nearest(srgb_to_lab(img.get(x, y)))] += 1.0;
                }
            }
        }
    }
    hists
}

pub const DEFAULT_RCC_GRID: usize = 4;

/// Regional color co-occurrence over a regular grid with 4-adjacency.
pub fn rcc_descriptor(img: &RgbImage, book: &ColorCodebook, grid: usize) -> Result<RccMatrix> {
    if grid < 2 || img.width() < grid || img.height() < grid {
        return Err(Error::InvalidArgument(format!(
            "RCC grid {grid} does not fit a {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let hists = cell_histograms(img, book, grid);
    Ok(accumulate_cooccurrence(&hists, &grid_adjacency(grid), book.code_count()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use proptest::prelude::*;

    fn idx(name: &str) -> usize {
        COLOR_NAMES.iter().position(|&c| c == name).unwrap()
    }

    #[test]
    fn fallback_table_rows_are_distributions() {
        let t = ColorNameTable::fallback(8);
        assert!(t.probs.iter().all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        // the fallback rule evaluated at the (1, 0, 0) bin center is red
        let red = cn_descriptor(&RgbImage::filled(4, 4, [1.0, 0.0, 0.0]), &ColorNameTable::fallback(16));
        assert!(red[idx("red")] >= 0.9);
        assert!((red.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(fallback_color_name([0.05, 0.05, 0.05]), idx("black"));
        assert_eq!(fallback_color_name([0.95, 0.95, 0.95]), idx("white"));
        assert_eq!(fallback_color_name([0.5, 0.5, 0.52]), idx("grey"));
        assert_eq!(fallback_color_name([0.1, 0.2, 0.9]), idx("blue"));
        assert_eq!(fallback_color_name([0.5, 0.3, 0.1]), idx("brown"));
    }

    #[test]
    fn cn_two_pixel_region_averages_rows() {
        let t = ColorNameTable::fallback(16);
        let a = [0.9, 0.1, 0.1];
        let b = [0.1, 0.8, 0.1];
        let mut img = RgbImage::new(2, 1);
        img.set(0, 0, a);
        img.set(1, 0, b);
        let d = cn_descriptor(&img, &t);
        for i in 0..11 {
            assert_eq!(d[i], (t.lookup(a)[i] + t.lookup(b)[i]) / 2.0);
        }
    }

    #[test]
    fn cn_table_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cn.csv");
        let t = ColorNameTable::fallback(4);
        t.write_csv(&path).unwrap();
        assert_eq!(ColorNameTable::load_csv(&path).unwrap(), t);
    }

    fn solid(rgb: [f64; 3], label: EraLabel) -> LabeledImage {
        LabeledImage::new("s", RgbImage::filled(32, 32, rgb), Some(label), Split::Train).unwrap()
    }

    #[test]
    fn dd_separates_red_and_blue_families() {
        let mut images = Vec::new();
        for i in 0..4 {
            let t = i as f64 * 0.08;
            images.push(solid([0.95 - t, 0.05 + t / 4.0, 0.05], EraLabel::Sui));
            images.push(solid([0.05, 0.1 + t / 4.0, 0.95 - t], EraLabel::EarlyTang));
        }
        let counts = dd_counts(&images, 8).unwrap();
        assert!(counts.occupied.len() > 2);
        let (part, trace) = train_dd_partition_traced(&counts, 2).unwrap();
        let reds: Vec<usize> = (0..4).map(|i| part.category(images[2 * i].pixels.get(0, 0))).collect();
        let blues: Vec<usize> = (0..4).map(|i| part.category(images[2 * i + 1].pixels.get(0, 0))).collect();
        assert!(reds.iter().all(|&c| c == reds[0]));
        assert!(blues.iter().all(|&c| c == blues[0]));
        assert_ne!(reds[0], blues[0]);
        // within-family merges are free: the two-category partition keeps all class information
        assert!(trace.iter().all(|s| s.loss.abs() < 1e-12));
        assert!((trace.last().unwrap().mutual_information - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn dd_identity_when_r_equals_occupied() {
        let images = vec![solid([0.9, 0.1, 0.1], EraLabel::Sui), solid([0.1, 0.1, 0.9], EraLabel::WuDai)];
        let counts = dd_counts(&images, 8).unwrap();
        let (part, trace) = train_dd_partition_traced(&counts, counts.occupied.len()).unwrap();
        assert!(trace.is_empty());
        assert_ne!(part.category([0.9, 0.1, 0.1]), part.category([0.1, 0.1, 0.9]));
        assert!(matches!(train_dd_partition_traced(&counts, 3), Err(Error::TooFewBins { .. })));
        let single = vec![solid([0.9, 0.1, 0.1], EraLabel::Sui)];
        assert!(matches!(dd_counts(&single, 8), Err(Error::TooFewClasses)));
    }

    #[test]
    fn dd_descriptor_histograms() {
        let part = DdPartition {
            r: 10,
            bins: 2,
            assignment: vec![3, 3, 3, 3, 7, 7, 7, 7],
        };
        // L < 50 -> first half of bins (category 3); L >= 50 -> category 7
        let mut img = RgbImage::filled(4, 2, [0.05, 0.05, 0.05]);
        for x in 0..4 {
            img.set(x, 1, [0.95, 0.95, 0.95]);
        }
        let d = dd_descriptor(&img, &part);
        assert_eq!(d[3], 0.5);
        assert_eq!(d[7], 0.5);
        let one = dd_descriptor(&RgbImage::filled(3, 3, [0.05, 0.05, 0.05]), &part);
        assert_eq!(one[3], 1.0);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn codebook_recovers_distinct_constant_colors() {
        let colors: Vec<[f64; 3]> = (0..128)
            .map(|i| [(i % 8) as f64 / 7.0, ((i / 8) % 4) as f64 / 3.0, (i / 32) as f64 / 3.0])
            .collect();
        let imgs: Vec<RgbImage> = colors.iter().map(|&c| RgbImage::filled(32, 32, c)).collect();
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let book = train_color_codebook(&refs, 128, 11).unwrap();
        for c in &colors {
            let lab = srgb_to_lab(*c);
            let best = book
                .centers
                .outer_iter()
                .map(|r| ((r[0] - lab[0]).powi(2) + (r[1] - lab[1]).powi(2) + (r[2] - lab[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6);
        }
        let one = train_color_codebook(&refs[..2], 1, 0).unwrap();
        let mean: Vec<f64> = (0..3)
            .map(|k| (srgb_to_lab(colors[0])[k] + srgb_to_lab(colors[1])[k]) / 2.0)
            .collect();
        for k in 0..3 {
            assert!((one.centers[[0, k]] - mean[k]).abs() < 1e-9);
        }
        assert!(matches!(
            train_color_codebook(&[&RgbImage::new(2, 2)], 5, 0),
            Err(Error::InsufficientPixels { .. })
        ));
    }

    fn two_code_book(a: [f64; 3], b: [f64; 3]) -> ColorCodebook {
        let (la, lb) = (srgb_to_lab(a), srgb_to_lab(b));
        ColorCodebook {
            centers: Array2::from_shape_vec((2, 3), vec![la[0], la[1], la[2], lb[0], lb[1], lb[2]]).unwrap(),
        }
    }

    #[test]
    fn rcc_uniform_and_split_images() {
        let red = [0.9, 0.1, 0.1];
        let blue = [0.1, 0.1, 0.9];
        let book = two_code_book(red, blue);
        let m = rcc_descriptor(&RgbImage::filled(16, 16, blue), &book, 4).unwrap();
        assert_eq!(m.values[1 * 2 + 1], 1.0);

        // left half red, right half blue, grid 2: cells 0,2 red, 1,3 blue.
        // Adjacent ordered pairs: (0,1),(1,0),(2,3),(3,2) red-blue; (0,2),(2,0),(1,3),(3,1) same color.
        // Each product is 64*64, so entries: rr = 2, bb = 2, rb = 2, br = 2 out of 8.
        let img = RgbImage::from_fn(16, 16, |x, _| if x < 8 { red } else { blue });
        let m = rcc_descriptor(&img, &book, 2).unwrap();
        for v in &m.values {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn rcc_translation_by_whole_cells() {
        let bg = [0.2, 0.6, 0.2];
        let fg = [0.8, 0.2, 0.6];
        let book = two_code_book(bg, fg);
        // 8x8 grid of 4px cells; a 2x2-cell blob moved by one cell stays interior
        let draw = |ox: usize, oy: usize| {
            RgbImage::from_fn(32, 32, |x, y| {
                if (ox * 4..ox * 4 + 8).contains(&x) && (oy * 4..oy * 4 + 8).contains(&y) {
                    fg
                } else {
                    bg
                }
            })
        };
        let a = rcc_descriptor(&draw(2, 2), &book, 8).unwrap();
        let b = rcc_descriptor(&draw(3, 4), &book, 8).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cn_and_dd_are_distributions(seed in 0u64..1000, w in 1usize..9, h in 1usize..9) {
            let img = RgbImage::from_fn(w, h, |x, y| {
                let v = |k: u64| (((x as u64 * 31 + y as u64 * 17 + k) * (seed + 7)) % 101) as f64 / 100.0;
                [v(1), v(2), v(3)]
            });
            let cn = cn_descriptor(&img, &ColorNameTable::fallback(16));
            prop_assert!((cn.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(cn.iter().all(|&v| v >= 0.0));
            let part = DdPartition { r: 5, bins: 4, assignment: (0..64).map(|i| i % 5).collect() };
            let dd = dd_descriptor(&img, &part);
            prop_assert!((dd.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn rcc_sums_to_one_and_ignores_cell_order(seed in 0u64..500, grid in 2usize..5) {
            let img = RgbImage::from_fn(20, 20, |x, y| {
                let v = |k: u64| (((x as u64 * 13 + y as u64 * 7 + k) * (seed + 3)) % 97) as f64 / 96.0;
                [v(1), v(5), v(9)]
            });
            let book = ColorCodebook {
                centers: Array2::from_shape_fn((6, 3), |(i, j)| srgb_to_lab([(i % 2) as f64, ((i / 2) % 3) as f64 / 2.0, j as f64 / 2.0])[j]),
            };
            let m = rcc_descriptor(&img, &book, grid).unwrap();
            prop_assert!((m.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(m.values.iter().all(|&v| v >= 0.0));
            // relabel cells with a reversed enumeration and permute the pair list accordingly
            let hists = cell_histograms(&img, &book, grid);
            let n = grid * grid;
            let perm = |a: usize| n - 1 - a;
            let mut relabeled = vec![Vec::new(); n];
            for (a, h) in hists.into_iter().enumerate() {
                relabeled[perm(a)] = h;
            }
            let mut pairs: Vec<(usize, usize)> = grid_adjacency(grid).into_iter().map(|(a, b)| (perm(a), perm(b))).collect();
            pairs.reverse();
            let m2 = accumulate_cooccurrence(&relabeled, &pairs, 6);
            for (x, y) in m.values.iter().zip(&m2.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn dd_merges_are_greedy_and_mi_non_increasing(seed in 0u64..300, bins in 4usize..12) {
            // random joint counts over `bins` occupied bins and 3 classes
            let mut joint = Vec::new();
            let mut total = 0.0;
            for b in 0..bins {
                let row: Vec<f64> = (0..3).map(|c| (((b * 7 + c * 13) as u64 * (seed + 11)) % 17) as f64 + 1.0).collect();
                total += row.iter().sum::<f64>();
                joint.push(row);
            }
            for row in joint.iter_mut() { row.iter_mut().for_each(|v| *v /= total); }
            let counts = DdCounts { bins: 3, classes: 3, occupied: (0..bins).collect(), joint: joint.clone() };
            let (_, trace) = train_dd_partition_traced(&counts, 2).unwrap();
            // replay with an exhaustive search that recomputes MI from scratch
            let mut clusters: Vec<Option<Vec<f64>>> = joint.into_iter().map(Some).collect();
            let mut prev_mi = mutual_information(&clusters.iter().flatten().cloned().collect::<Vec<_>>());
            for step in &trace {
                let alive: Vec<usize> = (0..bins).filter(|&i| clusters[i].is_some()).collect();
                let mut best = f64::INFINITY;
                for (ii, &i) in alive.iter().enumerate() {
                    for &j in &alive[ii + 1..] {
                        let mut trial = clusters.clone();
                        let bj = trial[j].take().unwrap();
                        trial[i].as_mut().unwrap().iter_mut().zip(&bj).for_each(|(x, y)| *x += y);
                        let mi = mutual_information(&trial.iter().flatten().cloned().collect::<Vec<_>>());
                        best = best.min(prev_mi - mi);
                    }
                }
                prop_assert!((step.loss - best).abs() < 1e-12, "step loss {} vs exhaustive {}", step.loss, best);
                let bj = clusters[step.b].take().unwrap();
                clusters[step.a].as_mut().unwrap().iter_mut().zip(&bj).for_each(|(x, y)| *x += y);
                let mi = mutual_information(&clusters.iter().flatten().cloned().collect::<Vec<_>>());
                prop_assert!(mi <= prev_mi + 1e-12);
                prop_assert!((mi - step.mutual_information).abs() < 1e-9);
                prev_mi = mi;
            }
        }
    }
}
