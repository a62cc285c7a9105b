//! Dataset ingestion: era labels, manifests, image codecs, color conversion,
//! augmentation and multi-scale crop sampling.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Plane, RgbImage};

/// The six creation eras, in chronological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EraLabel {
    Sui,
    EarlyTang,
    PeakTang,
    MiddleTang,
    LateTang,
    WuDai,
}

impl EraLabel {
    pub const ALL: [EraLabel; 6] = [
        EraLabel::Sui,
        EraLabel::EarlyTang,
        EraLabel::PeakTang,
        EraLabel::MiddleTang,
        EraLabel::LateTang,
        EraLabel::WuDai,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<EraLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EraLabel::Sui => "Sui",
            EraLabel::EarlyTang => "EarlyTang",
            EraLabel::PeakTang => "PeakTang",
            EraLabel::MiddleTang => "MiddleTang",
            EraLabel::LateTang => "LateTang",
            EraLabel::WuDai => "WuDai",
        }
    }

    /// The five pairs of neighboring eras.
    pub fn neighboring_pairs() -> [(EraLabel, EraLabel); 5] {
        let a = Self::ALL;
        [(a[0], a[1]), (a[1], a[2]), (a[2], a[3]), (a[3], a[4]), (a[4], a[5])]
    }
}

impl fmt::Display for EraLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EraLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::BadLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
    Predict,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
            Split::Predict => "predict",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            "predict" => Ok(Split::Predict),
            other => Err(Error::BadSplit(other.to_string())),
        }
    }
}

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 32;

/// Shorter side that prediction images are resized to on ingestion.
pub const PREDICT_SHORT_SIDE: usize = 600;

/// A decoded image with its era label and split tag.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: RgbImage,
    pub label: Option<EraLabel>,
    pub split: Split,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, pixels: RgbImage, label: Option<EraLabel>, split: Split) -> Result<Self> {
        if pixels.width() < MIN_SIDE || pixels.height() < MIN_SIDE {
            return Err(Error::ImageTooSmall {
                width: pixels.width(),
                height: pixels.height(),
            });
        }
        Ok(Self {
            id: id.into(),
            pixels,
            label,
            split,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path as written in the manifest, relative to the manifest directory.
    pub path: PathBuf,
    pub label: Option<EraLabel>,
    pub split: Split,
}

impl ManifestEntry {
    /// Identifier used in reports: the relative path.
    pub fn id(&self) -> String {
        self.path.to_string_lossy().into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    path: String,
    label: String,
    split: String,
}

impl Manifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Decodes one entry; prediction images get their shorter side resized to 600 px.
    pub fn load(&self, entry: &ManifestEntry) -> Result<LabeledImage> {
        let mut pixels = load_image(&self.resolve(entry))?;
        if entry.split == Split::Predict {
            pixels = resize_shorter_side(&pixels, PREDICT_SHORT_SIDE);
        }
        LabeledImage::new(entry.id(), pixels, entry.label, entry.split)
    }

    /// Keeps the entries accepted by `keep`, sharing the root.
    pub fn filter(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(ManifestRow {
                path: e.path.to_string_lossy().replace('\\', "/"),
                label: e.label.map_or("?".to_string(), |l| l.name().to_string()),
                split: e.split.name().to_string(),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `path,label,split` CSV manifest. Paths are relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
        return Err(Error::Manifest(format!("expected header `path,label,split`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut entries = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        let split: Split = row.split.parse()?;
        let label = if row.label == "?" {
            if split != Split::Predict {
                return Err(Error::BadLabel(format!("? (only allowed on predict rows: {})", row.path)));
            }
            None
        } else {
            Some(row.label.parse::<EraLabel>()?)
        };
        let rel = PathBuf::from(&row.path);
        if !root.join(&rel).is_file() {
            return Err(Error::MissingFile(root.join(&rel)));
        }
        entries.push(ManifestEntry { path: rel, label, split });
    }
    Ok(Manifest { root, entries })
}

/// Decodes a PNG or binary PPM (P6) file into `[0, 1]` RGB.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::UnsupportedFormat)
    }
}

fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::UnsupportedFormat),
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h * channels].iter().map(|&v| v as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..w * h * channels * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        _ => return Err(Error::UnsupportedFormat),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for px in samples.chunks_exact(channels) {
        if channels < 3 {
            data.extend_from_slice(&[px[0]; 3]);
        } else {
            data.extend_from_slice(&px[..3]);
        }
    }
    RgbImage::from_raw(w, h, data).ok_or_else(|| Error::Decode("pixel count mismatch".into()))
}

fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Decode("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode("bad PPM header field".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat);
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode("missing separator after PPM header".into()));
    }
    pos += 1;
    let n = w * h * 3;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Decode(format!("PPM raster truncated: need {n} bytes")))?;
    let scale = maxval as f64;
    let data = raster.iter().map(|&v| v as f64 / scale).collect();
    RgbImage::from_raw(w, h, data).ok_or_else(|| Error::Decode("pixel count mismatch".into()))
}

#[inline]
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    out
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Decode(e.to_string()))?;
        let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
        writer.write_image_data(&bytes).map_err(|e| Error::Decode(e.to_string()))?;
        writer.finish().map_err(|e| Error::Decode(e.to_string()))?;
    }
    Ok(out)
}

/// Writes PNG or PPM depending on the extension.
pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => encode_ppm(img),
        _ => encode_png(img)?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

/// BT.601 luma: `0.299 R + 0.587 G + 0.114 B`.
pub fn to_grayscale(img: &RgbImage) -> Plane {
    Plane::from_fn(img.width(), img.height(), |x, y| {
        let [r, g, b] = img.get(x, y);
        (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0)
    })
}

const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

#[inline]
fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB (D65) to CIELAB for one pixel.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let fx = lab_f(x / D65_WHITE[0]);
    let fy = lab_f(y / D65_WHITE[1]);
    let fz = lab_f(z / D65_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Per-pixel CIELAB conversion; the result reuses the RGB raster layout
/// (channels L, a, b, not clamped to `[0, 1]`).
pub fn to_lab(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| srgb_to_lab(img.get(x, y)))
}

/// Rotation angles used for training-set augmentation: -10 to 10 degrees in steps of 2.5.
pub fn default_augment_angles() -> Vec<f64> {
    (0..9).map(|i| -10.0 + 2.5 * i as f64).collect()
}

/// Rotates every image by every angle and optionally appends the horizontal
/// mirror of each rotation. Output order: image, angle, then (plain, mirrored).
pub fn augment(images: &[LabeledImage], angles: &[f64], flip: bool) -> Vec<LabeledImage> {
    assert!(!angles.is_empty(), "augment needs at least one angle");
    let mut out = Vec::with_capacity(images.len() * angles.len() * if flip { 2 } else { 1 });
    for img in images {
        for &angle in angles {
            let rotated = img.pixels.rotate(angle);
            if flip {
                let mirrored = rotated.flip_horizontal();
                out.push(LabeledImage {
                    id: format!("{}@r{angle}", img.id),
                    pixels: rotated,
                    ..img.clone()
                });
                out.push(LabeledImage {
                    id: format!("{}@r{angle}f", img.id),
                    pixels: mirrored,
                    ..img.clone()
                });
            } else {
                out.push(LabeledImage {
                    id: format!("{}@r{angle}", img.id),
                    pixels: rotated,
                    ..img.clone()
                });
            }
        }
    }
    out
}

/// Multi-scale crop sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub scales: Vec<f64>,
    pub crops_per_scale: usize,
    pub target_side: usize,
    pub seed: u64,
}

impl CropSpec {
    /// Five scales 0.8..=1.2 at 0.1 spacing, 20 crops each.
    pub fn voting(target_side: usize, seed: u64) -> Self {
        Self {
            scales: (0..5).map(|i| (8 + i) as f64 / 10.0).collect(),
            crops_per_scale: 20,
            target_side,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.scales.len() * self.crops_per_scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub scale: f64,
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

/// Window geometry for [`sample_crops`]. Positions are drawn uniformly from a
/// ChaCha8 stream seeded with `spec.seed`, scale by scale, `x` before `y`.
pub fn crop_windows(width: usize, height: usize, spec: &CropSpec) -> Result<Vec<CropWindow>> {
    if spec.crops_per_scale == 0 || spec.scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("scales must be positive and crops_per_scale >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut windows = Vec::with_capacity(spec.total());
    for &scale in &spec.scales {
        let side = (scale * spec.target_side as f64).round() as usize;
        if side == 0 || side > width.min(height) {
            return Err(Error::CropTooLarge {
                scale,
                side,
                width,
                height,
            });
        }
        for _ in 0..spec.crops_per_scale {
            let x = rng.random_range(0..=width - side);
            let y = rng.random_range(0..=height - side);
            windows.push(CropWindow { scale, x, y, side });
        }
    }
    Ok(windows)
}

/// Cuts `|scales| x crops_per_scale` square windows and resizes each to
/// `target_side` with bilinear interpolation.
pub fn sample_crops(img: &RgbImage, spec: &CropSpec) -> Result<Vec<RgbImage>> {
    Ok(crop_windows(img.width(), img.height(), spec)?
        .into_iter()
        .map(|w| {
            img.crop(w.x, w.y, w.side, w.side)
                .resize_bilinear(spec.target_side, spec.target_side)
        })
        .collect())
}

/// Resizes so the shorter side equals `side`, preserving aspect ratio.
pub fn resize_shorter_side(img: &RgbImage, side: usize) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let (nw, nh) = if w <= h {
        (side, ((h as f64) * side as f64 / w as f64).round() as usize)
    } else {
        (((w as f64) * side as f64 / h as f64).round() as usize, side)
    };
    img.resize(nw, nh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn era_bijection_and_order() {
        for (i, e) in EraLabel::ALL.iter().enumerate() {
            assert_eq!(e.index(), i);
            assert_eq!(EraLabel::from_index(i), Some(*e));
            assert_eq!(e.name().parse::<EraLabel>().unwrap(), *e);
        }
        assert!(EraLabel::Sui < EraLabel::EarlyTang && EraLabel::LateTang < EraLabel::WuDai);
        assert!(matches!("Ming".parse::<EraLabel>(), Err(Error::BadLabel(_))));
    }

    #[test]
    fn ppm_decoding() {
        let white = b"P6\n2 2\n255\n\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff\xff";
        let img = decode_image(white).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));

        let one = b"P6 1 1 255 \x00\x80\xff";
        let img = decode_image(one).unwrap();
        assert_eq!(img.get(0, 0), [0.0, 128.0 / 255.0, 1.0]);

        let truncated = b"P6\n2 2\n255\n\xff\xff\xff";
        assert!(matches!(decode_image(truncated), Err(Error::Decode(_))));
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::UnsupportedFormat)));
    }

    #[test]
    fn png_round_trip() {
        let img = RgbImage::from_fn(7, 5, |x, y| [x as f64 / 255.0, y as f64 / 255.0, 1.0]);
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn grayscale_weights() {
        let g = |rgb| to_grayscale(&RgbImage::filled(1, 1, rgb)).get(0, 0);
        assert!((g([1.0, 1.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!((g([1.0, 0.0, 0.0]) - 0.299).abs() < 1e-12);
        assert!((g([0.5, 0.5, 0.5]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lab_reference_points() {
        let [l, a, b] = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((l - 100.0).abs() < 1e-3 && a.abs() < 0.01 && b.abs() < 0.01);
        assert_eq!(srgb_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn lab_mid_gray_matches_independent_evaluation() {
        // Independent oracle: gray has X/Xn = Y/Yn = Z/Zn = Y, so a = b = 0 and
        // L = 116 * Y^(1/3) - 16 with Y = ((0.5 + 0.055) / 1.055)^2.4.
        let y: f64 = ((0.5f64 + 0.055) / 1.055).powf(2.4);
        let expected_l = 116.0 * y.cbrt() - 16.0;
        assert!((expected_l - 53.39).abs() < 0.01);
        let [l, a, b] = srgb_to_lab([0.5, 0.5, 0.5]);
        assert!((l - expected_l).abs() < 1e-3);
        assert!(a.abs() < 0.01 && b.abs() < 0.01);
    }

    fn labeled(w: usize, h: usize) -> LabeledImage {
        let px = RgbImage::from_fn(w, h, |x, y| [(x % 7) as f64 / 7.0, (y % 5) as f64 / 5.0, 0.5]);
        LabeledImage::new("a", px, Some(EraLabel::Sui), Split::Train).unwrap()
    }

    #[test]
    fn augment_counts_and_identity() {
        let img = labeled(40, 36);
        let out = augment(std::slice::from_ref(&img), &[0.0], false);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].pixels, img.pixels);

        let out = augment(std::slice::from_ref(&img), &[0.0], true);
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].pixels, out[0].pixels.flip_horizontal());
        assert_eq!(out[1].label, Some(EraLabel::Sui));

        let angles = default_augment_angles();
        assert_eq!(angles.len(), 9);
        assert_eq!(augment(&[img.clone(), img.clone(), img], &angles, true).len(), 3 * 9 * 2);
    }

    #[test]
    fn crops_count_and_determinism() {
        let img = labeled(64, 64).pixels;
        let spec = CropSpec::voting(40, 7);
        let a = crop_windows(64, 64, &spec).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, crop_windows(64, 64, &spec).unwrap());
        let crops = sample_crops(&img, &spec).unwrap();
        assert_eq!(crops.len(), 100);
        assert!(crops.iter().all(|c| c.width() == 40 && c.height() == 40));

        let full = CropSpec {
            scales: vec![1.0],
            crops_per_scale: 1,
            target_side: 64,
            seed: 3,
        };
        assert_eq!(sample_crops(&img, &full).unwrap()[0], img);
    }

    #[test]
    fn crop_too_large_reports_scale() {
        let spec = CropSpec::voting(60, 0);
        match crop_windows(64, 64, &spec) {
            Err(Error::CropTooLarge { scale, side, .. }) => {
                assert!((scale - 1.1).abs() < 1e-12);
                assert_eq!(side, 66);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn small_images_rejected() {
        let err = LabeledImage::new("x", RgbImage::new(31, 40), None, Split::Predict).unwrap_err();
        assert!(matches!(err, Error::ImageTooSmall { .. }));
    }

    #[test]
    fn shorter_side_resize() {
        let img = RgbImage::new(1200, 900);
        let r = resize_shorter_side(&img, 600);
        assert_eq!((r.width(), r.height()), (800, 600));
    }
}
