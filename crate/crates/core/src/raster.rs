//! Plain in-memory rasters and the resampling primitives shared by the
//! descriptor, augmentation and cropping code.
//!
//! Coordinates are `(x, y)` with `x` along columns and `y` down the rows.
//! Every sampler replicates edge pixels for out-of-range coordinates.

/// Interleaved RGB raster with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    /// Wraps an interleaved buffer; `None` when the length does not match.
    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> [f64; 3] {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Bilinear sample with replicated borders.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let p00 = self.get_clamped(x0, y0);
        let p10 = self.get_clamped(x0 + 1, y0);
        let p01 = self.get_clamped(x0, y0 + 1);
        let p11 = self.get_clamped(x0 + 1, y0 + 1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> RgbImage {
        assert!(x + width <= self.width && y + height <= self.height, "crop out of bounds");
        RgbImage::from_fn(width, height, |cx, cy| self.get(x + cx, y + cy))
    }

    /// Column-reversed copy.
    pub fn flip_horizontal(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Rotation about the image center by `degrees` (counterclockwise as
    /// displayed), bilinear interpolation, replicated border.
    pub fn rotate(&self, degrees: f64) -> RgbImage {
        if degrees == 0.0 {
            return self.clone();
        }
        let (sin, cos) = degrees.to_radians().sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            self.sample(cx + dx * cos - dy * sin, cy + dx * sin + dy * cos)
        })
    }

    /// Bilinear resize with pixel-center alignment. Same-size resize is the identity.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        RgbImage::from_fn(width, height, |x, y| {
            self.sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
        })
    }

    /// Area-averaging resize; used for large reductions where bilinear aliases.
    pub fn resize_area(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let wx = area_weights(self.width, width);
        let wy = area_weights(self.height, height);
        // horizontal pass
        let mut tmp = vec![0.0; width * self.height * 3];
        for y in 0..self.height {
            for (x, taps) in wx.iter().enumerate() {
                let mut acc = [0.0; 3];
                for &(sx, w) in taps {
                    let p = self.get(sx, y);
                    for c in 0..3 {
                        acc[c] += w * p[c];
                    }
                }
                let i = (y * width + x) * 3;
                tmp[i..i + 3].copy_from_slice(&acc);
            }
        }
        let mut out = RgbImage::new(width, height);
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..width {
                let mut acc = [0.0; 3];
                for &(sy, w) in taps {
                    let i = (sy * width + x) * 3;
                    for c in 0..3 {
                        acc[c] += w * tmp[i + c];
                    }
                }
                out.set(x, y, acc.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        out
    }

    /// Area resize when shrinking, bilinear otherwise.
    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        if width < self.width && height < self.height {
            self.resize_area(width, height)
        } else {
            self.resize_bilinear(width, height)
        }
    }

    /// Extracts one channel as a plane.
    pub fn channel(&self, c: usize) -> Plane {
        Plane::from_fn(self.width, self.height, |x, y| self.get(x, y)[c])
    }
}

/// Per output sample, the source indices and fractional coverage weights
/// (normalized to sum 1) of a box footprint.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let cover = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((s, cover / scale));
                }
                s += 1;
            }
            if taps.is_empty() {
                taps.push(((lo as usize).min(src - 1), 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Single-channel raster of reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Value at `(x, y)` with replicated borders.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Counterclockwise quarter turn (lossless).
    pub fn rotate90(&self) -> Plane {
        // new(x', y') = old(W-1-y', x'), output is H wide and W tall
        Plane::from_fn(self.height, self.width, |x, y| self.get(self.width - 1 - y, x))
    }
}
