//! Dense rasters used throughout the pipeline.
//!
//! Everything is stored row-major as `[y][x][channel]` in `f64`.

use crate::error::{Result, TryOnError};

/// An `H×W×C` real-valued raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Image in `[0, 1]`, usually three channels.
pub type ImageGrid = Tensor3;
/// Latent tensor `h×w×c`.
pub type Latent = Tensor3;

impl Tensor3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Tensor3 {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(TryOnError::argument(format!(
                "tensor data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Tensor3 {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Tensor3 {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = self.index(y, x, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Tensor3, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TryOnError::argument(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Tensor3 {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.shape(), other.shape());
        if self.data.is_empty() {
            return 0.0;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Sub-rectangle copy. The rectangle must lie inside the tensor.
    pub fn crop(&self, rect: Rect) -> Result<Tensor3> {
        if rect.x + rect.width > self.width || rect.y + rect.height > self.height {
            return Err(TryOnError::argument(format!(
                "crop {rect:?} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Tensor3::from_fn(rect.height, rect.width, self.channels, |y, x, c| {
            self.get(rect.y + y, rect.x + x, c)
        }))
    }

    /// Bilinear sample with pixel centers at integer coordinates and
    /// border clamping.
    pub fn sample_bilinear_clamped(&self, x: f64, y: f64, out: &mut [f64]) {
        let xf = x.clamp(0.0, (self.width - 1) as f64);
        let yf = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = xf - x0 as f64;
        let ty = yf - y0 as f64;
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let a = self.get(y0, x0, c) * (1.0 - tx) + self.get(y0, x1, c) * tx;
            let b = self.get(y1, x0, c) * (1.0 - tx) + self.get(y1, x1, c) * tx;
            *o = a * (1.0 - ty) + b * ty;
        }
    }

    /// Bilinear resize (half-pixel centers). Identity when the size is unchanged.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Tensor3 {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Tensor3::zeros(height, width, self.channels);
        let mut buf = vec![0.0; self.channels];
        for y in 0..height {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                self.sample_bilinear_clamped(src_x, src_y, &mut buf);
                out.pixel_mut(y, x).copy_from_slice(&buf);
            }
        }
        out
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// `H×W` boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(TryOnError::argument(format!(
                "mask data has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        BinaryMask {
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
            ..*self
        }
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && !*b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }

    /// Tight bounding box of the set pixels.
    pub fn bbox(&self) -> Option<Rect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| Rect {
            x: x0,
            y: y0,
            width: x1 - x0 + 1,
            height: y1 - y0 + 1,
        })
    }

    /// Morphological dilation by a disk of the given pixel radius.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
            .collect();
        let mut out = BinaryMask::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                for &(dy, dx) in &offsets {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width {
                        out.set(ny as usize, nx as usize, true);
                    }
                }
            }
        }
        out
    }

    pub fn crop(&self, rect: Rect) -> Result<BinaryMask> {
        if rect.x + rect.width > self.width || rect.y + rect.height > self.height {
            return Err(TryOnError::argument(format!(
                "crop {rect:?} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(BinaryMask::from_fn(rect.height, rect.width, |y, x| {
            self.get(rect.y + y, rect.x + x)
        }))
    }

    /// Nearest-neighbour resize (half-pixel centers).
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        BinaryMask::from_fn(height, width, |y, x| {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
            self.get(sy, sx)
        })
    }

    /// Mask as a single-channel 0/1 tensor.
    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_fn(self.height, self.width, 1, |y, x, _| {
            if self.get(y, x) {
                1.0
            } else {
                0.0
            }
        })
    }
}
