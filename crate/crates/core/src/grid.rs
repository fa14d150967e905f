//! Dense row-major grids shared by every other module.
//!
//! Multi-channel data is laid out `[channel][row][col]`, so one channel (or one
//! class map) is always a contiguous slice. Every elementwise combination checks
//! shapes up front; nothing broadcasts.

use crate::error::{Error, Result};

/// Compensated (Neumaier) sum. All reductions in the crate go through this.
pub fn sum_f64<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Shape(format!(
            "zero dimension in {height}x{width}x{channels}"
        )));
    }
    Ok(())
}

/// A dense grid of reals, `[channel][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new_filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        check_dims(height, width, channels)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(Grid {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} grid",
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            channels,
            data,
        })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn reduce_sum(&self) -> f64 {
        sum_f64(self.data.iter().copied())
    }

    /// Applies `f` to every entry; a non-finite result is reported with its index.
    pub fn map_elementwise<F: Fn(f64) -> f64>(&self, f: F) -> Result<Grid> {
        let mut data = Vec::with_capacity(self.data.len());
        for (index, &v) in self.data.iter().enumerate() {
            let out = f(v);
            if !out.is_finite() {
                return Err(Error::NonFinite { index });
            }
            data.push(out);
        }
        Ok(Grid { data, ..*self })
    }

    pub fn zip_with<F: Fn(f64, f64) -> f64>(&self, other: &Grid, f: F) -> Result<Grid> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for (index, (&a, &b)) in self.data.iter().zip(&other.data).enumerate() {
            let out = f(a, b);
            if !out.is_finite() {
                return Err(Error::NonFinite { index });
            }
            data.push(out);
        }
        Ok(Grid { data, ..*self })
    }
}

/// Image intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Grid);

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::from_vec(height, width, channels, data)?)
    }

    pub fn new_filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::from_grid(Grid::new_filled(height, width, channels, value)?)
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if let Some(index) = grid
            .data()
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidValue(format!(
                "image value {} at index {index} outside [0, 1]",
                grid.data()[index]
            )));
        }
        Ok(Image(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    /// Channel-0 pixel.
    pub fn pixel(&self, y: usize, x: usize) -> f64 {
        self.0.get(0, y, x)
    }

    pub fn flip_horizontal(&self) -> Image {
        let (h, w, c) = self.0.shape();
        let mut data = Vec::with_capacity(self.0.len());
        for ch in 0..c {
            for y in 0..h {
                let row = &self.0.channel(ch)[y * w..(y + 1) * w];
                data.extend(row.iter().rev());
            }
        }
        Image(Grid {
            data,
            ..self.0
        })
    }
}

/// Per-pixel class indices. Class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        check_dims(height, width, 1)?;
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u16) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u16) {
        self.data[y * self.width + x] = label;
    }

    /// Checks every label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    /// Sorted list of distinct labels.
    pub fn classes_present(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(l, _)| l as u16)
            .collect()
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let data = self
            .data
            .chunks(self.width)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        LabelMap { data, ..*self }
    }
}

/// Per-class probability maps `[class][row][col]`, summing to one per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMaps {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

impl ProbMaps {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, classes)?;
        let plane = height * width;
        if data.len() != classes * plane {
            return Err(Error::Shape(format!(
                "{} values for {classes} maps of {height}x{width}",
                data.len()
            )));
        }
        if let Some(index) = data
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidValue(format!(
                "probability {} at index {index}",
                data[index]
            )));
        }
        for px in 0..plane {
            let s: f64 = (0..classes).map(|l| data[l * plane + px]).sum();
            if (s - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::InvalidValue(format!(
                    "probabilities at pixel {px} sum to {s}"
                )));
            }
        }
        Ok(ProbMaps {
            classes,
            height,
            width,
            data,
        })
    }

    /// Per-pixel softmax over `[class][row][col]` logits.
    pub fn from_logits(classes: usize, height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        check_dims(height, width, classes)?;
        let plane = height * width;
        if logits.len() != classes * plane {
            return Err(Error::Shape(format!(
                "{} logits for {classes} maps of {height}x{width}",
                logits.len()
            )));
        }
        if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut data = vec![0.0; logits.len()];
        for px in 0..plane {
            let max = (0..classes)
                .map(|l| logits[l * plane + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..classes {
                let e = (logits[l * plane + px] - max).exp();
                data[l * plane + px] = e;
                total += e;
            }
            for l in 0..classes {
                data[l * plane + px] /= total;
            }
        }
        Ok(ProbMaps {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn class_map(&self, class: usize) -> &[f64] {
        let plane = self.pixels();
        &self.data[class * plane..(class + 1) * plane]
    }

    pub fn get(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }
}

/// A {0, 1} mask stored as reals so it can enter weighted sums directly.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, 1)?;
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidValue(format!(
                "mask value {} at index {index} is not 0 or 1",
                data[index]
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn<F: Fn(usize, usize) -> bool>(height: usize, width: usize, f: F) -> Result<Self> {
        check_dims(height, width, 1)?;
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| if f(y, x) { 1.0 } else { 0.0 })
            .collect();
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1.0
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    /// Intersection over union of the foreground sets; 1.0 when both are empty.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("mask shapes differ".into()));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let (a, b) = (a == 1.0, b == 1.0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            data: self.data.iter().map(|v| 1.0 - v).collect(),
            ..*self
        }
    }
}
