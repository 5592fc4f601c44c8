//! Grid primitives shared by every other module.
//!
//! Masks live in `{0,1}`; the diffusion state lives in a real-valued latent
//! where background is `-1` and foreground is `+1`, so the data has unit scale
//! and the EDM noise levels apply unchanged.

use std::io::{self, Read, Write};

use crate::{Error, Result};

/// H×W real-valued field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

/// H×W field of `{0,1}`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("grid dimensions must be positive, got {height}x{width}")));
    }
    if height * width != len {
        return Err(Error::invalid(format!(
            "grid {height}x{width} needs {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}

fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { left: a, right: b });
    }
    Ok(())
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent value at index {i}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self { height, width, values: vec![0.0; height * width] }
    }

    /// Builds a grid without the finiteness scan. Callers must check
    /// [`LatentGrid::ensure_finite`] before handing the grid out.
    pub(crate) fn from_raw(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(height * width, values.len());
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{context}: index {i}"))),
            None => Ok(()),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn squared_distance(&self, other: &LatentGrid) -> Result<f64> {
        same_shape(self.shape(), other.shape())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn dot(&self, other: &LatentGrid) -> Result<f64> {
        same_shape(self.shape(), other.shape())?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// `self + scale * other`, elementwise.
    pub fn axpy(&self, scale: f64, other: &LatentGrid) -> Result<LatentGrid> {
        same_shape(self.shape(), other.shape())?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(Self::from_raw(self.height, self.width, values))
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, factor: f64) -> LatentGrid {
        Self::from_raw(self.height, self.width, self.values.iter().map(|v| v * factor).collect())
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some(i) = values.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!("mask value {} at index {i} is not 0/1", values[i])));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self { height, width, values: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c) as u8);
            }
        }
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        same_shape(self.shape(), other.shape())?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a | b).collect();
        Ok(Self { height: self.height, width: self.width, values })
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        same_shape(self.shape(), other.shape())?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a & b).collect();
        Ok(Self { height: self.height, width: self.width, values })
    }

    pub fn complement(&self) -> BinaryMask {
        let values = self.values.iter().map(|v| 1 - v).collect();
        Self { height: self.height, width: self.width, values }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        same_shape(self.shape(), other.shape())?;
        Ok(self.values.iter().zip(&other.values).all(|(a, b)| a <= b))
    }

    pub fn hamming(&self, other: &BinaryMask) -> Result<usize> {
        same_shape(self.shape(), other.shape())?;
        Ok(self.values.iter().zip(&other.values).filter(|(a, b)| a != b).count())
    }

    #[cfg(test)]
    fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(move |(i, _)| (i / w, i % w))
    }
}

/// Maps background to `-1` and foreground to `+1`.
pub fn encode(mask: &BinaryMask) -> LatentGrid {
    let values = mask.values.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();
    LatentGrid::from_raw(mask.height, mask.width, values)
}

/// Positive values become foreground; exact zeros go to background.
pub fn threshold(grid: &LatentGrid) -> Result<BinaryMask> {
    grid.ensure_finite("threshold input (corrupted sampler state)")?;
    let values = grid.values.iter().map(|&v| (v > 0.0) as u8).collect();
    Ok(BinaryMask { height: grid.height, width: grid.width, values })
}

pub fn l2_distance(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    Ok(a.squared_distance(b)?.sqrt())
}

/// Intersection over union; two empty masks are considered identical.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        inter += (x & y) as usize;
        uni += (x | y) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

/// Exact squared Euclidean distance transform: for every pixel, the squared
/// distance to the nearest foreground pixel of `mask`. Returns `None` for an
/// empty mask.
pub fn squared_distance_transform(mask: &BinaryMask) -> Option<Vec<f64>> {
    if mask.is_empty() {
        return None;
    }
    let (h, w) = mask.shape();
    let inf = ((h * h + w * w) as f64) * 4.0 + 1.0;
    let mut grid: Vec<f64> = mask.values.iter().map(|&v| if v == 1 { 0.0 } else { inf }).collect();

    let mut buf_in = vec![0.0; h.max(w)];
    let mut buf_out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            buf_in[r] = grid[r * w + c];
        }
        lower_envelope(&buf_in[..h], &mut buf_out[..h]);
        for r in 0..h {
            grid[r * w + c] = buf_out[r];
        }
    }
    for r in 0..h {
        buf_in[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        lower_envelope(&buf_in[..w], &mut buf_out[..w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&buf_out[..w]);
    }
    Some(grid)
}

/// One-dimensional squared distance transform (Felzenszwalb & Huttenlocher).
fn lower_envelope(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never underflows k
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Symmetric chamfer distance between the foreground point sets of two masks:
/// the mean nearest-neighbour distance from `a` to `b` plus the mean from `b`
/// to `a`. Two empty masks are at distance 0; if exactly one is empty the
/// grid diagonal is returned.
pub fn chamfer_distance(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let (h, w) = (a.height as f64, a.width as f64);
            return Ok((h * h + w * w).sqrt());
        }
        _ => {}
    }
    let dt_a = squared_distance_transform(a).expect("nonempty");
    let dt_b = squared_distance_transform(b).expect("nonempty");
    Ok(directed_mean(a, &dt_b) + directed_mean(b, &dt_a))
}

fn directed_mean(from: &BinaryMask, to_dt: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, &v) in from.values.iter().enumerate() {
        if v == 1 {
            total += to_dt[i].sqrt();
            n += 1;
        }
    }
    total / n as f64
}

/// Writes a binary PGM (P5, maxval 255): foreground white, background black.
pub fn write_mask_pgm<W: Write>(mask: &BinaryMask, out: &mut W) -> io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    let bytes: Vec<u8> = mask.values.iter().map(|&v| v * 255).collect();
    out.write_all(&bytes)
}

/// Writes a latent as P5, mapping `[-1, 1]` affinely onto `[0, 255]` with clamping.
pub fn write_latent_pgm<W: Write>(grid: &LatentGrid, out: &mut W) -> io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", grid.width, grid.height)?;
    let bytes: Vec<u8> = grid
        .values
        .iter()
        .map(|&v| (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)
}

/// Reads a P5 image back as `(height, width, pixels)`.
pub fn read_pgm<R: Read>(input: &mut R) -> Result<(usize, usize, Vec<u8>)> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < data.len() && (data[pos].is_ascii_whitespace() || data[pos] == b'#') {
            if data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: pos as u64, message: "truncated PGM header".into() });
        }
        fields.push((start, String::from_utf8_lossy(&data[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(Error::Format { offset: 0, message: format!("expected P5 magic, got {:?}", fields[0].1) });
    }
    let parse = |(off, s): &(usize, String)| {
        s.parse::<usize>()
            .map_err(|_| Error::Format { offset: *off as u64, message: format!("bad header field {s:?}") })
    };
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    if parse(&fields[3])? != 255 {
        return Err(Error::Format { offset: fields[3].0 as u64, message: "only maxval 255 is supported".into() });
    }
    pos += 1;
    let need = width * height;
    if data.len() < pos + need {
        return Err(Error::Format { offset: data.len() as u64, message: "truncated PGM raster".into() });
    }
    Ok((height, width, data[pos..pos + need].to_vec()))
}
