//! Dense rank-4 tensors in (batch, channel, height, width) layout and the
//! receptive-field arithmetic shared by filter layers.
//!
//! Storage is `f32` by default. The kernels are generic over [`Element`] so
//! the gradient checker can run the exact same code paths on `f64` copies.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{format_err, Error, Result};

/// Scalar storage type of a tensor.
///
/// All reductions go through `f64`, so an element only needs lossless-ish
/// conversion in both directions.
pub trait Element:
    Copy + Default + PartialEq + PartialOrd + Send + Sync + fmt::Debug + 'static
{
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Tensor shape `(n, c, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    fn checked_numel(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T: Element = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![T::default(); shape.numel()],
        }
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if shape.checked_numel() != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{} elements cannot fill shape {}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `h·w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| T::from_f64(a.to_f64() + b.to_f64()))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = T::from_f64(a.to_f64() + b.to_f64());
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| T::from_f64(v.to_f64() * s))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    /// Σ self ⊙ other, accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "expected {}, got {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Sample `n` as a single-sample tensor.
    pub fn sample(&self, n: usize) -> Result<Self> {
        if n >= self.shape.n {
            return Err(Error::Index {
                dim: "batch",
                index: n,
                bound: self.shape.n,
            });
        }
        let len = self.shape.c * self.shape.plane();
        Ok(Self {
            shape: Shape4::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        })
    }

    /// Stack single- or multi-sample tensors of equal `(c, h, w)` along the batch axis.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty)?.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::Shape(format!("cannot stack {} onto {}", s, first)));
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: Shape4::new(n, first.c, first.h, first.w),
            data,
        })
    }
}

impl Tensor4<f32> {
    /// I.i.d. normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: Shape4, std: f32, rng: &mut R) -> Self {
        let dist = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
        Self { shape, data }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: Shape4, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }
}

/// Kernel extent, stride and symmetric zero padding of a filter layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kh: usize, kw: usize, stride: usize, padding: usize) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(Error::Geometry("kernel extent must be positive".into()));
        }
        if stride == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        Ok(Self {
            kh,
            kw,
            stride,
            padding,
        })
    }

    pub fn square(k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(k, k, stride, padding)
    }

    /// Output `(h, w)` for an input of `(h, w)`; errors when the window does
    /// not fit at least once.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = Self::axis(h, self.kh, self.stride, self.padding);
        let ow = Self::axis(w, self.kw, self.stride, self.padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Geometry(format!(
                "{}x{} kernel (stride {}, padding {}) does not fit a {}x{} input",
                self.kh, self.kw, self.stride, self.padding, h, w
            ))),
        }
    }

    fn axis(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        let span = input + 2 * padding;
        if span < k {
            return None;
        }
        Some((span - k) / stride + 1)
    }
}

/// Receptive field of output position `(out_y, out_x)` of sample `sample`.
///
/// The vector is ordered with the kernel row `i` slowest, then kernel column
/// `j`, then input channel `k` fastest: element `(i·kw + j)·c + k`. Taps that
/// fall into the zero padding are returned as `0`.
pub fn extract_patch<T: Element>(
    x: &Tensor4<T>,
    sample: usize,
    out_y: usize,
    out_x: usize,
    geom: &ConvGeometry,
) -> Result<Vec<T>> {
    let s = x.shape();
    let (oh, ow) = geom.output_size(s.h, s.w)?;
    if sample >= s.n {
        return Err(Error::Index {
            dim: "batch",
            index: sample,
            bound: s.n,
        });
    }
    if out_y >= oh {
        return Err(Error::Index {
            dim: "out_y",
            index: out_y,
            bound: oh,
        });
    }
    if out_x >= ow {
        return Err(Error::Index {
            dim: "out_x",
            index: out_x,
            bound: ow,
        });
    }
    let mut patch = Vec::with_capacity(geom.kh * geom.kw * s.c);
    for i in 0..geom.kh {
        let iy = (out_y * geom.stride + i) as isize - geom.padding as isize;
        for j in 0..geom.kw {
            let ix = (out_x * geom.stride + j) as isize - geom.padding as isize;
            let inside = iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w;
            for k in 0..s.c {
                patch.push(if inside {
                    x.at(sample, k, iy as usize, ix as usize)
                } else {
                    T::default()
                });
            }
        }
    }
    Ok(patch)
}

/// Population (divide-by-count) mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel statistics over `(n, h, w)`, or one global pair when
/// `per_channel` is false. Single-pass Welford accumulation in `f64`.
pub fn tensor_stats<T: Element>(x: &Tensor4<T>, per_channel: bool) -> Result<Stats> {
    if x.is_empty() {
        return Err(Error::Empty);
    }
    let s = x.shape();
    let groups = if per_channel { s.c } else { 1 };
    let mut mean = vec![0.0f64; groups];
    let mut m2 = vec![0.0f64; groups];
    let mut count = vec![0u64; groups];
    for n in 0..s.n {
        for c in 0..s.c {
            let g = if per_channel { c } else { 0 };
            for &v in x.plane(n, c) {
                let v = v.to_f64();
                count[g] += 1;
                let delta = v - mean[g];
                mean[g] += delta / count[g] as f64;
                m2[g] += delta * (v - mean[g]);
            }
        }
    }
    let var = m2
        .iter()
        .zip(&count)
        .map(|(m, &c)| (m / c as f64).max(0.0))
        .collect();
    Ok(Stats { mean, var })
}

const TENSOR_MAGIC: &[u8; 4] = b"ADT4";
const HEADER_LEN: usize = 4 + 4 * 4;

impl Tensor4<f32> {
    /// Binary encoding: magic `ADT4`, four little-endian `u32` dims
    /// `(n, c, h, w)`, then little-endian `f32` data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.len());
        out.extend_from_slice(TENSOR_MAGIC);
        for d in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes [`Tensor4::to_bytes`] output. Rejects trailing bytes and
    /// non-finite values.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(format_err(
                "tensor",
                format!("{} trailing bytes", bytes.len() - used),
            ));
        }
        Ok(t)
    }

    /// Decodes one tensor from the front of `bytes`, returning the number of
    /// bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(format_err("tensor", "truncated header"));
        }
        if &bytes[..4] != TENSOR_MAGIC {
            return Err(format_err("tensor", "bad magic"));
        }
        let dim = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        };
        let shape = Shape4::new(dim(0), dim(1), dim(2), dim(3));
        let numel = shape
            .checked_numel()
            .ok_or_else(|| format_err("tensor", "element count overflows"))?;
        let body = numel
            .checked_mul(4)
            .ok_or_else(|| format_err("tensor", "byte length overflows"))?;
        let end = HEADER_LEN
            .checked_add(body)
            .ok_or_else(|| format_err("tensor", "byte length overflows"))?;
        if bytes.len() < end {
            return Err(format_err(
                "tensor",
                format!("expected {} data bytes, found {}", body, bytes.len() - HEADER_LEN),
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in bytes[HEADER_LEN..end].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite("tensor data".into()));
            }
            data.push(v);
        }
        Ok((Self { shape, data }, end))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Debug CSV, one element per row: `n,c,h,w,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,c,h,w,value")?;
        let s = self.shape;
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        writeln!(out, "{},{},{},{},{}", n, c, y, x, self.at(n, c, y, x))?;
                    }
                }
            }
        }
        Ok(())
    }
}
