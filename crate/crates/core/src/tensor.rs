//! Dense n-dimensional tensors and the arithmetic every other module builds on.
//!
//! Tensors are plain `shape + contiguous data` containers, row-major, immutable
//! once handed to readers. The element type defaults to `f64`; `f32` is
//! available through the same generic type for callers that trade precision
//! for speed. Convolution weights use the layout `[out_features, in_features,
//! kh, kw]` so that the per-output-feature slice of any weight tensor is a
//! single contiguous block.
//!
//! Binary layout used by snapshot and checkpoint files (all little-endian):
//!
//! ```text
//! [u8  element size in bytes (4 or 8)]
//! [u32 rank]
//! [u64 extent] * rank
//! [element]    * product(extents)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Scalar element of a [`Tensor`]: `f64` (default) or `f32`.
pub trait Element: Copy + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    const ELEM_BYTES: u8;
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const ELEM_BYTES: u8 = 8;
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Element for f32 {
    const ELEM_BYTES: u8 = 4;
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

/// Dense row-major tensor. `product(shape) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::InvalidArg(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self
    where
        T: std::ops::Mul<Output = T>,
    {
        self.map(|x| x * s)
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self>
    where
        T: std::ops::Add<Output = T>,
    {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self>
    where
        T: std::ops::Sub<Output = T>,
    {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self>
    where
        T: std::ops::Mul<Output = T>,
    {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// Contiguous slice of feature `f` along axis 0, e.g. one output feature
    /// of a `[F, C, kh, kw]` weight tensor.
    pub fn feature(&self, f: usize) -> &[T] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[f * stride..(f + 1) * stride]
    }

    pub fn feature_mut(&mut self, f: usize) -> &mut [T] {
        let stride: usize = self.shape[1..].iter().product();
        &mut self.data[f * stride..(f + 1) * stride]
    }

    /// Serialize in the documented binary layout.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(1 + 4 + 8 * self.shape.len());
        buf.push(T::ELEM_BYTES);
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        w.write_all(&buf)?;
        let mut payload = Vec::with_capacity(self.data.len() * T::ELEM_BYTES as usize);
        for &v in &self.data {
            v.write_le(&mut payload);
        }
        w.write_all(&payload)?;
        Ok(())
    }

    /// Deserialize from the documented binary layout.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if byte[0] != T::ELEM_BYTES {
            return Err(Error::InvalidArg(format!(
                "tensor file element size {} does not match expected {}",
                byte[0],
                T::ELEM_BYTES
            )));
        }
        let mut rank_buf = [0u8; 4];
        r.read_exact(&mut rank_buf)?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut ext = [0u8; 8];
            r.read_exact(&mut ext)?;
            shape.push(u64::from_le_bytes(ext) as usize);
        }
        let n: usize = shape.iter().product();
        let esz = T::ELEM_BYTES as usize;
        let mut payload = vec![0u8; n * esz];
        r.read_exact(&mut payload)?;
        let data = payload.chunks_exact(esz).map(T::read_le).collect();
        Ok(Self { shape, data })
    }
}

/// Reduction kinds supported by [`reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Reduce `t` over the given axes; reduced extents are removed from the shape.
pub fn reduce<T: Element>(t: &Tensor<T>, axes: &[usize], kind: Reduce) -> Result<Tensor<T>> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidAxis { axis: a, rank });
        }
        if seen[a] {
            return Err(Error::InvalidArg(format!("duplicate reduce axis {a}")));
        }
        seen[a] = true;
    }

    let out_shape: Vec<usize> = (0..rank).filter(|a| !seen[*a]).map(|a| t.shape()[a]).collect();
    let out_len: usize = out_shape.iter().product();
    let reduced_count: usize = (0..rank).filter(|a| seen[*a]).map(|a| t.shape()[a]).product();

    // Strides of the input, and of the output laid over the kept axes.
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * t.shape()[a + 1];
    }
    let mut out_stride_of_axis = vec![0usize; rank];
    {
        let mut s = 1;
        for a in (0..rank).rev() {
            if !seen[a] {
                out_stride_of_axis[a] = s;
                s *= t.shape()[a];
            }
        }
    }

    let init = match kind {
        Reduce::Max => T::from_f64(f64::NEG_INFINITY),
        _ => T::zero(),
    };
    let mut acc = vec![init; out_len];

    let mut idx = vec![0usize; rank];
    for flat in 0..t.len() {
        let mut rem = flat;
        let mut out_flat = 0;
        for a in 0..rank {
            idx[a] = rem / in_strides[a];
            rem %= in_strides[a];
            if !seen[a] {
                out_flat += idx[a] * out_stride_of_axis[a];
            }
        }
        let v = t.data()[flat];
        match kind {
            Reduce::Sum | Reduce::Mean => {
                acc[out_flat] = T::from_f64(acc[out_flat].to_f64() + v.to_f64())
            }
            Reduce::Max => {
                if v > acc[out_flat] {
                    acc[out_flat] = v;
                }
            }
        }
    }
    if kind == Reduce::Mean {
        let n = reduced_count as f64;
        for v in &mut acc {
            *v = T::from_f64(v.to_f64() / n);
        }
    }
    Tensor::from_vec(&out_shape, acc)
}

/// Subtract `reduced` (the result of reducing `t` over `axes`) from `t`,
/// broadcasting it back over the removed axes. This is the one documented
/// broadcast the tensor layer supports.
pub fn broadcast_sub<T>(
    t: &Tensor<T>,
    reduced: &Tensor<T>,
    axes: &[usize],
) -> Result<Tensor<T>>
where
    T: Element + std::ops::Sub<Output = T>,
{
    let rank = t.rank();
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidAxis { axis: a, rank });
        }
        seen[a] = true;
    }
    let expect: Vec<usize> = (0..rank).filter(|a| !seen[*a]).map(|a| t.shape()[a]).collect();
    if reduced.shape() != expect.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "broadcast_sub",
            lhs: expect,
            rhs: reduced.shape().to_vec(),
        });
    }

    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * t.shape()[a + 1];
    }
    let mut out_stride_of_axis = vec![0usize; rank];
    {
        let mut s = 1;
        for a in (0..rank).rev() {
            if !seen[a] {
                out_stride_of_axis[a] = s;
                s *= t.shape()[a];
            }
        }
    }

    let mut out = t.clone();
    for flat in 0..t.len() {
        let mut rem = flat;
        let mut red_flat = 0;
        for a in 0..rank {
            let i = rem / in_strides[a];
            rem %= in_strides[a];
            if !seen[a] {
                red_flat += i * out_stride_of_axis[a];
            }
        }
        out.data_mut()[flat] = t.data()[flat] - reduced.data()[red_flat];
    }
    Ok(out)
}

/// Matrix product of `a: [M, K]` and `b: [K, N]`.
pub fn matmul<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Element + std::ops::Mul<Output = T> + std::ops::Add<Output = T>,
{
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let aval = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aval * brow[j];
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Build the `[C*kh*kw, N*H'*W']` patch matrix for `input: [N, C, H, W]`.
/// Out-of-bounds (padding) positions contribute zero.
pub fn im2col<T: Element>(
    input: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let oh = conv_out_extent(h, kh, stride, padding).expect("validated by caller");
    let ow = conv_out_extent(w, kw, stride, padding).expect("validated by caller");
    let cols = n * oh * ow;
    let rows = c * kh * kw;
    let mut out = vec![T::zero(); rows * cols];
    let id = input.data();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let orow = &mut out[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let in_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        let col_base = (ni * oh + oy) * ow;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = in_base + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            orow[col_base + ox] = id[in_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[rows, cols], out).expect("sized above")
}

/// Scatter-add the inverse of [`im2col`]: fold a `[C*kh*kw, N*H'*W']` patch
/// matrix back onto an `[N, C, H, W]` tensor. Overlapping patches accumulate.
pub fn col2im<T>(
    cols: &Tensor<T>,
    out_shape: &[usize; 4],
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Tensor<T>
where
    T: Element + std::ops::Add<Output = T>,
{
    let (n, c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let oh = conv_out_extent(h, kh, stride, padding).expect("validated by caller");
    let ow = conv_out_extent(w, kw, stride, padding).expect("validated by caller");
    let ncols = n * oh * ow;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let od = out.data_mut();
    let cd = cols.data();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let crow = &cd[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let out_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let out_row = out_base + iy as usize * w;
                        let col_base = (ni * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            od[out_row + ix as usize] = od[out_row + ix as usize] + crow[col_base + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Transpose of a `[M, N]` matrix.
pub fn transpose2<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.rank() != 2 {
        return Err(Error::InvalidArg(format!(
            "transpose2 needs a matrix, got rank {}",
            t.rank()
        )));
    }
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    let td = t.data();
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = td[i * n + j];
        }
    }
    Ok(out)
}

/// Reorder `[N, F, H, W]` into the `[F, N*H*W]` matrix whose column order
/// matches the patch matrix built by [`im2col`]. This is the layout gradients
/// arrive in when differentiating through [`conv_apply_cols`].
pub fn feature_major<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.rank() != 4 {
        return Err(Error::InvalidArg(format!(
            "feature_major needs a rank-4 tensor, got rank {}",
            t.rank()
        )));
    }
    let (n, f, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let plane = h * w;
    let mut out = Tensor::zeros(&[f, n * plane]);
    let td = t.data();
    let od = out.data_mut();
    for ni in 0..n {
        for fi in 0..f {
            let src = &td[(ni * f + fi) * plane..(ni * f + fi + 1) * plane];
            let dst = &mut od[(fi * n + ni) * plane..(fi * n + ni + 1) * plane];
            dst.copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Multiply `weight: [F, C, kh, kw]` onto a patch matrix from [`im2col`] and
/// reorder the result to `[N, F, OH, OW]`.
pub fn conv_apply_cols<T>(
    weight: &Tensor<T>,
    cols: &Tensor<T>,
    n: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>>
where
    T: Element + std::ops::Mul<Output = T> + std::ops::Add<Output = T>,
{
    let f = weight.shape()[0];
    let wk = weight.reshape(&[f, weight.len() / f])?;
    // [F, K] x [K, N*OH*OW] -> [F, N*OH*OW]
    let prod = matmul(&wk, cols)?;

    // Permute [F, N, OH, OW] -> [N, F, OH, OW].
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    let pd = prod.data();
    let od = out.data_mut();
    let plane = oh * ow;
    for fi in 0..f {
        for ni in 0..n {
            let src = &pd[(fi * n + ni) * plane..(fi * n + ni + 1) * plane];
            let dst = &mut od[(ni * f + fi) * plane..(ni * f + fi + 1) * plane];
            dst.copy_from_slice(src);
        }
    }
    Ok(out)
}

/// 2-D cross-correlation (no kernel flip) of `input: [N, C, H, W]` with
/// `weight: [F, C, kh, kw]`. Implemented as im2col followed by a matrix
/// product.
pub fn conv2d<T>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>>
where
    T: Element + std::ops::Mul<Output = T> + std::ops::Add<Output = T>,
{
    if input.rank() != 4 || weight.rank() != 4 || input.shape()[1] != weight.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArg("conv2d stride must be >= 1".into()));
    }
    let (n, _c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
    let oh = conv_out_extent(h, kh, stride, padding).ok_or_else(|| {
        Error::InvalidArg(format!(
            "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        ))
    })?;
    let ow = conv_out_extent(w, kw, stride, padding).ok_or_else(|| {
        Error::InvalidArg(format!(
            "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        ))
    })?;

    let cols = im2col(input, kh, kw, stride, padding);
    conv_apply_cols(weight, &cols, n, oh, ow)
}
