use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Stride 1 with padding that preserves spatial extents for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            kernel_size,
            stride: 1,
            padding: kernel_size / 2,
            in_channels,
            out_channels,
        }
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::invalid("kernel size and stride must be positive"));
        }
        if padded < self.kernel_size {
            return Err(Error::dim(
                "spatial",
                format!(
                    "extent {input} with padding {} is smaller than kernel {}",
                    self.padding, self.kernel_size
                ),
            ));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    fn check(&self, input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<()> {
        let (c, _, _) = input.chw()?;
        if c != self.in_channels {
            return Err(Error::dim(
                "input channels",
                format!("input has {c}, spec expects {}", self.in_channels),
            ));
        }
        let m = self.kernel_size;
        let expected = [self.out_channels, self.in_channels, m, m];
        if kernels.shape() != expected {
            let axis = match kernels.shape() {
                s if s.len() != 4 => "kernel rank",
                s if s[0] != expected[0] => "kernel output channels",
                s if s[1] != expected[1] => "kernel input channels",
                _ => "kernel spatial size",
            };
            return Err(Error::dim(
                axis,
                format!("kernels {:?}, expected {:?}", kernels.shape(), expected),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [self.out_channels] {
                return Err(Error::dim(
                    "bias",
                    format!("bias {:?}, expected [{}]", b.shape(), self.out_channels),
                ));
            }
        }
        Ok(())
    }
}

/// Range of output columns `j` whose source column `j*stride + offset - padding`
/// falls inside `[0, width)`.
#[inline]
fn valid_range(out: usize, width: usize, stride: usize, offset: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if width + padding > offset {
        ((width + padding - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

const GRAD_BLOCK: usize = 4096;

/// Unfolds the input into a `[C·m·m, Ho·Wo]` patch matrix (zero padded).
fn im2col(x: &[f32], c_in: usize, h: usize, w: usize, ho: usize, wo: usize, spec: &ConvSpec) -> Vec<f32> {
    let m = spec.kernel_size;
    let (s, p) = (spec.stride, spec.padding);
    let mut cols = vec![0.0f32; c_in * m * m * ho * wo];
    for c in 0..c_in {
        let src = &x[c * h * w..(c + 1) * h * w];
        for a in 0..m {
            let (i_lo, i_hi) = valid_range(ho, h, s, a, p);
            for b in 0..m {
                let (j_lo, j_hi) = valid_range(wo, w, s, b, p);
                let row = &mut cols[((c * m + a) * m + b) * ho * wo..][..ho * wo];
                for i in i_lo..i_hi {
                    let line = &src[(i * s + a - p) * w..][..w];
                    let dst = &mut row[i * wo..(i + 1) * wo];
                    for j in j_lo..j_hi {
                        dst[j] = line[j * s + b - p];
                    }
                }
            }
        }
    }
    cols
}

/// Adds a `[C·m·m, Ho·Wo]` patch matrix back onto a `[C, H, W]` plane.
fn col2im(cols: &[f32], c_in: usize, h: usize, w: usize, ho: usize, wo: usize, spec: &ConvSpec) -> Vec<f32> {
    let m = spec.kernel_size;
    let (s, p) = (spec.stride, spec.padding);
    let mut x = vec![0.0f32; c_in * h * w];
    for c in 0..c_in {
        let dst = &mut x[c * h * w..(c + 1) * h * w];
        for a in 0..m {
            let (i_lo, i_hi) = valid_range(ho, h, s, a, p);
            for b in 0..m {
                let (j_lo, j_hi) = valid_range(wo, w, s, b, p);
                let row = &cols[((c * m + a) * m + b) * ho * wo..][..ho * wo];
                for i in i_lo..i_hi {
                    let line = &mut dst[(i * s + a - p) * w..][..w];
                    let src = &row[i * wo..(i + 1) * wo];
                    for j in j_lo..j_hi {
                        line[j * s + b - p] += src[j];
                    }
                }
            }
        }
    }
    x
}

/// `c[m×n] = a[m×k] · b[k×n]` with explicit row/column strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: usize, csa: usize, b: &[f32], rsb: usize, csb: usize, c: &mut [f32]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// 2-D cross-correlation of a `[C, H, W]` input with `[K, C, m, m]` kernels.
///
/// `out[k, i, j] = bias[k] + Σ_c Σ_a Σ_b w[k, c, a, b] · x[c, i·s + a − p, j·s + b − p]`,
/// with zero padding outside the input.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.check(input, kernels, bias)?;
    let (c_in, h, w) = input.chw()?;
    let ho = spec.output_extent(h)?;
    let wo = spec.output_extent(w)?;
    let patch = c_in * spec.kernel_size * spec.kernel_size;
    let n = ho * wo;
    let cols = im2col(input.data(), c_in, h, w, ho, wo, spec);
    let mut out = vec![0.0f32; spec.out_channels * n];
    gemm(spec.out_channels, patch, n, kernels.data(), patch, 1, &cols, n, 1, &mut out);
    if let Some(b) = bias {
        for (plane, &bk) in out.chunks_mut(n.max(1)).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bk);
        }
    }
    Tensor::new(vec![spec.out_channels, ho, wo], out)
}

/// Gradients of a convolution with respect to its input, kernels and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    spec.check(input, kernels, None)?;
    let (c_in, h, w) = input.chw()?;
    let ho = spec.output_extent(h)?;
    let wo = spec.output_extent(w)?;
    if grad_out.shape() != [spec.out_channels, ho, wo] {
        return Err(Error::dim(
            "grad_out",
            format!(
                "gradient {:?}, expected {:?}",
                grad_out.shape(),
                [spec.out_channels, ho, wo]
            ),
        ));
    }
    let k_out = spec.out_channels;
    let patch = c_in * spec.kernel_size * spec.kernel_size;
    let n = ho * wo;
    let g = grad_out.data();

    let bias: Vec<f32> = (0..k_out)
        .map(|k| g[k * n..(k + 1) * n].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();

    let cols = im2col(input.data(), c_in, h, w, ho, wo, spec);
    // Long spatial sums are reduced in f32 blocks and accumulated in f64.
    let mut acc = vec![0.0f64; k_out * patch];
    let mut block = vec![0.0f32; k_out * patch];
    for j0 in (0..n).step_by(GRAD_BLOCK) {
        let len = GRAD_BLOCK.min(n - j0);
        gemm(k_out, len, patch, &g[j0..], n, 1, &cols[j0..], 1, n, &mut block);
        acc.iter_mut().zip(&block).for_each(|(a, &b)| *a += b as f64);
    }
    let gw: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();

    let mut gcols = vec![0.0f32; patch * n];
    gemm(patch, k_out, n, kernels.data(), 1, patch, g, n, 1, &mut gcols);
    let gx = col2im(&gcols, c_in, h, w, ho, wo, spec);

    Ok(ConvGrads {
        input: Tensor::new(vec![c_in, h, w], gx)?,
        kernels: Tensor::new(kernels.shape().to_vec(), gw)?,
        bias: Tensor::from_vec(bias),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `grad` through where the pre-activation was positive.
pub fn relu_backward(grad: &Tensor, pre_activation: &Tensor) -> Result<Tensor> {
    grad.check_same_shape(pre_activation)?;
    let data = grad
        .data()
        .iter()
        .zip(pre_activation.data())
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad.shape().to_vec(), data)
}

/// Flat input offsets of the maxima selected by [`maxpool2`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<u32>,
}

/// 2×2 max pooling with stride 2. Ties resolve to the first element in
/// row-major window order.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 {
        return Err(Error::dim("height", format!("maxpool2 needs an even extent, got {h}")));
    }
    if w % 2 != 0 {
        return Err(Error::dim("width", format!("maxpool2 needs an even extent, got {w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let base = ch * h * w + 2 * i * w + 2 * j;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if d[cand] > d[best] {
                        best = cand;
                    }
                }
                out.push(d[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, ho, wo], out)?,
        PoolIndices {
            input_shape: vec![c, h, w],
            argmax,
        },
    ))
}

pub fn maxpool2_backward(grad: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad.len() != indices.argmax.len() {
        return Err(Error::dim(
            "grad",
            format!("{} gradients for {} pooled outputs", grad.len(), indices.argmax.len()),
        ));
    }
    let mut out = Tensor::zeros(&indices.input_shape);
    let dst = out.data_mut();
    for (&g, &idx) in grad.data().iter().zip(&indices.argmax) {
        dst[idx as usize] += g;
    }
    Ok(out)
}

/// Nearest-neighbour 2× upsampling: every value is replicated into a 2×2 block.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (ho, wo) = (2 * h, 2 * w);
    let d = x.data();
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            let src = &d[ch * h * w + (i / 2) * w..][..w];
            let dst = &mut out[ch * ho * wo + i * wo..][..wo];
            for (j, v) in dst.iter_mut().enumerate() {
                *v = src[j / 2];
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Adjoint of [`upsample2`]: sums each 2×2 block of the gradient.
pub fn upsample2_backward(grad: &Tensor) -> Result<Tensor> {
    let (c, h2, w2) = grad.chw()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::dim("spatial", "upsample2 gradient must have even extents"));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let g = grad.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                out[ch * h * w + (i / 2) * w + j / 2] += g[ch * h2 * w2 + i * w2 + j];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Mean of squared elementwise differences, accumulated in `f64`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::invalid("mse of empty arrays"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Stacks two `[C, H, W]` arrays along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::dim(
            "spatial",
            format!("cannot concatenate {ha}x{wa} with {hb}x{wb}"),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, ha, wa], data)
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.chw()?;
    if first > c {
        return Err(Error::dim("channels", format!("cannot split {first} of {c} channels")));
    }
    let (a, b) = x.data().split_at(first * h * w);
    Ok((
        Tensor::new(vec![first, h, w], a.to_vec())?,
        Tensor::new(vec![c - first, h, w], b.to_vec())?,
    ))
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads height and width at the bottom/right up to the next multiple of
/// `multiple`, mirroring interior pixels (the edge row/column is not repeated).
pub fn reflect_pad(x: &Tensor, multiple: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if multiple == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("reflect_pad needs a positive multiple and non-empty input"));
    }
    let ho = h.div_ceil(multiple) * multiple;
    let wo = w.div_ceil(multiple) * multiple;
    if (ho, wo) == (h, w) {
        return Ok(x.clone());
    }
    let d = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            let si = reflect_index(i, h);
            for j in 0..wo {
                out.push(d[ch * h * w + si * w + reflect_index(j, w)]);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}
