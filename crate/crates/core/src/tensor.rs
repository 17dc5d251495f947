//! Dense channel-major tensors and the handful of layers the backbones use.
//!
//! Every op is a pure function of its inputs. Convolution lowers to a single
//! GEMM over an im2col buffer; callers that run many convolutions can pass a
//! reusable scratch buffer through [`conv2d_with_scratch`].

use crate::error::{Error, Result};

/// A `channels × height × width` array of `f32`, stored channel-major and
/// row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "tensor dims must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::full(channels, height, width, 0.0)
    }

    pub fn full(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "tensor dims must be >= 1");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "tensor dims must be >= 1");
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    /// One channel as a row-major `height × width` slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution weights in `out_ch × in_ch × kh × kw` order plus an optional
/// per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    weight: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl ConvParams {
    pub fn new(
        out_ch: usize,
        in_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if out_ch == 0 || in_ch == 0 {
            return Err(Error::InvalidArgument("conv channel counts must be >= 1".into()));
        }
        if ![1, 3, 7].contains(&kh) || ![1, 3, 7].contains(&kw) {
            return Err(Error::InvalidArgument(format!(
                "unsupported kernel size {kh}x{kw}; expected 1, 3 or 7"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!("unsupported stride {stride}")));
        }
        if weight.len() != out_ch * in_ch * kh * kw {
            return Err(Error::Shape(format!(
                "conv weight length {} does not match {out_ch}x{in_ch}x{kh}x{kw}",
                weight.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_ch {
                return Err(Error::Shape(format!(
                    "conv bias length {} does not match out_ch {out_ch}",
                    b.len()
                )));
            }
        }
        Ok(Self {
            out_ch,
            in_ch,
            kh,
            kw,
            stride,
            padding,
            weight,
            bias,
        })
    }

    /// Zero-initialized parameters with "same" padding for odd kernels.
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        Self::new(
            out_ch,
            in_ch,
            (k, k),
            stride,
            (k - 1) / 2,
            vec![0.0; out_ch * in_ch * k * k],
            bias.then(|| vec![0.0; out_ch]),
        )
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f32] {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f32]> {
        self.bias.as_deref_mut()
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Output spatial dims for an `h × w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kh || pw < self.kw {
            return Err(Error::Shape(format!(
                "conv {}x{} kernel does not fit a {h}x{w} input with padding {}",
                self.kh, self.kw, self.padding
            )));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// Inference-time batch-norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.running_mean.len() != n || self.running_var.len() != n {
            return Err(Error::Shape("batch-norm vectors differ in length".into()));
        }
        if let Some(c) = self
            .running_var
            .iter()
            .position(|v| !(v + self.epsilon > 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "batch-norm channel {c} has running_var + epsilon <= 0"
            )));
        }
        Ok(())
    }

    /// Applies the normalization channel-wise, in place.
    pub fn apply(&self, t: &mut Tensor) -> Result<()> {
        self.validate()?;
        if t.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "batch-norm has {} channels, tensor has {}",
                self.channels(),
                t.channels()
            )));
        }
        let n = t.height() * t.width();
        for (c, chunk) in t.data_mut().chunks_mut(n).enumerate() {
            let inv = 1.0 / (self.running_var[c] + self.epsilon).sqrt();
            for v in chunk {
                *v = self.gamma[c] * (*v - self.running_mean[c]) * inv + self.beta[c];
            }
        }
        Ok(())
    }
}

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv2d_with_scratch(input, params, &mut Vec::new())
}

/// Cross-correlation with symmetric zero padding. `scratch` holds the im2col
/// matrix and is grown as needed, so reusing it across calls avoids large
/// allocations.
pub fn conv2d_with_scratch(
    input: &Tensor,
    params: &ConvParams,
    scratch: &mut Vec<f32>,
) -> Result<Tensor> {
    if input.channels() != params.in_ch {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            params.in_ch,
            input.channels()
        )));
    }
    let (oh, ow) = params.output_dims(input.height(), input.width())?;
    let n = oh * ow;
    let k = params.in_ch * params.kh * params.kw;
    let m = params.out_ch;

    let mut out = vec![0.0f32; m * n];
    if let Some(bias) = &params.bias {
        for (row, b) in out.chunks_mut(n).zip(bias) {
            row.fill(*b);
        }
    }

    let pointwise = params.kh == 1 && params.kw == 1 && params.stride == 1 && params.padding == 0;
    let cols: &[f32] = if pointwise {
        input.data()
    } else {
        im2col(input, params, oh, ow, scratch);
        &scratch[..k * n]
    };

    // SAFETY: all three matrices are dense row-major buffers whose lengths
    // were checked above: weight is m×k, cols is k×n, out is m×n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            params.weight.as_ptr(),
            k as isize,
            1,
            cols.as_ptr(),
            n as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(m, oh, ow, out)
}

fn im2col(input: &Tensor, p: &ConvParams, oh: usize, ow: usize, buf: &mut Vec<f32>) {
    let (h, w) = (input.height() as isize, input.width() as isize);
    let n = oh * ow;
    let rows = p.in_ch * p.kh * p.kw;
    if buf.len() < rows * n {
        buf.resize(rows * n, 0.0);
    }
    let pad = p.padding as isize;
    let stride = p.stride as isize;
    let mut row = 0;
    for c in 0..p.in_ch {
        let plane = input.plane(c);
        for ky in 0..p.kh as isize {
            for kx in 0..p.kw as isize {
                let dst = &mut buf[row * n..(row + 1) * n];
                // ox range whose source column lands inside the input
                let lo = ((pad - kx).max(0) + stride - 1) / stride;
                let hi = ((w - 1 + pad - kx).div_euclid(stride) + 1).clamp(0, ow as isize);
                let (lo, hi) = (lo.min(hi) as usize, hi as usize);
                for oy in 0..oh {
                    let iy = oy as isize * stride + ky - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let x0 = lo as isize * stride + kx - pad;
                    if stride == 1 {
                        let x0 = x0 as usize;
                        line[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
                    } else {
                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[(x0 + i as isize * stride) as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Max pooling without padding; trailing rows/columns that do not fill a
/// whole window are dropped.
pub fn maxpool2d(input: &Tensor, size: usize, stride: usize) -> Result<Tensor> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool size and stride must be >= 1".into()));
    }
    let (c, h, w) = input.dims();
    if h < size || w < size {
        return Err(Error::Shape(format!(
            "pool window {size} larger than {h}x{w} input"
        )));
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = input.plane(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..size {
                    let row = &plane[(oy * stride + ky) * w + ox * stride..][..size];
                    for &v in row {
                        m = m.max(v);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(c, oh, ow, out)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2(input: &Tensor) -> Tensor {
    upsample_nearest_to(input, input.height() * 2, input.width() * 2)
}

/// Nearest-neighbour upsampling to an explicit size: output pixel `(y, x)`
/// reads input pixel `(min(y/2, h-1), min(x/2, w-1))`. For exactly twice the
/// input size this is [`upsample_nearest2`]; one extra row or column (odd
/// skip connections in the hourglass) repeats the last input row/column.
pub fn upsample_nearest_to(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = input.dims();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = input.plane(ch);
        for y in 0..out_h {
            let row = &plane[(y / 2).min(h - 1) * w..][..w];
            for x in 0..out_w {
                out.push(row[(x / 2).min(w - 1)]);
            }
        }
    }
    Tensor {
        channels: c,
        height: out_h,
        width: out_w,
        data: out,
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    // split by sign so exp never overflows
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    add_in_place(&mut out, b)?;
    Ok(out)
}

pub fn add_in_place(a: &mut Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cannot add {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?}: spatial dims differ",
            a.dims(),
            b.dims()
        )));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(a.channels() + b.channels(), a.height(), a.width(), data)
}

/// Folds batch-norm into the preceding convolution so that
/// `conv2d(x, bn_fold(conv, bn)) == bn(conv2d(x, conv))`.
pub fn bn_fold(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    bn.validate()?;
    if bn.channels() != conv.out_ch {
        return Err(Error::Shape(format!(
            "batch-norm has {} channels, conv has {} outputs",
            bn.channels(),
            conv.out_ch
        )));
    }
    let per_out = conv.in_ch * conv.kh * conv.kw;
    let mut weight = conv.weight.clone();
    let mut bias = Vec::with_capacity(conv.out_ch);
    for o in 0..conv.out_ch {
        let scale = bn.gamma[o] / (bn.running_var[o] + bn.epsilon).sqrt();
        for w in &mut weight[o * per_out..(o + 1) * per_out] {
            *w *= scale;
        }
        let b = conv.bias.as_ref().map_or(0.0, |b| b[o]);
        bias.push((b - bn.running_mean[o]) * scale + bn.beta[o]);
    }
    ConvParams::new(
        conv.out_ch,
        conv.in_ch,
        (conv.kh, conv.kw),
        conv.stride,
        conv.padding,
        weight,
        Some(bias),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, the reference for the GEMM path.
    fn naive_conv(input: &Tensor, p: &ConvParams) -> Tensor {
        let (oh, ow) = p.output_dims(input.height(), input.width()).unwrap();
        let (kh, kw) = p.kernel();
        Tensor::from_fn(p.out_channels(), oh, ow, |o, oy, ox| {
            let mut acc = p.bias().map_or(0.0f64, |b| b[o] as f64);
            for c in 0..p.in_channels() {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * p.stride() + ky) as isize - p.padding() as isize;
                        let ix = (ox * p.stride() + kx) as isize - p.padding() as isize;
                        if iy < 0 || ix < 0 || iy >= input.height() as isize || ix >= input.width() as isize {
                            continue;
                        }
                        let w = p.weight()[((o * p.in_channels() + c) * kh + ky) * kw + kx];
                        acc += w as f64 * input.at(c, iy as usize, ix as usize) as f64;
                    }
                }
            }
            acc as f32
        })
    }

    fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_conv(rng: &mut impl Rng, out_ch: usize, in_ch: usize, k: usize, stride: usize, bias: bool) -> ConvParams {
        let weight = (0..out_ch * in_ch * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = bias.then(|| (0..out_ch).map(|_| rng.gen_range(-1.0..1.0)).collect());
        ConvParams::new(out_ch, in_ch, (k, k), stride, (k - 1) / 2, weight, bias).unwrap()
    }

    #[test]
    fn conv_all_ones_3x3() {
        let input = Tensor::full(1, 3, 3, 1.0);
        let p = ConvParams::new(1, 1, (3, 3), 1, 1, vec![1.0; 9], Some(vec![0.0])).unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.dims(), (1, 3, 3));
        assert_eq!(out.at(0, 1, 1), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(0, y, x), 4.0);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, 1, 5, 7);
        let p = ConvParams::new(1, 1, (1, 1), 1, 0, vec![1.0], Some(vec![0.0])).unwrap();
        assert_eq!(conv2d(&input, &p).unwrap(), input);
    }

    #[test]
    fn conv_zero_kernel_passes_bias() {
        let input = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32);
        let p = ConvParams::new(1, 1, (3, 3), 2, 1, vec![0.0; 9], Some(vec![2.5])).unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.dims(), (1, 2, 2));
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_tiny_input() {
        let p = ConvParams::zeros(4, 3, 3, 1, false).unwrap();
        assert!(matches!(conv2d(&Tensor::zeros(2, 4, 4), &p), Err(Error::Shape(_))));
        let p = ConvParams::new(1, 1, (7, 7), 1, 0, vec![0.0; 49], None).unwrap();
        assert!(matches!(conv2d(&Tensor::zeros(1, 4, 4), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_params_validation() {
        assert!(ConvParams::zeros(1, 1, 5, 1, false).is_err());
        assert!(ConvParams::zeros(1, 1, 3, 3, false).is_err());
        assert!(ConvParams::new(1, 1, (3, 3), 1, 1, vec![0.0; 8], None).is_err());
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, stride) in &[(1, 1), (1, 2), (3, 1), (3, 2), (7, 2), (7, 1)] {
            for &(h, w) in &[(5, 5), (8, 6), (9, 13), (16, 16)] {
                let input = random_tensor(&mut rng, 3, h, w);
                let p = random_conv(&mut rng, 4, 3, k, stride, true);
                let fast = conv2d(&input, &p).unwrap();
                let slow = naive_conv(&input, &p);
                assert_eq!(fast.dims(), slow.dims());
                for (a, b) in fast.data().iter().zip(slow.data()) {
                    assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "k={k} s={stride}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_tensor(&mut rng, 2, 6, 6);
            let y = random_tensor(&mut rng, 2, 6, 6);
            let p = random_conv(&mut rng, 3, 2, 3, 1, false);
            let (a, b) = (rng.gen_range(-2.0f32..2.0), rng.gen_range(-2.0f32..2.0));
            let combo = Tensor::from_fn(2, 6, 6, |c, i, j| a * x.at(c, i, j) + b * y.at(c, i, j));
            let lhs = conv2d(&combo, &p).unwrap();
            let (cx, cy) = (conv2d(&x, &p).unwrap(), conv2d(&y, &p).unwrap());
            for i in 0..lhs.data().len() {
                let rhs = a * cx.data()[i] + b * cy.data()[i];
                assert!((lhs.data()[i] - rhs).abs() <= 1e-5 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn maxpool_cases() {
        let t = Tensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&t, 2, 2).unwrap().data(), &[4.0]);
        let t = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32);
        assert_eq!(maxpool2d(&t, 2, 2).unwrap().data(), &[5.0, 7.0, 13.0, 15.0]);
        let t = Tensor::full(3, 6, 4, 0.25);
        let p = maxpool2d(&t, 2, 2).unwrap();
        assert_eq!(p.dims(), (3, 3, 2));
        assert!(p.data().iter().all(|&v| v == 0.25));
        assert!(maxpool2d(&Tensor::zeros(1, 1, 4), 2, 2).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let t = Tensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = upsample_nearest2(&t);
        assert_eq!(
            u.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let u = upsample_nearest2(&Tensor::full(1, 1, 1, 7.5));
        assert_eq!(u.dims(), (1, 2, 2));
        assert!(u.data().iter().all(|&v| v == 7.5));
        let odd = upsample_nearest_to(&t, 5, 4);
        assert_eq!(odd.dims(), (1, 5, 4));
        assert_eq!(odd.at(0, 4, 3), 4.0);
    }

    #[test]
    fn activations() {
        let t = Tensor::new(1, 1, 2, vec![-1.5, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3.0f32.ln()) - 0.75).abs() < 1e-7);
        assert!(sigmoid_scalar(-200.0) >= 0.0 && sigmoid_scalar(200.0) <= 1.0);
        assert!(sigmoid(&Tensor::full(1, 1, 1, -1e30)).is_finite());
    }

    #[test]
    fn add_and_concat() {
        let a = Tensor::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(add(&a, &Tensor::zeros(1, 1, 2)).unwrap(), a);
        assert!(add(&a, &Tensor::zeros(2, 1, 2)).is_err());
        let c = concat_channels(&Tensor::zeros(1, 2, 2), &Tensor::full(3, 2, 2, 1.0)).unwrap();
        assert_eq!(c.dims(), (4, 2, 2));
        assert_eq!(c.plane(0), &[0.0; 4]);
        assert_eq!(c.plane(3), &[1.0; 4]);
        assert!(concat_channels(&Tensor::zeros(1, 2, 2), &Tensor::zeros(1, 2, 3)).is_err());
    }

    #[test]
    fn bn_fold_identity_and_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = random_conv(&mut rng, 2, 1, 3, 1, true);
        let folded = bn_fold(&conv, &BnParams::identity(2)).unwrap();
        assert_eq!(folded, conv);

        let mut bn = BnParams::identity(2);
        bn.gamma = vec![2.0, 2.0];
        let folded = bn_fold(&conv, &bn).unwrap();
        for (a, b) in folded.weight().iter().zip(conv.weight()) {
            assert_eq!(*a, 2.0 * b);
        }
        for (a, b) in folded.bias().unwrap().iter().zip(conv.bias().unwrap()) {
            assert_eq!(*a, 2.0 * b);
        }
        assert!(bn_fold(&conv, &BnParams::identity(3)).is_err());
        let mut bad = BnParams::identity(2);
        bad.running_var[1] = -1.0;
        assert!(bn_fold(&conv, &bad).is_err());
    }

    #[test]
    fn bn_fold_matches_explicit_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..120 {
            let conv = random_conv(&mut rng, 3, 1, 3, 1 + case % 2, case % 3 == 0);
            let bn = BnParams {
                gamma: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                beta: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                running_mean: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                running_var: (0..3).map(|_| rng.gen_range(0.1..3.0)).collect(),
                epsilon: 1e-5,
            };
            let x = random_tensor(&mut rng, 1, 5, 5);
            let mut expected = conv2d(&x, &conv).unwrap();
            bn.apply(&mut expected).unwrap();
            let got = conv2d(&x, &bn_fold(&conv, &bn).unwrap()).unwrap();
            for (a, b) in got.data().iter().zip(expected.data()) {
                assert!((a - b).abs() <= 1e-5, "case {case}: {a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn upsample_then_subsample_is_identity(c in 1usize..3, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(&mut rng, c, h, w);
            let u = upsample_nearest2(&t);
            let back = Tensor::from_fn(c, h, w, |ch, y, x| u.at(ch, 2 * y, 2 * x));
            prop_assert_eq!(back, t);
        }

        #[test]
        fn ops_stay_finite(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(2, 6, 6, |_, _, _| rng.gen_range(-1e3..1e3));
            let p = random_conv(&mut rng, 2, 2, 3, 1, true);
            prop_assert!(conv2d(&x, &p).unwrap().is_finite());
            prop_assert!(sigmoid(&x).is_finite());
            prop_assert!(relu(&x).is_finite());
            prop_assert!(maxpool2d(&x, 2, 2).unwrap().is_finite());
        }
    }
}
