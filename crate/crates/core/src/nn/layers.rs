use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis, Ix1, Ix2, Ix4};
use rand::Rng;

use super::{glorot_uniform, Mode, Param, Sequential, Tensor};
use crate::error::{Error, Result};

fn expect_rank(x: &Tensor, rank: usize, layer: &str) -> Result<()> {
    if x.ndim() != rank {
        return Err(Error::validation(format!(
            "{layer} expects a rank-{rank} input, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Fully connected layer, `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    pub(crate) input: Option<Array2<f32>>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = glorot_uniform(&[inputs, outputs], inputs, outputs, rng);
        Self::from_weights(w, Tensor::zeros(vec![outputs]))
    }

    pub fn from_weights(weight: Tensor, bias: Tensor) -> Self {
        assert_eq!(weight.ndim(), 2);
        assert_eq!(bias.shape(), &[weight.shape()[1]]);
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 2, "dense")?;
        if x.shape()[1] != self.inputs() {
            return Err(Error::validation(format!(
                "dense layer expects {} features, got {}",
                self.inputs(),
                x.shape()[1]
            )));
        }
        let x2 = x.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let y = x2.dot(&w) + &b;
        self.input = Some(x2);
        Ok(y.into_dyn())
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("dense backward before forward");
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        {
            let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(1.0, &x.t(), &g, 1.0, &mut dw);
        }
        self.bias.grad += &g.sum_axis(Axis(0)).into_dyn();
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        g.dot(&w.t()).into_dyn()
    }
}

/// 2-D convolution over NCHW batches, computed as im2col followed by GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out_channels, in_channels, k, k]`
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    pub(crate) input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let rf = kernel * kernel;
        let w = glorot_uniform(&[out_ch, in_ch, kernel, kernel], in_ch * rf, out_ch * rf, rng);
        Self::from_weights(w, Tensor::zeros(vec![out_ch]), stride, pad)
    }

    pub fn from_weights(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Self {
        assert_eq!(weight.ndim(), 4);
        assert_eq!(weight.shape()[2], weight.shape()[3], "square kernels only");
        assert!(stride >= 1);
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            pad,
            input: None,
        }
    }

    fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(Error::validation(format!(
                "conv input {h}x{w} smaller than kernel {k}"
            )));
        }
        Ok((
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.pad == 0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        let s = self.weight.value.shape();
        let (co, cols) = (s[0], s[1] * s[2] * s[3]);
        ArrayView2::from_shape((co, cols), self.weight.value.as_slice().unwrap()).unwrap()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "conv2d")?;
        let (n, c, h, w) = dims4(x);
        let ws = self.weight.value.shape().to_vec();
        if c != ws[1] {
            return Err(Error::validation(format!(
                "conv2d expects {} input channels, got {c}",
                ws[1]
            )));
        }
        let (ho, wo) = self.out_hw(h, w)?;
        let x = x.as_standard_layout().into_owned();
        let xs = x.as_slice().unwrap();
        let (co, k) = (ws[0], ws[2]);
        let rows = c * k * k;
        let mut out = Tensor::zeros(vec![n, co, ho, wo]);
        let mut cols = vec![0f32; if self.is_pointwise() { 0 } else { rows * ho * wo }];
        let wm = self.weight_matrix();
        let bias = self.bias.value.as_slice().unwrap();
        {
            let os = out.as_slice_mut().unwrap();
            for i in 0..n {
                let xi = &xs[i * c * h * w..(i + 1) * c * h * w];
                let colv = if self.is_pointwise() {
                    ArrayView2::from_shape((c, h * w), xi).unwrap()
                } else {
                    im2col(xi, c, h, w, k, self.stride, self.pad, ho, wo, &mut cols);
                    ArrayView2::from_shape((rows, ho * wo), &cols[..]).unwrap()
                };
                let oi = &mut os[i * co * ho * wo..(i + 1) * co * ho * wo];
                for (ch, chunk) in oi.chunks_mut(ho * wo).enumerate() {
                    chunk.fill(bias[ch]);
                }
                let mut ov = ArrayViewMut2::from_shape((co, ho * wo), oi).unwrap();
                general_mat_mul(1.0, &wm, &colv, 1.0, &mut ov);
            }
        }
        self.input = Some(x);
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv2d backward before forward");
        let (n, c, h, w) = dims4(&x);
        let ws = self.weight.value.shape().to_vec();
        let (co, k) = (ws[0], ws[2]);
        let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
        let rows = c * k * k;
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().unwrap();
        let xs = x.as_slice().unwrap();
        let pointwise = self.is_pointwise();
        let mut dx = Tensor::zeros(x.raw_dim());
        let mut cols = vec![0f32; if pointwise { 0 } else { rows * ho * wo }];
        let mut dcols = vec![0f32; rows * ho * wo];
        let wm = self.weight_matrix().to_owned();
        let mut dw = Array2::<f32>::zeros((co, rows));
        let db = self.bias.grad.as_slice_mut().unwrap();
        {
            let dxs = dx.as_slice_mut().unwrap();
            for i in 0..n {
                let gi = &gs[i * co * ho * wo..(i + 1) * co * ho * wo];
                for (ch, chunk) in gi.chunks(ho * wo).enumerate() {
                    db[ch] += chunk.iter().sum::<f32>();
                }
                let gv = ArrayView2::from_shape((co, ho * wo), gi).unwrap();
                let xi = &xs[i * c * h * w..(i + 1) * c * h * w];
                let colv = if pointwise {
                    ArrayView2::from_shape((c, h * w), xi).unwrap()
                } else {
                    im2col(xi, c, h, w, k, self.stride, self.pad, ho, wo, &mut cols);
                    ArrayView2::from_shape((rows, ho * wo), &cols[..]).unwrap()
                };
                general_mat_mul(1.0, &gv, &colv.t(), 1.0, &mut dw);
                let dxi = &mut dxs[i * c * h * w..(i + 1) * c * h * w];
                if pointwise {
                    let mut dv = ArrayViewMut2::from_shape((c, h * w), dxi).unwrap();
                    general_mat_mul(1.0, &wm.t(), &gv, 0.0, &mut dv);
                } else {
                    let mut dv = ArrayViewMut2::from_shape((rows, ho * wo), &mut dcols[..]).unwrap();
                    general_mat_mul(1.0, &wm.t(), &gv, 0.0, &mut dv);
                    col2im(&dcols, c, h, w, k, self.stride, self.pad, ho, wo, dxi);
                }
            }
        }
        let wg = self.weight.grad.as_slice_mut().unwrap();
        for (a, b) in wg.iter_mut().zip(dw.iter()) {
            *a += *b;
        }
        self.input = Some(x);
        dx
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let plane = ho * wo;
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let plane = ho * wo;
    for ch in 0..c {
        let dc = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let d = &mut dc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            d[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel 2-D convolution (stride 1), the spatial half of a separable convolution.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    /// `[channels, k, k]`
    pub weight: Param,
    pub bias: Param,
    pub pad: usize,
    pub(crate) input: Option<Tensor>,
}

impl DepthwiseConv2d {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, rng: &mut R) -> Self {
        let rf = kernel * kernel;
        let w = glorot_uniform(&[channels, kernel, kernel], rf, rf, rng);
        Self {
            weight: Param::new(w),
            bias: Param::new(Tensor::zeros(vec![channels])),
            pad: kernel / 2,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "depthwise conv")?;
        let (n, c, h, w) = dims4(x);
        let k = self.weight.value.shape()[1];
        if c != self.weight.value.shape()[0] {
            return Err(Error::validation(format!(
                "depthwise conv expects {} channels, got {c}",
                self.weight.value.shape()[0]
            )));
        }
        let (p, ho, wo) = (self.pad as isize, h + 2 * self.pad + 1 - k, w + 2 * self.pad + 1 - k);
        let x = x.as_standard_layout().into_owned();
        let xs = x.as_slice().unwrap();
        let ws = self.weight.value.as_slice().unwrap();
        let bs = self.bias.value.as_slice().unwrap();
        let mut out = Tensor::zeros(vec![n, c, ho, wo]);
        let os = out.as_slice_mut().unwrap();
        for plane in 0..n * c {
            let ch = plane % c;
            let xp = &xs[plane * h * w..(plane + 1) * h * w];
            let op = &mut os[plane * ho * wo..(plane + 1) * ho * wo];
            op.fill(bs[ch]);
            let kw = &ws[ch * k * k..(ch + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kw[ky * k + kx];
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xp[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut op[oy * wo..(oy + 1) * wo];
                        let lo = (p - kx as isize).max(0) as usize;
                        let hi = ((w as isize + p - kx as isize).min(wo as isize)).max(0) as usize;
                        for ox in lo..hi {
                            orow[ox] += wv * row[(ox as isize + kx as isize - p) as usize];
                        }
                    }
                }
            }
        }
        self.input = Some(x);
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("depthwise backward before forward");
        let (n, c, h, w) = dims4(&x);
        let k = self.weight.value.shape()[1];
        let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
        let p = self.pad as isize;
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().unwrap();
        let xs = x.as_slice().unwrap();
        let ws = self.weight.value.as_slice().unwrap();
        let dws = self.weight.grad.as_slice_mut().unwrap();
        let dbs = self.bias.grad.as_slice_mut().unwrap();
        let mut dx = Tensor::zeros(x.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();
        for plane in 0..n * c {
            let ch = plane % c;
            let xp = &xs[plane * h * w..(plane + 1) * h * w];
            let gp = &gs[plane * ho * wo..(plane + 1) * ho * wo];
            let dxp = &mut dxs[plane * h * w..(plane + 1) * h * w];
            dbs[ch] += gp.iter().sum::<f32>();
            for ky in 0..k {
                for kx in 0..k {
                    let wv = ws[ch * k * k + ky * k + kx];
                    let mut acc = 0f32;
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        let lo = (p - kx as isize).max(0) as usize;
                        let hi = ((w as isize + p - kx as isize).min(wo as isize)).max(0) as usize;
                        for ox in lo..hi {
                            let ix = (ox as isize + kx as isize - p) as usize;
                            let g = gp[oy * wo + ox];
                            acc += g * xp[base + ix];
                            dxp[base + ix] += g * wv;
                        }
                    }
                    dws[ch * k * k + ky * k + kx] += acc;
                }
            }
        }
        self.input = Some(x);
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    mode: Mode,
}

/// Batch normalisation over the channel axis (axis 1) of `[N, C]` or `[N, C, H, W]` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
    pub(crate) cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(vec![channels])),
            beta: Param::new(Tensor::zeros(vec![channels])),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            momentum: 0.99,
            eps: 1e-3,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// (batch, channels, spatial) view of the layout.
    fn layout(x: &Tensor) -> (usize, usize, usize) {
        let s = x.shape();
        (s[0], s[1], s[2..].iter().product())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if !(x.ndim() == 2 || x.ndim() == 4) || x.shape()[1] != self.channels() {
            return Err(Error::validation(format!(
                "batch norm over {} channels got shape {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let (n, c, s) = Self::layout(x);
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let count = (n * s) as f64;
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            Mode::Train => (0..c)
                .map(|ch| {
                    let mut sum = 0f64;
                    let mut sq = 0f64;
                    for i in 0..n {
                        for &v in &xs[(i * c + ch) * s..(i * c + ch + 1) * s] {
                            sum += v as f64;
                            sq += v as f64 * v as f64;
                        }
                    }
                    let m = sum / count;
                    ((m) as f32, (sq / count - m * m).max(0.0) as f32)
                })
                .unzip(),
            Mode::Infer => (
                self.running_mean.iter().copied().collect(),
                self.running_var.iter().copied().collect(),
            ),
        };
        if mode == Mode::Train {
            let m = self.momentum;
            for ch in 0..c {
                self.running_mean[[ch]] = m * self.running_mean[[ch]] + (1.0 - m) * mean[ch];
                self.running_var[[ch]] = m * self.running_var[[ch]] + (1.0 - m) * var[ch];
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.raw_dim());
        let mut y = Tensor::zeros(x.raw_dim());
        {
            let hs = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            let g = self.gamma.value.as_slice().unwrap();
            let b = self.beta.value.as_slice().unwrap();
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                    for j in r {
                        let v = (xs[j] - mean[ch]) * inv_std[ch];
                        hs[j] = v;
                        ys[j] = g[ch] * v + b[ch];
                    }
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            mode,
        });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("batch norm backward before forward");
        let (n, c, s) = Self::layout(grad);
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().unwrap();
        let hs = cache.xhat.as_slice().unwrap();
        let gamma = self.gamma.value.as_slice().unwrap();
        let mut dx = Tensor::zeros(cache.xhat.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();
        let m = (n * s) as f32;
        for ch in 0..c {
            let mut sum_g = 0f32;
            let mut sum_gh = 0f32;
            for i in 0..n {
                for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                    sum_g += gs[j];
                    sum_gh += gs[j] * hs[j];
                }
            }
            self.gamma.grad[[ch]] += sum_gh;
            self.beta.grad[[ch]] += sum_g;
            let scale = gamma[ch] * cache.inv_std[ch];
            for i in 0..n {
                for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                    dxs[j] = match cache.mode {
                        Mode::Train => scale * (gs[j] - sum_g / m - hs[j] * sum_gh / m),
                        Mode::Infer => scale * gs[j],
                    };
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    pub(crate) mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.mapv(|v| v.max(0.0));
        self.mask = Some(x.iter().map(|&v| v > 0.0).collect());
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mask = self.mask.as_ref().expect("relu backward before forward");
        let mut g = grad.as_standard_layout().into_owned();
        for (v, &m) in g.iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output side `ceil(in / stride)`, padding split as evenly as possible.
    Same,
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub(crate) argmax: Option<(Vec<u32>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kernel,
            stride,
            padding,
            argmax: None,
        }
    }

    fn geometry(&self, side: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Valid => {
                if side < self.kernel {
                    return Err(Error::validation(format!(
                        "max pool kernel {} exceeds input side {side}",
                        self.kernel
                    )));
                }
                Ok(((side - self.kernel) / self.stride + 1, 0))
            }
            Padding::Same => {
                let out = side.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + self.kernel).saturating_sub(side);
                Ok((out, total / 2))
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "max pool")?;
        let (n, c, h, w) = dims4(x);
        let (ho, pt) = self.geometry(h)?;
        let (wo, pl) = self.geometry(w)?;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = Tensor::zeros(vec![n, c, ho, wo]);
        let os = out.as_slice_mut().unwrap();
        let mut arg = vec![0u32; n * c * ho * wo];
        for plane in 0..n * c {
            let xp = &xs[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0usize;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - pl as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if xp[idx] > best {
                                best = xp[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    os[o] = best;
                    arg[o] = bi as u32;
                }
            }
        }
        self.argmax = Some((arg, x.shape().to_vec()));
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (arg, shape) = self.argmax.as_ref().expect("max pool backward before forward");
        let (h, w) = (shape[2], shape[3]);
        let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().unwrap();
        let mut dx = Tensor::zeros(shape.clone());
        let dxs = dx.as_slice_mut().unwrap();
        for (o, g) in gs.iter().enumerate() {
            let plane = o / (ho * wo);
            dxs[plane * h * w + arg[o] as usize] += g;
        }
        dx
    }
}

/// Non-overlapping `k x k` mean pooling, used to downsample raw inputs cheaply.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub kernel: usize,
    pub(crate) in_shape: Option<Vec<usize>>,
}

impl AvgPool2d {
    pub fn new(kernel: usize) -> Self {
        Self {
            kernel,
            in_shape: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "avg pool")?;
        let (n, c, h, w) = dims4(x);
        let k = self.kernel;
        let (ho, wo) = (h / k, w / k);
        if ho == 0 || wo == 0 {
            return Err(Error::validation("avg pool kernel exceeds input"));
        }
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = Tensor::zeros(vec![n, c, ho, wo]);
        let os = out.as_slice_mut().unwrap();
        let inv = 1.0 / (k * k) as f32;
        for plane in 0..n * c {
            let xp = &xs[plane * h * w..(plane + 1) * h * w];
            let op = &mut os[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho * k {
                let row = &xp[y * w..y * w + wo * k];
                let orow = &mut op[(y / k) * wo..(y / k + 1) * wo];
                for (x_, v) in row.iter().enumerate() {
                    orow[x_ / k] += v * inv;
                }
            }
        }
        self.in_shape = Some(x.shape().to_vec());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.in_shape.as_ref().expect("avg pool backward before forward");
        let (h, w) = (shape[2], shape[3]);
        let k = self.kernel;
        let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().unwrap();
        let inv = 1.0 / (k * k) as f32;
        let mut dx = Tensor::zeros(shape.clone());
        let dxs = dx.as_slice_mut().unwrap();
        let planes = shape[0] * shape[1];
        for plane in 0..planes {
            let gp = &gs[plane * ho * wo..(plane + 1) * ho * wo];
            let dp = &mut dxs[plane * h * w..(plane + 1) * h * w];
            for y in 0..ho * k {
                for x_ in 0..wo * k {
                    dp[y * w + x_] = gp[(y / k) * wo + x_ / k] * inv;
                }
            }
        }
        dx
    }
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    pub(crate) in_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "global average pool")?;
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x4.dim();
        let inv = 1.0 / (h * w) as f32;
        let out = Array2::from_shape_fn((n, c), |(i, ch)| {
            x4.slice(ndarray::s![i, ch, .., ..]).sum() * inv
        });
        self.in_shape = Some(x.shape().to_vec());
        Ok(out.into_dyn())
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.in_shape.as_ref().expect("global pool backward before forward");
        let inv = 1.0 / (shape[2] * shape[3]) as f32;
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        Tensor::from_shape_fn(shape.clone(), |idx| g[[idx[0], idx[1]]] * inv)
    }
}

/// `main(x) + skip(x)`, with the identity when `skip` is absent.
#[derive(Debug, Clone)]
pub struct Residual {
    pub main: Sequential,
    pub skip: Option<Sequential>,
}

impl Residual {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let a = self.main.forward(x, mode)?;
        let b = match self.skip.as_mut() {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        if a.shape() != b.shape() {
            return Err(Error::validation(format!(
                "residual branches disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(a + b)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let da = self.main.backward(grad);
        let db = match self.skip.as_mut() {
            Some(s) => s.backward(grad),
            None => grad.clone(),
        };
        da + db
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use crate::nn::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_shape_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Layer::Dense(Dense::new(5, 4, &mut rng));
        check_layer(l, rand_tensor(&[3, 5], &mut rng), Mode::Train, 1e-2);
    }

    #[test]
    fn conv_gradients_strided_and_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Layer::Conv2d(Conv2d::new(2, 3, 3, 2, 1, &mut rng));
        check_layer(l, rand_tensor(&[2, 2, 7, 6], &mut rng), Mode::Train, 1e-2);
        let l = Layer::Conv2d(Conv2d::new(3, 2, 1, 1, 0, &mut rng));
        check_layer(l, rand_tensor(&[2, 3, 4, 4], &mut rng), Mode::Train, 1e-2);
    }

    #[test]
    fn depthwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Layer::Depthwise(DepthwiseConv2d::new(3, 3, &mut rng));
        check_layer(l, rand_tensor(&[2, 3, 5, 6], &mut rng), Mode::Train, 1e-2);
    }

    #[test]
    fn batchnorm_gradients_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm::new(3);
        bn.gamma.value = rand_tensor(&[3], &mut rng);
        check_layer(Layer::BatchNorm(bn.clone()), rand_tensor(&[6, 3], &mut rng), Mode::Infer, 1e-2);
        // Training mode mutates running statistics but not the output path.
        check_layer(Layer::BatchNorm(bn), rand_tensor(&[4, 3, 2, 2], &mut rng), Mode::Train, 2e-2);
    }

    #[test]
    fn pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_layer(
            Layer::MaxPool(MaxPool2d::new(3, 2, Padding::Same)),
            rand_tensor(&[1, 2, 5, 6], &mut rng),
            Mode::Train,
            1e-2,
        );
        check_layer(
            Layer::AvgPool(AvgPool2d::new(2)),
            rand_tensor(&[2, 1, 4, 6], &mut rng),
            Mode::Train,
            1e-2,
        );
        check_layer(
            Layer::GlobalAvgPool(GlobalAvgPool::default()),
            rand_tensor(&[2, 3, 3, 2], &mut rng),
            Mode::Train,
            1e-2,
        );
    }

    #[test]
    fn residual_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let main = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(2, 2, 3, 1, 1, &mut rng)),
            Layer::BatchNorm(BatchNorm::new(2)),
        ]);
        let l = Layer::Residual(Box::new(Residual { main, skip: None }));
        check_layer(l, rand_tensor(&[2, 2, 4, 4], &mut rng), Mode::Infer, 1e-2);
    }

    #[test]
    fn same_padding_geometry() {
        let mut p = MaxPool2d::new(3, 2, Padding::Same);
        let y = p.forward(&Tensor::zeros(vec![1, 1, 7, 8])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, &mut rng);
        let x = rand_tensor(&[1, 2, 4, 5], &mut rng);
        let y = conv.forward(&x).unwrap();
        let w = &conv.weight.value;
        for co in 0..3 {
            for oy in 0..4 {
                for ox in 0..5 {
                    let mut acc = 0f32;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if iy >= 0 && iy < 4 && ix >= 0 && ix < 5 {
                                    acc += w[[co, ci, ky, kx]] * x[[0, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[0, co, oy, ox]]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut d = Dense::new(3, 2, &mut rng);
        assert!(matches!(d.forward(&Tensor::zeros(vec![2, 4])), Err(Error::Validation(_))));
        let mut c = Conv2d::new(3, 2, 3, 1, 1, &mut rng);
        assert!(c.forward(&Tensor::zeros(vec![1, 1, 4, 4])).is_err());
    }
}
