//! Layer kinds with explicit forward/backward kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, RngStream, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected; weight stored `inputs × outputs`. Flattens any
    /// trailing input dimensions.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// 2-D convolution; kernel stored `d × d × S × T`.
    Conv2d {
        in_maps: usize,
        out_maps: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    /// Softmax followed by mean cross-entropy. Must be the last layer.
    SoftmaxCe,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Parameter shapes `[weight, bias]`, empty for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            LayerSpec::Conv2d {
                in_maps,
                out_maps,
                kernel,
                ..
            } => vec![vec![kernel, kernel, in_maps, out_maps], vec![out_maps]],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_maps, kernel, ..
            } => in_maps * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(Error::dim(format!(
                        "dense layer expects {inputs} inputs, got shape {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_maps,
                out_maps,
                kernel,
                stride,
                padding,
            } => {
                let &[s, h, w] = input else {
                    return Err(Error::dim(format!(
                        "conv2d expects S×H×W input, got {input:?}"
                    )));
                };
                if s != in_maps {
                    return Err(Error::dim(format!(
                        "conv2d expects {in_maps} maps, got {s}"
                    )));
                }
                let (oh, ow) = conv_out_dims(h, w, kernel, stride, padding)?;
                Ok(vec![out_maps, oh, ow])
            }
            LayerSpec::MaxPool { window, stride } => {
                let &[c, h, w] = input else {
                    return Err(Error::dim(format!(
                        "maxpool expects C×H×W input, got {input:?}"
                    )));
                };
                let (oh, ow) = conv_out_dims(h, w, window, stride, 0)?;
                Ok(vec![c, oh, ow])
            }
            LayerSpec::Relu | LayerSpec::SoftmaxCe => Ok(input.to_vec()),
        }
    }
}

fn conv_out_dims(
    h: usize,
    w: usize,
    d: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 || d == 0 {
        return Err(Error::param("kernel and stride must be positive"));
    }
    if h + 2 * pad < d || w + 2 * pad < d {
        return Err(Error::dim(format!(
            "kernel {d} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok((
        (h + 2 * pad - d) / stride + 1,
        (w + 2 * pad - d) / stride + 1,
    ))
}

/// Geometry of one im2col lowering.
#[derive(Clone, Copy, Debug)]
struct Lowering {
    maps: usize,
    h: usize,
    w: usize,
    d: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Lowering {
    fn new(maps: usize, h: usize, w: usize, d: usize, stride: usize, pad: usize) -> Result<Self> {
        let (oh, ow) = conv_out_dims(h, w, d, stride, pad)?;
        Ok(Lowering {
            maps,
            h,
            w,
            d,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.maps * self.d * self.d
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Writes the receptive fields of one `maps×h×w` sample into columns
    /// `[col0, col0 + positions)` of a row-major buffer `width` wide.
    fn im2col_into(&self, input: &[f64], out: &mut [f64], width: usize, col0: usize) {
        let (d, h, w) = (self.d, self.h as isize, self.w as isize);
        for s in 0..self.maps {
            let plane = &input[s * self.h * self.w..(s + 1) * self.h * self.w];
            for ki in 0..d {
                for kj in 0..d {
                    let row = (s * d + ki) * d + kj;
                    let dst = &mut out[row * width + col0..row * width + col0 + self.positions()];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                plane[(iy * w + ix) as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col_into`: accumulates column gradients back into a sample.
    fn col2im_add(&self, cols: &[f64], width: usize, col0: usize, grad: &mut [f64]) {
        let (d, h, w) = (self.d, self.h as isize, self.w as isize);
        for s in 0..self.maps {
            let plane = &mut grad[s * self.h * self.w..(s + 1) * self.h * self.w];
            for ki in 0..d {
                for kj in 0..d {
                    let row = (s * d + ki) * d + kj;
                    let src = &cols[row * width + col0..row * width + col0 + self.positions()];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w {
                                plane[(iy * w + ix) as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lowers one `S×H×W` input to its `(S·d·d) × (H'·W')` patch matrix.
/// Column `j` is the receptive field of output position `j` in `(s, ki, kj)`
/// order, so convolution becomes `reshaped_kernel(T × S·d·d) · columns`.
pub fn im2col(input: &Tensor, d: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let &[s, h, w] = input.shape() else {
        return Err(Error::dim(format!(
            "im2col expects S×H×W, got {:?}",
            input.shape()
        )));
    };
    let low = Lowering::new(s, h, w, d, stride, padding)?;
    let width = low.positions();
    let mut out = vec![0.0; low.rows() * width];
    low.im2col_into(input.data(), &mut out, width, 0);
    Tensor::new(vec![low.rows(), width], out)
}

/// Reshapes a `d×d×S×T` kernel into its lowered `T × (S·d·d)` matrix.
pub fn lower_kernel(kernel: &Tensor) -> Result<Tensor> {
    let &[d, d2, s, t] = kernel.shape() else {
        return Err(Error::dim(format!(
            "expected d×d×S×T kernel, got {:?}",
            kernel.shape()
        )));
    };
    if d != d2 {
        return Err(Error::dim("kernel must be square"));
    }
    let k = kernel.data();
    let cols = s * d * d;
    let mut out = vec![0.0; t * cols];
    for ki in 0..d {
        for kj in 0..d {
            for si in 0..s {
                for ti in 0..t {
                    out[ti * cols + (si * d + ki) * d + kj] = k[((ki * d + kj) * s + si) * t + ti];
                }
            }
        }
    }
    Tensor::new(vec![t, cols], out)
}

/// Inverse of [`lower_kernel`].
pub fn unlower_kernel(lowered: &Tensor, d: usize) -> Result<Tensor> {
    let (t, cols) = lowered.dims2()?;
    if d == 0 || cols % (d * d) != 0 {
        return Err(Error::dim("lowered kernel width is not a multiple of d²"));
    }
    let s = cols / (d * d);
    let l = lowered.data();
    let mut out = vec![0.0; d * d * s * t];
    for ki in 0..d {
        for kj in 0..d {
            for si in 0..s {
                for ti in 0..t {
                    out[((ki * d + kj) * s + si) * t + ti] = l[ti * cols + (si * d + ki) * d + kj];
                }
            }
        }
    }
    Tensor::new(vec![d, d, s, t], out)
}

/// Values a layer keeps from forward for use in backward.
#[derive(Clone, Debug, Default)]
pub(crate) enum Cache {
    #[default]
    Empty,
    Dense {
        input: Tensor,
    },
    Conv {
        cols: Vec<f64>,
        lowered: Tensor,
        input_shape: Vec<usize>,
    },
    Relu {
        mask: Vec<bool>,
    },
    Pool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Loss {
        dlogits: Tensor,
    },
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    /// `[weight, bias]` for parameterised layers.
    pub params: Vec<Tensor>,
    pub grads: Vec<Tensor>,
    pub(crate) cache: Cache,
}

impl Layer {
    /// He-uniform weights, zero biases.
    pub fn new(name: impl Into<String>, spec: LayerSpec, rng: &mut RngStream) -> Layer {
        let shapes = spec.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        if let Some(wshape) = shapes.first() {
            let limit = (6.0 / spec.fan_in() as f64).sqrt();
            let n: usize = wshape.iter().product();
            let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
            params.push(Tensor::new(wshape.clone(), data).expect("weight shape"));
            params.push(Tensor::zeros(&shapes[1]));
        }
        let grads = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Layer {
            name: name.into(),
            spec,
            params,
            grads,
            cache: Cache::Empty,
        }
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.params.first()
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        self.params.first_mut()
    }

    /// Forward over a batch `N × per-sample shape`.
    pub(crate) fn forward(&mut self, x: &Tensor, keep: bool) -> Result<Tensor> {
        let n = x.shape()[0];
        match self.spec.clone() {
            LayerSpec::Dense { inputs, outputs } => {
                let per: usize = x.shape()[1..].iter().product();
                if per != inputs {
                    return Err(Error::dim(format!(
                        "{}: expects {inputs} inputs per sample, got {per}",
                        self.name
                    )));
                }
                let mut y = vec![0.0; n * outputs];
                let b = self.params[1].data();
                for row in y.chunks_exact_mut(outputs) {
                    row.copy_from_slice(b);
                }
                gemm(
                    n,
                    inputs,
                    outputs,
                    1.0,
                    x.data(),
                    false,
                    self.params[0].data(),
                    false,
                    1.0,
                    &mut y,
                );
                if keep {
                    self.cache = Cache::Dense { input: x.clone() };
                }
                Tensor::new(vec![n, outputs], y)
            }
            LayerSpec::Conv2d {
                in_maps,
                out_maps,
                kernel,
                stride,
                padding,
            } => {
                let &[_, s, h, w] = x.shape() else {
                    return Err(Error::dim(format!("{}: expects N×S×H×W input", self.name)));
                };
                if s != in_maps {
                    return Err(Error::dim(format!(
                        "{}: expects {in_maps} input maps, got {s}",
                        self.name
                    )));
                }
                let low = Lowering::new(s, h, w, kernel, stride, padding)?;
                let (rows, p) = (low.rows(), low.positions());
                let width = n * p;
                let mut cols = vec![0.0; rows * width];
                let sample = s * h * w;
                for i in 0..n {
                    low.im2col_into(
                        &x.data()[i * sample..(i + 1) * sample],
                        &mut cols,
                        width,
                        i * p,
                    );
                }
                let lowered = lower_kernel(&self.params[0])?;
                let mut out = vec![0.0; out_maps * width];
                gemm(
                    out_maps,
                    rows,
                    width,
                    1.0,
                    lowered.data(),
                    false,
                    &cols,
                    false,
                    0.0,
                    &mut out,
                );
                let bias = self.params[1].data();
                let mut y = vec![0.0; n * out_maps * p];
                for t in 0..out_maps {
                    for i in 0..n {
                        let src = &out[t * width + i * p..t * width + (i + 1) * p];
                        let dst = &mut y[(i * out_maps + t) * p..(i * out_maps + t + 1) * p];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s + bias[t];
                        }
                    }
                }
                if keep {
                    self.cache = Cache::Conv {
                        cols,
                        lowered,
                        input_shape: x.shape().to_vec(),
                    };
                }
                Tensor::new(vec![n, out_maps, low.oh, low.ow], y)
            }
            LayerSpec::Relu => {
                let y = x.map(|v| v.max(0.0));
                if keep {
                    self.cache = Cache::Relu {
                        mask: x.data().iter().map(|&v| v > 0.0).collect(),
                    };
                }
                Ok(y)
            }
            LayerSpec::MaxPool { window, stride } => {
                let &[_, c, h, w] = x.shape() else {
                    return Err(Error::dim(format!("{}: expects N×C×H×W input", self.name)));
                };
                let (oh, ow) = conv_out_dims(h, w, window, stride, 0)?;
                let mut y = vec![0.0; n * c * oh * ow];
                let mut argmax = vec![0usize; y.len()];
                let xd = x.data();
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = 0;
                            for ky in 0..window {
                                for kx in 0..window {
                                    let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        at = idx;
                                    }
                                }
                            }
                            let o = (plane * oh + oy) * ow + ox;
                            y[o] = best;
                            argmax[o] = at;
                        }
                    }
                }
                if keep {
                    self.cache = Cache::Pool {
                        argmax,
                        input_shape: x.shape().to_vec(),
                    };
                }
                Tensor::new(vec![n, c, oh, ow], y)
            }
            LayerSpec::SoftmaxCe => Err(Error::State(
                "softmax_ce is evaluated through the loss path".into(),
            )),
        }
    }

    /// Backward: accumulates parameter grads (overwriting) and returns the
    /// input gradient when `need_input_grad`.
    pub(crate) fn backward(
        &mut self,
        dy: &Tensor,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let cache = std::mem::take(&mut self.cache);
        match (&self.spec, cache) {
            (&LayerSpec::Dense { inputs, outputs }, Cache::Dense { input }) => {
                let n = input.shape()[0];
                let mut gw = vec![0.0; inputs * outputs];
                gemm(
                    inputs,
                    n,
                    outputs,
                    1.0,
                    input.data(),
                    true,
                    dy.data(),
                    false,
                    0.0,
                    &mut gw,
                );
                let mut gb = vec![0.0; outputs];
                for row in dy.data().chunks_exact(outputs) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                self.grads[0] = Tensor::new(vec![inputs, outputs], gw)?;
                self.grads[1] = Tensor::new(vec![outputs], gb)?;
                if !need_input_grad {
                    return Ok(None);
                }
                let mut dx = vec![0.0; n * inputs];
                gemm(
                    n,
                    outputs,
                    inputs,
                    1.0,
                    dy.data(),
                    false,
                    self.params[0].data(),
                    true,
                    0.0,
                    &mut dx,
                );
                Ok(Some(Tensor::new(input.shape().to_vec(), dx)?))
            }
            (
                &LayerSpec::Conv2d {
                    out_maps,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Cache::Conv {
                    cols,
                    lowered,
                    input_shape,
                },
            ) => {
                let &[n, s, h, w] = input_shape.as_slice() else {
                    unreachable!("conv cache shape");
                };
                let low = Lowering::new(s, h, w, kernel, stride, padding)?;
                let (rows, p) = (low.rows(), low.positions());
                let width = n * p;
                let mut dout = vec![0.0; out_maps * width];
                let mut gb = vec![0.0; out_maps];
                for i in 0..n {
                    for t in 0..out_maps {
                        let src = &dy.data()[(i * out_maps + t) * p..(i * out_maps + t + 1) * p];
                        dout[t * width + i * p..t * width + (i + 1) * p].copy_from_slice(src);
                        gb[t] += src.iter().sum::<f64>();
                    }
                }
                let mut glow = vec![0.0; out_maps * rows];
                gemm(
                    out_maps, width, rows, 1.0, &dout, false, &cols, true, 0.0, &mut glow,
                );
                self.grads[0] = unlower_kernel(&Tensor::new(vec![out_maps, rows], glow)?, kernel)?;
                self.grads[1] = Tensor::new(vec![out_maps], gb)?;
                if !need_input_grad {
                    return Ok(None);
                }
                let mut dcols = vec![0.0; rows * width];
                gemm(
                    rows,
                    out_maps,
                    width,
                    1.0,
                    lowered.data(),
                    true,
                    &dout,
                    false,
                    0.0,
                    &mut dcols,
                );
                let sample = s * h * w;
                let mut dx = vec![0.0; n * sample];
                for i in 0..n {
                    low.col2im_add(&dcols, width, i * p, &mut dx[i * sample..(i + 1) * sample]);
                }
                Ok(Some(Tensor::new(input_shape, dx)?))
            }
            (LayerSpec::Relu, Cache::Relu { mask }) => {
                let mut dx = dy.clone();
                for (g, &m) in dx.data_mut().iter_mut().zip(&mask) {
                    if !m {
                        *g = 0.0;
                    }
                }
                Ok(Some(dx))
            }
            (
                LayerSpec::MaxPool { .. },
                Cache::Pool {
                    argmax,
                    input_shape,
                },
            ) => {
                let mut dx = Tensor::zeros(&input_shape);
                let d = dx.data_mut();
                for (g, &at) in dy.data().iter().zip(&argmax) {
                    d[at] += g;
                }
                Ok(Some(dx))
            }
            _ => Err(Error::State(format!(
                "{}: backward called without a matching forward",
                self.name
            ))),
        }
    }
}

/// Mean softmax cross-entropy over the batch and its logit gradient.
pub(crate) fn softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::dim(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    let mut grad = vec![0.0; n * c];
    let mut loss = 0.0;
    for (i, row) in logits.data().chunks_exact(c).enumerate() {
        let label = labels[i];
        if label >= c {
            return Err(Error::param(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        let g = &mut grad[i * c..(i + 1) * c];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, Tensor::new(vec![n, c], grad)?))
}
