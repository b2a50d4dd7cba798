//! Dense rank-3 tensors and the forward-pass kernels used by the classifier.
//!
//! Everything here is a pure function of its inputs. Accumulation happens in
//! `f32` with a fixed loop order so that results are bitwise reproducible:
//! for every output element the sum starts at the bias and then adds
//! `weight * input` terms in (in-channel, kernel row, kernel column) order.
//! Zero-padded taps contribute an explicit `weight * 0.0` term.

use thiserror::Error;

/// Spatial size of every convolution kernel.
pub const KERNEL: usize = 3;
const KERNEL_AREA: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Mismatch { expected: String, actual: String },
    #[error("degenerate convolution output for input {height}x{width} (stride {stride}, pad {pad})")]
    DegenerateOutput {
        height: usize,
        width: usize,
        stride: usize,
        pad: usize,
    },
}

fn mismatch(expected: impl ToString, actual: impl ToString) -> ShapeError {
    ShapeError::Mismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

/// Tensor dimensions, channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.channels, self.height, self.width)
    }
}

/// Dense `channels x height x width` array of `f32`, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self, ShapeError> {
        if data.len() != shape.len() {
            return Err(mismatch(
                format!("{} elements for shape {shape}", shape.len()),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Borrowed 3x3 convolution parameters.
///
/// `kernel` is laid out `[out][in][row][col]`, `bias` has one entry per output channel.
#[derive(Debug, Clone, Copy)]
pub struct ConvWeights<'a> {
    out_channels: usize,
    in_channels: usize,
    kernel: &'a [f32],
    bias: &'a [f32],
}

impl<'a> ConvWeights<'a> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: &'a [f32],
        bias: &'a [f32],
    ) -> Result<Self, ShapeError> {
        let expected = out_channels * in_channels * KERNEL_AREA;
        if kernel.len() != expected {
            return Err(mismatch(
                format!("{expected} kernel weights"),
                format!("{}", kernel.len()),
            ));
        }
        if bias.len() != out_channels {
            return Err(mismatch(
                format!("{out_channels} biases"),
                format!("{}", bias.len()),
            ));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> &'a [f32] {
        self.kernel
    }

    pub fn bias(&self) -> &'a [f32] {
        self.bias
    }

    fn weight(&self, oc: usize, ic: usize, kr: usize, kc: usize) -> f32 {
        self.kernel[((oc * self.in_channels + ic) * KERNEL + kr) * KERNEL + kc]
    }
}

/// Output spatial extent of a 3x3 convolution, or `None` when it would be empty.
pub fn conv_output_dim(input: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < KERNEL {
        return None;
    }
    Some((padded - KERNEL) / stride + 1)
}

/// 3x3 cross-correlation with zero padding.
pub fn conv2d_forward(
    input: &Tensor,
    w: &ConvWeights<'_>,
    stride: usize,
    pad: usize,
) -> Result<Tensor, ShapeError> {
    let shape = input.shape();
    if shape.channels != w.in_channels {
        return Err(mismatch(
            format!("{} input channels", w.in_channels),
            format!("{} input channels", shape.channels),
        ));
    }
    let degenerate = || ShapeError::DegenerateOutput {
        height: shape.height,
        width: shape.width,
        stride,
        pad,
    };
    let out_h = conv_output_dim(shape.height, stride, pad).ok_or_else(degenerate)?;
    let out_w = conv_output_dim(shape.width, stride, pad).ok_or_else(degenerate)?;

    let out_shape = Shape::new(w.out_channels, out_h, out_w);
    let plane = out_shape.plane();
    let mut out = Vec::with_capacity(out_shape.len());
    for &b in w.bias {
        out.extend(std::iter::repeat(b).take(plane));
    }

    // One gathered tap plane per (in-channel, kernel row, kernel col), reused by
    // every output channel. Visiting taps in that order keeps the per-element
    // summation order of the naive loop nest.
    let mut tap = vec![0.0f32; plane];
    for ic in 0..w.in_channels {
        let src = input.channel(ic);
        for kr in 0..KERNEL {
            for kc in 0..KERNEL {
                gather_tap(src, shape, kr, kc, stride, pad, out_h, out_w, &mut tap);
                for (oc, dst) in out.chunks_exact_mut(plane).enumerate() {
                    let wv = w.weight(oc, ic, kr, kc);
                    for (acc, &x) in dst.iter_mut().zip(&tap) {
                        *acc += wv * x;
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

#[allow(clippy::too_many_arguments)]
fn gather_tap(
    src: &[f32],
    shape: Shape,
    kr: usize,
    kc: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    tap: &mut [f32],
) {
    for oy in 0..out_h {
        let row = &mut tap[oy * out_w..(oy + 1) * out_w];
        let iy = (oy * stride + kr) as isize - pad as isize;
        if iy < 0 || iy as usize >= shape.height {
            row.fill(0.0);
            continue;
        }
        let line = &src[iy as usize * shape.width..(iy as usize + 1) * shape.width];
        for (ox, slot) in row.iter_mut().enumerate() {
            let ix = (ox * stride + kc) as isize - pad as isize;
            *slot = if ix < 0 || ix as usize >= shape.width {
                0.0
            } else {
                line[ix as usize]
            };
        }
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    relu_in_place(out.data_mut());
    out
}

pub fn relu_in_place(values: &mut [f32]) {
    for v in values {
        *v = v.max(0.0);
    }
}

pub const SELU_LAMBDA: f32 = 1.050_700_98;
pub const SELU_ALPHA: f32 = 1.673_263_24;

pub fn selu_scalar(x: f32) -> f32 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * (SELU_ALPHA * libm::expm1f(x))
    }
}

pub fn selu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| selu_scalar(v)).collect()
}

pub fn selu_in_place(values: &mut [f32]) {
    for v in values {
        *v = selu_scalar(*v);
    }
}

/// Borrowed fully connected layer; `weights` is `[out][in]` row-major.
#[derive(Debug, Clone, Copy)]
pub struct DenseWeights<'a> {
    outputs: usize,
    inputs: usize,
    weights: &'a [f32],
    bias: &'a [f32],
}

impl<'a> DenseWeights<'a> {
    pub fn new(
        outputs: usize,
        inputs: usize,
        weights: &'a [f32],
        bias: &'a [f32],
    ) -> Result<Self, ShapeError> {
        if weights.len() != outputs * inputs {
            return Err(mismatch(
                format!("{} dense weights", outputs * inputs),
                format!("{}", weights.len()),
            ));
        }
        if bias.len() != outputs {
            return Err(mismatch(
                format!("{outputs} biases"),
                format!("{}", bias.len()),
            ));
        }
        Ok(Self {
            outputs,
            inputs,
            weights,
            bias,
        })
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }
}

/// `out_i = bias_i + sum_j weights_ij * x_j`, summed in ascending `j`.
pub fn dense_forward(x: &[f32], layer: &DenseWeights<'_>) -> Result<Vec<f32>, ShapeError> {
    if x.len() != layer.inputs {
        return Err(mismatch(
            format!("input of length {}", layer.inputs),
            format!("length {}", x.len()),
        ));
    }
    Ok(layer
        .weights
        .chunks_exact(layer.inputs)
        .zip(layer.bias)
        .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v))
        .collect())
}

pub fn flatten(t: &Tensor) -> Vec<f32> {
    t.data.clone()
}

pub fn reshape(values: Vec<f32>, shape: Shape) -> Result<Tensor, ShapeError> {
    Tensor::from_vec(shape, values)
}
