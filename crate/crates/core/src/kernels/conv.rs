//! 3D cross-correlation via im2col + GEMM.
//!
//! Every output element is produced by exactly one GEMM accumulation with a
//! fixed reduction order, so results are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel extents `(k_s, k_h, k_w)`.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    /// Stride-1 cubic kernel with "same" padding.
    pub fn cubic(in_channels: usize, out_channels: usize, k: usize) -> Self {
        let pad = (k - 1) / 2;
        Self {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [1; 3],
            dilation: [1; 3],
            padding: [pad; 3],
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = [stride; 3];
        self
    }

    /// Sets the dilation and rescales "same" padding to keep extents.
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = [dilation; 3];
        for a in 0..3 {
            self.padding[a] = dilation * (self.kernel[a] - 1) / 2;
        }
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Number of weight elements, `Cout * Cin * ks * kh * kw`.
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_volume()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    /// `floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1` per axis.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 || self.dilation[a] == 0 {
                return Err(Error::config(format!(
                    "kernel, stride and dilation must be >= 1, got {self:?}"
                )));
            }
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = input[a] + 2 * self.padding[a];
            if padded < span {
                return Err(Error::config(format!(
                    "conv output extent < 1 on axis {a}: input {input:?}, spec {self:?}"
                )));
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Validates input/weight/bias shapes and returns the output shape.
    pub fn check_shapes(
        &self,
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
    ) -> Result<Vec<usize>> {
        if input.len() != 5 || input[1] != self.in_channels {
            return Err(Error::config(format!(
                "conv3d input shape {input:?} does not match spec with {} input channels",
                self.in_channels
            )));
        }
        if weight != self.weight_shape().as_slice() {
            return Err(Error::config(format!(
                "conv3d weight shape {weight:?} does not match expected {:?} for input {input:?}",
                self.weight_shape()
            )));
        }
        if let Some(b) = bias {
            if b != [self.out_channels] {
                return Err(Error::config(format!(
                    "conv3d bias shape {b:?} does not match {} output channels",
                    self.out_channels
                )));
            }
        }
        let o = self.output_extents([input[2], input[3], input[4]])?;
        Ok(vec![input[0], self.out_channels, o[0], o[1], o[2]])
    }
}

/// Geometry shared by im2col/col2im for one sample.
struct Geometry {
    spec: ConvSpec,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.spec.in_channels * self.spec.kernel_volume()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Valid output range `[lo, hi)` along `axis` for kernel tap `k`, and the
    /// input offset `o * stride + shift` for output index `o`.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize, isize) {
        let stride = self.spec.stride[axis] as isize;
        let shift = (k * self.spec.dilation[axis]) as isize - self.spec.padding[axis] as isize;
        let n_in = self.input[axis] as isize;
        let n_out = self.output[axis] as isize;
        // smallest o with o*stride + shift >= 0
        let lo = if shift >= 0 { 0 } else { (-shift + stride - 1) / stride };
        // largest o with o*stride + shift <= n_in - 1
        let hi = if n_in - 1 - shift < 0 {
            0
        } else {
            ((n_in - 1 - shift) / stride + 1).min(n_out)
        };
        let lo = lo.min(n_out);
        (lo as usize, hi.max(lo) as usize, shift)
    }

    /// Visits every `(row, output-run, input-run)` triple: `len` consecutive
    /// output positions along W starting at `out_off` that read input
    /// positions `in_off + j * stride_w`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [ks, kh, kw] = self.spec.kernel;
        let [_, ih_n, iw_n] = self.input;
        let [_, oh_n, ow_n] = self.output;
        let ow_stride_w = self.spec.stride[2];
        let plane_in = self.input[1] * self.input[2];
        let plane_out = oh_n * ow_n;
        let cols = self.cols();
        for ci in 0..self.spec.in_channels {
            for a in 0..ks {
                let (s_lo, s_hi, s_shift) = self.valid_range(0, a);
                for b in 0..kh {
                    let (h_lo, h_hi, h_shift) = self.valid_range(1, b);
                    for c in 0..kw {
                        let (w_lo, w_hi, w_shift) = self.valid_range(2, c);
                        let row = ((ci * ks + a) * kh + b) * kw + c;
                        if w_lo >= w_hi {
                            continue;
                        }
                        for os in s_lo..s_hi {
                            let is = (os as isize * self.spec.stride[0] as isize + s_shift) as usize;
                            for oh in h_lo..h_hi {
                                let ih =
                                    (oh as isize * self.spec.stride[1] as isize + h_shift) as usize;
                                let iw0 = (w_lo as isize * ow_stride_w as isize + w_shift) as usize;
                                let in_off = ci * self.input[0] * plane_in + is * plane_in + ih * iw_n + iw0;
                                let out_off = row * cols + os * plane_out + oh * ow_n + w_lo;
                                debug_assert!(ih < ih_n);
                                f(row, out_off, in_off, w_hi - w_lo);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(geo: &Geometry, input: &[T], cols: &mut [T]) {
    cols.iter_mut().for_each(|v| *v = T::zero());
    let sw = geo.spec.stride[2];
    geo.for_each_run(|_, out_off, in_off, len| {
        let dst = &mut cols[out_off..out_off + len];
        if sw == 1 {
            dst.copy_from_slice(&input[in_off..in_off + len]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = input[in_off + j * sw];
            }
        }
    });
}

fn col2im<T: Scalar>(geo: &Geometry, cols: &[T], grad_input: &mut [T]) {
    let sw = geo.spec.stride[2];
    geo.for_each_run(|_, out_off, in_off, len| {
        let src = &cols[out_off..out_off + len];
        if sw == 1 {
            for (d, &s) in grad_input[in_off..in_off + len].iter_mut().zip(src) {
                *d = *d + s;
            }
        } else {
            for (j, &s) in src.iter().enumerate() {
                let d = &mut grad_input[in_off + j * sw];
                *d = *d + s;
            }
        }
    });
}

/// Forward pass. `input` is `[N, Cin, S, H, W]`, returns `[N, Cout, S', H', W']` data.
pub fn conv3d_forward<T: Scalar>(
    spec: &ConvSpec,
    input_shape: &[usize],
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Result<(Vec<usize>, Vec<T>)> {
    let bias_shape = [spec.out_channels];
    let out_shape = spec.check_shapes(
        input_shape,
        &spec.weight_shape(),
        bias.map(|_| bias_shape.as_slice()),
    )?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::config(format!(
                "conv3d bias has {} entries, expected {}",
                b.len(),
                spec.out_channels
            )));
        }
    }
    let geo = Geometry {
        spec: *spec,
        input: [input_shape[2], input_shape[3], input_shape[4]],
        output: [out_shape[2], out_shape[3], out_shape[4]],
    };
    let n = input_shape[0];
    let in_len: usize = input_shape[1..].iter().product();
    let out_len: usize = out_shape[1..].iter().product();
    let (rows, cols_n) = (geo.rows(), geo.cols());
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols_n]
    };
    for b in 0..n {
        let x = &input[b * in_len..(b + 1) * in_len];
        let y = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (co, chunk) in y.chunks_mut(cols_n).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if spec.is_pointwise() {
            x
        } else {
            im2col(&geo, x, &mut cols);
            &cols
        };
        gemm(
            spec.out_channels,
            rows,
            cols_n,
            weight,
            Layout::Normal,
            src,
            Layout::Normal,
            beta,
            y,
        );
    }
    Ok((out_shape, out))
}

/// Gradients requested from [`conv3d_backward`].
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Scalar>(
    spec: &ConvSpec,
    input_shape: &[usize],
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let out_shape = spec
        .check_shapes(input_shape, &spec.weight_shape(), None)
        .expect("shapes were validated in forward");
    let geo = Geometry {
        spec: *spec,
        input: [input_shape[2], input_shape[3], input_shape[4]],
        output: [out_shape[2], out_shape[3], out_shape[4]],
    };
    let n = input_shape[0];
    let in_len: usize = input_shape[1..].iter().product();
    let out_len: usize = out_shape[1..].iter().product();
    let (rows, cols_n) = (geo.rows(), geo.cols());
    let cout = spec.out_channels;
    let pointwise = spec.is_pointwise();

    let mut gx = want_input.then(|| vec![T::zero(); n * in_len]);
    let mut gw = want_weight.then(|| vec![T::zero(); weight.len()]);
    let mut gb = want_bias.then(|| vec![T::zero(); cout]);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * cols_n] };
    let mut dcols = if want_input && !pointwise {
        vec![T::zero(); rows * cols_n]
    } else {
        Vec::new()
    };

    for b in 0..n {
        let x = &input[b * in_len..(b + 1) * in_len];
        let dy = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in dy.chunks(cols_n).enumerate() {
                gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let src: &[T] = if pointwise {
                x
            } else {
                im2col(&geo, x, &mut cols);
                &cols
            };
            // dW[Cout, K] += dY[Cout, P] * cols[K, P]^T
            gemm(cout, cols_n, rows, dy, Layout::Normal, src, Layout::Transposed, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * in_len..(b + 1) * in_len];
            if pointwise {
                // dX[Cin, P] = W[Cout, Cin]^T * dY[Cout, P]
                gemm(rows, cout, cols_n, weight, Layout::Transposed, dy, Layout::Normal, T::zero(), gxb);
            } else {
                gemm(rows, cout, cols_n, weight, Layout::Transposed, dy, Layout::Normal, T::zero(), &mut dcols);
                col2im(&geo, &dcols, gxb);
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}
