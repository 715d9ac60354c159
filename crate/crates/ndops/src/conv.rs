//! 2-D/3-D convolution and 3-D transposed convolution (cross-correlation
//! semantics, zero padding) lowered onto im2col + GEMM.

use crate::error::{NdError, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Weights and geometry of one convolution layer.
///
/// `stride`, `padding` and `dilation` hold one entry per spatial dimension
/// (2 for `conv2d`, 3 for `conv3d`/`deconv3d`).
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub kernel: Var,
    pub bias: Option<Var>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub dilation: Vec<usize>,
}

impl ConvParams {
    /// Unit-dilation layer with the same stride and padding on every axis.
    pub fn uniform(kernel: Var, bias: Option<Var>, dims: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, bias, stride: vec![stride; dims], padding: vec![padding; dims], dilation: vec![1; dims] }
    }
}

/// Geometry of a convolution normalised to three spatial axes.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Geometry {
    c_in: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new(
        op: &'static str,
        c_in: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        dil: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || dil[a] == 0 {
                return Err(NdError::dim(op, "stride and dilation must be >= 1"));
            }
            let span = dil[a] * (kernel[a] - 1) + 1;
            let padded = input[a] + 2 * pad[a];
            if padded < span {
                return Err(NdError::dim(
                    op,
                    format!("kernel span {span} exceeds padded extent {padded} on axis {a}"),
                ));
            }
            output[a] = (padded - span) / stride[a] + 1;
        }
        Ok(Self { c_in, input, kernel, stride, pad, dil, output })
    }

    fn k_rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    fn out_pixels(&self) -> usize {
        self.output.iter().product()
    }

    fn in_pixels(&self) -> usize {
        self.input.iter().product()
    }

    /// Input coordinate hit by output position `o` and tap `k` on axis `a`.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[a] + k * self.dil[a]) as isize - self.pad[a] as isize;
        (pos >= 0 && (pos as usize) < self.input[a]).then_some(pos as usize)
    }

    /// Unfolds `x` (`c_in x input`) into a `k_rows x out_pixels` matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let p = self.out_pixels();
        let [od, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let mut cols = vec![T::zero(); self.k_rows() * p];
        let mut row = 0;
        for c in 0..self.c_in {
            let xc = &x[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for kd in 0..self.kernel[0] {
                for kh in 0..self.kernel[1] {
                    for kw in 0..self.kernel[2] {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        for z in 0..od {
                            let Some(sz) = self.source(0, z, kd) else { continue };
                            for y in 0..oh {
                                let Some(sy) = self.source(1, y, kh) else { continue };
                                let src = &xc[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                                let base = (z * oh + y) * ow;
                                for xo in 0..ow {
                                    if let Some(sx) = self.source(2, xo, kw) {
                                        dst[base + xo] = src[sx];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-adds columns back onto the input grid.
    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let p = self.out_pixels();
        let [od, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let mut x = vec![T::zero(); self.c_in * self.in_pixels()];
        let mut row = 0;
        for c in 0..self.c_in {
            let in_px = self.in_pixels();
            let xc = &mut x[c * in_px..(c + 1) * in_px];
            for kd in 0..self.kernel[0] {
                for kh in 0..self.kernel[1] {
                    for kw in 0..self.kernel[2] {
                        let src = &cols[row * p..(row + 1) * p];
                        for z in 0..od {
                            let Some(sz) = self.source(0, z, kd) else { continue };
                            for y in 0..oh {
                                let Some(sy) = self.source(1, y, kh) else { continue };
                                let dst = &mut xc[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                                let base = (z * oh + y) * ow;
                                for xo in 0..ow {
                                    if let Some(sx) = self.source(2, xo, kw) {
                                        dst[sx] += src[base + xo];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        x
    }
}

fn spatial3(v: &[usize], fill: usize) -> [usize; 3] {
    match v {
        [a, b] => [fill, *a, *b],
        [a, b, c] => [*a, *b, *c],
        _ => unreachable!("validated spatial rank"),
    }
}

fn check_param_len(op: &'static str, p: &ConvParams, dims: usize) -> Result<()> {
    if p.stride.len() != dims || p.padding.len() != dims || p.dilation.len() != dims {
        return Err(NdError::dim(op, format!("geometry vectors must have {dims} entries")));
    }
    Ok(())
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&Tensor<T>>, pixels: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(pixels).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Real>(g: &[T], channels: usize, pixels: usize) -> Tensor<T> {
    let sums = g.chunks(pixels).map(|c| c.iter().copied().sum()).collect();
    Tensor::from_vec(&[channels], sums).expect("bias extent")
}

struct ConvRule<T> {
    geo: Geometry,
    c_out: usize,
    cols: Vec<T>,
}

impl<T: Real> Backward<T> for ConvRule<T> {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (k, p, o) = (self.geo.k_rows(), self.geo.out_pixels(), self.c_out);
        let kernel = x[1];
        let dx = needs[0].then(|| {
            let mut dcols = vec![T::zero(); k * p];
            T::gemm(k, o, p, kernel.data(), (1, k as isize), g.data(), (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
            Tensor::from_vec(x[0].shape(), self.geo.col2im(&dcols)).expect("input shape")
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); o * k];
            T::gemm(o, p, k, g.data(), (p as isize, 1), &self.cols, (1, p as isize), T::zero(), &mut dw, (k as isize, 1));
            Tensor::from_vec(kernel.shape(), dw).expect("kernel shape")
        });
        let mut grads = vec![dx, dw];
        if x.len() == 3 {
            grads.push(needs[2].then(|| bias_grad(g.data(), o, p)));
        }
        grads
    }
}

fn conv_nd<T: Real>(tape: &mut Tape<T>, op: &'static str, x: Var, p: &ConvParams, dims: usize) -> Result<Var> {
    check_param_len(op, p, dims)?;
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(p.kernel).to_vec();
    if xs.len() != dims + 1 || ks.len() != dims + 2 {
        return Err(NdError::dim(op, format!("input {xs:?} / kernel {ks:?} rank")));
    }
    if ks[1] != xs[0] {
        return Err(NdError::dim(op, format!("input has {} channels, kernel expects {}", xs[0], ks[1])));
    }
    let c_out = ks[0];
    if let Some(b) = p.bias {
        if tape.shape(b) != [c_out] {
            return Err(NdError::dim(op, format!("bias {:?} for {c_out} outputs", tape.shape(b))));
        }
    }
    let geo = Geometry::new(
        op,
        xs[0],
        spatial3(&xs[1..], 1),
        spatial3(&ks[2..], 1),
        spatial3(&p.stride, 1),
        spatial3(&p.padding, 0),
        spatial3(&p.dilation, 1),
    )?;
    let (k, px) = (geo.k_rows(), geo.out_pixels());
    let cols = geo.im2col(tape.value(x).data());
    let mut out = vec![T::zero(); c_out * px];
    T::gemm(c_out, k, px, tape.value(p.kernel).data(), (k as isize, 1), &cols, (px as isize, 1), T::zero(), &mut out, (px as isize, 1));
    add_bias(&mut out, p.bias.map(|b| tape.value(b)), px);

    let mut shape = vec![c_out];
    shape.extend_from_slice(&geo.output[3 - dims..]);
    let out = Tensor::from_vec(&shape, out)?;
    let macs = (c_out * k * px) as u64;
    if dims == 2 {
        tape.count_macs_2d(macs);
    } else {
        tape.count_macs_3d(macs);
    }
    let mut inputs = vec![x, p.kernel];
    inputs.extend(p.bias);
    let keep_cols = tape.grad_enabled() && tape.requires_grad(p.kernel);
    let rule = ConvRule { geo, c_out, cols: if keep_cols { cols } else { Vec::new() } };
    tape.record(op, &inputs, out, Box::new(rule))
}

/// 2-D convolution of `[C_in, H, W]` by kernel `[C_out, C_in, kh, kw]`.
pub fn conv2d<T: Real>(tape: &mut Tape<T>, x: Var, p: &ConvParams) -> Result<Var> {
    conv_nd(tape, "conv2d", x, p, 2)
}

/// 3-D convolution of `[C_in, D, H, W]` by kernel `[C_out, C_in, kd, kh, kw]`.
pub fn conv3d<T: Real>(tape: &mut Tape<T>, x: Var, p: &ConvParams) -> Result<Var> {
    conv_nd(tape, "conv3d", x, p, 3)
}

struct DeconvRule {
    /// Geometry of the adjoint convolution (output grid -> input grid).
    geo: Geometry,
    c_in: usize,
}

impl<T: Real> Backward<T> for DeconvRule {
    fn name(&self) -> &'static str {
        "deconv3d"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (r, pin, ci) = (self.geo.k_rows(), self.geo.out_pixels(), self.c_in);
        let gcols = self.geo.im2col(g.data());
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); ci * pin];
            T::gemm(ci, r, pin, x[1].data(), (r as isize, 1), &gcols, (pin as isize, 1), T::zero(), &mut dx, (pin as isize, 1));
            Tensor::from_vec(x[0].shape(), dx).expect("input shape")
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); ci * r];
            T::gemm(ci, pin, r, x[0].data(), (pin as isize, 1), &gcols, (1, pin as isize), T::zero(), &mut dw, (r as isize, 1));
            Tensor::from_vec(x[1].shape(), dw).expect("kernel shape")
        });
        let mut grads = vec![dx, dw];
        if x.len() == 3 {
            let c_out = g.shape()[0];
            grads.push(needs[2].then(|| bias_grad(g.data(), c_out, g.numel() / c_out)));
        }
        grads
    }
}

/// 3-D transposed convolution of `[C_in, D, H, W]` by kernel
/// `[C_in, C_out, kd, kh, kw]`; output extent per axis is
/// `(in - 1) * stride - 2 * padding + dilation * (k - 1) + 1`.
pub fn deconv3d<T: Real>(tape: &mut Tape<T>, x: Var, p: &ConvParams) -> Result<Var> {
    const OP: &str = "deconv3d";
    check_param_len(OP, p, 3)?;
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(p.kernel).to_vec();
    if xs.len() != 4 || ks.len() != 5 || ks[0] != xs[0] {
        return Err(NdError::dim(OP, format!("input {xs:?} / kernel {ks:?}")));
    }
    let (c_in, c_out) = (ks[0], ks[1]);
    if let Some(b) = p.bias {
        if tape.shape(b) != [c_out] {
            return Err(NdError::dim(OP, format!("bias {:?} for {c_out} outputs", tape.shape(b))));
        }
    }
    let mut out_ext = [0usize; 3];
    for a in 0..3 {
        let grown = (xs[1 + a] - 1) * p.stride[a] + p.dilation[a] * (ks[2 + a] - 1) + 1;
        if grown <= 2 * p.padding[a] {
            return Err(NdError::dim(OP, format!("empty output on axis {a}")));
        }
        out_ext[a] = grown - 2 * p.padding[a];
    }
    let geo = Geometry::new(
        OP,
        c_out,
        out_ext,
        [ks[2], ks[3], ks[4]],
        spatial3(&p.stride, 1),
        spatial3(&p.padding, 0),
        spatial3(&p.dilation, 1),
    )?;
    if geo.output[..] != xs[1..] {
        return Err(NdError::dim(OP, "stride does not invert to the input extent"));
    }
    let (r, pin) = (geo.k_rows(), geo.out_pixels());
    let mut cols = vec![T::zero(); r * pin];
    T::gemm(r, c_in, pin, tape.value(p.kernel).data(), (1, r as isize), tape.value(x).data(), (pin as isize, 1), T::zero(), &mut cols, (pin as isize, 1));
    let mut out = geo.col2im(&cols);
    add_bias(&mut out, p.bias.map(|b| tape.value(b)), geo.in_pixels());
    tape.count_macs_3d((c_in * r * pin) as u64);
    let out = Tensor::from_vec(&[c_out, out_ext[0], out_ext[1], out_ext[2]], out)?;
    let mut inputs = vec![x, p.kernel];
    inputs.extend(p.bias);
    tape.record(OP, &inputs, out, Box::new(DeconvRule { geo, c_in }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_identity_2d() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = conv2d(&mut tape, x, &ConvParams::uniform(k, None, 2, 1, 0)).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 3, 3], 2.0));
    }

    #[test]
    fn output_size_formula() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = conv2d(&mut tape, x, &ConvParams::uniform(k, None, 2, 2, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);

        let x = tape.constant(Tensor::ones(&[1, 4, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
        let y = conv3d(&mut tape, x, &ConvParams::uniform(k, None, 3, 2, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
    }

    #[test]
    fn deconv_doubles_extents() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        let k = tape.constant(Tensor::ones(&[1, 1, 4, 4, 4]));
        let y = deconv3d(&mut tape, x, &ConvParams::uniform(k, None, 3, 2, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 4]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(
            conv2d(&mut tape, x, &ConvParams::uniform(k, None, 2, 1, 1)),
            Err(NdError::Dimension { .. })
        ));
        let k = tape.constant(Tensor::ones(&[1, 2, 5, 5]));
        assert!(conv2d(&mut tape, x, &ConvParams::uniform(k, None, 2, 1, 0)).is_err());
    }
}
