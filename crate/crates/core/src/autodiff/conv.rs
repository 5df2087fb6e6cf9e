//! Convolutions lowered to GEMM through im2col / col2im.
//!
//! Everything is expressed in three spatial dims `(D, H, W)`; 2-D
//! convolutions are the `D = 1` special case.

use std::sync::Arc;

use super::Var;
use crate::tensor::{gemm, Tensor};

/// Kernel, stride and zero padding per spatial axis `(D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn square2d(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv_output_len(input[a], self.kernel[a], self.stride[a], self.pad[a]);
        }
        out
    }

    fn transposed_out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (input[a] - 1) * self.stride[a] + self.kernel[a] - 2 * self.pad[a];
        }
        out
    }
}

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds a `(C, D, H, W)` buffer into `[C * kvol, Do * Ho * Wo]`.
fn im2col(x: &[f64], c: usize, dims: [usize; 3], g: &ConvGeometry, out: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = g.kernel;
    let p = od * oh * ow;
    let mut cols = vec![0.0; c * g.kernel_volume() * p];
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for z in 0..od {
                        let iz = (z * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * g.stride[1] + ky) as isize - g.pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[(iz as usize * h + iy as usize) * w..][..w];
                            let base = (z * oh + y) * ow;
                            for xo in 0..ow {
                                let ix = (xo * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + xo] = src[ix as usize];
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

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
fn col2im(cols: &[f64], c: usize, dims: [usize; 3], g: &ConvGeometry, out: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = g.kernel;
    let p = od * oh * ow;
    let mut x = vec![0.0; c * d * h * w];
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for z in 0..od {
                        let iz = (z * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * g.stride[1] + ky) as isize - g.pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[(iz as usize * h + iy as usize) * w..][..w];
                            let base = (z * oh + y) * ow;
                            for xo in 0..ow {
                                let ix = (xo * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += src[base + xo];
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

/// Spatial dims of a `(C, H, W)` or `(C, D, H, W)` tensor as `(D, H, W)`.
fn spatial(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        3 => [1, shape[1], shape[2]],
        4 => [shape[1], shape[2], shape[3]],
        n => panic!("convolution input must be 3-D or 4-D, got {n}-D"),
    }
}

fn with_spatial(c: usize, dims: [usize; 3], rank: usize) -> Vec<usize> {
    if rank == 3 {
        vec![c, dims[1], dims[2]]
    } else {
        vec![c, dims[0], dims[1], dims[2]]
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], p: usize) {
    for (chunk, b) in out.chunks_mut(p).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], p: usize) -> Vec<f64> {
    g.chunks(p).map(|s| s.iter().sum()).collect()
}

impl<'t> Var<'t> {
    /// Cross-correlation of a `(C, H, W)` or `(C, D, H, W)` input with
    /// weights `(O, C, kd?, kh, kw)` flattened to `[O, C * kvol]` order.
    pub fn conv(self, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeometry) -> Var<'t> {
        let x = self.value();
        let wv = weight.value();
        let rank = x.shape().len();
        let c = x.dim(0);
        let dims = spatial(x.shape());
        let o = wv.dim(0);
        let ck = c * geom.kernel_volume();
        assert_eq!(
            wv.numel(),
            o * ck,
            "conv weight {:?} does not match {c} input channels and kernel {:?}",
            wv.shape(),
            geom.kernel
        );
        let out_dims = geom.out_dims(dims);
        let p: usize = out_dims.iter().product();
        let cols = Arc::new(im2col(x.data(), c, dims, &geom, out_dims));
        let mut out = vec![0.0; o * p];
        gemm(o, ck, p, 1.0, wv.data(), false, &cols, false, 0.0, &mut out);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.value().data(), p);
        }
        let out_shape = with_spatial(o, out_dims, rank);
        let in_shape = x.shape().to_vec();
        let w_shape = wv.shape().to_vec();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.op(Tensor::new(&out_shape, out), &parents, move |g| {
            let gd = g.data();
            let mut dcols = vec![0.0; ck * p];
            gemm(ck, o, p, 1.0, wv.data(), true, gd, false, 0.0, &mut dcols);
            let dx = col2im(&dcols, c, dims, &geom, out_dims);
            let mut dw = vec![0.0; o * ck];
            gemm(o, p, ck, 1.0, gd, false, &cols, true, 0.0, &mut dw);
            let mut grads = vec![
                Some(Tensor::new(&in_shape, dx)),
                Some(Tensor::new(&w_shape, dw)),
            ];
            if has_bias {
                grads.push(Some(Tensor::new(&[o], channel_sums(gd, p))));
            }
            grads
        })
    }

    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t> {
        let k = *weight.shape().last().expect("conv weight rank");
        self.conv(weight, bias, ConvGeometry::square2d(k, stride, pad))
    }

    /// Transposed convolution (adjoint of [`Var::conv`]) with weights
    /// `(C_in, C_out, kd?, kh, kw)`.
    pub fn conv_transpose(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        geom: ConvGeometry,
    ) -> Var<'t> {
        let x = self.value();
        let wv = weight.value();
        let rank = x.shape().len();
        let cin = x.dim(0);
        let dims = spatial(x.shape());
        let cout = wv.dim(1);
        let ck = cout * geom.kernel_volume();
        assert_eq!(wv.dim(0), cin, "transposed conv input channel mismatch");
        assert_eq!(wv.numel(), cin * ck, "transposed conv weight shape mismatch");
        let out_dims = geom.transposed_out_dims(dims);
        let q: usize = dims.iter().product();
        let p: usize = out_dims.iter().product();
        let mut cols = vec![0.0; ck * q];
        gemm(ck, cin, q, 1.0, wv.data(), true, x.data(), false, 0.0, &mut cols);
        let mut out = col2im(&cols, cout, out_dims, &geom, dims);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.value().data(), p);
        }
        let out_shape = with_spatial(cout, out_dims, rank);
        let in_shape = x.shape().to_vec();
        let w_shape = wv.shape().to_vec();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.op(Tensor::new(&out_shape, out), &parents, move |g| {
            let gd = g.data();
            let gcols = im2col(gd, cout, out_dims, &geom, dims);
            let mut dx = vec![0.0; cin * q];
            gemm(cin, ck, q, 1.0, wv.data(), false, &gcols, false, 0.0, &mut dx);
            let mut dw = vec![0.0; cin * ck];
            gemm(cin, q, ck, 1.0, x.data(), false, &gcols, true, 0.0, &mut dw);
            let mut grads = vec![
                Some(Tensor::new(&in_shape, dx)),
                Some(Tensor::new(&w_shape, dw)),
            ];
            if has_bias {
                grads.push(Some(Tensor::new(&[cout], channel_sums(gd, p))));
            }
            grads
        })
    }

    pub fn conv_transpose2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t> {
        let k = *weight.shape().last().expect("conv weight rank");
        self.conv_transpose(weight, bias, ConvGeometry::square2d(k, stride, pad))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct-loop 2-D cross-correlation, used as an oracle.
    fn naive_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (o, k) = (w.dim(0), w.dim(3));
        let oh = conv_output_len(h, k, stride, pad);
        let ow = conv_output_len(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[o, oh, ow]);
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * oh + y) * ow + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (2, 1, 3), (1, 0, 1)] {
            let x = Tensor::randn(&[3, 7, 6], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
            let tape = Tape::no_grad();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), None, stride, pad);
            assert!(y.value().max_abs_diff(&naive_conv2d(&x, &w, stride, pad)) < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 3, 4, 4], 1.0, &mut rng);
        let tape = Tape::no_grad();
        let cx = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, 2, 1);
        let y = Tensor::randn(&cx.shape(), 1.0, &mut rng);
        let wt = tape.constant(w.clone());
        let ty = tape.constant(y.clone()).conv_transpose2d(wt, None, 2, 1);
        assert_eq!(ty.shape(), vec![3, 8, 8]);
        let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.value().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    fn fd_check(f: impl for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a>, x0: Tensor) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.backward(f(&tape, x)).get_or_zeros(x);
        let h = 1e-6;
        for i in (0..x0.numel()).step_by(3) {
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += d;
                let t = Tape::no_grad();
                f(&t, t.constant(xp)).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-6),
                "index {i}: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[2], 0.5, &mut rng);
        let x0 = Tensor::randn(&[3, 5, 6], 1.0, &mut rng);
        let (w1, b1) = (w.clone(), b.clone());
        fd_check(
            move |t, x| {
                x.conv2d(t.constant(w1.clone()), Some(t.constant(b1.clone())), 2, 1)
                    .square()
                    .sum()
            },
            x0.clone(),
        );
        // Gradient with respect to the weights.
        let x1 = x0.clone();
        fd_check(
            move |t, w| t.constant(x1.clone()).conv2d(w, None, 1, 1).tanh().sum(),
            w.clone(),
        );
        let wt = Tensor::randn(&[3, 2, 4, 4], 0.5, &mut rng);
        fd_check(
            move |t, x| {
                x.conv_transpose2d(t.constant(wt.clone()), Some(t.constant(b.clone())), 2, 1)
                    .square()
                    .sum()
            },
            x0,
        );
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[2, 2, 2, 3, 3], 0.5, &mut rng);
        let geom = ConvGeometry {
            kernel: [2, 3, 3],
            stride: [1, 2, 2],
            pad: [0, 1, 1],
        };
        let x0 = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        fd_check(
            move |t, x| x.conv(t.constant(w.clone()), None, geom).square().sum(),
            x0,
        );
    }
}
