//! Single-level orthonormal 2-D Haar transform.
//!
//! For each 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a + b - c - d) / 2
//! HL = (a - b + c - d) / 2    HH = (a - b - c + d) / 2
//! ```
//!
//! The transform is orthonormal, so its inverse is also its adjoint; the
//! autodiff wrappers use that for the backward pass.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four `(C, H/2, W/2)` subbands of a `(C, H, W)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletSubbands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl WaveletSubbands {
    pub fn shape(&self) -> &[usize] {
        self.ll.shape()
    }

    /// Sum of squared coefficients over all subbands.
    pub fn energy(&self) -> f64 {
        self.ll.sq_norm() + self.lh.sq_norm() + self.hl.sq_norm() + self.hh.sq_norm()
    }

    fn check(&self) -> Result<()> {
        let s = self.ll.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("subbands must be (C, H, W), got {s:?}")));
        }
        for (name, t) in [("LH", &self.lh), ("HL", &self.hl), ("HH", &self.hh)] {
            if t.shape() != s {
                return Err(Error::Shape(format!(
                    "{name} subband shape {:?} differs from LL {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn check_even(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected (C, H, W), got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "Haar transform needs even spatial dims, got {h}x{w}"
        )));
    }
    Ok((c, h, w))
}

/// Forward transform into four subbands packed as `(4C, H/2, W/2)` in
/// LL, LH, HL, HH order.
fn forward_packed(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (h2, w2) = (h / 2, w / 2);
    let band = c * h2 * w2;
    let mut out = vec![0.0; 4 * band];
    let xd = x.data();
    for ch in 0..c {
        for i in 0..h2 {
            let top = &xd[(ch * h + 2 * i) * w..][..w];
            let bottom = &xd[(ch * h + 2 * i + 1) * w..][..w];
            for j in 0..w2 {
                let (a, b) = (top[2 * j], top[2 * j + 1]);
                let (cc, d) = (bottom[2 * j], bottom[2 * j + 1]);
                let o = (ch * h2 + i) * w2 + j;
                out[o] = 0.5 * (a + b + cc + d);
                out[band + o] = 0.5 * (a + b - cc - d);
                out[2 * band + o] = 0.5 * (a - b + cc - d);
                out[3 * band + o] = 0.5 * (a - b - cc + d);
            }
        }
    }
    Tensor::new(&[4 * c, h2, w2], out)
}

/// Inverse of [`forward_packed`].
fn inverse_packed(p: &Tensor) -> Tensor {
    let s = p.shape();
    let (c, h2, w2) = (s[0] / 4, s[1], s[2]);
    let (h, w) = (2 * h2, 2 * w2);
    let band = c * h2 * w2;
    let pd = p.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let o = (ch * h2 + i) * w2 + j;
                let (ll, lh, hl, hh) = (pd[o], pd[band + o], pd[2 * band + o], pd[3 * band + o]);
                let top = (ch * h + 2 * i) * w + 2 * j;
                let bottom = top + w;
                out[top] = 0.5 * (ll + lh + hl + hh);
                out[top + 1] = 0.5 * (ll + lh - hl - hh);
                out[bottom] = 0.5 * (ll - lh + hl - hh);
                out[bottom + 1] = 0.5 * (ll - lh - hl + hh);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub fn dwt2(x: &Tensor) -> Result<WaveletSubbands> {
    let (c, _, _) = check_even(x.shape())?;
    let packed = forward_packed(x);
    Ok(WaveletSubbands {
        ll: packed.narrow0(0, c),
        lh: packed.narrow0(c, c),
        hl: packed.narrow0(2 * c, c),
        hh: packed.narrow0(3 * c, c),
    })
}

pub fn idwt2(s: &WaveletSubbands) -> Result<Tensor> {
    s.check()?;
    Ok(inverse_packed(&Tensor::cat0(&[&s.ll, &s.lh, &s.hl, &s.hh])))
}

/// Differentiable subbands; see [`dwt2_var`].
#[derive(Clone, Copy, Debug)]
pub struct SubbandVars<'t> {
    pub ll: Var<'t>,
    pub lh: Var<'t>,
    pub hl: Var<'t>,
    pub hh: Var<'t>,
}

pub fn dwt2_var(x: Var<'_>) -> Result<SubbandVars<'_>> {
    let (c, _, _) = check_even(&x.shape())?;
    let packed = x.linear_map(forward_packed, inverse_packed);
    Ok(SubbandVars {
        ll: packed.narrow0(0, c),
        lh: packed.narrow0(c, c),
        hl: packed.narrow0(2 * c, c),
        hh: packed.narrow0(3 * c, c),
    })
}

pub fn idwt2_var(s: SubbandVars<'_>) -> Result<Var<'_>> {
    let shape = s.ll.shape();
    for v in [s.lh, s.hl, s.hh] {
        if v.shape() != shape {
            return Err(Error::Shape(format!(
                "subband shapes differ: {:?} vs {shape:?}",
                v.shape()
            )));
        }
    }
    let packed = Var::cat0(&[s.ll, s.lh, s.hl, s.hh]);
    Ok(packed.linear_map(inverse_packed, forward_packed))
}
