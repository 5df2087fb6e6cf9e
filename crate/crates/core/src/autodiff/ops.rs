use std::sync::Arc;

use super::Var;
use crate::tensor::{gemm, Tensor};

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let out = xv.map(&f);
    let yv = Arc::new(out.clone());
    x.tape.op(out, &[x], move |g| {
        let d = Tensor::new(
            g.shape(),
            g.data()
                .iter()
                .zip(xv.data())
                .zip(yv.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect(),
        );
        vec![Some(d)]
    })
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape
            .op(out, &[self, other], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape
            .op(out, &[self, other], |g| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.op(out, &[self, other], move |g| {
            vec![
                Some(g.zip_map(&b, |g, y| g * y)),
                Some(g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape.op(out, &[self], move |g| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v + s);
        self.tape.op(out, &[self], |g| vec![Some(g.clone())])
    }

    /// Multiplies every element by the single-element tensor `s`.
    pub fn mul_scalar_var(self, s: Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        let k = sv.item();
        let out = x.scale(k);
        self.tape.op(out, &[self, s], move |g| {
            let ds: f64 = g.data().iter().zip(x.data()).map(|(g, x)| g * x).sum();
            vec![Some(g.scale(k)), Some(Tensor::scalar(ds))]
        })
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(self) -> Var<'t> {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn silu(self) -> Var<'t> {
        unary(
            self,
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(xv.sum());
        self.tape
            .op(out, &[self], move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean squared difference, averaged over all elements.
    pub fn mse(self, other: Var<'t>) -> Var<'t> {
        self.sub(other).square().mean()
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape);
        self.tape
            .op(out, &[self], move |g| vec![Some(g.clone().reshape(&old))])
    }

    /// Leading-axis slice `[start, start + len)`.
    pub fn narrow0(self, start: usize, len: usize) -> Var<'t> {
        let xv = self.value();
        let full = xv.shape().to_vec();
        let out = xv.narrow0(start, len);
        self.tape.op(out, &[self], move |g| {
            let inner: usize = full[1..].iter().product();
            let mut d = Tensor::zeros(&full);
            d.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(d)]
        })
    }

    /// Concatenation along the leading axis.
    pub fn cat0(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "cat0 of nothing");
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat0(&refs);
        let leads: Vec<usize> = values.iter().map(|v| v.dim(0)).collect();
        parts[0].tape.op(out, parts, move |g| {
            let mut start = 0;
            leads
                .iter()
                .map(|&len| {
                    let d = g.narrow0(start, len);
                    start += len;
                    Some(d)
                })
                .collect()
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        assert_eq!(b.dim(0), k, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
        self.tape.op(Tensor::new(&[m, n], out), &[self, other], move |g| {
            let mut da = vec![0.0; m * k];
            gemm(m, n, k, 1.0, g.data(), false, b.data(), true, 0.0, &mut da);
            let mut db = vec![0.0; k * n];
            gemm(k, m, n, 1.0, a.data(), true, g.data(), false, 0.0, &mut db);
            vec![
                Some(Tensor::new(&[m, k], da)),
                Some(Tensor::new(&[k, n], db)),
            ]
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().t();
        self.tape.op(out, &[self], |g| vec![Some(g.t())])
    }

    /// Adds `bias` (shape `[n]`) along the last axis.
    pub fn add_bias_last(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let n = b.numel();
        assert_eq!(*x.shape().last().unwrap(), n, "bias length mismatch");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.tape.op(out, &[self, bias], move |g| {
            let mut db = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(&[n], db))]
        })
    }

    /// Adds `bias` (shape `[C]`) to every element of channel `c` of a
    /// `(C, ...)` tensor.
    pub fn add_bias_channel(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let c = x.dim(0);
        assert_eq!(b.numel(), c, "channel bias length mismatch");
        let inner = x.numel() / c;
        let mut out = (*x).clone();
        for (ch, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bb = b.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bb);
        }
        self.tape.op(out, &[self, bias], move |g| {
            let db: Vec<f64> = g.data().chunks(inner).map(|s| s.iter().sum()).collect();
            vec![Some(g.clone()), Some(Tensor::new(&[c], db))]
        })
    }

    /// Broadcasts a `[C]` vector to `(C, h, w)`.
    pub fn expand_spatial(self, h: usize, w: usize) -> Var<'t> {
        let v = self.value();
        let c = v.numel();
        let mut data = Vec::with_capacity(c * h * w);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, h * w));
        }
        self.tape.op(Tensor::new(&[c, h, w], data), &[self], move |g| {
            let d: Vec<f64> = g.data().chunks(h * w).map(|s| s.iter().sum()).collect();
            vec![Some(Tensor::new(&[c], d))]
        })
    }

    /// Averages everything but the leading axis: `(C, ...) -> [C]`.
    pub fn mean_trailing(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = shape[0];
        let inner = x.numel() / c;
        let out: Vec<f64> = x
            .data()
            .chunks(inner)
            .map(|s| s.iter().sum::<f64>() / inner as f64)
            .collect();
        self.tape.op(Tensor::new(&[c], out), &[self], move |g| {
            let mut d = Vec::with_capacity(c * inner);
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv / inner as f64, inner));
            }
            vec![Some(Tensor::new(&shape, d))]
        })
    }

    /// Selects columns of a `[R, N]` matrix: result is `[R, idx.len()]`.
    pub fn gather_cols(self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let (r, n) = (x.dim(0), x.dim(1));
        let s = idx.len();
        let idx = idx.to_vec();
        let mut out = vec![0.0; r * s];
        for i in 0..r {
            for (j, &col) in idx.iter().enumerate() {
                out[i * s + j] = x.data()[i * n + col];
            }
        }
        self.tape.op(Tensor::new(&[r, s], out), &[self], move |g| {
            let mut d = vec![0.0; r * n];
            for i in 0..r {
                for (j, &col) in idx.iter().enumerate() {
                    d[i * n + col] += g.data()[i * s + j];
                }
            }
            vec![Some(Tensor::new(&[r, n], d))]
        })
    }

    /// Scales each row of a `[S, D]` matrix to unit L2 norm.
    pub fn l2_normalize_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let d = x.dim(1);
        let norms: Vec<f64> = x
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
            .collect();
        let mut out = (*x).clone();
        for (row, n) in out.data_mut().chunks_mut(d).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        let y = Arc::new(out.clone());
        self.tape.op(out, &[self], move |g| {
            let mut dx = g.clone();
            for ((dr, yr), (gr, &n)) in dx
                .data_mut()
                .chunks_mut(d)
                .zip(y.data().chunks(d))
                .zip(g.data().chunks(d).zip(&norms))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = (gv - yv * dot) / n;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Row-wise softmax of a `[n, m]` matrix.
    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let m = x.dim(1);
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = Arc::new(out.clone());
        self.tape.op(out, &[self], move |g| {
            let mut dx = g.clone();
            for ((dr, yr), gr) in dx
                .data_mut()
                .chunks_mut(m)
                .zip(y.data().chunks(m))
                .zip(g.data().chunks(m))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Mean cross-entropy of row-wise logits `[n, k]` against class indices.
    pub fn cross_entropy_rows(self, targets: &[usize]) -> Var<'t> {
        let x = self.value();
        let (n, k) = (x.dim(0), x.dim(1));
        assert_eq!(targets.len(), n, "one target per row");
        let targets = targets.to_vec();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in x.data().chunks(k).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        self.tape.op(out, &[self], move |g| {
            let s = g.item() / n as f64;
            let mut d = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                d[i * k + t] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= s);
            vec![Some(Tensor::new(&[n, k], d))]
        })
    }

    /// Group normalisation of a `(C, ...)` tensor with per-channel affine.
    pub fn group_norm(self, gamma: Var<'t>, beta: Var<'t>, groups: usize, eps: f64) -> Var<'t> {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let c = x.dim(0);
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let inner = x.numel() / c;
        let per_group = c / groups * inner;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; groups];
        for gi in 0..groups {
            let s = &x.data()[gi * per_group..(gi + 1) * per_group];
            let mean = s.iter().sum::<f64>() / per_group as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for (o, v) in xhat[gi * per_group..(gi + 1) * per_group].iter_mut().zip(s) {
                *o = (v - mean) * is;
            }
        }
        let mut out = vec![0.0; x.numel()];
        for ch in 0..c {
            let (gg, bb) = (gm.data()[ch], bt.data()[ch]);
            for i in ch * inner..(ch + 1) * inner {
                out[i] = xhat[i] * gg + bb;
            }
        }
        let shape = x.shape().to_vec();
        self.tape
            .op(Tensor::new(&shape, out), &[self, gamma, beta], move |g| {
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; gd.len()];
                for ch in 0..c {
                    let gg = gm.data()[ch];
                    for i in ch * inner..(ch + 1) * inner {
                        dgamma[ch] += gd[i] * xhat[i];
                        dbeta[ch] += gd[i];
                        dxhat[i] = gd[i] * gg;
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                let nf = per_group as f64;
                for gi in 0..groups {
                    let r = gi * per_group..(gi + 1) * per_group;
                    let sum_d: f64 = dxhat[r.clone()].iter().sum();
                    let sum_dx: f64 = dxhat[r.clone()]
                        .iter()
                        .zip(&xhat[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in r {
                        dx[i] = inv_std[gi] / nf * (nf * dxhat[i] - sum_d - xhat[i] * sum_dx);
                    }
                }
                vec![
                    Some(Tensor::new(&shape, dx)),
                    Some(Tensor::new(&[c], dgamma)),
                    Some(Tensor::new(&[c], dbeta)),
                ]
            })
    }

    /// Applies a linear map whose adjoint is `adjoint`. Used for fixed
    /// transforms such as the Haar wavelet.
    pub fn linear_map(
        self,
        forward: impl Fn(&Tensor) -> Tensor,
        adjoint: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        let out = forward(&self.value());
        self.tape.op(out, &[self], move |g| vec![Some(adjoint(g))])
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(f)/d(x) for a scalar-valued `f`.
    fn check(shape: &[usize], seed: u64, f: impl for<'a> Fn(Var<'a>) -> Var<'a>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(x);
        let g = tape.backward(y).get_or_zeros(x);
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let t = Tape::no_grad();
                f(t.constant(xp)).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-5 || (fd - an).abs() < 1e-8,
                "element {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        check(&[3, 4], 1, |x| x.silu().mul(x.tanh()).sum());
        check(&[3, 4], 2, |x| x.leaky_relu(0.2).square().mean());
        check(&[3, 4], 3, |x| x.add_scalar(0.5).scale(3.0).sub(x.square()).sum());
    }

    #[test]
    fn matrix_grads() {
        check(&[3, 4], 4, |x| {
            let w = x.tape().constant(Tensor::new(&[4, 2], vec![0.3, -1.0, 2.0, 0.5, -0.2, 0.1, 1.5, 0.7]));
            x.matmul(w).transpose().square().sum()
        });
        check(&[5, 3], 5, |x| x.l2_normalize_rows(1e-12).narrow0(1, 3).sum());
        check(&[4, 6], 6, |x| x.softmax_rows().square().sum());
        check(&[4, 6], 7, |x| x.cross_entropy_rows(&[0, 3, 5, 1]));
        check(&[3, 7], 8, |x| x.gather_cols(&[6, 0, 0, 2]).square().sum());
    }

    #[test]
    fn norm_and_broadcast_grads() {
        check(&[4, 3, 3], 9, |x| {
            let t = x.tape();
            let g = t.constant(Tensor::new(&[4], vec![1.0, 2.0, -0.5, 0.3]));
            let b = t.constant(Tensor::new(&[4], vec![0.1, 0.0, 0.2, -0.3]));
            x.group_norm(g, b, 2, 1e-5).tanh().sum()
        });
        check(&[2, 3, 3], 10, |x| {
            let v = x.mean_trailing();
            let e = v.expand_spatial(3, 3);
            x.mul(e).add_bias_channel(v).sum()
        });
        check(&[2, 3], 11, |x| {
            let parts = [x.narrow0(1, 1), x.narrow0(0, 1), x];
            Var::cat0(&parts).add_bias_last(x.narrow0(0, 1).reshape(&[3])).square().sum()
        });
    }

    #[test]
    fn group_norm_affine_grads() {
        check(&[4], 12, |g| {
            let t = g.tape();
            let x = t.constant(Tensor::new(&[4, 2], vec![1.0, -1.0, 0.5, 2.0, 0.0, 0.3, -0.7, 1.1]));
            let b = t.constant(Tensor::zeros(&[4]));
            x.group_norm(g, b, 4, 1e-5).square().sum()
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let y = c.mul(x).sum();
        let grads = tape.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn no_grad_tape_records_no_closures() {
        let tape = Tape::no_grad();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let y = x.square().sum();
        assert!(!y.requires_grad());
        assert_eq!(y.item(), 2.0);
    }
}
