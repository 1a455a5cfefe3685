//! Real-valued primitives.

use rand::Rng;

use super::{Mode, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics of a train-mode batchnorm, for updating running stats.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (`n - 1`) variance.
    pub var: Vec<f64>,
}

/// `sign` with `sign(0) = +1`.
pub fn sign_pos(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `c = a * b` (row-major) via `matrixmultiply`, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the strides describe in-bounds accesses into `a` (m x k), `b`
    // (k x n) and `c` (m x n, row-major), all checked by the callers' shape
    // validation; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op}: shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data.iter().map(|&v| f(v)).collect();
        let y = Tensor {
            shape: xv.shape.clone(),
            data: out,
        };
        let saved = y.data.clone();
        self.push_op(y, &[x], move |g, p| {
            let xs = &p[0].data;
            vec![g
                .iter()
                .zip(xs)
                .zip(&saved)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect()]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        Ok(self.push_op(out, &[a, b], |g, _| vec![g.to_vec(), g.to_vec()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        Ok(self.push_op(out, &[a, b], |g, _| {
            vec![g.to_vec(), g.iter().map(|v| -v).collect()]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        Ok(self.push_op(out, &[a, b], |g, p| {
            let (a, b) = (&p[0].data, &p[1].data);
            vec![
                g.iter().zip(b).map(|(g, b)| g * b).collect(),
                g.iter().zip(a).map(|(g, a)| g * a).collect(),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x / y).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        Ok(self.push_op(out, &[a, b], |g, p| {
            let (a, b) = (&p[0].data, &p[1].data);
            vec![
                g.iter().zip(b).map(|(g, b)| g / b).collect(),
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect(),
            ]
        }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, |_, _| 1.0)
    }

    /// Backward at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Backward at exactly 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn log2(&mut self, x: Var) -> Var {
        self.unary(x, f64::log2, |x, _| 1.0 / (x * std::f64::consts::LN_2))
    }

    /// Piecewise-constant `sign` with `sign(0) = +1`; carries no gradient.
    pub fn sign(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| sign_pos(v)).collect(),
        };
        self.constant(out)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.value(x).data.iter().sum();
        self.push_op(Tensor::scalar(s), &[x], move |g, _| vec![vec![g[0]; n]])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the last axis, accumulating left to right from 0.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = last_dim(&xv.shape);
        let mut shape = xv.shape.clone();
        shape.pop();
        let data = xv.data.chunks_exact(n).map(|c| c.iter().sum()).collect();
        self.push_op(Tensor { shape, data }, &[x], move |g, _| {
            vec![g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect()]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let data = self.value(x).data.clone();
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, &[x], |g, _| vec![g.to_vec()]))
    }

    /// Concatenates 2-D tensors `[B, n_i]` along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).first().copied().unwrap_or(0),
            None => return dim_err("concat of zero tensors"),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return dim_err(format!("concat_last: part shape {s:?}, rows {rows}"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push_op(out, parts, move |g, _| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for r in 0..rows {
                let mut off = r * total;
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    gi.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads
        }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start > end || end > s[1] {
            return dim_err(format!("slice_last {start}..{end} of {s:?}"));
        }
        let (rows, cols, w) = (s[0], s[1], end - start);
        let xv = &self.value(x).data;
        let data = (0..rows)
            .flat_map(|r| xv[r * cols + start..r * cols + end].iter().copied())
            .collect();
        let out = Tensor::new(vec![rows, w], data)?;
        Ok(self.push_op(out, &[x], move |g, _| {
            let mut gx = vec![0.0; rows * cols];
            for r in 0..rows {
                gx[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![gx]
        }))
    }

    /// `y = x W^T + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return dim_err(format!("affine: x {xs:?}, W {ws:?}, b {bs:?}"));
        }
        let (batch, din, dout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; batch * dout];
        gemm(
            batch,
            din,
            dout,
            &self.value(x).data,
            (din, 1),
            &self.value(w).data,
            (1, din),
            &mut y,
        );
        let bias = &self.value(b).data;
        for row in y.chunks_exact_mut(dout) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::new(vec![batch, dout], y)?;
        Ok(self.push_op(out, &[x, w, b], move |g, p| {
            let (xv, wv) = (&p[0].data, &p[1].data);
            let mut gx = vec![0.0; batch * din];
            gemm(batch, dout, din, g, (dout, 1), wv, (din, 1), &mut gx);
            let mut gw = vec![0.0; dout * din];
            gemm(dout, batch, din, g, (1, dout), xv, (din, 1), &mut gw);
            let mut gb = vec![0.0; dout];
            for row in g.chunks_exact(dout) {
                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            vec![gx, gw, gb]
        }))
    }

    /// Per-feature batch normalization of `x: [B, F]`. Train mode normalizes
    /// with biased batch statistics and returns them; eval mode uses the
    /// supplied running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2
            || self.shape(gamma) != [xs[1]]
            || self.shape(beta) != [xs[1]]
            || running_mean.len() != xs[1]
            || running_var.len() != xs[1]
        {
            return dim_err(format!("batchnorm on {xs:?}"));
        }
        let (batch, f) = (xs[0], xs[1]);
        let xv = &self.value(x).data;
        let (mean, var, stats) = match self.mode() {
            Mode::Train => {
                if batch < 2 {
                    return Err(Error::Autodiff("train-mode batchnorm needs batch >= 2".into()));
                }
                let mut mean = vec![0.0; f];
                for row in xv.chunks_exact(f) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= batch as f64);
                let mut var = vec![0.0; f];
                for row in xv.chunks_exact(f) {
                    for j in 0..f {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                let unbiased = var.iter().map(|v| v / (batch - 1) as f64).collect();
                var.iter_mut().for_each(|v| *v /= batch as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; batch * f];
        for (r, row) in xv.chunks_exact(f).enumerate() {
            for j in 0..f {
                xhat[r * f + j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut y = vec![0.0; batch * f];
        for r in 0..batch {
            for j in 0..f {
                y[r * f + j] = gv[j] * xhat[r * f + j] + bv[j];
            }
        }
        let out = Tensor::new(vec![batch, f], y)?;
        let train = self.mode() == Mode::Train;
        let var = self.push_op(out, &[x, gamma, beta], move |g, p| {
            let gam = &p[1].data;
            let mut ggamma = vec![0.0; f];
            let mut gbeta = vec![0.0; f];
            for r in 0..batch {
                for j in 0..f {
                    ggamma[j] += g[r * f + j] * xhat[r * f + j];
                    gbeta[j] += g[r * f + j];
                }
            }
            let mut gx = vec![0.0; batch * f];
            for j in 0..f {
                if train {
                    // dx = inv_std/B * (B dxhat - sum dxhat - xhat sum(dxhat xhat))
                    let nb = batch as f64;
                    let sum_d = gbeta[j] * gam[j];
                    let sum_dx = ggamma[j] * gam[j];
                    for r in 0..batch {
                        let d = g[r * f + j] * gam[j];
                        gx[r * f + j] =
                            inv_std[j] / nb * (nb * d - sum_d - xhat[r * f + j] * sum_dx);
                    }
                } else {
                    for r in 0..batch {
                        gx[r * f + j] = g[r * f + j] * gam[j] * inv_std[j];
                    }
                }
            }
            vec![gx, ggamma, gbeta]
        });
        Ok((var, stats))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `rate` and survivors are scaled by `1 / (1 - rate)`. Identity in eval
    /// mode.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode() == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push_op(out, &[x], move |g, _| {
            vec![g.iter().zip(&mask).map(|(g, m)| g * m).collect()]
        }))
    }

    /// Scalar quantizer `y = sum_i a_i q(c_i (x - b_i))` applied entrywise,
    /// with `q = tanh` in train mode and `q = sign` (`sign(0) = +1`) in eval
    /// mode. Eval output carries no gradient.
    pub fn soft_quantize(&mut self, x: Var, amplitudes: &[f64], b: Var, c: Var) -> Result<Var> {
        let levels = amplitudes.len();
        if self.shape(b) != [levels] || self.shape(c) != [levels] {
            return dim_err(format!(
                "quantizer with {levels} amplitudes, b {:?}, c {:?}",
                self.shape(b),
                self.shape(c)
            ));
        }
        let a = amplitudes.to_vec();
        let (bv, cv) = (self.value(b).data.clone(), self.value(c).data.clone());
        let xv = self.value(x);
        let shape = xv.shape.clone();
        if self.mode() == Mode::Eval {
            let data = xv
                .data
                .iter()
                .map(|&v| (0..levels).map(|i| a[i] * sign_pos(cv[i] * (v - bv[i]))).sum())
                .collect();
            return Ok(self.constant(Tensor { shape, data }));
        }
        let data = xv
            .data
            .iter()
            .map(|&v| (0..levels).map(|i| a[i] * (cv[i] * (v - bv[i])).tanh()).sum())
            .collect();
        Ok(self.push_op(Tensor { shape, data }, &[x, b, c], move |g, p| {
            let xs = &p[0].data;
            let mut gx = vec![0.0; xs.len()];
            let mut gb = vec![0.0; levels];
            let mut gc = vec![0.0; levels];
            for (e, (&gy, &v)) in g.iter().zip(xs).enumerate() {
                for i in 0..levels {
                    let d = v - bv[i];
                    let t = (cv[i] * d).tanh();
                    let sech2 = 1.0 - t * t;
                    gx[e] += gy * a[i] * cv[i] * sech2;
                    gb[i] -= gy * a[i] * cv[i] * sech2;
                    gc[i] += gy * a[i] * d * sech2;
                }
            }
            vec![gx, gb, gc]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    /// Random values with `|x| > 0.1`, away from relu/abs kinks.
    fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
        let mut x = randn(shape, seed);
        for v in x.data_mut() {
            *v = v.signum() * (0.1 + v.abs());
        }
        x
    }

    /// Weighted sum with fixed pseudo-random weights, so every output
    /// coordinate influences the loss differently.
    fn project(tape: &mut Tape, y: Var) -> Var {
        let n = tape.value(y).len();
        let shape = tape.shape(y).to_vec();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
        let c = tape.constant(Tensor::new(shape, w).unwrap());
        let p = tape.mul(y, c).unwrap();
        tape.sum_all(p)
    }

    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let cfg = GradCheckConfig::default();
        let report = grad_check(&f, &inputs, &cfg).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn relu_backward_example() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]), true);
        let y = tape.relu(x);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn tanh_derivative_at_zero_is_one() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn kinks_have_zero_derivative() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[2], &[0.0, 0.0]), true);
        let r = tape.relu(x);
        let a = tape.abs(x);
        let y = tape.add(r, a).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_of_negatives_has_zero_gradient() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[3], &[-1.0, -0.5, -3.0]), true);
        let y = tape.relu(x);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn elementwise_gradients() {
        check(vec![randn(&[3, 4], 1), away_from_zero(&[3, 4], 2)], |tp, v| {
            // (x + y) y - x, divided by y
            let a = tp.add(v[0], v[1])?;
            let m = tp.mul(a, v[1])?;
            let s = tp.sub(m, v[0])?;
            let d = tp.div(s, v[1])?;
            let sc = tp.scale(d, -1.7);
            let sh = tp.add_scalar(sc, 0.3);
            Ok(project(tp, sh))
        });
    }

    #[test]
    fn activation_gradients() {
        check(vec![away_from_zero(&[5, 3], 3)], |tp, v| {
            let r = tp.relu(v[0]);
            let th = tp.tanh(v[0]);
            let ab = tp.abs(v[0]);
            let l = tp.log2(ab);
            let s = tp.add(r, th)?;
            let s = tp.add(s, l)?;
            Ok(project(tp, s))
        });
    }

    #[test]
    fn reduction_and_reshape_gradients() {
        check(vec![randn(&[2, 3, 4], 4)], |tp, v| {
            let s = tp.sum_last(v[0]);
            let r = tp.reshape(s, vec![3, 2])?;
            let m = tp.mean_all(v[0]);
            let p = project(tp, r);
            tp.add(p, m)
        });
    }

    #[test]
    fn concat_and_slice_gradients() {
        check(vec![randn(&[3, 2], 5), randn(&[3, 4], 6)], |tp, v| {
            let c = tp.concat_last(&[v[0], v[1]])?;
            let s = tp.slice_last(c, 1, 5)?;
            Ok(project(tp, s))
        });
    }

    #[test]
    fn affine_gradients() {
        check(vec![randn(&[4, 3], 7), randn(&[5, 3], 8), randn(&[5], 9)], |tp, v| {
            let y = tp.affine(v[0], v[1], v[2])?;
            Ok(project(tp, y))
        });
    }

    #[test]
    fn affine_matches_naive_product() {
        let (x, w, b) = (randn(&[3, 4], 10), randn(&[2, 4], 11), randn(&[2], 12));
        let mut tp = Tape::new(Mode::Eval);
        let (xv, wv, bv) = (tp.constant(x.clone()), tp.constant(w.clone()), tp.constant(b.clone()));
        let y = tp.affine(xv, wv, bv).unwrap();
        for r in 0..3 {
            for o in 0..2 {
                let naive: f64 = b.data()[o] + (0..4).map(|i| x.data()[r * 4 + i] * w.data()[o * 4 + i]).sum::<f64>();
                assert!((tp.value(y).data()[r * 2 + o] - naive).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_chain_gradients() {
        let cfg = GradCheckConfig {
            tol: 1e-7,
            ..GradCheckConfig::default()
        };
        let inputs = vec![randn(&[3, 4], 13), randn(&[5, 4], 14), randn(&[5], 15), randn(&[2, 5], 16), randn(&[2], 17)];
        let report = grad_check(
            &|tp: &mut Tape, v: &[Var]| {
                let h = tp.affine(v[0], v[1], v[2])?;
                let h = tp.tanh(h);
                let y = tp.affine(h, v[3], v[4])?;
                Ok(project(tp, y))
            },
            &inputs,
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn batchnorm_train_gradients() {
        check(vec![randn(&[6, 3], 18), away_from_zero(&[3], 19), randn(&[3], 20)], |tp, v| {
            let (y, _) = tp.batchnorm(v[0], v[1], v[2], &[0.0; 3], &[1.0; 3])?;
            Ok(project(tp, y))
        });
    }

    #[test]
    fn batchnorm_eval_gradients() {
        let eval_check = |inputs: Vec<Tensor>| {
            let f = |tp: &mut Tape, v: &[Var]| {
                let (y, _) = tp.batchnorm(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])?;
                Ok(project(tp, y))
            };
            let cfg = GradCheckConfig {
                mode: Mode::Eval,
                ..GradCheckConfig::default()
            };
            let report = grad_check(&f, &inputs, &cfg).unwrap();
            assert!(report.passed(), "{report:?}");
        };
        eval_check(vec![randn(&[4, 3], 21), randn(&[3], 22), randn(&[3], 23)]);
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        // Spread 1e3: the eps shrinkage var / (var + eps) is then ~3e-11.
        let mut x = randn(&[64, 5], 24);
        x.data_mut().iter_mut().for_each(|v| *v *= 1e3);
        let mut tp = Tape::new(Mode::Train);
        let xv = tp.constant(x);
        let g = tp.constant(t(&[5], &[1.0; 5]));
        let b = tp.constant(Tensor::zeros(vec![5]));
        let (y, stats) = tp.batchnorm(xv, g, b, &[0.0; 5], &[1.0; 5]).unwrap();
        assert!(stats.is_some());
        let y = tp.value(y).data();
        for j in 0..5 {
            let col: Vec<f64> = (0..64).map(|r| y[r * 5 + j]).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "var {var}");
        }
    }

    #[test]
    fn batchnorm_variance_shrinks_by_eps() {
        let x = randn(&[64, 3], 33);
        let mut tp = Tape::new(Mode::Train);
        let xv = tp.constant(x.clone());
        let g = tp.constant(t(&[3], &[1.0; 3]));
        let b = tp.constant(Tensor::zeros(vec![3]));
        let (y, _) = tp.batchnorm(xv, g, b, &[0.0; 3], &[1.0; 3]).unwrap();
        let y = tp.value(y).data();
        for j in 0..3 {
            let col = |d: &[f64]| (0..64).map(|r| d[r * 3 + j]).collect::<Vec<_>>();
            let pop_var = |c: &[f64]| {
                let m = c.iter().sum::<f64>() / 64.0;
                c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 64.0
            };
            let vx = pop_var(&col(x.data()));
            let vy = pop_var(&col(y));
            assert!((vy - vx / (vx + BN_EPS)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_needs_two_samples_in_train_mode() {
        let mut tp = Tape::new(Mode::Train);
        let x = tp.constant(Tensor::zeros(vec![1, 2]));
        let g = tp.constant(t(&[2], &[1.0; 2]));
        let b = tp.constant(Tensor::zeros(vec![2]));
        assert!(tp.batchnorm(x, g, b, &[0.0; 2], &[1.0; 2]).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut tp = Tape::new(Mode::Train);
        let x = tp.constant(t(&[100_000], &vec![1.0; 100_000]));
        let y = tp.dropout(x, 0.5, &mut rng).unwrap();
        let vals = tp.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut tp = Tape::new(Mode::Eval);
        let x = tp.constant(randn(&[10], 27));
        let y = tp.dropout(x, 0.5, &mut rng).unwrap();
        assert_eq!(tp.value(x), tp.value(y));
    }

    #[test]
    fn dropout_gradient_with_fixed_mask() {
        // Reseeding per call keeps f deterministic, as grad_check requires.
        check(vec![randn(&[4, 4], 28)], |tp, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(29);
            let y = tp.dropout(v[0], 0.5, &mut rng)?;
            Ok(project(tp, y))
        });
    }

    #[test]
    fn quantizer_gradients() {
        check(vec![randn(&[3, 4], 30), t(&[1], &[0.1]), t(&[1], &[0.7])], |tp, v| {
            let y = tp.soft_quantize(v[0], &[std::f64::consts::FRAC_PI_2], v[1], v[2])?;
            Ok(project(tp, y))
        });
        check(vec![randn(&[2, 3], 31), t(&[3], &[-0.5, 0.0, 0.5]), t(&[3], &[0.5, 1.0, 2.0])], |tp, v| {
            let y = tp.soft_quantize(v[0], &[0.5, 0.5, 0.5], v[1], v[2])?;
            Ok(project(tp, y))
        });
    }

    #[test]
    fn vjp_is_linear_in_split_copies() {
        // Feeding x through two summed copies gives the same gradient as
        // doubling the upstream of one copy.
        let x = randn(&[3, 3], 32);
        let grad_of = |split: bool| {
            let mut tp = Tape::new(Mode::Train);
            let xv = tp.leaf(x.clone(), true);
            let y = if split {
                let a = tp.tanh(xv);
                let b = tp.tanh(xv);
                tp.add(a, b).unwrap()
            } else {
                let a = tp.tanh(xv);
                tp.scale(a, 2.0)
            };
            let l = project(&mut tp, y);
            tp.backward(l).unwrap().get(xv).unwrap().to_vec()
        };
        let (a, b) = (grad_of(true), grad_of(false));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tp = Tape::new(Mode::Train);
        let a = tp.constant(Tensor::zeros(vec![2]));
        let b = tp.constant(Tensor::zeros(vec![3]));
        assert!(tp.add(a, b).is_err());
        let w = tp.constant(Tensor::zeros(vec![4, 5]));
        let x = tp.constant(Tensor::zeros(vec![2, 3]));
        let bias = tp.constant(Tensor::zeros(vec![4]));
        assert!(tp.affine(x, w, bias).is_err());
    }
}
