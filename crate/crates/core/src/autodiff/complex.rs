//! Batched complex primitives on `[B, rows, cols, 2]` tensors.
//!
//! Forward passes call the same [`linalg::kernels`](crate::linalg::kernels)
//! and Cholesky routines as the classical solver, so graph and solver
//! results agree to rounding of identical operation sequences.

use super::{to_complex, to_interleaved, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve_in_place, kernels, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

fn cmat_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [b, r, c, 2] => Ok((*b, *r, *c)),
        _ => dim_err(format!("{op}: expected [B, rows, cols, 2], got {shape:?}")),
    }
}

fn ctensor(shape: Vec<usize>, v: &[C64]) -> Tensor {
    Tensor {
        shape,
        data: to_interleaved(v),
    }
}

/// `a^H b` restricted to matching length slices.
fn cdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

impl Tape {
    /// `e^{j theta}` for every entry; output gains a trailing axis of 2.
    pub fn polar(&mut self, theta: Var) -> Var {
        let tv = self.value(theta);
        let mut shape = tv.shape.clone();
        shape.push(2);
        let z: Vec<C64> = tv.data.iter().map(|&t| C64::from_polar(1.0, t)).collect();
        let out = ctensor(shape, &z);
        self.push_op(out, &[theta], move |g, _| {
            // dz/dtheta = j z; dL/dtheta = Re(conj(gz) j z)
            let gz = to_complex(g);
            vec![gz
                .iter()
                .zip(&z)
                .map(|(gz, z)| (gz.conj() * C64::new(0.0, 1.0) * z).re)
                .collect()]
        })
    }

    /// `|z|^2` per complex entry, computed as `re*re + im*im`.
    pub fn cabs2(&mut self, z: Var) -> Result<Var> {
        let zv = self.value(z);
        if zv.shape.last() != Some(&2) {
            return dim_err(format!("cabs2 on shape {:?}", zv.shape));
        }
        let mut shape = zv.shape.clone();
        shape.pop();
        let data = to_complex(&zv.data).iter().map(|z| z.norm_sqr()).collect();
        Ok(self.push_op(Tensor { shape, data }, &[z], |g, p| {
            let zs = &p[0].data;
            vec![zs
                .chunks_exact(2)
                .zip(g)
                .flat_map(|(z, g)| [2.0 * z[0] * g, 2.0 * z[1] * g])
                .collect()]
        }))
    }

    /// Batched complex product `[B, r, k] x [B, k, c] -> [B, r, c]`.
    pub fn cmatmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, r, k) = cmat_dims(self.shape(a), "cmatmul")?;
        let (bb, k2, c) = cmat_dims(self.shape(b), "cmatmul")?;
        if ba != bb || k != k2 {
            return dim_err(format!(
                "cmatmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (av, bv) = (self.value(a).to_complex(), self.value(b).to_complex());
        let mut out = vec![ZERO; ba * r * c];
        for i in 0..ba {
            kernels::matmul(
                &av[i * r * k..(i + 1) * r * k],
                &bv[i * k * c..(i + 1) * k * c],
                r,
                k,
                c,
                &mut out[i * r * c..(i + 1) * r * c],
            );
        }
        let out = ctensor(vec![ba, r, c, 2], &out);
        Ok(self.push_op(out, &[a, b], move |g, p| {
            // dA = G B^H, dB = A^H G
            let (av, bv, gv) = (p[0].to_complex(), p[1].to_complex(), to_complex(g));
            let mut ga = vec![ZERO; ba * r * k];
            let mut gb = vec![ZERO; ba * k * c];
            let mut bh = vec![ZERO; c * k];
            let mut ah = vec![ZERO; k * r];
            for i in 0..ba {
                let (ai, bi, gi) = (
                    &av[i * r * k..(i + 1) * r * k],
                    &bv[i * k * c..(i + 1) * k * c],
                    &gv[i * r * c..(i + 1) * r * c],
                );
                kernels::conj_transpose(bi, k, c, &mut bh);
                kernels::matmul(gi, &bh, r, c, k, &mut ga[i * r * k..(i + 1) * r * k]);
                kernels::conj_transpose(ai, r, k, &mut ah);
                kernels::matmul(&ah, gi, k, r, c, &mut gb[i * k * c..(i + 1) * k * c]);
            }
            vec![to_interleaved(&ga), to_interleaved(&gb)]
        }))
    }

    pub fn conj_transpose(&mut self, a: Var) -> Result<Var> {
        let (b, r, c) = cmat_dims(self.shape(a), "conj_transpose")?;
        let av = self.value(a).to_complex();
        let mut out = vec![ZERO; b * r * c];
        for i in 0..b {
            kernels::conj_transpose(
                &av[i * r * c..(i + 1) * r * c],
                r,
                c,
                &mut out[i * r * c..(i + 1) * r * c],
            );
        }
        let out = ctensor(vec![b, c, r, 2], &out);
        Ok(self.push_op(out, &[a], move |g, _| {
            let gv = to_complex(g);
            let mut ga = vec![ZERO; b * r * c];
            for i in 0..b {
                kernels::conj_transpose(
                    &gv[i * r * c..(i + 1) * r * c],
                    c,
                    r,
                    &mut ga[i * r * c..(i + 1) * r * c],
                );
            }
            vec![to_interleaved(&ga)]
        }))
    }

    /// Plain (non-conjugating) transpose of each `[r, c]` matrix.
    pub fn ctranspose(&mut self, a: Var) -> Result<Var> {
        let (b, r, c) = cmat_dims(self.shape(a), "ctranspose")?;
        let av = self.value(a).to_complex();
        let mut out = vec![ZERO; b * r * c];
        for i in 0..b {
            for x in 0..r {
                for y in 0..c {
                    out[i * r * c + y * r + x] = av[i * r * c + x * c + y];
                }
            }
        }
        let out = ctensor(vec![b, c, r, 2], &out);
        Ok(self.push_op(out, &[a], move |g, _| {
            let gv = to_complex(g);
            let mut ga = vec![ZERO; b * r * c];
            for i in 0..b {
                for x in 0..r {
                    for y in 0..c {
                        ga[i * r * c + x * c + y] = gv[i * r * c + y * r + x];
                    }
                }
            }
            vec![to_interleaved(&ga)]
        }))
    }

    /// Scales row `i` of each `[r, c]` matrix by the real `s[b, i]`.
    pub fn row_scale_real(&mut self, a: Var, s: Var) -> Result<Var> {
        let (b, r, c) = cmat_dims(self.shape(a), "row_scale_real")?;
        if self.shape(s) != [b, r] {
            return dim_err(format!("row_scale_real: scale shape {:?}", self.shape(s)));
        }
        let (av, sv) = (self.value(a).to_complex(), &self.value(s).data);
        let mut out = vec![ZERO; b * r * c];
        for i in 0..b {
            kernels::row_scale_real(
                &av[i * r * c..(i + 1) * r * c],
                &sv[i * r..(i + 1) * r],
                c,
                &mut out[i * r * c..(i + 1) * r * c],
            );
        }
        let out = ctensor(vec![b, r, c, 2], &out);
        Ok(self.push_op(out, &[a, s], move |g, p| {
            let (av, sv, gv) = (p[0].to_complex(), &p[1].data, to_complex(g));
            let mut ga = vec![ZERO; b * r * c];
            let mut gs = vec![0.0; b * r];
            for row in 0..b * r {
                let span = row * c..(row + 1) * c;
                for e in span.clone() {
                    ga[e] = gv[e] * sv[row];
                }
                gs[row] = cdot(&gv[span.clone()], &av[span]).re;
            }
            vec![to_interleaved(&ga), gs]
        }))
    }

    /// Scales column `j` of each `[r, c]` matrix by the complex `s[b, j]`.
    pub fn col_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (b, r, c) = cmat_dims(self.shape(a), "col_scale")?;
        if self.shape(s) != [b, c, 2] {
            return dim_err(format!("col_scale: scale shape {:?}", self.shape(s)));
        }
        let (av, sv) = (self.value(a).to_complex(), self.value(s).to_complex());
        let mut out = vec![ZERO; b * r * c];
        for i in 0..b {
            kernels::col_scale(
                &av[i * r * c..(i + 1) * r * c],
                &sv[i * c..(i + 1) * c],
                r,
                &mut out[i * r * c..(i + 1) * r * c],
            );
        }
        let out = ctensor(vec![b, r, c, 2], &out);
        Ok(self.push_op(out, &[a, s], move |g, p| {
            let (av, sv, gv) = (p[0].to_complex(), p[1].to_complex(), to_complex(g));
            let mut ga = vec![ZERO; b * r * c];
            let mut gs = vec![ZERO; b * c];
            for i in 0..b {
                for row in 0..r {
                    for j in 0..c {
                        let e = (i * r + row) * c + j;
                        ga[e] = gv[e] * sv[i * c + j].conj();
                        gs[i * c + j] += gv[e] * av[e].conj();
                    }
                }
            }
            vec![to_interleaved(&ga), to_interleaved(&gs)]
        }))
    }

    /// `A + d I` per batch for square `A` and real `d: [B]`.
    pub fn add_diag_real(&mut self, a: Var, d: Var) -> Result<Var> {
        let (b, n, n2) = cmat_dims(self.shape(a), "add_diag_real")?;
        if n != n2 || self.shape(d) != [b] {
            return dim_err(format!(
                "add_diag_real: {:?} + diag {:?}",
                self.shape(a),
                self.shape(d)
            ));
        }
        let mut out = self.value(a).to_complex();
        let dv = &self.value(d).data;
        for i in 0..b {
            for j in 0..n {
                out[i * n * n + j * n + j] += C64::new(dv[i], 0.0);
            }
        }
        let out = ctensor(vec![b, n, n, 2], &out);
        Ok(self.push_op(out, &[a, d], move |g, _| {
            let gd = (0..b)
                .map(|i| (0..n).map(|j| g[2 * (i * n * n + j * n + j)]).sum())
                .collect();
            vec![g.to_vec(), gd]
        }))
    }

    /// Solves `A X = R` per batch for Hermitian positive-definite `A`
    /// (`[B, n, n]`) and `R` (`[B, n, c]`) by Cholesky factorization.
    ///
    /// Backward: `dR = A^{-H} dX` and `dA = -dR X^H`.
    pub fn csolve_hpd(&mut self, a: Var, rhs: Var) -> Result<Var> {
        let (b, n, n2) = cmat_dims(self.shape(a), "csolve_hpd")?;
        let (b2, n3, c) = cmat_dims(self.shape(rhs), "csolve_hpd")?;
        if n != n2 || b != b2 || n != n3 {
            return dim_err(format!(
                "csolve_hpd: A {:?}, R {:?}",
                self.shape(a),
                self.shape(rhs)
            ));
        }
        let mut factors = self.value(a).to_complex();
        let mut x = self.value(rhs).to_complex();
        for i in 0..b {
            let l = &mut factors[i * n * n..(i + 1) * n * n];
            cholesky_in_place(l, n)
                .map_err(|e| Error::NotPositiveDefinite(format!("batch item {i}: {e}")))?;
            cholesky_solve_in_place(l, n, &mut x[i * n * c..(i + 1) * n * c], c);
        }
        let out = ctensor(vec![b, n, c, 2], &x);
        Ok(self.push_op(out, &[a, rhs], move |g, _| {
            let mut grhs = to_complex(g);
            let mut ga = vec![ZERO; b * n * n];
            for i in 0..b {
                let gr = &mut grhs[i * n * c..(i + 1) * n * c];
                cholesky_solve_in_place(&factors[i * n * n..(i + 1) * n * n], n, gr, c);
                let xi = &x[i * n * c..(i + 1) * n * c];
                for r in 0..n {
                    for s in 0..n {
                        let mut acc = ZERO;
                        for j in 0..c {
                            acc += gr[r * c + j] * xi[s * c + j].conj();
                        }
                        ga[i * n * n + r * n + s] = -acc;
                    }
                }
            }
            vec![to_interleaved(&ga), to_interleaved(&grhs)]
        }))
    }

    /// Rescales each batch item to squared Frobenius norm `p`.
    pub fn power_normalize(&mut self, w: Var, p: f64) -> Result<Var> {
        let (b, r, c) = cmat_dims(self.shape(w), "power_normalize")?;
        let mut out = self.value(w).to_complex();
        let mut norms = Vec::with_capacity(b);
        for i in 0..b {
            let norm = kernels::power_normalize(&mut out[i * r * c..(i + 1) * r * c], p);
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Degenerate(format!("beamformer norm {norm} in batch item {i}")));
            }
            norms.push(norm);
        }
        let shape = vec![b, r, c, 2];
        Ok(self.push_op(ctensor(shape, &out), &[w], move |g, parents| {
            // y = sqrt(p) x / |x|:  dx = sqrt(p)/|x| (dy - x Re<x, dy> / |x|^2)
            let (xv, gv) = (parents[0].to_complex(), to_complex(g));
            let mut gx = vec![ZERO; b * r * c];
            for i in 0..b {
                let span = i * r * c..(i + 1) * r * c;
                let (xi, gi) = (&xv[span.clone()], &gv[span.clone()]);
                let nrm = norms[i];
                let proj = cdot(xi, gi).re / (nrm * nrm);
                let s = p.sqrt() / nrm;
                for (e, (x, g)) in xi.iter().zip(gi).enumerate() {
                    gx[span.start + e] = (g - x * proj) * s;
                }
            }
            vec![to_interleaved(&gx)]
        }))
    }
}
