//! Beamforming updater: effective channel from the applied RIS phases, the
//! learned initialization `f_w'`, the receiver/weight network `f_ul`, and
//! one unrolled closed-form WMMSE step inside the training graph.

use std::f64::consts::LN_2;

use rand::Rng;

use crate::autodiff::{to_complex, to_interleaved, Bound, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{CMatrix, C64};
use crate::nn::{ForwardCtx, HiddenStyle, Mlp};
use crate::sysmodel::{effective_channel, rates_from_effective, ChannelSample, SystemConfig};

pub const DROPOUT: f64 = 0.5;

/// `G = H_AU + H_RU diag(e^{j theta}) H_AR` for each sample, as a
/// `[B, K, M, 2]` graph node differentiable in `theta: [B, N]`. The forward
/// values come from [`sysmodel::effective_channel`](effective_channel), so
/// they match the rate computations bit for bit.
pub fn effective_channel_op(tape: &mut Tape, theta: Var, samples: &[&ChannelSample]) -> Result<Var> {
    let b = samples.len();
    let Some(first) = samples.first() else {
        return dim_err("effective channel of an empty batch");
    };
    let (m, k, n) = first.dims();
    if tape.shape(theta) != [b, n] {
        return dim_err(format!("theta shape {:?}, expected [{b}, {n}]", tape.shape(theta)));
    }
    let tv = tape.value(theta).data().to_vec();
    let mut data = Vec::with_capacity(b * k * m * 2);
    let mut links = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        if s.dims() != (m, k, n) {
            return dim_err("mixed geometries in one batch");
        }
        let g = effective_channel(s, &tv[i * n..(i + 1) * n])?;
        g.extend_interleaved(&mut data);
        links.push((s.h_ru.clone(), s.h_ar.clone()));
    }
    let out = Tensor::new(vec![b, k, m, 2], data)?;
    Ok(tape.push_op(out, &[theta], move |g, p| {
        // dG_kj/dtheta_n = j e^{j theta_n} h_ru[k, n] h_ar[n, j]
        let gv = to_complex(g);
        let tv = p[0].data();
        let mut gt = vec![0.0; b * n];
        for (i, (h_ru, h_ar)) in links.iter().enumerate() {
            for t in 0..n {
                let phi = C64::from_polar(1.0, tv[i * n + t]) * C64::new(0.0, 1.0);
                let mut acc = 0.0;
                for u in 0..k {
                    let c = phi * h_ru[(u, t)];
                    for j in 0..m {
                        acc += (gv[(i * k + u) * m + j].conj() * c * h_ar[(t, j)]).re;
                    }
                }
                gt[i * n + t] = acc;
            }
        }
        vec![gt]
    }))
}

/// Weighted sum-rate per sample, `[B]`, from `G: [B, K, M, 2]` and
/// `W: [B, M, K, 2]`. Forward values come from
/// [`rates_from_effective`], so they equal the system-model rates exactly.
pub fn sum_rate_op(tape: &mut Tape, g: Var, w: Var, sigma2: f64, priorities: &[f64]) -> Result<Var> {
    let (b, k, m) = match tape.shape(g) {
        [b, k, m, 2] => (*b, *k, *m),
        s => return dim_err(format!("G shape {s:?}")),
    };
    if tape.shape(w) != [b, m, k, 2] || priorities.len() != k {
        return dim_err(format!("W shape {:?} for G {:?}", tape.shape(w), tape.shape(g)));
    }
    let (gv, wv) = (tape.value(g).data(), tape.value(w).data());
    let mut sums = Vec::with_capacity(b);
    for i in 0..b {
        let gm = CMatrix::from_interleaved(k, m, &gv[i * 2 * k * m..(i + 1) * 2 * k * m])?;
        let wm = CMatrix::from_interleaved(m, k, &wv[i * 2 * m * k..(i + 1) * 2 * m * k])?;
        sums.push(rates_from_effective(&gm, &wm, sigma2, priorities)?.weighted_sum);
    }
    let prio = priorities.to_vec();
    let out = Tensor::new(vec![b], sums)?;
    Ok(tape.push_op(out, &[g, w], move |up, p| {
        let (gv, wv) = (p[0].to_complex(), p[1].to_complex());
        let mut gg = vec![C64::new(0.0, 0.0); b * k * m];
        let mut gw = vec![C64::new(0.0, 0.0); b * m * k];
        for i in 0..b {
            let gi = &gv[i * k * m..(i + 1) * k * m];
            let wi = &wv[i * m * k..(i + 1) * m * k];
            // z[u][l] = g_u w_l
            let mut z = vec![C64::new(0.0, 0.0); k * k];
            for u in 0..k {
                for l in 0..k {
                    z[u * k + l] = (0..m).map(|j| gi[u * m + j] * wi[j * k + l]).sum();
                }
            }
            for u in 0..k {
                let total: f64 = (0..k).map(|l| z[u * k + l].norm_sqr()).sum::<f64>() + sigma2;
                let denom = total - z[u * k + u].norm_sqr();
                let scale = up[i] * prio[u] / LN_2;
                for l in 0..k {
                    let coef = if l == u { 1.0 / total } else { 1.0 / total - 1.0 / denom };
                    let zbar = z[u * k + l] * (2.0 * scale * coef);
                    for j in 0..m {
                        gg[i * k * m + u * m + j] += zbar * wi[j * k + l].conj();
                        gw[i * m * k + j * k + l] += gi[u * m + j].conj() * zbar;
                    }
                }
            }
        }
        vec![to_interleaved(&gg), to_interleaved(&gw)]
    }))
}

/// Closed-form WMMSE beamformer on the graph:
/// `w_k = p_k u_k l_k (sum_l p_l |u_l|^2 l_l (s2/P I + g_l^H g_l))^-1 g_k^H`,
/// scaled to `||W||_F^2 = P`.
///
/// Shapes: `u: [B, K, 2]`, `lambda: [B, K]`, `g: [B, K, M, 2]`; returns
/// `[B, M, K, 2]`. The operation sequence mirrors
/// [`wmmse_beamformer`](crate::wmmse::wmmse_beamformer) step for step.
pub fn unrolled_wmmse_step(
    tape: &mut Tape,
    u: Var,
    lambda: Var,
    g: Var,
    p_total: f64,
    sigma2: f64,
    priorities: &[f64],
) -> Result<Var> {
    let (b, k) = match tape.shape(lambda) {
        [b, k] => (*b, *k),
        s => return dim_err(format!("lambda shape {s:?}")),
    };
    if tape.shape(u) != [b, k, 2] || priorities.len() != k {
        return dim_err(format!("u shape {:?} for {k} users", tape.shape(u)));
    }
    let prio = tape.constant(Tensor::new(vec![b, k], priorities.repeat(b))?);
    let u2 = tape.cabs2(u)?;
    let u2l = tape.mul(u2, lambda)?;
    let alpha = tape.mul(u2l, prio)?;
    let weight = tape.mul(lambda, prio)?;
    let u_col = tape.reshape(u, vec![b, k, 1, 2])?;
    let beta = tape.row_scale_real(u_col, weight)?;
    let beta = tape.reshape(beta, vec![b, k, 2])?;
    for (i, item) in tape.value(beta).data().chunks_exact(2 * k).enumerate() {
        if item.iter().all(|v| *v == 0.0) {
            return Err(Error::Degenerate(format!("all p_k u_k lambda_k are zero in batch item {i}")));
        }
    }

    let scaled = tape.row_scale_real(g, alpha)?;
    let gh = tape.conj_transpose(g)?;
    let a0 = tape.cmatmul(gh, scaled)?;
    let alpha_sum = tape.sum_last(alpha);
    let reg = tape.scale(alpha_sum, sigma2 / p_total);
    let a = tape.add_diag_real(a0, reg)?;
    let rhs = tape.col_scale(gh, beta)?;
    let w = tape.csolve_hpd(a, rhs)?;
    tape.power_normalize(w, p_total)
}

/// RMS magnitude of complex entries, or 1 when all are zero.
fn rms(values: impl Iterator<Item = C64>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for z in values {
        sum += z.norm_sqr();
        count += 1;
    }
    let r = (sum / count.max(1) as f64).sqrt();
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

pub struct UpdaterOutput {
    pub w_prime: Var,
    pub u: Var,
    pub lambda: Var,
    /// Final normalized beamformer `[B, M, K, 2]`.
    pub w: Var,
}

/// `f_w'` and one `f_ul` per unrolled layer (untied).
#[derive(Debug, Clone)]
pub struct Updater {
    pub f_w: Mlp,
    pub f_ul: Vec<Mlp>,
    /// Input scales (RMS entry magnitudes on the training set).
    pub w_scale: ParamId,
    pub g_scale: ParamId,
    m: usize,
    k: usize,
}

impl Updater {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, cfg: &SystemConfig, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("at least one unrolled layer is required".into()));
        }
        let mk4 = 4 * cfg.m * cfg.k;
        let style = HiddenStyle {
            relu: true,
            batchnorm: false,
            dropout: DROPOUT,
        };
        let f_w = Mlp::new(params, rng, "f_w", &[mk4, mk4, mk4, mk4, 2 * cfg.m * cfg.k], style)?;
        let f_ul = (0..layers)
            .map(|l| {
                let name = if l == 0 { "f_ul".to_string() } else { format!("f_ul{l}") };
                Mlp::new(params, rng, &name, &[mk4, mk4, mk4, mk4, 3 * cfg.k], style)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            f_w,
            f_ul,
            w_scale: params.add("updater/w_scale", Tensor::scalar(1.0), false)?,
            g_scale: params.add("updater/g_scale", Tensor::scalar(1.0), false)?,
            m: cfg.m,
            k: cfg.k,
        })
    }

    /// Sets the input scales from labeled training samples: `W_opt` entries
    /// and entries of `G(theta_opt)`.
    pub fn fit_input_stats(&self, params: &mut ParamSet, samples: &[ChannelSample]) -> Result<()> {
        let w = rms(samples.iter().flat_map(|s| s.w_opt.data().iter().copied()));
        let mut gs = Vec::new();
        for s in samples {
            gs.extend_from_slice(effective_channel(s, &s.theta_opt)?.data());
        }
        let g = rms(gs.into_iter());
        params.get_mut(self.w_scale).data_mut()[0] = w;
        params.get_mut(self.g_scale).data_mut()[0] = g;
        Ok(())
    }

    fn flat_scaled(&self, tape: &mut Tape, x: Var, scale: f64) -> Result<Var> {
        let b = tape.shape(x)[0];
        let flat = tape.reshape(x, vec![b, 2 * self.m * self.k])?;
        Ok(tape.scale(flat, 1.0 / scale))
    }

    /// `w_init: [B, M, K, 2]` (the labels' `W_opt`), `g: [B, K, M, 2]`.
    /// With `skip_init`, `W_opt` replaces `w'` at the input of `f_ul`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        bound: &Bound,
        w_init: Var,
        g: Var,
        cfg: &SystemConfig,
        ctx: &mut ForwardCtx,
        skip_init: bool,
    ) -> Result<UpdaterOutput> {
        let b = tape.shape(g)[0];
        let (ws, gs) = (params.get(self.w_scale).data()[0], params.get(self.g_scale).data()[0]);
        let w_in = self.flat_scaled(tape, w_init, ws)?;
        let gt = tape.ctranspose(g)?;
        let g_in = self.flat_scaled(tape, gt, gs)?;
        let x = tape.concat_last(&[w_in, g_in])?;
        let w_prime = self.f_w.forward(params, tape, bound, x, ctx)?;
        let prio = cfg.priority_vec();
        let mut feed = if skip_init { w_in } else { w_prime };
        let mut last = None;
        for net in &self.f_ul {
            let x = tape.concat_last(&[feed, g_in])?;
            let out = net.forward(params, tape, bound, x, ctx)?;
            let u = tape.slice_last(out, 0, 2 * self.k)?;
            let u = tape.reshape(u, vec![b, self.k, 2])?;
            let lam = tape.slice_last(out, 2 * self.k, 3 * self.k)?;
            let lambda = tape.abs(lam);
            let w = unrolled_wmmse_step(tape, u, lambda, g, cfg.p, cfg.sigma2, &prio)?;
            feed = self.flat_scaled(tape, w, ws)?;
            last = Some((u, lambda, w));
        }
        let (u, lambda, w) = last.expect("at least one layer");
        Ok(UpdaterOutput {
            w_prime,
            u,
            lambda,
            w,
        })
    }
}

/// Stacks per-sample `W_opt` (`M x K`) into a `[B, M, K, 2]` tensor.
pub fn stack_w_opt(samples: &[&ChannelSample]) -> Result<Tensor> {
    let (m, k, _) = samples.first().map(|s| s.dims()).unwrap_or((0, 0, 0));
    let mut data = Vec::with_capacity(samples.len() * 2 * m * k);
    for s in samples {
        s.w_opt.extend_interleaved(&mut data);
    }
    Tensor::new(vec![samples.len(), m, k, 2], data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig, Mode};
    use crate::sysmodel::{achievable_rates, gen_channels};
    use crate::wmmse::{random_phase, wmmse_beamformer};

    fn small_cfg() -> SystemConfig {
        // Moderate SNR keeps finite differences well conditioned.
        SystemConfig {
            m: 2,
            k: 2,
            n: 4,
            n_c: 2,
            sigma2: 1e-5,
            ..SystemConfig::desk()
        }
    }

    fn random_u_lambda(rng: &mut ChaCha8Rng, k: usize) -> (Vec<C64>, Vec<f64>) {
        let u = (0..k).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let l = (0..k).map(|_| rng.gen_range(0.1..3.0)).collect();
        (u, l)
    }

    fn graph_step(u: &[C64], lambda: &[f64], g: &CMatrix, cfg: &SystemConfig) -> Vec<f64> {
        let (k, m) = g.shape();
        let mut tape = Tape::new(Mode::Eval);
        let uv = tape.constant(Tensor::from_complex(&[1, k], u).unwrap());
        let lv = tape.constant(Tensor::new(vec![1, k], lambda.to_vec()).unwrap());
        let gv = tape.constant(Tensor::from_complex(&[1, k, m], g.data()).unwrap());
        let w = unrolled_wmmse_step(&mut tape, uv, lv, gv, cfg.p, cfg.sigma2, &cfg.priority_vec()).unwrap();
        tape.value(w).data().to_vec()
    }

    #[test]
    fn unrolled_step_matches_classical_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (seed, cfg) in [(0, SystemConfig::desk()), (1, small_cfg())] {
            let s = gen_channels(&cfg, seed).unwrap();
            let g = effective_channel(&s, &random_phase(&mut rng, cfg.n)).unwrap();
            let (u, l) = random_u_lambda(&mut rng, cfg.k);
            let graph = graph_step(&u, &l, &g, &cfg);
            let classic = wmmse_beamformer(&u, &l, &g, cfg.p, cfg.sigma2, &cfg.priority_vec()).unwrap();
            let diff = graph
                .iter()
                .zip(classic.to_interleaved())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12 * cfg.p.sqrt(), "diff {diff}");
            let power: f64 = graph.iter().map(|v| v * v).sum();
            assert!((power / cfg.p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_channel_special_cases() {
        let cfg = small_cfg();
        let s = gen_channels(&cfg, 3).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let th = tape.constant(Tensor::zeros(vec![1, cfg.n]));
        let g = effective_channel_op(&mut tape, th, &[&s]).unwrap();
        let expect = s.h_au.add(&s.h_ru.matmul(&s.h_ar).unwrap()).unwrap();
        let got = CMatrix::from_interleaved(cfg.k, cfg.m, tape.value(g).data()).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-15);

        let mut no_ris = s.clone();
        no_ris.h_ru = CMatrix::zeros(cfg.k, cfg.n);
        let th = tape.constant(Tensor::new(vec![1, cfg.n], vec![0.7; cfg.n]).unwrap());
        let g = effective_channel_op(&mut tape, th, &[&no_ris]).unwrap();
        assert_eq!(tape.value(g).data(), s.h_au.to_interleaved());
    }

    #[test]
    fn graph_rates_equal_system_model_rates() {
        let cfg = SystemConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<_> = (0..3).map(|i| gen_channels(&cfg, i).unwrap()).collect();
        let refs: Vec<_> = samples.iter().collect();
        let thetas: Vec<f64> = (0..3).flat_map(|_| random_phase(&mut rng, cfg.n)).collect();
        let ws: Vec<CMatrix> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let g = effective_channel(s, &thetas[i * cfg.n..(i + 1) * cfg.n]).unwrap();
                crate::wmmse::mrt_beamformer(&g, cfg.p)
            })
            .collect();
        let mut tape = Tape::new(Mode::Eval);
        let th = tape.constant(Tensor::new(vec![3, cfg.n], thetas.clone()).unwrap());
        let g = effective_channel_op(&mut tape, th, &refs).unwrap();
        let wdata: Vec<f64> = ws.iter().flat_map(|w| w.to_interleaved()).collect();
        let w = tape.constant(Tensor::new(vec![3, cfg.m, cfg.k, 2], wdata).unwrap());
        let r = sum_rate_op(&mut tape, g, w, cfg.sigma2, &cfg.priority_vec()).unwrap();
        for i in 0..3 {
            let direct = achievable_rates(&ws[i], &thetas[i * cfg.n..(i + 1) * cfg.n], &samples[i], &cfg).unwrap();
            assert_eq!(tape.value(r).data()[i], direct.weighted_sum);
        }
    }

    #[test]
    fn rate_gradient_through_theta() {
        let cfg = small_cfg();
        let s = gen_channels(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = Tensor::new(vec![1, cfg.n], random_phase(&mut rng, cfg.n)).unwrap();
        let w = Tensor::new(
            vec![1, cfg.m, cfg.k, 2],
            (0..2 * cfg.m * cfg.k).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        )
        .unwrap();
        let report = grad_check(
            &|tp: &mut Tape, v: &[Var]| {
                let g = effective_channel_op(tp, v[0], &[&s])?;
                let r = sum_rate_op(tp, g, v[1], cfg.sigma2, &[1.0, 0.5])?;
                Ok(tp.sum_all(r))
            },
            &[theta, w],
            &GradCheckConfig {
                tol: 1e-5,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn unrolled_step_gradients() {
        let cfg = small_cfg();
        let s = gen_channels(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = effective_channel(&s, &random_phase(&mut rng, cfg.n)).unwrap();
        let (u, l) = random_u_lambda(&mut rng, cfg.k);
        let inputs = [
            Tensor::from_complex(&[1, cfg.k], &u).unwrap(),
            Tensor::new(vec![1, cfg.k], l).unwrap(),
            Tensor::from_complex(&[1, cfg.k, cfg.m], g.data()).unwrap(),
        ];
        let report = grad_check(
            &|tp: &mut Tape, v: &[Var]| {
                let w = unrolled_wmmse_step(tp, v[0], v[1], v[2], cfg.p, cfg.sigma2, &[1.0, 1.0])?;
                let r = sum_rate_op(tp, v[2], w, cfg.sigma2, &[1.0, 1.0])?;
                Ok(tp.sum_all(r))
            },
            &inputs,
            &GradCheckConfig {
                tol: 1e-5,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn networks_have_declared_widths_and_nonnegative_lambda() {
        let cfg = SystemConfig::desk();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let up = Updater::new(&mut ps, &mut rng, &cfg, 1).unwrap();
        assert_eq!(up.f_w.output_dim(), 24);
        assert_eq!(up.f_ul[0].output_dim(), 9);
        assert_eq!(up.f_ul[0].input_dim(), 48);
        let samples: Vec<_> = (0..4)
            .map(|i| {
                let mut s = gen_channels(&cfg, i).unwrap();
                s.theta_opt = vec![0.0; cfg.n];
                s.w_opt = crate::wmmse::mrt_beamformer(&effective_channel(&s, &s.theta_opt).unwrap(), cfg.p);
                s
            })
            .collect();
        up.fit_input_stats(&mut ps, &samples).unwrap();
        let refs: Vec<_> = samples.iter().collect();
        let mut tape = Tape::new(Mode::Train);
        let bound = ps.bind(&mut tape);
        let w0 = tape.constant(stack_w_opt(&refs).unwrap());
        let th = tape.constant(Tensor::zeros(vec![4, cfg.n]));
        let g = effective_channel_op(&mut tape, th, &refs).unwrap();
        let mut ctx = ForwardCtx::new(&mut rng);
        let out = up.forward(&ps, &mut tape, &bound, w0, g, &cfg, &mut ctx, false).unwrap();
        assert!(tape.value(out.lambda).data().iter().all(|l| *l >= 0.0));
        for item in tape.value(out.w).data().chunks_exact(2 * cfg.m * cfg.k) {
            let p: f64 = item.iter().map(|v| v * v).sum();
            assert!((p / cfg.p - 1.0).abs() < 1e-12);
        }
        let r = sum_rate_op(&mut tape, g, out.w, cfg.sigma2, &cfg.priority_vec()).unwrap();
        let loss = tape.mean_all(r);
        let grads = tape.backward(loss).unwrap();
        let gl = ps.collect_grads(&bound, &grads);
        let id = ps.find("f_ul/affine0/weight").unwrap();
        let g0 = gl[id.index()].as_ref().unwrap();
        assert!(g0.iter().all(|v| v.is_finite()) && g0.iter().any(|v| *v != 0.0));
    }
}
