//! Classical WMMSE beamforming and the WMMSE + phase-iteration optimizer
//! that produces reference labels `(W_opt, theta_opt)` and the upper bound.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve_in_place, kernels, CMatrix, C64};
use crate::sysmodel::{effective_channel, rates_from_effective, ChannelSample, SystemConfig};

/// Inner WMMSE stopping tolerance on the weighted sum-rate, bits/s/Hz.
pub const INNER_TOL: f64 = 1e-6;
pub const INNER_MAX_ITER: usize = 50;
pub const OUTER_ITERS: usize = 100;
/// Grid resolution of the per-element phase search.
pub const PHASE_GRID: usize = 64;
const GOLDEN_STEPS: usize = 32;
/// The outer loop stops early once an iteration gains less than this.
pub const OUTER_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverWeights {
    /// MMSE receivers `u_k`.
    pub u: Vec<C64>,
    /// Weights `lambda_k = 1 / e_k`.
    pub lambda: Vec<f64>,
    /// Mean squared errors `e_k`.
    pub mse: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WmmseState {
    pub u: Vec<C64>,
    pub lambda: Vec<f64>,
    pub w: CMatrix,
    /// Weighted sum-rate of the starting point followed by one entry per
    /// iteration.
    pub trace: Vec<f64>,
}

impl WmmseState {
    pub fn objective(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }

    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct PhaseIterResult {
    pub w: CMatrix,
    pub theta: Vec<f64>,
    pub objective: f64,
    /// Best weighted sum-rate seen after each outer iteration.
    pub trace: Vec<f64>,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = x - 2.0 * PI * ((x + PI) / (2.0 * PI)).floor();
    if y >= PI {
        y - 2.0 * PI
    } else if y < -PI {
        -PI
    } else {
        y
    }
}

/// I.i.d. uniform phases on `[-pi, pi)`.
pub fn random_phase(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-PI..PI)).collect()
}

/// Closed-form MMSE receivers and MSE weights for beamformer `W` on the
/// effective channel `G`.
pub fn mmse_receiver_and_weights(g: &CMatrix, w: &CMatrix, sigma2: f64) -> Result<ReceiverWeights> {
    let (k, m) = g.shape();
    if w.shape() != (m, k) {
        return dim_err(format!("W is {:?}, expected {:?}", w.shape(), (m, k)));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma2 must be positive, got {sigma2}")));
    }
    let gw = g.matmul(w)?;
    let mut u = Vec::with_capacity(k);
    let mut lambda = Vec::with_capacity(k);
    let mut mse = Vec::with_capacity(k);
    for i in 0..k {
        let total: f64 = (0..k).map(|l| gw[(i, l)].norm_sqr()).sum::<f64>() + sigma2;
        let ui = gw[(i, i)] / total;
        let e = 1.0 - (ui.conj() * gw[(i, i)]).re;
        if !(e > 0.0) {
            return Err(Error::Domain(format!("non-positive MSE {e:.3e} for user {i}")));
        }
        u.push(ui);
        lambda.push(1.0 / e);
        mse.push(e);
    }
    Ok(ReceiverWeights { u, lambda, mse })
}

/// Closed-form WMMSE beamformer
/// `w_k = p_k u_k lambda_k (sum_l p_l |u_l|^2 lambda_l (sigma2/P I + g_l^H g_l))^-1 g_k^H`
/// followed by scaling to `||W||_F^2 = P`.
///
/// The operation order here is mirrored op for op by the unrolled graph in
/// [`crate::updater`]; keep the two in sync.
pub fn wmmse_beamformer(
    u: &[C64],
    lambda: &[f64],
    g: &CMatrix,
    p_total: f64,
    sigma2: f64,
    priorities: &[f64],
) -> Result<CMatrix> {
    let (k, m) = g.shape();
    if u.len() != k || lambda.len() != k || priorities.len() != k {
        return dim_err(format!(
            "u/lambda/priorities lengths {}/{}/{} for {k} users",
            u.len(),
            lambda.len(),
            priorities.len()
        ));
    }
    if lambda.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Domain("lambda must be non-negative".into()));
    }
    let alpha: Vec<f64> = (0..k)
        .map(|i| u[i].norm_sqr() * lambda[i] * priorities[i])
        .collect();
    let weight: Vec<f64> = (0..k).map(|i| lambda[i] * priorities[i]).collect();
    let beta: Vec<C64> = (0..k).map(|i| u[i] * weight[i]).collect();
    if beta.iter().all(|b| *b == C64::new(0.0, 0.0)) || alpha.iter().all(|a| *a == 0.0) {
        return Err(Error::Degenerate("all p_k u_k lambda_k are zero".into()));
    }

    let mut scaled = vec![C64::new(0.0, 0.0); k * m];
    kernels::row_scale_real(g.data(), &alpha, m, &mut scaled);
    let mut gh = vec![C64::new(0.0, 0.0); m * k];
    kernels::conj_transpose(g.data(), k, m, &mut gh);
    let mut a = vec![C64::new(0.0, 0.0); m * m];
    kernels::matmul(&gh, &scaled, m, k, m, &mut a);
    let reg = alpha.iter().sum::<f64>() * (sigma2 / p_total);
    for i in 0..m {
        a[i * m + i] += C64::new(reg, 0.0);
    }
    let mut rhs = vec![C64::new(0.0, 0.0); m * k];
    kernels::col_scale(&gh, &beta, m, &mut rhs);
    cholesky_in_place(&mut a, m)?;
    cholesky_solve_in_place(&a, m, &mut rhs, k);
    kernels::power_normalize(&mut rhs, p_total);
    CMatrix::from_vec(m, k, rhs)
}

/// Maximum-ratio transmission at full power, the default WMMSE start.
pub fn mrt_beamformer(g: &CMatrix, p_total: f64) -> CMatrix {
    let mut w = g.conj_transpose();
    kernels::power_normalize(w.data_mut(), p_total);
    w
}

/// Alternates receiver/weight and beamformer updates on a fixed RIS phase
/// vector until the weighted sum-rate moves by less than `tol`.
pub fn wmmse_fixed_phase(
    sample: &ChannelSample,
    theta: &[f64],
    cfg: &SystemConfig,
    init: Option<&CMatrix>,
    max_iter: usize,
    tol: f64,
) -> Result<WmmseState> {
    let g = effective_channel(sample, theta)?;
    wmmse_on_channel(&g, cfg, init, max_iter, tol)
}

pub fn wmmse_on_channel(
    g: &CMatrix,
    cfg: &SystemConfig,
    init: Option<&CMatrix>,
    max_iter: usize,
    tol: f64,
) -> Result<WmmseState> {
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be >= 1".into()));
    }
    let prio = cfg.priority_vec();
    let mut w = match init {
        Some(w0) => w0.clone(),
        None => mrt_beamformer(g, cfg.p),
    };
    let mut trace = vec![rates_from_effective(g, &w, cfg.sigma2, &prio)?.weighted_sum];
    let mut u = vec![C64::new(0.0, 0.0); cfg.k];
    let mut lambda = vec![1.0; cfg.k];
    for _ in 0..max_iter {
        let rw = mmse_receiver_and_weights(g, &w, cfg.sigma2)?;
        w = wmmse_beamformer(&rw.u, &rw.lambda, g, cfg.p, cfg.sigma2, &prio)?;
        u = rw.u;
        lambda = rw.lambda;
        let obj = rates_from_effective(g, &w, cfg.sigma2, &prio)?.weighted_sum;
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if (obj - prev).abs() < tol {
            break;
        }
    }
    Ok(WmmseState { u, lambda, w, trace })
}

/// Contribution of RIS element `n` at unit reflection: `h_ru[:, n] H_AR[n, :]`.
fn element_term(sample: &ChannelSample, n: usize) -> CMatrix {
    let (k, m) = sample.h_au.shape();
    CMatrix::from_fn(k, m, |i, j| sample.h_ru[(i, n)] * sample.h_ar[(n, j)])
}

/// Coordinate-wise phase update. Each candidate phase is scored by the
/// weighted sum-rate of the closed-form beamformer recomputed from the
/// fixed `(u, lambda)` on the candidate channel; holding `W` itself fixed
/// would pin the phases wherever `W` nulls the interference. An element
/// moves to the best of a uniform grid refined by golden-section search,
/// and only if that strictly improves the score.
///
/// Returns the beamformer for the final phases and its objective.
fn phase_sweep(
    sample: &ChannelSample,
    u: &[C64],
    lambda: &[f64],
    theta: &mut [f64],
    cfg: &SystemConfig,
) -> Result<(CMatrix, f64)> {
    let prio = cfg.priority_vec();
    let score = |g: &CMatrix| -> Result<(CMatrix, f64)> {
        let w = wmmse_beamformer(u, lambda, g, cfg.p, cfg.sigma2, &prio)?;
        let r = rates_from_effective(g, &w, cfg.sigma2, &prio)?.weighted_sum;
        Ok((w, r))
    };
    let mut g = effective_channel(sample, theta)?;
    let (mut w_cur, mut f_cur) = score(&g)?;
    let (k, m) = g.shape();
    let mut trial = CMatrix::zeros(k, m);
    for n in 0..cfg.n {
        let term = element_term(sample, n);
        let old = C64::from_polar(1.0, theta[n]);
        let base: Vec<C64> = g.data().iter().zip(term.data()).map(|(a, t)| a - old * t).collect();
        let mut eval = |t: f64| -> Result<f64> {
            let phi = C64::from_polar(1.0, t);
            for (dst, (b, r)) in trial.data_mut().iter_mut().zip(base.iter().zip(term.data())) {
                *dst = b + phi * r;
            }
            Ok(score(&trial)?.1)
        };
        let step = 2.0 * PI / PHASE_GRID as f64;
        let (mut best_t, mut best_f) = (theta[n], f_cur);
        for i in 0..PHASE_GRID {
            let t = -PI + step * i as f64;
            let f = eval(t)?;
            if f > best_f {
                best_t = t;
                best_f = f;
            }
        }
        // golden-section refinement around the best point so far
        let gr = (5f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (best_t - step, best_t + step);
        let mut x1 = hi - gr * (hi - lo);
        let mut x2 = lo + gr * (hi - lo);
        let mut f1 = eval(x1)?;
        let mut f2 = eval(x2)?;
        for _ in 0..GOLDEN_STEPS {
            if f1 >= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - gr * (hi - lo);
                f1 = eval(x1)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + gr * (hi - lo);
                f2 = eval(x2)?;
            }
        }
        let (gt, gf) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
        if gf > best_f {
            best_t = gt;
            best_f = gf;
        }
        if best_f > f_cur {
            theta[n] = wrap_phase(best_t);
            g = effective_channel(sample, theta)?;
            let (w, f) = score(&g)?;
            w_cur = w;
            f_cur = f;
        }
    }
    Ok((w_cur, f_cur))
}

/// Joint beamformer and phase optimization by alternating WMMSE (at fixed
/// phases) with coordinate-wise phase updates (at fixed beamformer).
///
/// Starts from `theta = 0`, keeps the best pair seen, and finishes with a
/// WMMSE pass on the best phases so the returned `W` is a WMMSE fixed point
/// for the returned `theta`.
pub fn wmmse_pi(sample: &ChannelSample, cfg: &SystemConfig, outer_iters: usize) -> Result<PhaseIterResult> {
    if outer_iters == 0 {
        return Err(Error::Config("outer_iters must be >= 1".into()));
    }
    sample.check_dims(cfg)?;
    let prio = cfg.priority_vec();
    let mut theta = vec![0.0; cfg.n];
    let mut warm: Option<CMatrix> = None;
    let mut best_w = CMatrix::zeros(cfg.m, cfg.k);
    let mut best_theta = theta.clone();
    let mut best = f64::NEG_INFINITY;
    let mut trace = Vec::with_capacity(outer_iters);

    let consider = |w: &CMatrix, th: &[f64], best: &mut f64, bw: &mut CMatrix, bt: &mut Vec<f64>| -> Result<()> {
        let g = effective_channel(sample, th)?;
        let obj = rates_from_effective(&g, w, cfg.sigma2, &prio)?.weighted_sum;
        if obj > *best {
            *best = obj;
            *bw = w.clone();
            *bt = th.to_vec();
        }
        Ok(())
    };

    for _ in 0..outer_iters {
        let before = best;
        let st = wmmse_fixed_phase(sample, &theta, cfg, warm.as_ref(), INNER_MAX_ITER, INNER_TOL)?;
        consider(&st.w, &theta, &mut best, &mut best_w, &mut best_theta)?;
        let (w, _) = phase_sweep(sample, &st.u, &st.lambda, &mut theta, cfg)?;
        consider(&w, &theta, &mut best, &mut best_w, &mut best_theta)?;
        warm = Some(w);
        trace.push(best);
        if best - before < OUTER_TOL {
            break;
        }
    }

    let polish = wmmse_fixed_phase(sample, &best_theta, cfg, Some(&best_w), INNER_MAX_ITER, INNER_TOL)?;
    if polish.objective() >= best {
        best = polish.objective();
        best_w = polish.w;
    }
    if let Some(last) = trace.last_mut() {
        *last = best;
    }
    Ok(PhaseIterResult {
        w: best_w,
        theta: best_theta,
        objective: best,
        trace,
    })
}

/// Fills `(W_opt, theta_opt)` in place.
pub fn label_sample(sample: &mut ChannelSample, cfg: &SystemConfig) -> Result<f64> {
    let res = wmmse_pi(sample, cfg, OUTER_ITERS)?;
    sample.w_opt = res.w;
    sample.theta_opt = res.theta;
    Ok(res.objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::gen_channels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_g(rng: &mut impl Rng, k: usize, m: usize) -> CMatrix {
        CMatrix::from_fn(k, m, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn zero_beamformer_gives_unit_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_g(&mut rng, 3, 4);
        let rw = mmse_receiver_and_weights(&g, &CMatrix::zeros(4, 3), 0.1).unwrap();
        assert!(rw.u.iter().all(|u| *u == c(0.0, 0.0)));
        assert_eq!(rw.mse, vec![1.0; 3]);
        assert_eq!(rw.lambda, vec![1.0; 3]);
    }

    #[test]
    fn high_snr_weight_tracks_snr() {
        let g = CMatrix::from_vec(1, 1, vec![c(0.6, 0.8)]).unwrap();
        let w = CMatrix::from_vec(1, 1, vec![c(1000.0, 0.0)]).unwrap();
        let sigma2 = 1.0;
        let snr = 1e6;
        let rw = mmse_receiver_and_weights(&g, &w, sigma2).unwrap();
        // lambda = 1 + SNR exactly for K = 1
        assert!((rw.lambda[0] - snr).abs() / snr < 2e-6);
    }

    #[test]
    fn mse_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_g(&mut rng, 2, 3);
        let w = random_g(&mut rng, 3, 2);
        let sigma2 = 0.3;
        let rw = mmse_receiver_and_weights(&g, &w, sigma2).unwrap();
        let gw = g.matmul(&w).unwrap();
        for kk in 0..2 {
            // E|s_k - u^* y_k|^2 = |1 - u^* a|^2 + |u|^2 (I + sigma2)
            let a = gw[(kk, kk)];
            let rest: f64 = (0..2).filter(|&l| l != kk).map(|l| gw[(kk, l)].norm_sqr()).sum::<f64>() + sigma2;
            let mse = |u: C64| (c(1.0, 0.0) - u.conj() * a).norm_sqr() + u.norm_sqr() * rest;
            let (mut best, mut arg) = (f64::INFINITY, c(0.0, 0.0));
            let steps = 400;
            let span = 2.0 * rw.u[kk].norm().max(0.1);
            for i in 0..=steps {
                for j in 0..=steps {
                    let u = c(
                        -span + 2.0 * span * i as f64 / steps as f64,
                        -span + 2.0 * span * j as f64 / steps as f64,
                    );
                    let v = mse(u);
                    if v < best {
                        best = v;
                        arg = u;
                    }
                }
            }
            assert!(best >= rw.mse[kk] - 1e-12);
            assert!((best - rw.mse[kk]).abs() < 1e-3, "{best} vs {}", rw.mse[kk]);
            assert!((arg - rw.u[kk]).norm() < 4.0 * span / steps as f64);
        }
    }

    #[test]
    fn single_user_is_matched_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_g(&mut rng, 1, 4);
        let w = wmmse_beamformer(&[c(0.3, -0.2)], &[2.0], &g, 2.0, 0.01, &[1.0]).unwrap();
        let mf = mrt_beamformer(&g, 2.0);
        // equal up to a unit phase; here the phase of u is carried through
        let inner: C64 = (0..4).map(|i| mf[(i, 0)].conj() * w[(i, 0)]).sum();
        let cos = inner.norm() / (mf.frobenius_sq().sqrt() * w.frobenius_sq().sqrt());
        assert!((1.0 - cos).abs() < 1e-12);
    }

    #[test]
    fn power_is_exact_and_lambda_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = random_g(&mut rng, 3, 4);
            let u: Vec<C64> = (0..3).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let lambda: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..3.0)).collect();
            let w = wmmse_beamformer(&u, &lambda, &g, 0.7, 1e-3, &[1.0; 3]).unwrap();
            assert!((w.frobenius_sq() - 0.7).abs() / 0.7 < 1e-12);
            let scaled: Vec<f64> = lambda.iter().map(|l| l * 3.7).collect();
            let w2 = wmmse_beamformer(&u, &scaled, &g, 0.7, 1e-3, &[1.0; 3]).unwrap();
            assert!(w.max_abs_diff(&w2) < 1e-10);
        }
    }

    #[test]
    fn degenerate_weights_are_rejected() {
        let g = CMatrix::identity(2);
        let err = wmmse_beamformer(&[c(0.0, 0.0); 2], &[1.0, 1.0], &g, 1.0, 0.1, &[1.0; 2]);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn fixed_phase_trace_is_monotone() {
        let cfg = SystemConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..10 {
            let s = gen_channels(&cfg, seed).unwrap();
            let theta = random_phase(&mut rng, cfg.n);
            let st = wmmse_fixed_phase(&s, &theta, &cfg, None, INNER_MAX_ITER, INNER_TOL).unwrap();
            for pair in st.trace.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-8, "{:?}", st.trace);
            }
        }
    }

    #[test]
    fn fixed_point_converges_immediately() {
        let cfg = SystemConfig::desk();
        let s = gen_channels(&cfg, 2).unwrap();
        let theta = vec![0.4; cfg.n];
        let st = wmmse_fixed_phase(&s, &theta, &cfg, None, 500, 1e-12).unwrap();
        let again = wmmse_fixed_phase(&s, &theta, &cfg, Some(&st.w), 50, INNER_TOL).unwrap();
        assert!(again.iterations() <= 2);
        assert!((again.objective() - st.objective()).abs() < INNER_TOL);
    }

    #[test]
    fn scalar_channel_closed_form() {
        let cfg = SystemConfig { m: 1, k: 1, n: 2, n_c: 1, ..SystemConfig::desk() };
        let mut s = gen_channels(&cfg, 4).unwrap();
        s.h_ru = CMatrix::zeros(1, 2);
        let st = wmmse_fixed_phase(&s, &[0.0, 0.0], &cfg, None, 10, INNER_TOL).unwrap();
        let h2 = s.h_au[(0, 0)].norm_sqr();
        let want = (1.0 + cfg.p * h2 / cfg.sigma2).log2();
        assert!((st.objective() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn phase_iteration_dominates_fixed_phases() {
        let cfg = SystemConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..3 {
            let s = gen_channels(&cfg, 100 + seed).unwrap();
            let res = wmmse_pi(&s, &cfg, OUTER_ITERS).unwrap();
            assert!((res.w.frobenius_sq() - cfg.p).abs() / cfg.p < 1e-12);
            assert!(res.theta.iter().all(|t| (-PI..PI).contains(t)));
            for pair in res.trace.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-8);
            }
            let zero = wmmse_fixed_phase(&s, &vec![0.0; cfg.n], &cfg, None, INNER_MAX_ITER, INNER_TOL).unwrap();
            assert!(res.objective >= zero.objective());
            for _ in 0..5 {
                let th = random_phase(&mut rng, cfg.n);
                let st = wmmse_fixed_phase(&s, &th, &cfg, None, INNER_MAX_ITER, INNER_TOL).unwrap();
                assert!(res.objective >= st.objective());
            }
        }
    }

    #[test]
    fn single_element_phase_aligns_paths() {
        // Moderate SNR: at ~1e11 the Hermitian solve limits the objective to
        // ~1e-9 relative accuracy, which blurs a flat optimum by ~1e-4 rad.
        let cfg = SystemConfig { m: 3, k: 1, n: 1, n_c: 1, sigma2: 1e-8, ..SystemConfig::desk() };
        for seed in 0..5 {
            let s = gen_channels(&cfg, seed).unwrap();
            let res = wmmse_pi(&s, &cfg, OUTER_ITERS).unwrap();
            let w = res.w.col(0);
            let direct: C64 = (0..3).map(|m| s.h_au[(0, m)] * w[m]).sum();
            let cascade: C64 = (0..3).map(|m| s.h_ru[(0, 0)] * s.h_ar[(0, m)] * w[m]).sum();
            let want = wrap_phase(direct.arg() - cascade.arg());
            let diff = wrap_phase(res.theta[0] - want).abs();
            assert!(diff < 1e-6, "seed {seed}: diff {diff:e}");
        }
    }

    #[test]
    fn random_phase_contract() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let x = random_phase(&mut a, 1000);
        assert_eq!(x, random_phase(&mut b, 1000));
        assert!(x.iter().all(|t| (-PI..PI).contains(t)));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = random_phase(&mut rng, 100_000);
        let mean: C64 = draws.iter().map(|&t| C64::from_polar(1.0, t)).sum::<C64>() / 100_000.0;
        assert!(mean.norm() < 0.02);
    }

    #[test]
    fn wrap_phase_range() {
        for x in [-10.0, -PI, -3.0, 0.0, 3.0, PI, 7.0, 1e3] {
            let y = wrap_phase(x);
            assert!((-PI..PI).contains(&y), "{x} -> {y}");
            assert!(((x - y) / (2.0 * PI)).fract().abs() < 1e-9 || ((x - y) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    fn arb_g(k: usize, m: usize) -> impl proptest::strategy::Strategy<Value = CMatrix> {
        use proptest::prelude::*;
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), k * m)
            .prop_map(move |v| CMatrix::from_vec(k, m, v.into_iter().map(|(a, b)| c(a, b)).collect()).unwrap())
    }

    proptest::proptest! {
        #[test]
        fn wrap_phase_stays_in_range(x in -1e3f64..1e3) {
            let y = wrap_phase(x);
            proptest::prop_assert!((-PI..PI).contains(&y));
            proptest::prop_assert!((x - y - 2.0 * PI * ((x - y) / (2.0 * PI)).round()).abs() < 1e-9);
        }

        #[test]
        fn beamformer_meets_power_and_ignores_lambda_scale(
            g in arb_g(3, 4),
            lam in proptest::collection::vec(0.1f64..10.0, 3),
            scale in 0.01f64..100.0,
            p in 0.1f64..10.0,
        ) {
            let u = vec![c(0.5, 0.1), c(-0.2, 0.4), c(0.3, -0.3)];
            let pri = [1.0; 3];
            let w = wmmse_beamformer(&u, &lam, &g, p, 0.1, &pri).unwrap();
            proptest::prop_assert!((w.frobenius_sq() - p).abs() < 1e-9 * p);
            let scaled: Vec<f64> = lam.iter().map(|l| l * scale).collect();
            let w2 = wmmse_beamformer(&u, &scaled, &g, p, 0.1, &pri).unwrap();
            let diff: f64 = w.data().iter().zip(w2.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
            proptest::prop_assert!(diff.sqrt() < 1e-8 * p.sqrt());
        }

        #[test]
        fn mmse_weights_are_bounded(g in arb_g(2, 3), w in arb_g(3, 2), sigma2 in 1e-3f64..10.0) {
            let rw = mmse_receiver_and_weights(&g, &w, sigma2).unwrap();
            for (e, l) in rw.mse.iter().zip(&rw.lambda) {
                proptest::prop_assert!(*e > 0.0 && *e <= 1.0 + 1e-12);
                proptest::prop_assert!((l * e - 1.0).abs() < 1e-12);
            }
        }
    }
}
