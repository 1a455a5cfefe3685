use super::channel::ChannelSample;
use super::config::SystemConfig;
use crate::error::{dim_err, Error, Result};
use crate::linalg::{CMatrix, C64};

/// Per-user rates in bits/s/Hz and their priority-weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub per_ue: Vec<f64>,
    pub weighted_sum: f64,
}

/// Relative slack tolerated above the power budget before warning.
pub const POWER_SLACK: f64 = 1e-9;

/// `diag(h_ru_k) * H_AR`: row `n` of `H_AR` scaled by `h_ru_k[n]`.
pub fn cascaded_channel(h_ru_k: &[C64], h_ar: &CMatrix) -> Result<CMatrix> {
    if h_ru_k.len() != h_ar.rows() {
        return dim_err(format!(
            "h_ru_k has {} entries, H_AR has {} rows",
            h_ru_k.len(),
            h_ar.rows()
        ));
    }
    Ok(CMatrix::from_fn(h_ar.rows(), h_ar.cols(), |n, m| {
        h_ru_k[n] * h_ar[(n, m)]
    }))
}

pub fn reflection_vector(theta: &[f64]) -> Vec<C64> {
    theta.iter().map(|&t| C64::from_polar(1.0, t)).collect()
}

/// Row `k` of the effective channel: `h_au_k + phi * H_k`.
fn user_channel(sample: &ChannelSample, phi: &[C64], k: usize) -> Result<Vec<C64>> {
    let hk = cascaded_channel(sample.h_ru.row(k), &sample.h_ar)?;
    let m = sample.h_au.cols();
    let mut g = sample.h_au.row(k).to_vec();
    for (n, p) in phi.iter().enumerate() {
        for j in 0..m {
            g[j] += p * hk[(n, j)];
        }
    }
    Ok(g)
}

/// `G = H_AU + H_RU diag(e^{j theta}) H_AR`, `K x M`.
///
/// Evaluated user by user through the cascaded channels so that it agrees
/// bit for bit with [`achievable_rates`].
pub fn effective_channel(sample: &ChannelSample, theta: &[f64]) -> Result<CMatrix> {
    let n = sample.h_ar.rows();
    if theta.len() != n {
        return dim_err(format!("theta has {} entries, RIS has {n}", theta.len()));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("theta".into()));
    }
    let phi = reflection_vector(theta);
    let (k, m) = sample.h_au.shape();
    let mut g = CMatrix::zeros(k, m);
    for u in 0..k {
        let row = user_channel(sample, &phi, u)?;
        for j in 0..m {
            g[(u, j)] = row[j];
        }
    }
    Ok(g)
}

/// Rates from a known effective channel `G` (`K x M`) and beamformer `W`
/// (`M x K`), treating interference as noise.
pub fn rates_from_effective(
    g: &CMatrix,
    w: &CMatrix,
    sigma2: f64,
    priorities: &[f64],
) -> Result<RateReport> {
    let (k, m) = g.shape();
    if w.shape() != (m, k) {
        return dim_err(format!("W is {:?}, expected {:?}", w.shape(), (m, k)));
    }
    if priorities.len() != k {
        return dim_err(format!("{} priorities for {k} users", priorities.len()));
    }
    if !g.is_finite() || !w.is_finite() || !sigma2.is_finite() {
        return Err(Error::NonFinite("rate inputs".into()));
    }
    let mut per_ue = Vec::with_capacity(k);
    for u in 0..k {
        let mut signal = 0.0;
        let mut interference = 0.0;
        for l in 0..k {
            let mut gw = C64::new(0.0, 0.0);
            for j in 0..m {
                gw += g[(u, j)] * w[(j, l)];
            }
            if l == u {
                signal = gw.norm_sqr();
            } else {
                interference += gw.norm_sqr();
            }
        }
        per_ue.push((1.0 + signal / (interference + sigma2)).log2());
    }
    let weighted_sum = per_ue.iter().zip(priorities).map(|(r, p)| r * p).sum();
    Ok(RateReport {
        per_ue,
        weighted_sum,
    })
}

/// Achievable rates for beamformer `W` and RIS phases `theta`.
pub fn achievable_rates(
    w: &CMatrix,
    theta: &[f64],
    sample: &ChannelSample,
    cfg: &SystemConfig,
) -> Result<RateReport> {
    let power = w.frobenius_sq();
    if power > cfg.p * (1.0 + POWER_SLACK) {
        log::warn!("beamformer power {power:.6e} W exceeds budget {:.6e} W", cfg.p);
    }
    let g = effective_channel(sample, theta)?;
    rates_from_effective(&g, w, cfg.sigma2, &cfg.priority_vec())
}

/// Received symbols `y_k = sum_l g_k w_l s_l + n_k`.
pub fn simulate_rx(
    w: &CMatrix,
    theta: &[f64],
    symbols: &[C64],
    noise: &[C64],
    sample: &ChannelSample,
) -> Result<Vec<C64>> {
    let (k, m) = sample.h_au.shape();
    if symbols.len() != k || noise.len() != k {
        return dim_err(format!(
            "{} symbols and {} noise samples for {k} users",
            symbols.len(),
            noise.len()
        ));
    }
    if w.shape() != (m, k) {
        return dim_err(format!("W is {:?}, expected {:?}", w.shape(), (m, k)));
    }
    let g = effective_channel(sample, theta)?;
    let x: Vec<C64> = (0..m)
        .map(|j| (0..k).map(|l| w[(j, l)] * symbols[l]).sum())
        .collect();
    Ok((0..k)
        .map(|u| (0..m).map(|j| g[(u, j)] * x[j]).sum::<C64>() + noise[u])
        .collect())
}
