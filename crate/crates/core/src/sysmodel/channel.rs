//! Narrowband geometric multipath channels.
//!
//! Each unnormalized link is `sqrt(1/R) * sum_r alpha_r a_rx(.) a_tx(.)^H`
//! with `alpha_r ~ CN(0, 1)` and half-wavelength steering vectors: a ULA at
//! the AP, a URA at the RIS and a single antenna at each user. The aggregate
//! link is then rescaled so that its squared Frobenius norm equals the
//! path gain of the link.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::SystemConfig;
use crate::error::Result;
use crate::linalg::{CMatrix, C64};

/// One channel realization with its optional `(W_opt, theta_opt)` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// Direct AP to user links, `K x M`.
    pub h_au: CMatrix,
    /// AP to RIS, `N x M`.
    pub h_ar: CMatrix,
    /// RIS to user links, `K x N`.
    pub h_ru: CMatrix,
    /// Reference beamformer, `M x K`. All zeros until labelled.
    pub w_opt: CMatrix,
    /// Reference phases in `[-pi, pi)`. All zeros until labelled.
    pub theta_opt: Vec<f64>,
}

impl ChannelSample {
    pub fn unlabeled(h_au: CMatrix, h_ar: CMatrix, h_ru: CMatrix) -> Self {
        let (k, m) = h_au.shape();
        let n = h_ar.rows();
        Self {
            h_au,
            h_ar,
            h_ru,
            w_opt: CMatrix::zeros(m, k),
            theta_opt: vec![0.0; n],
        }
    }

    pub fn has_labels(&self) -> bool {
        self.w_opt.frobenius_sq() > 0.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h_au.cols(), self.h_au.rows(), self.h_ar.rows())
    }

    pub fn check_dims(&self, cfg: &SystemConfig) -> Result<()> {
        let want = [
            ("h_au", self.h_au.shape(), (cfg.k, cfg.m)),
            ("h_ar", self.h_ar.shape(), (cfg.n, cfg.m)),
            ("h_ru", self.h_ru.shape(), (cfg.k, cfg.n)),
            ("w_opt", self.w_opt.shape(), (cfg.m, cfg.k)),
        ];
        for (name, got, exp) in want {
            if got != exp {
                return crate::error::dim_err(format!("{name} is {got:?}, expected {exp:?}"));
            }
        }
        if self.theta_opt.len() != cfg.n {
            return crate::error::dim_err(format!(
                "theta_opt has {} entries, expected {}",
                self.theta_opt.len(),
                cfg.n
            ));
        }
        Ok(())
    }
}

/// Rows and columns of the RIS panel: the most square factorization of `n`.
pub fn ura_shape(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && !n.is_multiple_of(rows) {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

/// Half-wavelength ULA response.
pub fn ula_steering(len: usize, azimuth: f64) -> Vec<C64> {
    let s = azimuth.sin();
    (0..len).map(|i| C64::from_polar(1.0, PI * i as f64 * s)).collect()
}

/// Half-wavelength URA response, element `(row, col)` at index `row * cols + col`.
pub fn ura_steering(rows: usize, cols: usize, azimuth: f64, elevation: f64) -> Vec<C64> {
    let u = azimuth.sin() * elevation.cos();
    let v = elevation.sin();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(C64::from_polar(1.0, PI * (r as f64 * u + c as f64 * v)));
        }
    }
    out
}

fn complex_normal(rng: &mut impl Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn angle(rng: &mut impl Rng) -> f64 {
    rng.gen_range(-PI / 2.0..PI / 2.0)
}

fn normalize(h: &mut CMatrix, rho: f64) {
    let s = (rho / h.frobenius_sq()).sqrt();
    for z in h.data_mut() {
        *z *= s;
    }
}

/// Unnormalized `rx x tx` link built from `paths` planar waves.
fn geometric_link(
    rng: &mut impl Rng,
    paths: usize,
    rx: impl Fn(&mut dyn FnMut() -> f64) -> Vec<C64>,
    tx: impl Fn(&mut dyn FnMut() -> f64) -> Vec<C64>,
    rx_len: usize,
    tx_len: usize,
) -> CMatrix {
    let mut h = CMatrix::zeros(rx_len, tx_len);
    let amp = (1.0 / paths as f64).sqrt();
    for _ in 0..paths {
        let alpha = complex_normal(rng) * amp;
        let a_rx = rx(&mut || angle(rng));
        let a_tx = tx(&mut || angle(rng));
        for i in 0..rx_len {
            let ai = alpha * a_rx[i];
            for j in 0..tx_len {
                h[(i, j)] += ai * a_tx[j].conj();
            }
        }
    }
    h
}

/// Draws one normalized channel realization. Pure in `(cfg, seed)`.
pub fn gen_channels(cfg: &SystemConfig, seed: u64) -> Result<ChannelSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ris_rows, ris_cols) = ura_shape(cfg.n);
    let ap = |draw: &mut dyn FnMut() -> f64| ula_steering(cfg.m, draw());
    let ris = |draw: &mut dyn FnMut() -> f64| {
        let az = draw();
        let el = draw();
        ura_steering(ris_rows, ris_cols, az, el)
    };
    let ue = |_: &mut dyn FnMut() -> f64| vec![C64::new(1.0, 0.0)];

    let mut h_ar = geometric_link(&mut rng, cfg.r, ris, ap, cfg.n, cfg.m);

    let mut h_ru = CMatrix::zeros(cfg.k, cfg.n);
    for k in 0..cfg.k {
        let row = geometric_link(&mut rng, cfg.r, ue, ris, 1, cfg.n);
        for n in 0..cfg.n {
            h_ru[(k, n)] = row[(0, n)];
        }
    }

    let mut h_au = CMatrix::zeros(cfg.k, cfg.m);
    for k in 0..cfg.k {
        let row = geometric_link(&mut rng, cfg.r, ue, ap, 1, cfg.m);
        for m in 0..cfg.m {
            h_au[(k, m)] = row[(0, m)];
        }
    }

    normalize(&mut h_ar, cfg.rho_ar());
    normalize(&mut h_ru, cfg.rho_ru());
    normalize(&mut h_au, cfg.rho_au());
    Ok(ChannelSample::unlabeled(h_au, h_ar, h_ru))
}

/// Rank of a complex matrix by Gaussian elimination with a relative pivot
/// threshold.
pub fn numerical_rank(h: &CMatrix, rel_tol: f64) -> usize {
    let (rows, cols) = h.shape();
    let mut a = h.clone();
    let scale = a.data().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let (piv, best) = (rank..rows)
            .map(|r| (r, a[(r, c)].norm()))
            .fold((rank, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= rel_tol * scale {
            continue;
        }
        for j in 0..cols {
            let tmp = a[(rank, j)];
            a[(rank, j)] = a[(piv, j)];
            a[(piv, j)] = tmp;
        }
        for r in rank + 1..rows {
            let f = a[(r, c)] / a[(rank, c)];
            for j in c..cols {
                let v = a[(rank, j)];
                a[(r, j)] -= f * v;
            }
        }
        rank += 1;
    }
    rank
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_is_exact() {
        let cfg = SystemConfig::desk();
        for seed in 0..20 {
            let s = gen_channels(&cfg, seed).unwrap();
            for (h, rho) in [
                (&s.h_ar, cfg.rho_ar()),
                (&s.h_ru, cfg.rho_ru()),
                (&s.h_au, cfg.rho_au()),
            ] {
                assert!((h.frobenius_sq() - rho).abs() / rho < 1e-12);
            }
        }
    }

    #[test]
    fn ar_gain_matches_published_value() {
        let s = gen_channels(&SystemConfig::full_scale(), 3).unwrap();
        assert!((s.h_ar.frobenius_sq() - 5.2481e-4).abs() / 5.2481e-4 < 1e-4);
        assert_eq!(s.h_ar.shape(), (100, 4));
    }

    #[test]
    fn single_path_is_rank_one() {
        let cfg = SystemConfig { r: 1, ..SystemConfig::desk() };
        let s = gen_channels(&cfg, 11).unwrap();
        assert_eq!(numerical_rank(&s.h_ar, 1e-9), 1);
        let rich = gen_channels(&SystemConfig::desk(), 11).unwrap();
        assert_eq!(numerical_rank(&rich.h_ar, 1e-9), 4);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SystemConfig::desk();
        assert_eq!(gen_channels(&cfg, 5).unwrap(), gen_channels(&cfg, 5).unwrap());
        assert_ne!(gen_channels(&cfg, 5).unwrap(), gen_channels(&cfg, 6).unwrap());
    }

    #[test]
    fn ura_shapes() {
        assert_eq!(ura_shape(100), (10, 10));
        assert_eq!(ura_shape(16), (4, 4));
        assert_eq!(ura_shape(4), (2, 2));
        assert_eq!(ura_shape(7), (1, 7));
        assert_eq!(ura_shape(1), (1, 1));
    }
}
