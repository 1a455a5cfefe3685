use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference gain at 1 m that reproduces the published link gains
/// (5.2481e-4, 4.3076, 3.3846e-5) from `rho0 * d^-a`.
pub const RHO0_LIN_FITTED: f64 = 30.0;
/// Reference gain of -30 dB taken literally. Kept for comparison only; it
/// does not reproduce the published link gains.
pub const RHO0_LIN_NOMINAL: f64 = 1e-3;

/// Noise power spectral density in dBm/Hz.
pub const NOISE_PSD_DBM_HZ: f64 = -170.0;
/// Signal bandwidth in Hz.
pub const BANDWIDTH_HZ: f64 = 180_000.0;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Thermal noise power over the configured bandwidth, in watts.
pub fn default_noise_power() -> f64 {
    dbm_to_watts(NOISE_PSD_DBM_HZ + 10.0 * BANDWIDTH_HZ.log10())
}

/// Path gain `rho0 * d^-a` with a 1 m reference distance.
pub fn path_loss(d: f64, a: f64, rho0_lin: f64) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Domain(format!("distance must be positive, got {d}")));
    }
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("path-loss exponent must be positive, got {a}")));
    }
    Ok(rho0_lin * d.powf(-a))
}

/// Every scalar of a single-cell scenario. Field names double as the JSON
/// config schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    /// AP antennas.
    pub m: usize,
    /// Single-antenna users.
    pub k: usize,
    /// RIS elements.
    pub n: usize,
    /// Phase features carried by the control message.
    pub n_c: usize,
    /// Quantizer levels per feature.
    pub d: usize,
    /// Transmit power budget in watts.
    pub p: f64,
    /// Noise power per user in watts.
    pub sigma2: f64,
    /// User priorities; empty means all ones.
    pub priorities: Vec<f64>,
    /// Multipath components per link.
    pub r: usize,
    pub d_ar: f64,
    pub d_ru: f64,
    pub d_au: f64,
    pub a_ar: f64,
    pub a_ru: f64,
    pub a_au: f64,
    pub rho0_lin: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SystemConfig {
    /// Reduced scenario used for local experiments: 4 antennas, 3 users,
    /// a 4x4 surface and an 8-bit control message.
    pub fn desk() -> Self {
        let d_ar: f64 = 50.0;
        let d_ru: f64 = 2.0;
        Self {
            m: 4,
            k: 3,
            n: 16,
            n_c: 8,
            d: 2,
            p: dbm_to_watts(25.0),
            sigma2: default_noise_power(),
            priorities: Vec::new(),
            r: 100,
            d_ar,
            d_ru,
            d_au: (d_ar * d_ar + d_ru * d_ru).sqrt(),
            a_ar: 2.8,
            a_ru: 2.8,
            a_au: 3.5,
            rho0_lin: RHO0_LIN_FITTED,
        }
    }

    /// The full 10x10 surface with one control bit per element.
    pub fn full_scale() -> Self {
        Self {
            n: 100,
            n_c: 100,
            ..Self::desk()
        }
    }

    pub fn with_power_dbm(mut self, dbm: f64) -> Self {
        self.p = dbm_to_watts(dbm);
        self
    }

    pub fn power_dbm(&self) -> f64 {
        watts_to_dbm(self.p)
    }

    pub fn bits_per_feature(&self) -> usize {
        self.d.trailing_zeros() as usize
    }

    /// Control message length `B = N_c * log2(D)`.
    pub fn bits(&self) -> usize {
        self.n_c * self.bits_per_feature()
    }

    pub fn priority(&self, k: usize) -> f64 {
        self.priorities.get(k).copied().unwrap_or(1.0)
    }

    pub fn priority_vec(&self) -> Vec<f64> {
        (0..self.k).map(|k| self.priority(k)).collect()
    }

    pub fn rho_ar(&self) -> f64 {
        self.rho0_lin * self.d_ar.powf(-self.a_ar)
    }

    pub fn rho_ru(&self) -> f64 {
        self.rho0_lin * self.d_ru.powf(-self.a_ru)
    }

    pub fn rho_au(&self) -> f64 {
        self.rho0_lin * self.d_au.powf(-self.a_au)
    }

    /// Encoder input width `N + 2MK`.
    pub fn encoder_input_dim(&self) -> usize {
        self.n + 2 * self.m * self.k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.k == 0 || self.n == 0 || self.n_c == 0 {
            return bad(format!(
                "m, k, n, n_c must be >= 1 (got {}, {}, {}, {})",
                self.m, self.k, self.n, self.n_c
            ));
        }
        if self.d < 2 || !self.d.is_power_of_two() {
            return bad(format!("d must be a power of two >= 2, got {}", self.d));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return bad(format!("p must be positive, got {}", self.p));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if self.r == 0 {
            return bad("r must be >= 1".into());
        }
        for (name, v) in [("d_ar", self.d_ar), ("d_ru", self.d_ru), ("d_au", self.d_au)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("a_ar", self.a_ar), ("a_ru", self.a_ru), ("a_au", self.a_au)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.rho0_lin > 0.0) {
            return bad(format!("rho0_lin must be positive, got {}", self.rho0_lin));
        }
        if !self.priorities.is_empty() && self.priorities.len() != self.k {
            return bad(format!(
                "{} priorities for {} users",
                self.priorities.len(),
                self.k
            ));
        }
        if self.priorities.iter().any(|p| !(*p >= 0.0)) {
            return bad("priorities must be non-negative".into());
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig4(x: f64) -> f64 {
        let e = x.abs().log10().floor();
        let s = 10f64.powf(3.0 - e);
        (x * s).round() / s
    }

    #[test]
    fn published_link_gains() {
        assert_eq!(sig4(path_loss(50.0, 2.8, 30.0).unwrap()), 5.248e-4);
        assert_eq!(sig4(path_loss(50.04, 3.5, 30.0).unwrap()), 3.385e-5);
        assert_eq!(sig4(path_loss(2.0, 2.8, 30.0).unwrap()), 4.308);
    }

    #[test]
    fn reference_distance_returns_rho0() {
        assert_eq!(path_loss(1.0, 2.2, 7.5).unwrap(), 7.5);
    }

    #[test]
    fn non_positive_distance_is_domain_error() {
        assert!(matches!(path_loss(0.0, 2.0, 30.0), Err(Error::Domain(_))));
        assert!(matches!(path_loss(-1.0, 2.0, 30.0), Err(Error::Domain(_))));
    }

    #[test]
    fn noise_power_default() {
        let s = default_noise_power();
        assert!((s - 1.799e-15).abs() / 1.799e-15 < 1e-3, "{s}");
    }

    #[test]
    fn bits_and_validation() {
        let cfg = SystemConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.bits(), 8);
        let cfg4 = SystemConfig { d: 4, ..SystemConfig::desk() };
        assert_eq!(cfg4.bits(), 16);
        assert!(SystemConfig { d: 3, ..SystemConfig::desk() }.validate().is_err());
        assert!(SystemConfig { p: 0.0, ..SystemConfig::desk() }.validate().is_err());
        assert!(SystemConfig { priorities: vec![1.0], ..SystemConfig::desk() }
            .validate()
            .is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = SystemConfig::full_scale();
        assert_eq!(SystemConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = SystemConfig::from_json(r#"{"n": 4, "n_c": 2}"#).unwrap();
        assert_eq!(partial.n, 4);
        assert_eq!(partial.m, 4);
    }
}
