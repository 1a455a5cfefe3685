//! Dataset splits, the sum-rate loss, the training loop, evaluation and the
//! baseline methods.

mod checkpoint;
mod eval;
mod model;
mod train;

pub use eval::{
    evaluate, evaluate_all, mean_ci95, naive_phases, predict, EvalOptions, EvalReport, MethodReport,
    Prediction, Z95,
};
pub use model::{Forward, ForwardOptions, LinQ, Model};
pub use train::{derive_seed, train, EpochRecord, TrainProgress, Trainer};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sysmodel::{ChannelSample, SystemConfig};
use crate::updater::{effective_channel_op, sum_rate_op};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    /// Train, validation and test fractions of the dataset.
    pub split: [f64; 3],
    pub seed: u64,
    /// Unrolled WMMSE layers, each with its own `f_ul`.
    pub unrolled_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 1000,
            early_stop_patience: 50,
            lr: 1e-3,
            lr_factor: 0.8,
            lr_patience: 20,
            lr_floor: 5e-5,
            split: [0.64, 0.16, 0.20],
            seed: 0,
            unrolled_layers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch size {} must be at least 2", self.batch_size));
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 || self.lr_patience == 0 {
            return bad("epochs and patiences must be at least 1".into());
        }
        if self.unrolled_layers == 0 {
            return bad("unrolled_layers must be at least 1".into());
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be positive and sum to 1", self.split));
        }
        if !(self.lr_floor <= self.lr) {
            return bad(format!("lr floor {} above initial lr {}", self.lr_floor, self.lr));
        }
        Ok(())
    }

    /// Sample counts per split; the test split takes the rounding remainder
    /// so the counts always sum to `n`.
    pub fn split_sizes(&self, n: usize) -> Result<[usize; 3]> {
        let train = (n as f64 * self.split[0]).round() as usize;
        let val = (n as f64 * self.split[1]).round() as usize;
        if train < 2 || val == 0 || train + val >= n {
            return Err(Error::Config(format!("{n} samples cannot be split as {:?}", self.split)));
        }
        Ok([train, val, n - train - val])
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub struct Splits {
    pub train: Vec<ChannelSample>,
    pub val: Vec<ChannelSample>,
    pub test: Vec<ChannelSample>,
}

/// Contiguous split in file order; generated datasets are already i.i.d.
pub fn split_dataset(mut samples: Vec<ChannelSample>, cfg: &TrainConfig) -> Result<Splits> {
    let [train, val, _] = cfg.split_sizes(samples.len())?;
    let test = samples.split_off(train + val);
    let val_set = samples.split_off(train);
    Ok(Splits {
        train: samples,
        val: val_set,
        test,
    })
}

/// `-(1/S) sum_s sum_k p_k R_k` from per-sample weighted sums.
pub fn loss_from_sums(sums: &[f64]) -> Result<f64> {
    if sums.is_empty() {
        return Err(Error::Training("loss of an empty batch".into()));
    }
    if let Some(i) = sums.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("sum-rate of batch item {i} is {}", sums[i])));
    }
    Ok(-(sums.iter().sum::<f64>() * (1.0 / sums.len() as f64)))
}

/// Loss node and per-sample weighted sum-rates `[B]` for beamformers `w`
/// on effective channels `g`.
pub fn rate_loss(tape: &mut Tape, g: Var, w: Var, cfg: &SystemConfig) -> Result<(Var, Var)> {
    let sums = sum_rate_op(tape, g, w, cfg.sigma2, &cfg.priority_vec())?;
    loss_from_sums(tape.value(sums).data())?;
    let mean = tape.mean_all(sums);
    Ok((tape.scale(mean, -1.0), sums))
}

/// Loss for a batch of `(W, theta, sample)`, `theta: [B, N]`.
pub fn batch_loss(
    tape: &mut Tape,
    theta: Var,
    w: Var,
    batch: &[&ChannelSample],
    cfg: &SystemConfig,
) -> Result<(Var, Var)> {
    let g = effective_channel_op(tape, theta, batch)?;
    rate_loss(tape, g, w, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// `(W_opt, theta_opt)` applied without a bit budget.
    UpperBound,
    AqeWmmse,
    /// Compressed phases with `W_opt` left unchanged.
    Aqe,
    Linq,
    /// `(pi/2) sign(theta_opt)` with `W_opt`.
    Naive,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::UpperBound, Method::AqeWmmse, Method::Aqe, Method::Linq, Method::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::UpperBound => "upper-bound",
            Method::AqeWmmse => "aqe-wmmse",
            Method::Aqe => "aqe",
            Method::Linq => "linq",
            Method::Naive => "naive",
        }
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, Method::AqeWmmse | Method::Aqe | Method::Linq)
    }

    /// Comma-separated list, e.g. `"aqe-wmmse,linq"`; `"all"` expands.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        if s.trim() == "all" {
            return Ok(Method::ALL.to_vec());
        }
        let mut out: Vec<Method> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty method list".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        // one sample with per-user rates 1, 2, 3
        assert_eq!(loss_from_sums(&[6.0]).unwrap(), -6.0);
        assert_eq!(loss_from_sums(&[4.0, 6.0]).unwrap(), -5.0);
        assert!(matches!(loss_from_sums(&[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(loss_from_sums(&[]).is_err());
    }

    #[test]
    fn default_schedule_matches_declared_values() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.max_epochs, c.early_stop_patience, c.lr_patience), (128, 1000, 50, 20));
        assert_eq!((c.lr, c.lr_factor, c.lr_floor), (1e-3, 0.8, 5e-5));
        c.validate().unwrap();
    }

    #[test]
    fn split_sizes_sum_to_dataset() {
        let c = TrainConfig::default();
        assert_eq!(c.split_sizes(2000).unwrap(), [1280, 320, 400]);
        for n in [10, 17, 333, 1001] {
            assert_eq!(c.split_sizes(n).unwrap().iter().sum::<usize>(), n);
        }
        assert!(c.split_sizes(3).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            TrainConfig { early_stop_patience: 0, ..Default::default() },
            TrainConfig { lr_patience: 0, ..Default::default() },
            TrainConfig { split: [0.5, 0.5, 0.5], ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(TrainConfig::from_json(r#"{"batch_sz": 4}"#).is_err());
        assert_eq!(TrainConfig::from_json(r#"{"seed": 9}"#).unwrap().seed, 9);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert_eq!(Method::parse_list("linq, naive,linq").unwrap(), vec![Method::Linq, Method::Naive]);
        assert_eq!(Method::parse_list("all").unwrap().len(), 5);
        assert!(Method::parse_list("dqnn").is_err());
    }
}
