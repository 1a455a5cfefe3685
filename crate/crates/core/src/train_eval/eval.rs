use std::borrow::Cow;
use std::f64::consts::FRAC_PI_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ForwardOptions, Model};
use super::train::derive_seed;
use super::Method;
use crate::aqe::pack_bits;
use crate::autodiff::{sign_pos, Mode, Tape};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::nn::ForwardCtx;
use crate::sysmodel::{achievable_rates, watts_to_dbm, ChannelSample, SystemConfig};
use crate::wmmse::{random_phase, wrap_phase};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

const EVAL_CHUNK: usize = 256;

/// Mean and normal-approximation 95% half-width from the sample standard
/// deviation. A single value has half-width 0.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Z95 * (var / n as f64).sqrt())
}

/// `(pi/2) sign(wrap(theta))` per element, with `sign(0) = +1`.
pub fn naive_phases(theta_opt: &[f64]) -> Vec<f64> {
    theta_opt.iter().map(|t| FRAC_PI_2 * sign_pos(wrap_phase(*t))).collect()
}

/// What a method hands to the RIS and to the transmitter for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub theta: Vec<f64>,
    pub w: CMatrix,
    /// Control message, when the method sends one.
    pub bits: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOptions {
    /// Transmit power in watts replacing the scenario's; `W_opt` labels are
    /// rescaled to it.
    pub power: Option<f64>,
    /// Replace the applied phases by uniform random ones drawn from this
    /// seed, keeping each method's beamformer.
    pub fallback_seed: Option<u64>,
    /// Feed `W_opt` instead of `w'` to the receiver/weight network.
    pub skip_init: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub mean: f64,
    pub ci95: f64,
    pub per_sample: Vec<f64>,
    /// Control message length; `None` for the unconstrained upper bound.
    pub bits: Option<usize>,
    pub power_dbm: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub power_dbm: f64,
    pub bits: usize,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn get(&self, method: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == method)
    }
}

fn scaled_config(cfg: &SystemConfig, opts: &EvalOptions) -> Result<SystemConfig> {
    let mut c = cfg.clone();
    if let Some(p) = opts.power {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::Config(format!("transmit power {p} W")));
        }
        c.p = p;
    }
    Ok(c)
}

fn rescaled<'a>(samples: &'a [ChannelSample], from: f64, to: f64) -> Cow<'a, [ChannelSample]> {
    if from == to {
        return Cow::Borrowed(samples);
    }
    let s = (to / from).sqrt();
    Cow::Owned(
        samples
            .iter()
            .map(|x| ChannelSample {
                w_opt: x.w_opt.scale(s),
                ..x.clone()
            })
            .collect(),
    )
}

/// Eval-mode outputs of `method` on every sample. Trainable methods need
/// their `model`.
pub fn predict(
    method: Method,
    model: Option<&Model>,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    opts: &EvalOptions,
) -> Result<Vec<Prediction>> {
    if let Some(i) = samples.iter().position(|s| !s.has_labels()) {
        return Err(Error::Training(format!("evaluation sample {i} has no labels")));
    }
    let ecfg = scaled_config(cfg, opts)?;
    let samples = rescaled(samples, cfg.p, ecfg.p);
    match method {
        Method::UpperBound | Method::Naive => Ok(samples
            .iter()
            .map(|s| {
                let naive = method == Method::Naive;
                Prediction {
                    theta: if naive { naive_phases(&s.theta_opt) } else { s.theta_opt.clone() },
                    w: s.w_opt.clone(),
                    bits: naive.then(|| s.theta_opt.iter().map(|t| sign_pos(wrap_phase(*t)) > 0.0).collect()),
                }
            })
            .collect()),
        _ => {
            let model = model
                .filter(|m| m.method == method)
                .ok_or_else(|| Error::Config(format!("no trained model for {method}")))?;
            let model = model.with_power(ecfg.p);
            let (n, m, k) = (ecfg.n, ecfg.m, ecfg.k);
            let mut out = Vec::with_capacity(samples.len());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for chunk in samples.chunks(EVAL_CHUNK) {
                let batch: Vec<&ChannelSample> = chunk.iter().collect();
                let mut tape = Tape::new(Mode::Eval);
                let bound = model.params.bind(&mut tape);
                let mut ctx = ForwardCtx::new(&mut rng);
                let fo = ForwardOptions {
                    skip_init: opts.skip_init,
                };
                let f = model.forward(&mut tape, &bound, &batch, &mut ctx, fo)?;
                let (q, th, w) = (tape.value(f.quantized), tape.value(f.theta), tape.value(f.w));
                let nc = q.shape()[1];
                for i in 0..batch.len() {
                    out.push(Prediction {
                        theta: th.data()[i * n..(i + 1) * n].to_vec(),
                        w: CMatrix::from_interleaved(m, k, &w.data()[i * 2 * m * k..(i + 1) * 2 * m * k])?,
                        bits: Some(pack_bits(&q.data()[i * nc..(i + 1) * nc], ecfg.d)?),
                    });
                }
            }
            Ok(out)
        }
    }
}

/// Weighted sum-rate of `method` on each sample, with mean and 95% CI.
/// Deterministic for fixed inputs.
pub fn evaluate(
    method: Method,
    model: Option<&Model>,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    opts: &EvalOptions,
) -> Result<MethodReport> {
    if samples.is_empty() {
        return Err(Error::Training("empty test set".into()));
    }
    let ecfg = scaled_config(cfg, opts)?;
    let preds = predict(method, model, samples, cfg, opts)?;
    let mut per_sample = Vec::with_capacity(samples.len());
    for (i, (s, p)) in samples.iter().zip(&preds).enumerate() {
        let applied = match opts.fallback_seed {
            Some(seed) => random_phase(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, i)), ecfg.n),
            None => p.theta.clone(),
        };
        let r = achievable_rates(&p.w, &applied, s, &ecfg)?.weighted_sum;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("{method} sum-rate on test sample {i}")));
        }
        per_sample.push(r);
    }
    let (mean, ci95) = mean_ci95(&per_sample);
    Ok(MethodReport {
        method,
        mean,
        ci95,
        per_sample,
        bits: match method {
            Method::UpperBound => None,
            Method::Naive => Some(ecfg.n),
            _ => Some(ecfg.bits()),
        },
        power_dbm: watts_to_dbm(ecfg.p),
        fallback: opts.fallback_seed.is_some(),
    })
}

/// Evaluates each method in order, looking trained ones up in `models`.
pub fn evaluate_all(
    methods: &[Method],
    models: &[Model],
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let ecfg = scaled_config(cfg, opts)?;
    let reports = methods
        .iter()
        .map(|&m| evaluate(m, models.iter().find(|x| x.method == m), samples, cfg, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        power_dbm: watts_to_dbm(ecfg.p),
        bits: ecfg.bits(),
        methods: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::{effective_channel, gen_channels};
    use crate::wmmse::mrt_beamformer;

    #[test]
    fn naive_sign_rule() {
        let p = naive_phases(&[0.3, -2.0, 0.0, 4.0]);
        assert_eq!(p, vec![FRAC_PI_2, -FRAC_PI_2, FRAC_PI_2, -FRAC_PI_2]);
    }

    #[test]
    fn ci_of_known_values() {
        let (m, h) = mean_ci95(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((h - Z95 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_ci95(&[5.0]), (5.0, 0.0));
    }

    fn labeled(cfg: &SystemConfig) -> Vec<ChannelSample> {
        (0..5)
            .map(|i| {
                let mut s = gen_channels(cfg, 900 + i).unwrap();
                s.theta_opt = vec![0.4; cfg.n];
                s.w_opt = mrt_beamformer(&effective_channel(&s, &s.theta_opt).unwrap(), cfg.p);
                s
            })
            .collect()
    }

    #[test]
    fn label_methods_are_deterministic_and_report_bits() {
        let cfg = SystemConfig::desk();
        let data = labeled(&cfg);
        let opts = EvalOptions::default();
        let a = evaluate(Method::Naive, None, &data, &cfg, &opts).unwrap();
        assert_eq!(a, evaluate(Method::Naive, None, &data, &cfg, &opts).unwrap());
        assert_eq!(a.bits, Some(cfg.n));
        let ub = evaluate(Method::UpperBound, None, &data, &cfg, &opts).unwrap();
        assert_eq!(ub.bits, None);
        assert!(evaluate(Method::Linq, None, &data, &cfg, &opts).is_err());
    }

    #[test]
    fn power_override_rescales_labels() {
        let cfg = SystemConfig::desk();
        let data = labeled(&cfg);
        let opts = EvalOptions {
            power: Some(cfg.p * 10.0),
            ..Default::default()
        };
        let preds = predict(Method::UpperBound, None, &data, &cfg, &opts).unwrap();
        assert!((preds[0].w.frobenius_sq() / (cfg.p * 10.0) - 1.0).abs() < 1e-12);
        let r = evaluate(Method::UpperBound, None, &data, &cfg, &opts).unwrap();
        assert!((r.power_dbm - cfg.power_dbm() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn fallback_is_seeded() {
        let cfg = SystemConfig::desk();
        let data = labeled(&cfg);
        let opts = |s| EvalOptions {
            fallback_seed: Some(s),
            ..Default::default()
        };
        let a = evaluate(Method::UpperBound, None, &data, &cfg, &opts(1)).unwrap();
        assert_eq!(a, evaluate(Method::UpperBound, None, &data, &cfg, &opts(1)).unwrap());
        assert_ne!(a.per_sample, evaluate(Method::UpperBound, None, &data, &cfg, &opts(2)).unwrap().per_sample);
        assert!(a.fallback);
    }
}
