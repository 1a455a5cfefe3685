//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Maximum accepted relative error per coordinate.
    pub tol: f64,
    pub mode: Mode,
    /// Checks at most this many coordinates across all inputs, drawn
    /// uniformly with `seed`; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-6,
            mode: Mode::Train,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub input: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor, a fixed fraction of the
/// largest analytic entry, keeps coordinates whose true gradient is ~0 from
/// dividing round-off by round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Relative floor as a fraction of the largest analytic gradient entry.
pub const REL_FLOOR: f64 = 1e-3;

fn eval(f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor], mode: Mode) -> Result<f64> {
    let mut tape = Tape::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Autodiff(format!("grad_check: f returned shape {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences. `f` must be deterministic; it is evaluated twice at the base
/// point and any difference is an error.
pub fn grad_check(
    f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {}", cfg.eps)));
    }
    let first = eval(f, inputs, cfg.mode)?;
    let second = eval(f, inputs, cfg.mode)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Autodiff(format!(
            "grad_check: f is not deterministic ({first} vs {second})"
        )));
    }

    let mut tape = Tape::new(cfg.mode);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut coords: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|j| (i, j)));
    }
    if let Some(limit) = cfg.max_coords.filter(|&l| l < total) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked: Vec<usize> = sample(&mut rng, total, limit).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|p| coords[p]).collect();
    }

    let mut tensors: Vec<TensorCheck> = (0..inputs.len())
        .map(|input| TensorCheck {
            input,
            checked: 0,
            max_rel_err: 0.0,
            passed: true,
        })
        .collect();
    let floors: Vec<f64> = analytic
        .iter()
        .map(|g| REL_FLOOR * g.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        .collect();
    let mut probe = inputs.to_vec();
    for (i, j) in coords {
        let base = probe[i].data()[j];
        probe[i].data_mut()[j] = base + cfg.eps;
        let up = eval(f, &probe, cfg.mode)?;
        probe[i].data_mut()[j] = base - cfg.eps;
        let down = eval(f, &probe, cfg.mode)?;
        probe[i].data_mut()[j] = base;
        let numeric = (up - down) / (2.0 * cfg.eps);
        let err = relative_error(analytic[i][j], numeric, floors[i].max(f64::MIN_POSITIVE));
        let entry = &mut tensors[i];
        entry.checked += 1;
        entry.max_rel_err = entry.max_rel_err.max(err);
        if !(err < cfg.tol) {
            entry.passed = false;
        }
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors,
        max_rel_err,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let cfg = GradCheckConfig {
            tol: 1e-10,
            ..GradCheckConfig::default()
        };
        let report = grad_check(
            &|tp: &mut Tape, v: &[Var]| {
                let sq = tp.mul(v[0], v[0])?;
                Ok(tp.sum_all(sq))
            },
            &[x],
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn advancing_dropout_rng_is_rejected() {
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(1));
        let x = Tensor::new(vec![16], vec![1.0; 16]).unwrap();
        let res = grad_check(
            &|tp: &mut Tape, v: &[Var]| {
                let y = tp.dropout(v[0], 0.5, &mut *rng.borrow_mut())?;
                Ok(tp.sum_all(y))
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(matches!(res, Err(Error::Autodiff(_))));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // Forward tanh with the backward of identity.
        let x = Tensor::new(vec![3], vec![0.5, 1.0, -0.7]).unwrap();
        let report = grad_check(
            &|tp: &mut Tape, v: &[Var]| {
                let val = tp.value(v[0]).data().iter().map(|x| x.tanh()).collect();
                let t = Tensor::new(vec![3], val)?;
                let y = tp.push_op(t, &[v[0]], |g, _| vec![g.to_vec()]);
                Ok(tp.sum_all(y))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn subsampling_checks_requested_count() {
        let x = Tensor::new(vec![50], (0..50).map(|i| i as f64 / 10.0).collect()).unwrap();
        let cfg = GradCheckConfig {
            max_coords: Some(20),
            ..GradCheckConfig::default()
        };
        let report = grad_check(
            &|tp: &mut Tape, v: &[Var]| {
                let t = tp.tanh(v[0]);
                Ok(tp.sum_all(t))
            },
            &[x],
            &cfg,
        )
        .unwrap();
        assert_eq!(report.tensors[0].checked, 20);
        assert!(report.passed());
    }

    #[test]
    fn non_positive_eps_is_rejected() {
        let cfg = GradCheckConfig {
            eps: 0.0,
            ..GradCheckConfig::default()
        };
        let res = grad_check(&|tp: &mut Tape, v: &[Var]| Ok(tp.sum_all(v[0])), &[Tensor::scalar(1.0)], &cfg);
        assert!(res.is_err());
    }
}
