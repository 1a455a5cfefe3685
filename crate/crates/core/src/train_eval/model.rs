use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Method;
use crate::aqe::{Aqe, Quantizer};
use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Linear};
use crate::sysmodel::{ChannelSample, SystemConfig};
use crate::updater::{effective_channel_op, stack_w_opt, Updater};

/// Affine compression, the shared scalar quantizer, affine decompression,
/// and an affine map of `W_opt` that ignores the decoded phases.
#[derive(Debug, Clone)]
pub struct LinQ {
    pub f_c: Linear,
    pub quantizer: Quantizer,
    pub f_d: Linear,
    pub f_w: Linear,
}

impl LinQ {
    pub fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &SystemConfig) -> Result<Self> {
        let mk2 = 2 * cfg.m * cfg.k;
        Ok(Self {
            f_c: Linear::new(params, rng, "linq/f_c", cfg.n, cfg.n_c)?,
            quantizer: Quantizer::new(params, "linq/quantizer", cfg.d)?,
            f_d: Linear::new(params, rng, "linq/f_d", cfg.n_c, cfg.n)?,
            f_w: Linear::new(params, rng, "linq/f_w", mk2, mk2)?,
        })
    }
}

#[derive(Debug, Clone)]
enum Front {
    Aqe(Aqe),
    LinQ(LinQ),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ForwardOptions {
    /// Feed `W_opt` instead of `w'` to the receiver/weight network.
    pub skip_init: bool,
}

/// Graph nodes of one forward pass over a batch.
pub struct Forward {
    /// Quantizer output `[B, N_c]`.
    pub quantized: Var,
    /// Decoded phases `[B, N]`.
    pub theta: Var,
    /// Effective channel through the decoded phases `[B, K, M, 2]`.
    pub g: Var,
    /// Beamformer `[B, M, K, 2]`.
    pub w: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub method: Method,
    pub cfg: SystemConfig,
    pub layers: usize,
    pub params: ParamSet,
    front: Front,
    updater: Option<Updater>,
}

impl Model {
    /// Fresh parameters for a trainable `method`, initialized from `seed`.
    pub fn new(method: Method, cfg: &SystemConfig, layers: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (front, updater) = match method {
            Method::AqeWmmse => {
                let aqe = Aqe::new(&mut params, &mut rng, cfg)?;
                let up = Updater::new(&mut params, &mut rng, cfg, layers)?;
                (Front::Aqe(aqe), Some(up))
            }
            Method::Aqe => (Front::Aqe(Aqe::new(&mut params, &mut rng, cfg)?), None),
            Method::Linq => (Front::LinQ(LinQ::new(&mut params, &mut rng, cfg)?), None),
            other => return Err(Error::Config(format!("method {other} has no trainable model"))),
        };
        Ok(Self {
            method,
            cfg: cfg.clone(),
            layers,
            params,
            front,
            updater,
        })
    }

    pub fn aqe(&self) -> Option<&Aqe> {
        match &self.front {
            Front::Aqe(a) => Some(a),
            Front::LinQ(_) => None,
        }
    }

    pub fn linq(&self) -> Option<&LinQ> {
        match &self.front {
            Front::LinQ(l) => Some(l),
            Front::Aqe(_) => None,
        }
    }

    pub fn updater(&self) -> Option<&Updater> {
        self.updater.as_ref()
    }

    pub fn quantizer(&self) -> &Quantizer {
        match &self.front {
            Front::Aqe(a) => &a.quantizer,
            Front::LinQ(l) => &l.quantizer,
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.trainable_len()
    }

    /// Input normalization buffers from the training split.
    pub fn fit_input_stats(&mut self, train: &[ChannelSample]) -> Result<()> {
        if let Some(i) = train.iter().position(|s| !s.has_labels()) {
            return Err(Error::Training(format!("training sample {i} has no labels")));
        }
        if let Front::Aqe(a) = &self.front {
            a.fit_input_stats(&mut self.params, train)?;
        }
        if let Some(u) = &self.updater {
            u.fit_input_stats(&mut self.params, train)?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&ChannelSample],
        ctx: &mut ForwardCtx,
        opts: ForwardOptions,
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        let b = batch.len();
        let w_opt = tape.constant(stack_w_opt(batch)?);
        let (quantized, theta) = match &self.front {
            Front::Aqe(a) => {
                let out = a.forward(&self.params, tape, bound, batch, ctx)?;
                (out.quantized, out.theta)
            }
            Front::LinQ(l) => {
                let raw: Vec<f64> = batch.iter().flat_map(|s| s.theta_opt.iter().copied()).collect();
                let x = tape.constant(Tensor::new(vec![b, cfg.n], raw)?);
                let c = l.f_c.forward(tape, bound, x)?;
                let q = l.quantizer.forward(tape, bound, c)?;
                (q, l.f_d.forward(tape, bound, q)?)
            }
        };
        let g = effective_channel_op(tape, theta, batch)?;
        let w = match (&self.front, &self.updater) {
            (_, Some(up)) => {
                up.forward(&self.params, tape, bound, w_opt, g, cfg, ctx, opts.skip_init)?
                    .w
            }
            (Front::LinQ(l), None) => {
                let flat = tape.reshape(w_opt, vec![b, 2 * cfg.m * cfg.k])?;
                let y = l.f_w.forward(tape, bound, flat)?;
                let y = tape.reshape(y, vec![b, cfg.m, cfg.k, 2])?;
                tape.power_normalize(y, cfg.p)?
            }
            (Front::Aqe(_), None) => w_opt,
        };
        Ok(Forward { quantized, theta, g, w })
    }

    /// Controller side: eval-mode phases `[N]` decoded from received
    /// quantizer levels `[N_c]`.
    pub fn decode_phases(&self, quantized: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(crate::autodiff::Mode::Eval);
        let bound = self.params.bind(&mut tape);
        let psi = tape.constant(Tensor::new(vec![1, self.cfg.n_c], quantized.to_vec())?);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::new(&mut rng);
        let theta = match &self.front {
            Front::Aqe(a) => a.decode(&self.params, &mut tape, &bound, psi, &mut ctx)?,
            Front::LinQ(l) => l.f_d.forward(&mut tape, &bound, psi)?,
        };
        Ok(tape.value(theta).data().to_vec())
    }

    /// Same architecture with `cfg.p` replaced; the unrolled step and the
    /// linQ normalization then target the new budget.
    pub fn with_power(&self, p: f64) -> Self {
        let mut m = self.clone();
        m.cfg.p = p;
        m
    }
}
