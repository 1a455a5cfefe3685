//! Feed-forward layers over [`autodiff`](crate::autodiff) parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Bound, ParamId, ParamSet, Tape, Tensor, Var, BN_MOMENTUM};
use crate::error::Result;

/// Per-forward mutable state: the dropout stream and batchnorm statistics
/// waiting to be folded into the running buffers.
pub struct ForwardCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pending: Vec<(ParamId, ParamId, BatchStats)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            rng,
            pending: Vec::new(),
        }
    }

    /// Applies `running = (1 - m) running + m batch` for every train-mode
    /// batchnorm evaluated through this context.
    pub fn commit_running_stats(self, params: &mut ParamSet) {
        for (mean_id, var_id, stats) in self.pending {
            for (r, b) in params.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in params.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weight `[out, in]` and bias `[out]`, both uniform on `±sqrt(1/in)`.
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
        let w = Tensor::new(vec![fan_out, fan_in], draw(fan_out * fan_in))?;
        let b = Tensor::new(vec![fan_out], draw(fan_out))?;
        Ok(Self {
            weight: params.add(format!("{name}/weight"), w, true)?,
            bias: params.add(format!("{name}/bias"), b, true)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, bound.var(self.weight), bound.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, features: usize) -> Result<Self> {
        let ones = || Tensor::new(vec![features], vec![1.0; features]);
        Ok(Self {
            gamma: params.add(format!("{name}/gamma"), ones()?, true)?,
            beta: params.add(format!("{name}/beta"), Tensor::zeros(vec![features]), true)?,
            running_mean: params.add(format!("{name}/running_mean"), Tensor::zeros(vec![features]), false)?,
            running_var: params.add(format!("{name}/running_var"), ones()?, false)?,
        })
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (y, stats) = tape.batchnorm(
            x,
            bound.var(self.gamma),
            bound.var(self.beta),
            params.get(self.running_mean).data(),
            params.get(self.running_var).data(),
        )?;
        if let Some(stats) = stats {
            ctx.pending.push((self.running_mean, self.running_var, stats));
        }
        Ok(y)
    }
}

/// What follows each hidden linear layer, in order: ReLU, batchnorm,
/// dropout. The output layer has none of these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenStyle {
    pub relu: bool,
    pub batchnorm: bool,
    pub dropout: f64,
}

impl HiddenStyle {
    pub const LINEAR: HiddenStyle = HiddenStyle {
        relu: false,
        batchnorm: false,
        dropout: 0.0,
    };
    pub const RELU: HiddenStyle = HiddenStyle {
        relu: true,
        batchnorm: false,
        dropout: 0.0,
    };
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    norms: Vec<Option<BatchNorm>>,
    style: HiddenStyle,
}

impl Mlp {
    /// `widths[0]` is the input size; every later entry is one linear layer.
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        prefix: &str,
        widths: &[usize],
        style: HiddenStyle,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let depth = widths.len().saturating_sub(1);
        for i in 0..depth {
            layers.push(Linear::new(params, rng, &format!("{prefix}/affine{i}"), widths[i], widths[i + 1])?);
            let hidden = i + 1 < depth;
            norms.push(if hidden && style.batchnorm {
                Some(BatchNorm::new(params, &format!("{prefix}/bn{i}"), widths[i + 1])?)
            } else {
                None
            });
        }
        Ok(Self { layers, norms, style })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mut h = x;
        let depth = self.layers.len();
        for (i, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            h = layer.forward(tape, bound, h)?;
            if i + 1 == depth {
                break;
            }
            if self.style.relu {
                h = tape.relu(h);
            }
            if let Some(bn) = norm {
                h = bn.forward(params, tape, bound, h, ctx)?;
            }
            h = tape.dropout(h, self.style.dropout, ctx.rng)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::Mode;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new(&mut ps, &mut rng, "l", 16, 8).unwrap();
        let b = 0.25;
        assert!(ps.get(l.weight).data().iter().all(|w| w.abs() <= b));
        assert!(ps.get(l.bias).data().iter().all(|w| w.abs() <= b));
        assert_eq!(l.param_count(), 8 * 17);
        assert_eq!(ps.get(l.weight).shape(), &[8, 16]);
    }

    #[test]
    fn mlp_names_and_shapes() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let style = HiddenStyle {
            relu: true,
            batchnorm: true,
            dropout: 0.5,
        };
        let mlp = Mlp::new(&mut ps, &mut rng, "encoder", &[5, 8, 4, 2], style).unwrap();
        assert_eq!((mlp.input_dim(), mlp.output_dim()), (5, 2));
        for name in ["encoder/affine0/weight", "encoder/bn0/gamma", "encoder/bn1/running_var", "encoder/affine2/bias"] {
            assert!(ps.find(name).is_some(), "{name}");
        }
        assert!(ps.find("encoder/bn2/gamma").is_none());
    }

    #[test]
    fn train_forward_updates_running_stats_and_eval_is_deterministic() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let style = HiddenStyle {
            relu: true,
            batchnorm: true,
            dropout: 0.5,
        };
        let mlp = Mlp::new(&mut ps, &mut rng, "m", &[3, 6, 2], style).unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();

        let mut tape = Tape::new(Mode::Train);
        let bound = ps.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::new(&mut rng);
        mlp.forward(&ps, &mut tape, &bound, xv, &mut ctx).unwrap();
        let before = ps.clone();
        ctx.commit_running_stats(&mut ps);
        let rm = ps.find("m/bn0/running_mean").unwrap();
        assert_ne!(ps.get(rm), before.get(rm));

        let run = |ps: &ParamSet, rng: &mut ChaCha8Rng| {
            let mut tape = Tape::new(Mode::Eval);
            let bound = ps.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let mut ctx = ForwardCtx::new(rng);
            let y = mlp.forward(ps, &mut tape, &bound, xv, &mut ctx).unwrap();
            tape.value(y).clone()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(20);
        assert_eq!(run(&ps, &mut r1), run(&ps, &mut r2));
    }
}
