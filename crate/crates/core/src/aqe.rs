//! Auto-quantization encoder: encoder network, trainable scalar quantizer,
//! decoder network, and the binary control message between them.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::autodiff::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, HiddenStyle, Mlp};
use crate::sysmodel::{ChannelSample, SystemConfig};

pub const WIRE_VERSION: u8 = 1;
/// Accepted distance between a quantized value and its level.
pub const LEVEL_TOL: f64 = 1e-9;
pub const DROPOUT: f64 = 0.5;

/// Per-threshold amplitude: the `D` levels are `a (2j - (D - 1))` for
/// `j = 0..D`, spanning `[-pi/2, pi/2]`. For `D = 2`, `a = pi/2`.
pub fn amplitude(levels: usize) -> f64 {
    FRAC_PI_2 / (levels - 1) as f64
}

pub fn level_value(levels: usize, j: usize) -> f64 {
    amplitude(levels) * (2.0 * j as f64 - (levels - 1) as f64)
}

/// Index of the level `psi` sits on.
pub fn level_index(levels: usize, psi: f64) -> Result<usize> {
    let a = amplitude(levels);
    let j = ((psi / a + (levels - 1) as f64) / 2.0).round();
    if !(0.0..levels as f64).contains(&j) || (level_value(levels, j as usize) - psi).abs() > LEVEL_TOL {
        return Err(Error::Message(format!("{psi} is not one of the {levels} quantizer levels")));
    }
    Ok(j as usize)
}

fn bits_per_feature(levels: usize) -> Result<usize> {
    if levels < 2 || !levels.is_power_of_two() {
        return Err(Error::Config(format!("quantization levels {levels} must be a power of two >= 2")));
    }
    Ok(levels.trailing_zeros() as usize)
}

/// Level indices as `log2 D`-bit groups, most significant bit first, in
/// feature order. For `D = 2`, `+pi/2 -> 1` and `-pi/2 -> 0`.
pub fn pack_bits(psi: &[f64], levels: usize) -> Result<Vec<bool>> {
    let width = bits_per_feature(levels)?;
    let mut bits = Vec::with_capacity(psi.len() * width);
    for &v in psi {
        let j = level_index(levels, v)?;
        bits.extend((0..width).rev().map(|b| (j >> b) & 1 == 1));
    }
    Ok(bits)
}

pub fn unpack_bits(bits: &[bool], levels: usize) -> Result<Vec<f64>> {
    let width = bits_per_feature(levels)?;
    if !bits.len().is_multiple_of(width) {
        return Err(Error::Message(format!("{} bits is not a multiple of {width}", bits.len())));
    }
    Ok(bits
        .chunks_exact(width)
        .map(|g| {
            let j = g.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            level_value(levels, j)
        })
        .collect())
}

/// The `B`-bit word sent to the RIS controller, with the values it encodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMessage {
    pub bits: Vec<bool>,
    /// Encoder output before quantization.
    pub features: Vec<f64>,
    /// Quantized features, one level per feature.
    pub quantized: Vec<f64>,
}

impl ControlMessage {
    pub fn from_quantized(features: Vec<f64>, quantized: Vec<f64>, levels: usize) -> Result<Self> {
        let bits = pack_bits(&quantized, levels)?;
        Ok(Self {
            bits,
            features,
            quantized,
        })
    }

    /// `[version u8][N_c u16 LE][bits, MSB first, zero-padded to a byte]`.
    pub fn to_wire(&self, levels: usize) -> Result<Vec<u8>> {
        let width = bits_per_feature(levels)?;
        let n_c = self.bits.len() / width;
        let n_c = u16::try_from(n_c).map_err(|_| Error::Message(format!("{n_c} features exceed u16")))?;
        let mut out = vec![WIRE_VERSION];
        out.extend_from_slice(&n_c.to_le_bytes());
        out.extend(self.bits.chunks(8).map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |byte, (i, &b)| byte | ((b as u8) << (7 - i)))
        }));
        Ok(out)
    }

    /// Parses a wire message into bits and quantized values. `features` is
    /// empty because pre-quantization values are not transmitted.
    pub fn from_wire(bytes: &[u8], levels: usize) -> Result<Self> {
        let width = bits_per_feature(levels)?;
        let [version, lo, hi, payload @ ..] = bytes else {
            return Err(Error::Message("wire message shorter than its header".into()));
        };
        if *version != WIRE_VERSION {
            return Err(Error::Message(format!("unsupported wire version {version}")));
        }
        let n_bits = u16::from_le_bytes([*lo, *hi]) as usize * width;
        if payload.len() != n_bits.div_ceil(8) {
            return Err(Error::Message(format!(
                "{n_bits} bits need {} payload bytes, got {}",
                n_bits.div_ceil(8),
                payload.len()
            )));
        }
        let bits: Vec<bool> = (0..n_bits).map(|i| payload[i / 8] >> (7 - i % 8) & 1 == 1).collect();
        if (n_bits..payload.len() * 8).any(|i| payload[i / 8] >> (7 - i % 8) & 1 == 1) {
            return Err(Error::Message("non-zero padding bits".into()));
        }
        let quantized = unpack_bits(&bits, levels)?;
        Ok(Self {
            bits,
            features: Vec::new(),
            quantized,
        })
    }
}

/// Trainable scalar quantizer `sum_i a_i q(c_i (x - b_i))` with fixed `a_i`.
#[derive(Debug, Clone)]
pub struct Quantizer {
    pub levels: usize,
    /// `b_i`, trainable.
    pub shift: ParamId,
    /// `c_i`, trainable.
    pub slope: ParamId,
}

pub const INIT_SLOPE: f64 = 0.5;

impl Quantizer {
    /// Thresholds start evenly spaced one unit apart, centred on 0.
    pub fn new(params: &mut ParamSet, name: &str, levels: usize) -> Result<Self> {
        bits_per_feature(levels)?;
        let t = levels - 1;
        let shifts = (0..t).map(|i| i as f64 - (t - 1) as f64 / 2.0).collect();
        Ok(Self {
            levels,
            shift: params.add(format!("{name}/shift"), Tensor::new(vec![t], shifts)?, true)?,
            slope: params.add(format!("{name}/slope"), Tensor::new(vec![t], vec![INIT_SLOPE; t])?, true)?,
        })
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        vec![amplitude(self.levels); self.levels - 1]
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.soft_quantize(x, &self.amplitudes(), bound.var(self.shift), bound.var(self.slope))
    }
}

/// Encoder input: `[theta_opt (N); W_opt as interleaved (re, im), row-major
/// M x K]`.
pub fn raw_encoder_input(sample: &ChannelSample) -> Vec<f64> {
    let mut x = sample.theta_opt.clone();
    sample.w_opt.extend_interleaved(&mut x);
    x
}

#[derive(Debug, Clone)]
pub struct Aqe {
    pub encoder: Mlp,
    pub quantizer: Quantizer,
    pub decoder: Mlp,
    pub input_mean: ParamId,
    pub input_std: ParamId,
}

pub struct AqeOutput {
    pub features: Var,
    pub quantized: Var,
    pub theta: Var,
}

impl Aqe {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, cfg: &SystemConfig) -> Result<Self> {
        let h = cfg.encoder_input_dim();
        let enc_style = HiddenStyle {
            relu: true,
            batchnorm: true,
            dropout: DROPOUT,
        };
        let encoder = Mlp::new(
            params,
            rng,
            "encoder",
            &[h, 32 * h, 16 * h, 8 * h, 4 * h, cfg.n_c],
            enc_style,
        )?;
        let quantizer = Quantizer::new(params, "quantizer", cfg.d)?;
        let decoder = Mlp::new(params, rng, "decoder", &[cfg.n_c, cfg.n, cfg.n, cfg.n], HiddenStyle::RELU)?;
        let input_mean = params.add("encoder/input_mean", Tensor::zeros(vec![h]), false)?;
        let input_std = params.add("encoder/input_std", Tensor::new(vec![h], vec![1.0; h])?, false)?;
        Ok(Self {
            encoder,
            quantizer,
            decoder,
            input_mean,
            input_std,
        })
    }

    /// Stores per-feature mean and standard deviation of the encoder input
    /// over `samples`; constant features keep unit scale.
    pub fn fit_input_stats(&self, params: &mut ParamSet, samples: &[ChannelSample]) -> Result<()> {
        let h = self.encoder.input_dim();
        if samples.is_empty() {
            return Err(Error::Training("no samples to fit input statistics".into()));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; h];
        let mut sq = vec![0.0; h];
        for s in samples {
            for (j, v) in raw_encoder_input(s).into_iter().enumerate() {
                mean[j] += v;
                sq[j] += v * v;
            }
        }
        let mut std = vec![1.0; h];
        for j in 0..h {
            mean[j] /= n;
            let var = (sq[j] / n - mean[j] * mean[j]).max(0.0);
            if var.sqrt() > 1e-12 * (1.0 + mean[j].abs()) {
                std[j] = var.sqrt();
            }
        }
        params.get_mut(self.input_mean).data_mut().copy_from_slice(&mean);
        params.get_mut(self.input_std).data_mut().copy_from_slice(&std);
        Ok(())
    }

    /// Standardized encoder input `[B, H]`.
    pub fn input_tensor(&self, params: &ParamSet, samples: &[&ChannelSample]) -> Result<Tensor> {
        let h = self.encoder.input_dim();
        let (mean, std) = (params.get(self.input_mean).data(), params.get(self.input_std).data());
        let mut data = Vec::with_capacity(samples.len() * h);
        for s in samples {
            let raw = raw_encoder_input(s);
            if raw.len() != h {
                return Err(Error::Dimension(format!("encoder input has {} entries, expected {h}", raw.len())));
            }
            data.extend(raw.iter().zip(mean).zip(std).map(|((x, m), s)| (x - m) / s));
        }
        Tensor::new(vec![samples.len(), h], data)
    }

    pub fn encode(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        bound: &Bound,
        samples: &[&ChannelSample],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let x = self.input_tensor(params, samples)?;
        let x = tape.constant(x);
        self.encoder.forward(params, tape, bound, x, ctx)
    }

    pub fn decode(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        bound: &Bound,
        psi: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.decoder.forward(params, tape, bound, psi, ctx)
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        bound: &Bound,
        samples: &[&ChannelSample],
        ctx: &mut ForwardCtx,
    ) -> Result<AqeOutput> {
        let features = self.encode(params, tape, bound, samples, ctx)?;
        let quantized = self.quantizer.forward(tape, bound, features)?;
        let theta = self.decode(params, tape, bound, quantized, ctx)?;
        Ok(AqeOutput {
            features,
            quantized,
            theta,
        })
    }
}
