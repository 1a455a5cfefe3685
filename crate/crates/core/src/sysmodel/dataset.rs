//! Dataset files: a [`container`](crate::container) of kind `Dataset` whose
//! metadata is the scenario config and whose body is
//!
//! ```text
//! count u64
//! count x { H_AU (2KM) | H_AR (2NM) | H_RU (2KN) | W_opt (2MK) | theta_opt (N) }
//! ```
//!
//! with complex entries stored as interleaved `(re, im)` f64 pairs.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::channel::ChannelSample;
use super::config::SystemConfig;
use crate::container::{write_atomically, ContainerReader, ContainerWriter, Kind};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    config: SystemConfig,
    labeled: bool,
}

pub fn write_samples<W: Write>(
    out: W,
    cfg: &SystemConfig,
    samples: &[ChannelSample],
) -> Result<W> {
    for s in samples {
        s.check_dims(cfg)?;
    }
    let meta = DatasetMeta {
        config: cfg.clone(),
        labeled: samples.iter().all(ChannelSample::has_labels) && !samples.is_empty(),
    };
    let mut w = ContainerWriter::new(out, Kind::Dataset, &serde_json::to_string(&meta)?)?;
    w.u64(samples.len() as u64)?;
    let mut buf = Vec::new();
    for s in samples {
        buf.clear();
        s.h_au.extend_interleaved(&mut buf);
        s.h_ar.extend_interleaved(&mut buf);
        s.h_ru.extend_interleaved(&mut buf);
        s.w_opt.extend_interleaved(&mut buf);
        buf.extend_from_slice(&s.theta_opt);
        w.f64s(&buf)?;
    }
    w.finish()
}

pub fn read_samples<R: Read>(input: R) -> Result<(SystemConfig, Vec<ChannelSample>)> {
    let mut rd = ContainerReader::new(input)?;
    rd.expect_kind(Kind::Dataset)?;
    let meta: DatasetMeta = serde_json::from_str(&rd.json)?;
    let cfg = meta.config;
    cfg.validate()?;
    let (m, k, n) = (cfg.m, cfg.k, cfg.n);
    let count = rd.u64()? as usize;
    let per = 2 * k * m + 2 * n * m + 2 * k * n + 2 * m * k + n;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let v = rd.f64s(per)?;
        let mut off = 0;
        let mut take = |len: usize| {
            let s = &v[off..off + len];
            off += len;
            s
        };
        let h_au = CMatrix::from_interleaved(k, m, take(2 * k * m))?;
        let h_ar = CMatrix::from_interleaved(n, m, take(2 * n * m))?;
        let h_ru = CMatrix::from_interleaved(k, n, take(2 * k * n))?;
        let w_opt = CMatrix::from_interleaved(m, k, take(2 * m * k))?;
        let theta_opt = take(n).to_vec();
        samples.push(ChannelSample {
            h_au,
            h_ar,
            h_ru,
            w_opt,
            theta_opt,
        });
    }
    rd.expect_end()?;
    Ok((cfg, samples))
}

pub fn dataset_write(path: &Path, cfg: &SystemConfig, samples: &[ChannelSample]) -> Result<()> {
    write_atomically(path, |w| write_samples(w, cfg, samples).map(|_| ()))
}

pub fn dataset_read(path: &Path) -> Result<(SystemConfig, Vec<ChannelSample>)> {
    read_samples(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Reads a dataset and checks that its geometry matches `cfg`.
pub fn dataset_read_expect(path: &Path, cfg: &SystemConfig) -> Result<Vec<ChannelSample>> {
    let (found, samples) = dataset_read(path)?;
    if (found.m, found.k, found.n) != (cfg.m, cfg.k, cfg.n) {
        return Err(Error::Format(format!(
            "dataset has (M, K, N) = ({}, {}, {}), config expects ({}, {}, {})",
            found.m, found.k, found.n, cfg.m, cfg.k, cfg.n
        )));
    }
    Ok(samples)
}
