//! Plumbing behind the command-line tool: labeled dataset generation,
//! training runs with resumable checkpoints, sweeps over transmit power or
//! bit budget, and the CSV and SVG artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::container::{partial_path, write_atomically};
use crate::error::{Error, Result};
use crate::sysmodel::{dataset_read, dataset_write, gen_channels, ChannelSample, SystemConfig};
use crate::train_eval::{
    derive_seed, evaluate, split_dataset, EvalOptions, EvalReport, Method, Model, TrainConfig, Trainer,
};
use crate::wmmse::label_sample;

/// Epochs between intermediate checkpoint writes.
pub const SAVE_EVERY: usize = 25;

/// Runs `f(i)` for `i in 0..n` on up to `jobs` threads; results keep
/// index order.
pub fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                let failed = r.is_err();
                *slots[i].lock().unwrap() = Some(r);
                if failed {
                    next.store(n, Ordering::Relaxed);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(r) => out.push(r?),
            None => return Err(Error::Message("a parallel job was cancelled".into())),
        }
    }
    Ok(out)
}

/// `n` channel draws labeled with the phase-iterated WMMSE solution.
/// Sample `i` depends only on `(cfg, seed, i)`, so the result does not
/// depend on `jobs`.
pub fn generate_dataset(cfg: &SystemConfig, n: usize, seed: u64, jobs: usize) -> Result<Vec<ChannelSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let done = AtomicUsize::new(0);
    let step = (n / 10).max(1);
    parallel_map(n, jobs, |i| {
        let mut s = gen_channels(cfg, derive_seed(seed, i))?;
        label_sample(&mut s, cfg)?;
        let d = done.fetch_add(1, Ordering::Relaxed) + 1;
        if d.is_multiple_of(step) || d == n {
            let rate = d as f64 / start.elapsed().as_secs_f64().max(1e-9);
            log::info!("labeled {d}/{n} samples ({rate:.1} samples/s)");
        }
        Ok(s)
    })
}

/// True when two scenarios produce the same labels (the message size does
/// not enter the labels).
fn same_channel_scenario(a: &SystemConfig, b: &SystemConfig) -> bool {
    let mut a = a.clone();
    a.n_c = b.n_c;
    a.d = b.d;
    serde_json::to_value(&a).ok() == serde_json::to_value(b).ok()
}

/// Loads a labeled dataset whose channel scenario matches `cfg`.
pub fn load_dataset(path: &Path, cfg: &SystemConfig) -> Result<Vec<ChannelSample>> {
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    let (file_cfg, samples) = dataset_read(path)?;
    if !same_channel_scenario(cfg, &file_cfg) {
        return Err(Error::Config(format!(
            "dataset {} was generated for a different scenario",
            path.display()
        )));
    }
    if let Some(i) = samples.iter().position(|s| !s.has_labels()) {
        return Err(Error::Config(format!("dataset sample {i} has no labels")));
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Trains `method` on the dataset splits, checkpointing to `ckpt` and
/// streaming the history to `<history>.partial` until it completes. With
/// `resume` and an existing checkpoint, training continues from it; only
/// `max_epochs` and `early_stop_patience` may differ from the stored run.
pub fn train_method(
    method: Method,
    cfg: &SystemConfig,
    tcfg: &TrainConfig,
    samples: Vec<ChannelSample>,
    ckpt: &Path,
    history: &Path,
    resume: bool,
) -> Result<Trainer> {
    let splits = split_dataset(samples, tcfg)?;
    let mut trainer = if resume && ckpt.exists() {
        let mut t = Trainer::load(ckpt)?;
        let mut stored = t.cfg.clone();
        stored.max_epochs = tcfg.max_epochs;
        stored.early_stop_patience = tcfg.early_stop_patience;
        if &stored != tcfg || t.model.method != method || t.model.cfg != *cfg {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with different settings",
                ckpt.display()
            )));
        }
        t.cfg = stored;
        log::info!("{method}: resuming after epoch {}", t.progress.epoch);
        t
    } else {
        let mut model = Model::new(method, cfg, tcfg.unrolled_layers, tcfg.seed)?;
        model.fit_input_stats(&splits.train)?;
        log::info!("{method}: {} trainable parameters", model.param_count());
        Trainer::new(model, tcfg.clone())?
    };

    let partial = partial_path(history);
    let mut log_file = csv::Writer::from_path(&partial).map_err(csv_err)?;
    for r in &trainer.progress.history {
        log_file.serialize(HistoryRow::from(r)).map_err(csv_err)?;
    }
    log_file.flush()?;
    let start = Instant::now();
    trainer.run(&splits.train, &splits.val, None, |t, rec| {
        log_file.serialize(HistoryRow::from(rec)).map_err(csv_err)?;
        log_file.flush()?;
        if t.progress.epoch % 10 == 0 {
            log::info!(
                "{method} epoch {}: train {:.5} val {:.5} lr {:.2e} ({:.1}s)",
                rec.epoch,
                rec.train_loss,
                rec.val_loss,
                rec.lr,
                start.elapsed().as_secs_f64()
            );
        }
        if t.progress.epoch % SAVE_EVERY == 0 {
            t.save(ckpt)?;
        }
        Ok(())
    })?;
    drop(log_file);
    trainer.save(ckpt)?;
    fs::rename(&partial, history)?;
    log::info!(
        "{method}: finished after {} epochs, best val loss {:.5} at epoch {}",
        trainer.progress.epoch,
        trainer.progress.best_val,
        trainer.progress.best_epoch
    );
    Ok(trainer)
}

impl From<&crate::train_eval::EpochRecord> for HistoryRow {
    fn from(r: &crate::train_eval::EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            lr: r.lr,
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub power_dbm: f64,
    /// Empty for the unconstrained upper bound.
    pub bits: Option<usize>,
    pub mean: f64,
    pub ci95: f64,
    pub fallback: bool,
}

pub fn write_report_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    write_atomically(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for rep in reports {
            for m in &rep.methods {
                out.serialize(ReportRow {
                    method: m.method.to_string(),
                    power_dbm: m.power_dbm,
                    bits: m.bits,
                    mean: m.mean,
                    ci95: m.ci95,
                    fallback: m.fallback,
                })
                .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    PowerDbm,
    Bits,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::PowerDbm => "transmit power P [dBm]",
            Axis::Bits => "control message length B [bits]",
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Axis::PowerDbm => "sweep_power",
            Axis::Bits => "sweep_bits",
        }
    }
}

/// One tidy row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub axis: Axis,
    pub axis_value: f64,
    pub mean: f64,
    pub ci95: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_atomically(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in rows {
            out.serialize(r).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    })
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    rd.deserialize().map(|r| r.map_err(csv_err)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepGrid {
    PowerDbm(Vec<f64>),
    Bits(Vec<usize>),
}

impl SweepGrid {
    pub fn axis(&self) -> Axis {
        match self {
            SweepGrid::PowerDbm(_) => Axis::PowerDbm,
            SweepGrid::Bits(_) => Axis::Bits,
        }
    }
}

/// A batch experiment: scenario, training schedule, methods and one sweep
/// axis. Grid points other than the swept value come from `config`.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: SystemConfig,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub grid: SweepGrid,
    pub out: PathBuf,
    pub seed: u64,
    /// Dataset size generated per transmit power when none exists.
    pub samples: usize,
    pub jobs: usize,
    /// Train missing checkpoints instead of skipping their grid points.
    pub train_missing: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.train.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        let sorted = |v: &[f64]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]);
        match &self.grid {
            SweepGrid::PowerDbm(p) if !sorted(p) || p.iter().any(|x| !x.is_finite()) => {
                Err(Error::Config(format!("power grid {p:?} must be nonempty, finite and increasing")))
            }
            SweepGrid::Bits(b) if !sorted(&b.iter().map(|&x| x as f64).collect::<Vec<_>>()) => {
                Err(Error::Config(format!("bit grid {b:?} must be nonempty and increasing")))
            }
            SweepGrid::Bits(b) => {
                for &x in b {
                    self.config_at(self.config.power_dbm(), x)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Scenario at one grid point: power in dBm and message length in bits.
    pub fn config_at(&self, power_dbm: f64, bits: usize) -> Result<SystemConfig> {
        let bpf = self.config.bits_per_feature();
        if bits == 0 || !bits.is_multiple_of(bpf) {
            return Err(Error::Config(format!("{bits} bits is not a multiple of {bpf} bits per feature")));
        }
        let mut c = self.config.clone().with_power_dbm(power_dbm);
        c.n_c = bits / bpf;
        c.validate()?;
        Ok(c)
    }

    fn points(&self) -> Vec<(f64, usize)> {
        match &self.grid {
            SweepGrid::PowerDbm(p) => p.iter().map(|&x| (x, self.config.bits())).collect(),
            SweepGrid::Bits(b) => b.iter().map(|&x| (self.config.power_dbm(), x)).collect(),
        }
    }

    pub fn dataset_path(&self, power_dbm: f64) -> PathBuf {
        self.out.join("data").join(format!("p{power_dbm}.bin"))
    }

    pub fn checkpoint_path(&self, method: Method, power_dbm: f64, bits: usize) -> PathBuf {
        self.out.join("ckpt").join(format!("{method}-p{power_dbm}-b{bits}.ckpt"))
    }

    fn history_path(&self, method: Method, power_dbm: f64, bits: usize) -> PathBuf {
        self.out.join("ckpt").join(format!("{method}-p{power_dbm}-b{bits}_history.csv"))
    }
}

/// A grid point left out of a sweep, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub method: Method,
    pub power_dbm: f64,
    pub bits: usize,
    pub reason: String,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<Skipped>,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Evaluates every method at every grid point on the test split of the
/// dataset for that power, generating missing datasets. Grid points run on
/// up to `jobs` threads, each single-threaded.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    fs::create_dir_all(spec.out.join("data"))?;
    fs::create_dir_all(spec.out.join("ckpt"))?;
    let points = spec.points();
    let mut powers: Vec<f64> = points.iter().map(|p| p.0).collect();
    powers.dedup();
    for &p in &powers {
        let path = spec.dataset_path(p);
        if !path.exists() {
            let cfg = spec.config_at(p, spec.config.bits())?;
            log::info!("generating {} samples at {p} dBm", spec.samples);
            let data = generate_dataset(&cfg, spec.samples, spec.seed, spec.jobs)?;
            dataset_write(&path, &cfg, &data)?;
        }
    }

    let axis = spec.grid.axis();
    let results = parallel_map(points.len(), spec.jobs, |i| {
        let (p, bits) = points[i];
        let cfg = spec.config_at(p, bits)?;
        let data = load_dataset(&spec.dataset_path(p), &cfg)?;
        let test = split_dataset(data.clone(), &spec.train)?.test;
        let mut rows = Vec::new();
        let mut skipped = Vec::new();
        for &method in &spec.methods {
            let model = if method.is_trainable() {
                let ckpt = spec.checkpoint_path(method, p, bits);
                if ckpt.exists() {
                    Some(Trainer::load(&ckpt)?.best_model())
                } else if spec.train_missing {
                    let hist = spec.history_path(method, p, bits);
                    Some(train_method(method, &cfg, &spec.train, data.clone(), &ckpt, &hist, false)?.best_model())
                } else {
                    skipped.push(Skipped {
                        method,
                        power_dbm: p,
                        bits,
                        reason: format!("missing checkpoint {}", ckpt.display()),
                    });
                    continue;
                }
            } else {
                None
            };
            let r = evaluate(method, model.as_ref(), &test, &cfg, &EvalOptions::default())?;
            rows.push(SweepRow {
                method: method.to_string(),
                axis,
                axis_value: match axis {
                    Axis::PowerDbm => p,
                    Axis::Bits => bits as f64,
                },
                mean: r.mean,
                ci95: r.ci95,
            });
        }
        Ok((rows, skipped))
    })?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (r, s) in results {
        rows.extend(r);
        skipped.extend(s);
    }
    flag_power_violations(&rows);
    let csv = spec.out.join(format!("{}.csv", axis.file_stem()));
    let svg = spec.out.join(format!("{}.svg", axis.file_stem()));
    write_sweep_csv(&csv, &rows)?;
    write_svg(&svg, &rows)?;
    Ok(SweepOutcome {
        rows,
        skipped,
        csv,
        svg,
    })
}

/// Methods whose mean rate decreases somewhere along a power sweep.
pub fn power_monotonicity_violations(rows: &[SweepRow]) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (method, series) in series_of(rows) {
        if series.first().map(|r| r.axis) != Some(Axis::PowerDbm) {
            continue;
        }
        for w in series.windows(2) {
            if w[1].mean < w[0].mean {
                out.push((method.clone(), w[1].axis_value));
            }
        }
    }
    out
}

fn flag_power_violations(rows: &[SweepRow]) {
    for (method, at) in power_monotonicity_violations(rows) {
        log::warn!("{method}: mean sum-rate decreases at {at} dBm");
    }
}

/// Rows grouped by method in first-appearance order, each sorted by axis.
fn series_of(rows: &[SweepRow]) -> Vec<(String, Vec<SweepRow>)> {
    let mut out: Vec<(String, Vec<SweepRow>)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(m, _)| *m == r.method) {
            Some((_, v)) => v.push(r.clone()),
            None => out.push((r.method.clone(), vec![r.clone()])),
        }
    }
    for (_, v) in &mut out {
        v.sort_by(|a, b| a.axis_value.total_cmp(&b.axis_value));
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.0 {
        2.0
    } else if f < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn ticks(lo: f64, hi: f64) -> (f64, f64, Vec<f64>) {
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let step = nice_step(hi - lo);
    let start = (lo / step).floor() * step;
    let end = (hi / step).ceil() * step;
    let n = ((end - start) / step).round() as usize;
    (start, end, (0..=n).map(|i| start + i as f64 * step).collect())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of mean sum-rate against the sweep axis, one series per
/// method with 95% CI whiskers. A pure function of `rows`.
pub fn render_svg(rows: &[SweepRow]) -> String {
    let (w, h) = (720.0, 460.0);
    let (left, right, top, bottom) = (70.0, 170.0, 20.0, 55.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let axis = rows.first().map_or(Axis::PowerDbm, |r| r.axis);
    let xs = rows.iter().map(|r| r.axis_value);
    let ys = rows.iter().flat_map(|r| [r.mean - r.ci95, r.mean + r.ci95]);
    let fold = |it: &mut dyn Iterator<Item = f64>| it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (x0, x1) = if rows.is_empty() { (0.0, 1.0) } else { fold(&mut { xs }) };
    let (y0, y1) = if rows.is_empty() { (0.0, 1.0) } else { fold(&mut { ys }) };
    let (x0, x1, xt) = ticks(x0, x1);
    let (y0, y1, yt) = ticks(y0.min(0.0), y1);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let mut line = |l: String| {
        s.push_str(&l);
        s.push('\n');
    };
    line(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    ));
    line(format!(r#"<rect width="{w}" height="{h}" fill="white"/>"#));
    for &t in &xt {
        line(format!(
            r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{b:.2}" stroke="#e0e0e0"/><text x="{x:.2}" y="{ty:.2}" text-anchor="middle">{t}</text>"##,
            x = px(t),
            b = top + ph,
            ty = top + ph + 16.0
        ));
    }
    for &t in &yt {
        line(format!(
            r##"<line x1="{left}" y1="{y:.2}" x2="{r:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{tx:.2}" y="{ty:.2}" text-anchor="end">{t}</text>"##,
            y = py(t),
            r = left + pw,
            tx = left - 6.0,
            ty = py(t) + 4.0
        ));
    }
    line(format!(
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    ));
    line(format!(
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 15.0,
        xml_escape(axis.label())
    ));
    line(format!(
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">weighted sum-rate [bit/s/Hz]</text>"#,
        top + ph / 2.0
    ));
    for (i, (method, series)) in series_of(rows).iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = series.iter().map(|r| format!("{:.2},{:.2}", px(r.axis_value), py(r.mean))).collect();
        line(format!(
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        ));
        for r in series {
            let (x, y) = (px(r.axis_value), py(r.mean));
            line(format!(
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/><circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#,
                py(r.mean - r.ci95),
                py(r.mean + r.ci95)
            ));
        }
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 12.0;
        line(format!(
            r#"<line x1="{lx}" y1="{ly}" x2="{:.2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0,
            xml_escape(method)
        ));
    }
    line("</svg>".into());
    s
}

pub fn write_svg(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let svg = render_svg(rows);
    write_atomically(path, |w| Ok(w.write_all(svg.as_bytes())?))
}
