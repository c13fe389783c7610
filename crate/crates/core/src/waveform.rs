//! Uniformly sampled three-phase voltage/current records.
//!
//! A [`WaveformSet`] holds the six terminal channels seen at the protected
//! bus: phase-to-ground voltages and the phase currents flowing into the bus.
//! It is immutable once built, so a single record can be handed to every
//! estimator in the hypothesis bank at once.

use std::borrow::Cow;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Header required on every waveform CSV file.
pub const CSV_HEADER: [&str; 7] = ["time", "va", "vb", "vc", "ia", "ib", "ic"];

/// Maximum relative deviation of any timestep from the median step.
const SAMPLING_TOLERANCE: f64 = 1e-4;

/// Fraction of a sample period used when deciding whether a timestamp lies
/// inside a window boundary.
const WINDOW_SLACK: f64 = 1e-6;

/// A measured or derived signal at the load bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Va,
    Vb,
    Vc,
    Ia,
    Ib,
    Ic,
    /// `va - vb`
    Vab,
    /// `vb - vc`
    Vbc,
    /// `vc - va`
    Vca,
}

impl Channel {
    pub fn voltage(phase: usize) -> Channel {
        [Channel::Va, Channel::Vb, Channel::Vc][phase]
    }

    pub fn current(phase: usize) -> Channel {
        [Channel::Ia, Channel::Ib, Channel::Ic][phase]
    }

    /// Line-line voltage from `phase` to the next phase in a-b-c order.
    pub fn line_line(phase: usize) -> Channel {
        [Channel::Vab, Channel::Vbc, Channel::Vca][phase]
    }

    pub fn is_current(self) -> bool {
        matches!(self, Channel::Ia | Channel::Ib | Channel::Ic)
    }

    pub fn label(self) -> &'static str {
        match self {
            Channel::Va => "va",
            Channel::Vb => "vb",
            Channel::Vc => "vc",
            Channel::Ia => "ia",
            Channel::Ib => "ib",
            Channel::Ic => "ic",
            Channel::Vab => "vab",
            Channel::Vbc => "vbc",
            Channel::Vca => "vca",
        }
    }
}

/// Derived line-line voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct LineLineVoltages {
    pub vab: Vec<f64>,
    pub vbc: Vec<f64>,
    pub vca: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformSet {
    t0: f64,
    dt: f64,
    voltages: [Vec<f64>; 3],
    currents: [Vec<f64>; 3],
}

impl WaveformSet {
    /// Builds a record from phase voltages `[va, vb, vc]` and currents
    /// `[ia, ib, ic]`.
    pub fn new(t0: f64, dt: f64, voltages: [Vec<f64>; 3], currents: [Vec<f64>; 3]) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Format(format!("sample period must be positive, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::Format("first timestamp is not finite".into()));
        }
        let n = voltages[0].len();
        if voltages.iter().chain(currents.iter()).any(|c| c.len() != n) {
            return Err(Error::Shape("all six channels must have the same length".into()));
        }
        if n < 3 {
            return Err(Error::Size(format!("need at least 3 samples, got {n}")));
        }
        Ok(Self { t0, dt, voltages, currents })
    }

    pub fn n(&self) -> usize {
        self.voltages[0].len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn t_last(&self) -> f64 {
        self.time(self.n() - 1)
    }

    pub fn va(&self) -> &[f64] {
        &self.voltages[0]
    }
    pub fn vb(&self) -> &[f64] {
        &self.voltages[1]
    }
    pub fn vc(&self) -> &[f64] {
        &self.voltages[2]
    }
    pub fn ia(&self) -> &[f64] {
        &self.currents[0]
    }
    pub fn ib(&self) -> &[f64] {
        &self.currents[1]
    }
    pub fn ic(&self) -> &[f64] {
        &self.currents[2]
    }

    pub fn voltages(&self) -> &[Vec<f64>; 3] {
        &self.voltages
    }

    pub fn currents(&self) -> &[Vec<f64>; 3] {
        &self.currents
    }

    /// Samples of a measured or derived channel.
    pub fn channel(&self, ch: Channel) -> Cow<'_, [f64]> {
        let diff = |p: usize, q: usize| -> Cow<'_, [f64]> {
            Cow::Owned(
                self.voltages[p]
                    .iter()
                    .zip(&self.voltages[q])
                    .map(|(a, b)| a - b)
                    .collect(),
            )
        };
        match ch {
            Channel::Va => Cow::Borrowed(&self.voltages[0]),
            Channel::Vb => Cow::Borrowed(&self.voltages[1]),
            Channel::Vc => Cow::Borrowed(&self.voltages[2]),
            Channel::Ia => Cow::Borrowed(&self.currents[0]),
            Channel::Ib => Cow::Borrowed(&self.currents[1]),
            Channel::Ic => Cow::Borrowed(&self.currents[2]),
            Channel::Vab => diff(0, 1),
            Channel::Vbc => diff(1, 2),
            Channel::Vca => diff(2, 0),
        }
    }
}

fn parse_field(raw: &str, line: u64, column: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("line {line}: column `{column}` is not a number: {raw:?}")))
}

/// Reads a waveform CSV with header `time,va,vb,vc,ia,ib,ic`.
///
/// Lines starting with `#` are ignored. The sample period is the median
/// timestamp difference; any step deviating from it by more than one part in
/// 10^4 is rejected.
pub fn load_waveform_csv<R: Read>(source: R) -> Result<WaveformSet> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);

    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != CSV_HEADER {
        let missing: Vec<&str> = CSV_HEADER.iter().copied().filter(|c| !names.contains(c)).collect();
        return Err(Error::Format(if missing.is_empty() {
            format!("header must be exactly `{}`, got `{}`", CSV_HEADER.join(","), names.join(","))
        } else {
            format!("missing column(s): {}", missing.join(", "))
        }));
    }

    let mut time = Vec::new();
    let mut cols: [Vec<f64>; 6] = Default::default();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Format(format!(
                "line {line}: expected {} fields, got {}",
                CSV_HEADER.len(),
                record.len()
            )));
        }
        time.push(parse_field(&record[0], line, CSV_HEADER[0])?);
        for (c, col) in cols.iter_mut().enumerate() {
            col.push(parse_field(&record[c + 1], line, CSV_HEADER[c + 1])?);
        }
    }

    if time.len() < 3 {
        return Err(Error::Size(format!("need at least 3 rows, got {}", time.len())));
    }

    let mut steps: Vec<f64> = time.windows(2).map(|w| w[1] - w[0]).collect();
    let mut sorted = steps.clone();
    sorted.sort_by(f64::total_cmp);
    let dt = sorted[sorted.len() / 2];
    if !(dt > 0.0) {
        return Err(Error::NonUniformSampling("timestamps are not increasing".into()));
    }
    for (k, step) in steps.drain(..).enumerate() {
        if (step - dt).abs() > SAMPLING_TOLERANCE * dt {
            return Err(Error::NonUniformSampling(format!(
                "step {k} is {step} s, median step is {dt} s"
            )));
        }
    }

    let [va, vb, vc, ia, ib, ic] = cols;
    WaveformSet::new(time[0], dt, [va, vb, vc], [ia, ib, ic])
}

/// Writes `ws` in the format read by [`load_waveform_csv`].
///
/// Values use the shortest representation that parses back to the identical
/// `f64`, so a write/load cycle is lossless for the channels.
pub fn write_waveform_csv<W: Write>(ws: &WaveformSet, mut out: W) -> Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for k in 0..ws.n() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            ws.time(k),
            ws.voltages[0][k],
            ws.voltages[1][k],
            ws.voltages[2][k],
            ws.currents[0][k],
            ws.currents[1][k],
            ws.currents[2][k]
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Contiguous sub-series with timestamps in `[t_start, t_end]`.
///
/// Bounds reaching past the record are clipped to it, which keeps windowing
/// idempotent when the bounds fall between samples. A range that misses the
/// record entirely is an error.
pub fn window(ws: &WaveformSet, t_start: f64, t_end: f64) -> Result<WaveformSet> {
    if !(t_start < t_end) {
        return Err(Error::Range(format!("empty or reversed window [{t_start}, {t_end}]")));
    }
    let slack = WINDOW_SLACK * ws.dt;
    if t_end < ws.t0 - slack || t_start > ws.t_last() + slack {
        return Err(Error::Range(format!(
            "window [{t_start}, {t_end}] does not overlap record [{}, {}]",
            ws.t0,
            ws.t_last()
        )));
    }
    let first = (((t_start - ws.t0) / ws.dt) - WINDOW_SLACK).ceil().max(0.0) as usize;
    let last = ((((t_end - ws.t0) / ws.dt) + WINDOW_SLACK).floor() as usize).min(ws.n() - 1);
    if last < first || last - first + 1 < 3 {
        return Err(Error::Size(format!(
            "window [{t_start}, {t_end}] holds fewer than 3 samples"
        )));
    }
    let slice = |c: &Vec<f64>| c[first..=last].to_vec();
    WaveformSet::new(
        ws.time(first),
        ws.dt,
        [slice(&ws.voltages[0]), slice(&ws.voltages[1]), slice(&ws.voltages[2])],
        [slice(&ws.currents[0]), slice(&ws.currents[1]), slice(&ws.currents[2])],
    )
}

pub fn derive_line_line(ws: &WaveformSet) -> LineLineVoltages {
    LineLineVoltages {
        vab: ws.channel(Channel::Vab).into_owned(),
        vbc: ws.channel(Channel::Vbc).into_owned(),
        vca: ws.channel(Channel::Vca).into_owned(),
    }
}

/// Adds white Gaussian noise to every channel so that each channel's
/// signal-to-noise power ratio is `snr_db`.
///
/// `f64::INFINITY` disables noise. Channels with zero power are left as is.
///
/// # Panics
///
/// If `snr_db` is NaN or negative infinity.
pub fn add_noise(ws: &WaveformSet, snr_db: f64, seed: u64) -> WaveformSet {
    assert!(!snr_db.is_nan() && snr_db != f64::NEG_INFINITY, "snr_db must be finite or +inf");
    if snr_db == f64::INFINITY {
        return ws.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratio = 10f64.powf(snr_db / 10.0);
    let mut noisy = |signal: &Vec<f64>| -> Vec<f64> {
        let power = signal.iter().map(|x| x * x).sum::<f64>() / signal.len() as f64;
        let sigma = (power / ratio).sqrt();
        if sigma == 0.0 {
            return signal.clone();
        }
        let dist = Normal::new(0.0, sigma).expect("finite positive sigma");
        signal.iter().map(|x| x + dist.sample(&mut rng)).collect()
    };
    let voltages = [noisy(&ws.voltages[0]), noisy(&ws.voltages[1]), noisy(&ws.voltages[2])];
    let currents = [noisy(&ws.currents[0]), noisy(&ws.currents[1]), noisy(&ws.currents[2])];
    WaveformSet { t0: ws.t0, dt: ws.dt, voltages, currents }
}
