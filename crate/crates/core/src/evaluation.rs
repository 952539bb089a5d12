//! Band powers, signal-to-interference ratios and their beamformed minus
//! raw difference.
//!
//! Power spectra are Hann-windowed one-sided periodograms scaled as a
//! density, so integrating over a band around a sine of amplitude `A` gives
//! `A^2 / 2`, and integrating over all bins gives the window-weighted mean
//! power of the segment.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dsp::{periodic_hann, FftPair};
use crate::error::{Error, Result};
use crate::output::atomic_write;

mod experiment;

pub use experiment::{
    run_experiment, write_experiment_outputs, ExperimentKind, ExperimentResult, ExperimentSummary, TrajectoryRow,
};

/// Powers at or below this fraction of the window's total power count as
/// zero, and the window's SIR is recorded as absent.
pub const ABSENT_FLOOR_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SirVariant {
    /// Ratio of the band powers around two tones.
    #[default]
    ToneTone,
    /// `(total - interferer band) / interferer band`.
    #[serde(rename = "broadband_eq13")]
    Broadband,
}

impl SirVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            SirVariant::ToneTone => "tone_tone",
            SirVariant::Broadband => "broadband_eq13",
        }
    }
}

impl fmt::Display for SirVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SirVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tone_tone" => Ok(SirVariant::ToneTone),
            "broadband_eq13" => Ok(SirVariant::Broadband),
            other => Err(format!("unknown SIR variant '{other}'")),
        }
    }
}

/// Analysis window, hop and integration band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SirParams {
    pub window: usize,
    pub hop: usize,
    pub band_hz: f64,
}

impl Default for SirParams {
    fn default() -> Self {
        Self {
            window: 1024,
            hop: 512,
            band_hz: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub variant: SirVariant,
    /// Source the beam should favour; defaults to the detection steer label.
    pub target_label: Option<String>,
    /// Source treated as interference; defaults to the first other source.
    pub interferer_label: Option<String>,
    pub target_freq_hz: f64,
    pub interferer_freq_hz: f64,
    pub band_hz: f64,
    pub window: usize,
    pub hop: usize,
    /// Order of the least-squares trend written next to the ΔSIR series.
    pub trend_order: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        let p = SirParams::default();
        Self {
            variant: SirVariant::ToneTone,
            target_label: None,
            interferer_label: None,
            target_freq_hz: 2000.0,
            interferer_freq_hz: 3000.0,
            band_hz: p.band_hz,
            window: p.window,
            hop: p.hop,
            trend_order: 5,
        }
    }
}

impl EvaluationSettings {
    pub fn params(&self) -> SirParams {
        SirParams {
            window: self.window,
            hop: self.hop,
            band_hz: self.band_hz,
        }
    }
}

/// SIR per analysis window. Windows whose ratio is undefined hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SirSeries {
    /// Centre of each analysis window, seconds.
    pub times: Vec<f64>,
    pub values: Vec<Option<f64>>,
    pub variant: SirVariant,
    pub window: usize,
    pub hop: usize,
    pub band_hz: f64,
}

impl SirSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn absent_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.present().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn std(&self) -> Option<f64> {
        let v: Vec<f64> = self.present().collect();
        let mean = self.mean()?;
        if v.len() < 2 {
            return Some(0.0);
        }
        Some((v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
    }

    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.present().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

fn validate_band(fs: f64, center: f64, bandwidth: f64) -> Result<()> {
    if !(fs > 0.0 && bandwidth > 0.0 && center.is_finite()) {
        return Err(Error::invalid("band needs f_s > 0 and bandwidth > 0"));
    }
    let (lo, hi) = (center - bandwidth / 2.0, center + bandwidth / 2.0);
    if !(lo > 0.0 && hi < fs / 2.0) {
        return Err(Error::invalid(format!(
            "band [{lo}, {hi}] Hz must lie strictly inside (0, {}) Hz",
            fs / 2.0
        )));
    }
    Ok(())
}

/// Hann periodogram of one segment as a one-sided density.
struct Periodogram {
    window: Vec<f64>,
    fft: FftPair,
    scale: f64,
    buf: Vec<rustfft::num_complex::Complex64>,
    tapered: Vec<f64>,
}

impl Periodogram {
    fn new(len: usize, fs: f64) -> Self {
        let window = periodic_hann(len);
        let energy: f64 = window.iter().map(|w| w * w).sum();
        Self {
            fft: FftPair::new(len),
            scale: 1.0 / (fs * energy),
            buf: vec![Default::default(); len],
            tapered: vec![0.0; len],
            window,
        }
    }

    fn psd(&mut self, segment: &[f64]) -> Vec<f64> {
        let n = self.window.len();
        for ((t, x), w) in self.tapered.iter_mut().zip(segment).zip(&self.window) {
            *t = x * w;
        }
        self.fft.forward_real(&self.tapered, &mut self.buf);
        (0..=n / 2)
            .map(|k| {
                let p = self.buf[k].norm_sqr() * self.scale;
                if k == 0 || (n % 2 == 0 && k == n / 2) {
                    p
                } else {
                    2.0 * p
                }
            })
            .collect()
    }
}

/// Integral of a one-sided density over the bins whose centre frequency
/// lies in `[center - bw/2, center + bw/2]`.
fn integrate_band(psd: &[f64], len: usize, fs: f64, center: f64, bandwidth: f64) -> f64 {
    let df = fs / len as f64;
    let (lo, hi) = (center - bandwidth / 2.0, center + bandwidth / 2.0);
    psd.iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * df;
            f >= lo - 1e-9 && f <= hi + 1e-9
        })
        .map(|(_, p)| p * df)
        .sum()
}

fn integrate_all(psd: &[f64], len: usize, fs: f64) -> f64 {
    psd.iter().sum::<f64>() * fs / len as f64
}

fn segment_starts(len: usize, window: usize, hop: usize) -> impl Iterator<Item = usize> {
    let count = if len >= window { (len - window) / hop + 1 } else { 0 };
    (0..count).map(move |i| i * hop)
}

/// Power in `[center ± bandwidth/2]`, averaged over 50%-overlapped Hann
/// segments of `window` samples.
pub fn band_power(signal: &[f64], fs: f64, center: f64, bandwidth: f64, window: usize) -> Result<f64> {
    validate_band(fs, center, bandwidth)?;
    if window < 2 {
        return Err(Error::invalid("analysis window must be >= 2 samples"));
    }
    if signal.len() < window {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than the {window}-sample analysis window",
            signal.len()
        )));
    }
    let mut pg = Periodogram::new(window, fs);
    let hop = (window / 2).max(1);
    let (mut sum, mut count) = (0.0, 0usize);
    for s in segment_starts(signal.len(), window, hop) {
        let psd = pg.psd(&signal[s..s + window]);
        sum += integrate_band(&psd, window, fs, center, bandwidth);
        count += 1;
    }
    Ok(sum / count as f64)
}

fn check_params(signal: &[f64], fs: f64, params: &SirParams) -> Result<()> {
    if params.window < 2 || params.hop == 0 {
        return Err(Error::invalid("SIR window must be >= 2 and hop >= 1"));
    }
    if signal.len() < params.window {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than the {}-sample analysis window",
            signal.len(),
            params.window
        )));
    }
    if !(fs > 0.0) {
        return Err(Error::invalid("sample rate must be > 0"));
    }
    Ok(())
}

fn sir_series<F>(signal: &[f64], fs: f64, params: &SirParams, variant: SirVariant, mut ratio: F) -> SirSeries
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let mut pg = Periodogram::new(params.window, fs);
    let mut times = Vec::new();
    let mut values = Vec::new();
    for s in segment_starts(signal.len(), params.window, params.hop) {
        let psd = pg.psd(&signal[s..s + params.window]);
        times.push((s as f64 + params.window as f64 / 2.0) / fs);
        values.push(ratio(&psd));
    }
    SirSeries {
        times,
        values,
        variant,
        window: params.window,
        hop: params.hop,
        band_hz: params.band_hz,
    }
}

/// `10 log10(P(f_target) / P(f_int))` per window.
pub fn sir_tone_tone(signal: &[f64], fs: f64, f_target: f64, f_int: f64, params: &SirParams) -> Result<SirSeries> {
    check_params(signal, fs, params)?;
    validate_band(fs, f_target, params.band_hz)?;
    validate_band(fs, f_int, params.band_hz)?;
    if (f_target - f_int).abs() < params.band_hz {
        return Err(Error::invalid("target and interferer bands overlap"));
    }
    let w = params.window;
    Ok(sir_series(signal, fs, params, SirVariant::ToneTone, |psd| {
        let total = integrate_all(psd, w, fs);
        let floor = ABSENT_FLOOR_REL * total;
        let pt = integrate_band(psd, w, fs, f_target, params.band_hz);
        let pi = integrate_band(psd, w, fs, f_int, params.band_hz);
        (total > 0.0 && pt > floor && pi > floor).then(|| 10.0 * (pt / pi).log10())
    }))
}

/// `10 log10((P_total - P(f_int)) / P(f_int))` per window.
pub fn sir_broadband(signal: &[f64], fs: f64, f_int: f64, params: &SirParams) -> Result<SirSeries> {
    check_params(signal, fs, params)?;
    validate_band(fs, f_int, params.band_hz)?;
    let w = params.window;
    Ok(sir_series(signal, fs, params, SirVariant::Broadband, |psd| {
        let total = integrate_all(psd, w, fs);
        let floor = ABSENT_FLOOR_REL * total;
        let pi = integrate_band(psd, w, fs, f_int, params.band_hz);
        let rest = total - pi;
        (total > 0.0 && pi > floor && rest > floor).then(|| 10.0 * (rest / pi).log10())
    }))
}

/// Pointwise `bf - nbf`; absent where either input is absent.
pub fn delta_sir(bf: &SirSeries, nbf: &SirSeries) -> Result<SirSeries> {
    if bf.variant != nbf.variant {
        return Err(Error::invalid(format!(
            "cannot subtract a {} series from a {} series",
            nbf.variant, bf.variant
        )));
    }
    if bf.len() != nbf.len() || bf.times.iter().zip(&nbf.times).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(Error::invalid("SIR series are not aligned window for window"));
    }
    Ok(SirSeries {
        times: bf.times.clone(),
        values: bf
            .values
            .iter()
            .zip(&nbf.values)
            .map(|(a, b)| Some((*a)? - (*b)?))
            .collect(),
        ..bf.clone()
    })
}

/// Least-squares polynomial of the given order through the present values,
/// evaluated at every window time. `None` if there are too few points.
pub fn poly_trend(series: &SirSeries, order: usize) -> Option<Vec<f64>> {
    let pts: Vec<(f64, f64)> = series
        .times
        .iter()
        .zip(&series.values)
        .filter_map(|(t, v)| v.map(|v| (*t, v)))
        .collect();
    if pts.len() <= order {
        return None;
    }
    // Map time onto [-1, 1] to keep the Vandermonde system well conditioned.
    let t0 = series.times.first().copied()?;
    let t1 = series.times.last().copied()?;
    let span = (t1 - t0).max(f64::EPSILON);
    let x = |t: f64| 2.0 * (t - t0) / span - 1.0;
    let a = DMatrix::from_fn(pts.len(), order + 1, |i, j| x(pts[i].0).powi(j as i32));
    let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
    let coef = a.svd(true, true).solve(&b, 1e-12).ok()?;
    Some(
        series
            .times
            .iter()
            .map(|t| (0..=order).map(|j| coef[j] * x(*t).powi(j as i32)).sum())
            .collect(),
    )
}

/// `t_s, sir_db, variant[, trend_db][, separation_deg]`; absent values are
/// written as empty fields.
pub fn write_sir_csv(path: &Path, series: &SirSeries, trend: Option<&[f64]>, separation_deg: Option<&[f64]>) -> Result<()> {
    atomic_write(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t_s", "sir_db", "variant"];
        if trend.is_some() {
            header.push("trend_db");
        }
        if separation_deg.is_some() {
            header.push("separation_deg");
        }
        wr.write_record(&header)?;
        for (i, (t, v)) in series.times.iter().zip(&series.values).enumerate() {
            let mut row = vec![
                t.to_string(),
                v.map(|v| v.to_string()).unwrap_or_default(),
                series.variant.as_str().to_string(),
            ];
            if let Some(tr) = trend {
                row.push(tr[i].to_string());
            }
            if let Some(sep) = separation_deg {
                row.push(sep[i].to_string());
            }
            wr.write_record(&row)?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    })
}
