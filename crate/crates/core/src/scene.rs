//! Plane-wave multichannel scene synthesis.
//!
//! Microphone `m` receives every source advanced by `(r_m . u) / c`, where
//! `u` is the unit vector from the array toward the source. Steering with
//! the delays of the true direction therefore realigns all channels.
//!
//! Static sources are delayed exactly: tones analytically, sampled waveforms
//! by a phase rotation of the whole-signal spectrum (the waveform is treated
//! as periodic over the scene length). Moving sources are rendered in
//! Hann-crossfaded blocks with one direction per block.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, MultichannelSignal};
use crate::dsp::{advance_spectrum, periodic_hann, remove_nyquist, sinc_interpolate_periodic, FftPair};
use crate::error::{Error, Result};
use crate::geometry::{MicArray, PropagationConfig, Vec3};
use crate::vision::{array_relative, MountingOffset};

const SINC_HALF_WIDTH: usize = 32;

/// Source signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Waveform {
    Tone {
        freq_hz: f64,
        amplitude: f64,
        #[serde(default)]
        phase_rad: f64,
    },
    /// Gaussian white noise; `amplitude` is the standard deviation.
    WhiteNoise {
        amplitude: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Mono WAV (first channel used) looped to the scene length.
    SampleFile { path: PathBuf, gain: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub position: [f64; 3],
}

impl Waypoint {
    pub fn new(t: f64, position: Vec3) -> Self {
        Self {
            t,
            position: [position.x, position.y, position.z],
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position)
    }
}

/// Piecewise-linear path through world-frame waypoints, held constant before
/// the first and after the last waypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(pub Vec<Waypoint>);

impl Trajectory {
    pub fn fixed(position: Vec3) -> Self {
        Self(vec![Waypoint::new(0.0, position)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::invalid("trajectory has no waypoints"));
        }
        for w in &self.0 {
            if !w.t.is_finite() || !w.position.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("trajectory waypoint is not finite"));
            }
        }
        if self.0.windows(2).any(|p| p[1].t <= p[0].t) {
            return Err(Error::invalid("trajectory times must be strictly increasing"));
        }
        Ok(())
    }

    pub fn position_at(&self, t: f64) -> Vec3 {
        let pts = &self.0;
        if t <= pts[0].t {
            return pts[0].position();
        }
        let last = pts[pts.len() - 1];
        if t >= last.t {
            return last.position();
        }
        let i = pts.partition_point(|w| w.t <= t);
        let (a, b) = (pts[i - 1], pts[i]);
        let s = (t - a.t) / (b.t - a.t);
        a.position() + (b.position() - a.position()) * s
    }

    pub fn is_static(&self) -> bool {
        self.0.windows(2).all(|p| p[0].position == p[1].position)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub label: String,
    pub waveform: Waveform,
    pub trajectory: Trajectory,
}

impl SourceSpec {
    pub fn tone(label: &str, freq_hz: f64, amplitude: f64, trajectory: Trajectory) -> Self {
        Self {
            label: label.into(),
            waveform: Waveform::Tone {
                freq_hz,
                amplitude,
                phase_rad: 0.0,
            },
            trajectory,
        }
    }

    pub fn noise(label: &str, amplitude: f64, seed: u64, trajectory: Trajectory) -> Self {
        Self {
            label: label.into(),
            waveform: Waveform::WhiteNoise {
                amplitude,
                seed: Some(seed),
            },
            trajectory,
        }
    }

    /// Unit vector from the array toward the source at time `t`.
    pub fn direction_at(&self, t: f64, offset: MountingOffset) -> Vec3 {
        array_relative(&self.trajectory.position_at(t), offset).normalize()
    }
}

/// Spatially uncorrelated sensor noise at a given SNR relative to the mean
/// per-channel power of the source mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffuseNoise {
    pub snr_db: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOptions {
    pub mounting_offset: MountingOffset,
    /// Crossfade hop for moving sources, samples.
    pub block_hop: usize,
    /// Seed used for sources that do not carry their own.
    pub seed: u64,
    pub diffuse_noise: Option<DiffuseNoise>,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            mounting_offset: MountingOffset(0.0),
            block_hop: 128,
            seed: 0,
            diffuse_noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedScene {
    pub signal: MultichannelSignal,
    /// Samples whose magnitude exceeds 1.0. They are left unclipped.
    pub clipped_samples: usize,
    /// Seed actually used by each noise-driven component, by label.
    pub seeds: Vec<(String, u64)>,
}

enum Generator {
    Tone { freq: f64, amp: f64, phase: f64 },
    Sequence { samples: Vec<f64> },
}

impl Generator {
    fn value_at(&self, t: f64, fs: f64) -> f64 {
        match self {
            Generator::Tone { freq, amp, phase } => amp * (2.0 * PI * freq * t + phase).sin(),
            Generator::Sequence { samples } => sinc_interpolate_periodic(samples, t * fs, SINC_HALF_WIDTH),
        }
    }
}

fn derive_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn validate_source(src: &SourceSpec, prop: &PropagationConfig, offset: MountingOffset) -> Result<()> {
    src.trajectory.validate()?;
    for w in &src.trajectory.0 {
        if array_relative(&w.position(), offset).z <= 0.0 {
            return Err(Error::invalid(format!(
                "source '{}' has a waypoint behind the array plane",
                src.label
            )));
        }
    }
    match &src.waveform {
        Waveform::Tone { freq_hz, amplitude, phase_rad } => {
            if !(*freq_hz >= 0.0 && *freq_hz < prop.nyquist()) {
                return Err(Error::invalid(format!(
                    "source '{}': tone {freq_hz} Hz must be below Nyquist ({} Hz)",
                    src.label,
                    prop.nyquist()
                )));
            }
            if !amplitude.is_finite() || !phase_rad.is_finite() {
                return Err(Error::invalid(format!("source '{}': non-finite tone parameters", src.label)));
            }
        }
        Waveform::WhiteNoise { amplitude, .. } => {
            if !(amplitude.is_finite() && *amplitude >= 0.0) {
                return Err(Error::invalid(format!("source '{}': noise amplitude must be >= 0", src.label)));
            }
        }
        Waveform::SampleFile { gain, .. } => {
            if !gain.is_finite() {
                return Err(Error::invalid(format!("source '{}': non-finite gain", src.label)));
            }
        }
    }
    Ok(())
}

fn make_generator(
    src: &SourceSpec,
    index: usize,
    len: usize,
    prop: &PropagationConfig,
    opts: &SynthesisOptions,
    seeds: &mut Vec<(String, u64)>,
) -> Result<Generator> {
    Ok(match &src.waveform {
        Waveform::Tone { freq_hz, amplitude, phase_rad } => Generator::Tone {
            freq: *freq_hz,
            amp: *amplitude,
            phase: *phase_rad,
        },
        Waveform::WhiteNoise { amplitude, seed } => {
            let seed = seed.unwrap_or_else(|| derive_seed(opts.seed, index));
            seeds.push((src.label.clone(), seed));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, *amplitude).map_err(|e| Error::invalid(e.to_string()))?;
            let mut samples: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
            remove_nyquist(&mut samples);
            Generator::Sequence { samples }
        }
        Waveform::SampleFile { path, gain } => {
            let file = read_wav(path)?;
            if file.sample_rate() != prop.sample_rate() {
                return Err(Error::invalid(format!(
                    "sample file {} is at {} Hz, scene runs at {} Hz",
                    path.display(),
                    file.sample_rate(),
                    prop.sample_rate()
                )));
            }
            if file.is_empty() {
                return Err(Error::invalid(format!("sample file {} is empty", path.display())));
            }
            let data = file.channel(0);
            let samples = (0..len).map(|n| gain * data[n % data.len()]).collect();
            Generator::Sequence { samples }
        }
    })
}

fn render_static(
    gen: &Generator,
    array: &MicArray,
    u: &Vec3,
    prop: &PropagationConfig,
    len: usize,
    out: &mut [Vec<f64>],
) {
    let fs = prop.sample_rate();
    let advances: Vec<f64> = array
        .positions()
        .iter()
        .map(|r| r.dot(u) / prop.speed_of_sound())
        .collect();
    match gen {
        Generator::Tone { .. } => {
            for (ch, adv) in out.iter_mut().zip(&advances) {
                for (n, x) in ch.iter_mut().enumerate() {
                    *x += gen.value_at(n as f64 / fs + adv, fs);
                }
            }
        }
        Generator::Sequence { samples } => {
            let fft = FftPair::new(len);
            let spectrum = fft.spectrum(samples);
            for (ch, adv) in out.iter_mut().zip(&advances) {
                let shifted = if *adv == 0.0 {
                    samples.clone()
                } else {
                    advance_spectrum(&spectrum, adv * fs, &fft)
                };
                for (x, v) in ch.iter_mut().zip(shifted) {
                    *x += v;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn render_moving(
    gen: &Generator,
    src: &SourceSpec,
    array: &MicArray,
    prop: &PropagationConfig,
    opts: &SynthesisOptions,
    len: usize,
    out: &mut [Vec<f64>],
) {
    let fs = prop.sample_rate();
    let hop = opts.block_hop;
    let window = periodic_hann(2 * hop);
    // Block b spans samples [(b-1) hop, (b+1) hop) and is centred on b*hop.
    let blocks = len.div_ceil(hop) + 1;
    for b in 0..blocks {
        let center = (b * hop) as f64 / fs;
        let u = src.direction_at(center, opts.mounting_offset);
        let start = b as i64 * hop as i64 - hop as i64;
        for (ch, r) in out.iter_mut().zip(array.positions()) {
            let adv = r.dot(&u) / prop.speed_of_sound();
            for (j, w) in window.iter().enumerate() {
                let n = start + j as i64;
                if n < 0 || n as usize >= len {
                    continue;
                }
                ch[n as usize] += w * gen.value_at(n as f64 / fs + adv, fs);
            }
        }
    }
}

/// Renders `duration` seconds of the array's view of `sources`.
pub fn synthesize_scene(
    array: &MicArray,
    sources: &[SourceSpec],
    prop: &PropagationConfig,
    duration: f64,
    opts: &SynthesisOptions,
) -> Result<SynthesizedScene> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::invalid(format!("duration must be > 0, got {duration}")));
    }
    if opts.block_hop == 0 {
        return Err(Error::invalid("block hop must be > 0"));
    }
    for src in sources {
        validate_source(src, prop, opts.mounting_offset)?;
    }
    let len = (duration * prop.sample_rate()).round() as usize;
    let mut channels = vec![vec![0.0; len]; array.len()];
    let mut seeds = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let gen = make_generator(src, i, len, prop, opts, &mut seeds)?;
        if src.trajectory.is_static() {
            let u = src.direction_at(0.0, opts.mounting_offset);
            render_static(&gen, array, &u, prop, len, &mut channels);
        } else {
            render_moving(&gen, src, array, prop, opts, len, &mut channels);
        }
    }
    if let Some(diffuse) = opts.diffuse_noise {
        let seed = diffuse.seed.unwrap_or_else(|| derive_seed(opts.seed, usize::MAX - 1));
        seeds.push(("diffuse".into(), seed));
        add_diffuse_noise(&mut channels, diffuse.snr_db, seed)?;
    }
    let clipped_samples = channels.iter().flatten().filter(|v| v.abs() > 1.0).count();
    if clipped_samples > 0 {
        log::warn!("scene exceeds full scale in {clipped_samples} samples");
    }
    Ok(SynthesizedScene {
        signal: MultichannelSignal::new(prop.sample_rate(), channels)?,
        clipped_samples,
        seeds,
    })
}

fn add_diffuse_noise(channels: &mut [Vec<f64>], snr_db: f64, seed: u64) -> Result<()> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("diffuse noise SNR must be finite"));
    }
    let count: usize = channels.iter().map(Vec::len).sum();
    if count == 0 {
        return Ok(());
    }
    let power = channels.iter().flatten().map(|v| v * v).sum::<f64>() / count as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ch in channels.iter_mut() {
        for v in ch.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{fractional_advance, rms};
    use crate::geometry::{steering_delays, DoaAngles};
    use std::f64::consts::FRAC_PI_4;

    fn default_setup() -> (MicArray, PropagationConfig) {
        (MicArray::two_ring(), PropagationConfig::default())
    }

    #[test]
    fn broadside_tone_is_identical_on_all_mics() {
        let (arr, prop) = default_setup();
        let src = SourceSpec::tone("t", 2000.0, 0.5, Trajectory::fixed(Vec3::new(0.0, 0.0, 2.0)));
        let s = synthesize_scene(&arr, &[src], &prop, 0.25, &SynthesisOptions::default()).unwrap();
        for m in 1..arr.len() {
            assert_eq!(s.signal.channel(m), s.signal.channel(0));
        }
        assert_eq!(s.clipped_samples, 0);
    }

    #[test]
    fn no_sources_gives_silence() {
        let (arr, prop) = default_setup();
        let s = synthesize_scene(&arr, &[], &prop, 0.5, &SynthesisOptions::default()).unwrap();
        assert_eq!(s.signal.len(), 4000);
        assert_eq!(s.signal.num_channels(), 13);
        assert!(s.signal.channels().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_correlation_lag_matches_steering_delay() {
        let (arr, prop) = default_setup();
        // direction (theta=0, phi=3pi/4) is the world point (1, 0, 1)
        let src = SourceSpec::tone("t", 2000.0, 0.5, Trajectory::fixed(Vec3::new(1.0, 0.0, 1.0)));
        let s = synthesize_scene(&arr, &[src], &prop, 1.0, &SynthesisOptions::default()).unwrap();
        let mic = s.signal.channel(5); // (0.045, 0, 0)
        let center = s.signal.channel(0);
        // r(L) = sum_n mic[n] center[n + L]: peaks where the center lags the mic.
        let corr = |lag: i64| -> f64 {
            (16..mic.len() - 16)
                .map(|n| mic[n] * center[(n as i64 + lag) as usize])
                .sum()
        };
        let lags: Vec<f64> = (-2..=2).map(corr).collect();
        let (imax, _) = lags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let (y0, y1, y2) = (lags[imax - 1], lags[imax], lags[imax + 1]);
        let peak = imax as f64 - 2.0 + 0.5 * (y0 - y2) / (y0 - 2.0 * y1 + y2);
        let tau = steering_delays(&arr, &DoaAngles::new(0.0, 3.0 * FRAC_PI_4), &prop).unwrap();
        let want = -tau[5] * prop.sample_rate();
        assert!((want - 0.742).abs() < 1e-3);
        assert!((peak - want).abs() < 0.1, "peak {peak} vs {want}");
    }

    #[test]
    fn noise_alignment_is_exact() {
        let (arr, prop) = default_setup();
        let src = SourceSpec::noise("n", 0.2, 11, Trajectory::fixed(Vec3::new(-0.8, 0.3, 1.5)));
        let s = synthesize_scene(&arr, &[src.clone()], &prop, 0.5, &SynthesisOptions::default()).unwrap();
        let doa = DoaAngles::from_direction(&src.direction_at(0.0, MountingOffset(0.0))).unwrap();
        let tau = steering_delays(&arr, &doa, &prop).unwrap();
        let reference = s.signal.channel(0);
        for m in 1..arr.len() {
            let aligned = fractional_advance(s.signal.channel(m), tau[m] * prop.sample_rate());
            let err: Vec<f64> = aligned.iter().zip(reference).map(|(a, b)| a - b).collect();
            let rel_db = 20.0 * (rms(&err) / rms(reference)).log10();
            assert!(rel_db < -100.0, "mic {m}: {rel_db} dB");
        }
    }

    #[test]
    fn superposition() {
        let (arr, prop) = default_setup();
        let a = SourceSpec::tone("a", 2000.0, 0.3, Trajectory::fixed(Vec3::new(0.3, 0.0, 2.0)));
        let b = SourceSpec {
            label: "b".into(),
            waveform: Waveform::WhiteNoise { amplitude: 0.1, seed: Some(5) },
            trajectory: Trajectory(vec![
                Waypoint::new(0.0, Vec3::new(-1.0, 0.0, 2.0)),
                Waypoint::new(0.3, Vec3::new(1.0, 0.2, 2.0)),
            ]),
        };
        let opts = SynthesisOptions::default();
        let both = synthesize_scene(&arr, &[a.clone(), b.clone()], &prop, 0.3, &opts).unwrap();
        let mut sum = synthesize_scene(&arr, &[a], &prop, 0.3, &opts).unwrap().signal;
        sum.add(&synthesize_scene(&arr, &[b], &prop, 0.3, &opts).unwrap().signal).unwrap();
        let worst = both
            .signal
            .channels()
            .iter()
            .flatten()
            .zip(sum.channels().iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn moving_tone_has_no_clicks() {
        let (arr, prop) = default_setup();
        let amp = 0.5;
        let freq = 2000.0;
        let src = SourceSpec::tone(
            "m",
            freq,
            amp,
            Trajectory(vec![
                Waypoint::new(0.0, Vec3::new(-1.5, 0.0, 1.0)),
                Waypoint::new(1.0, Vec3::new(1.5, 0.3, 1.0)),
            ]),
        );
        let s = synthesize_scene(&arr, &[src], &prop, 1.0, &SynthesisOptions::default()).unwrap();
        // largest per-sample change of the source itself: A * 2 pi f / f_s
        let max_slew = amp * 2.0 * PI * freq / prop.sample_rate();
        for ch in s.signal.channels() {
            let worst = ch.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            assert!(worst <= max_slew, "{worst} > {max_slew}");
        }
    }

    #[test]
    fn noise_is_reproducible_and_seed_recorded() {
        let (arr, prop) = default_setup();
        let src = SourceSpec {
            label: "n".into(),
            waveform: Waveform::WhiteNoise { amplitude: 0.1, seed: None },
            trajectory: Trajectory::fixed(Vec3::new(0.0, 0.0, 1.0)),
        };
        let opts = SynthesisOptions { seed: 42, ..Default::default() };
        let a = synthesize_scene(&arr, &[src.clone()], &prop, 0.1, &opts).unwrap();
        let b = synthesize_scene(&arr, &[src], &prop, 0.1, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seeds.len(), 1);
    }

    #[test]
    fn clipping_is_reported_not_fatal() {
        let (arr, prop) = default_setup();
        let src = SourceSpec::tone("loud", 500.0, 1.5, Trajectory::fixed(Vec3::new(0.0, 0.0, 1.0)));
        let s = synthesize_scene(&arr, &[src], &prop, 0.1, &SynthesisOptions::default()).unwrap();
        assert!(s.clipped_samples > 0);
        assert!(s.signal.peak() > 1.0);
    }

    #[test]
    fn rejects_invalid_sources() {
        let (arr, prop) = default_setup();
        let opts = SynthesisOptions::default();
        let nyq = SourceSpec::tone("x", 4000.0, 0.1, Trajectory::fixed(Vec3::new(0.0, 0.0, 1.0)));
        assert!(synthesize_scene(&arr, &[nyq], &prop, 0.1, &opts).is_err());
        let behind = SourceSpec::tone("x", 400.0, 0.1, Trajectory::fixed(Vec3::new(0.0, 0.0, -1.0)));
        assert!(synthesize_scene(&arr, &[behind], &prop, 0.1, &opts).is_err());
        let unordered = SourceSpec::tone(
            "x",
            400.0,
            0.1,
            Trajectory(vec![
                Waypoint::new(1.0, Vec3::new(0.0, 0.0, 1.0)),
                Waypoint::new(1.0, Vec3::new(0.1, 0.0, 1.0)),
            ]),
        );
        assert!(synthesize_scene(&arr, &[unordered], &prop, 0.1, &opts).is_err());
        assert!(synthesize_scene(&arr, &[], &prop, 0.0, &opts).is_err());
    }

    #[test]
    fn diffuse_noise_hits_requested_snr() {
        let (arr, prop) = default_setup();
        let src = SourceSpec::tone("t", 2000.0, 0.5, Trajectory::fixed(Vec3::new(0.0, 0.0, 1.0)));
        let clean = synthesize_scene(&arr, &[src.clone()], &prop, 2.0, &SynthesisOptions::default()).unwrap();
        let opts = SynthesisOptions {
            diffuse_noise: Some(DiffuseNoise { snr_db: 20.0, seed: Some(1) }),
            ..Default::default()
        };
        let noisy = synthesize_scene(&arr, &[src], &prop, 2.0, &opts).unwrap();
        let sig_p: f64 = clean.signal.channels().iter().flatten().map(|v| v * v).sum();
        let noise_p: f64 = noisy
            .signal
            .channels()
            .iter()
            .flatten()
            .zip(clean.signal.channels().iter().flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let snr = 10.0 * (sig_p / noise_p).log10();
        assert!((snr - 20.0).abs() < 0.1, "{snr}");
    }

    #[test]
    fn trajectory_interpolation() {
        let tr = Trajectory(vec![
            Waypoint::new(1.0, Vec3::new(0.0, 0.0, 1.0)),
            Waypoint::new(3.0, Vec3::new(2.0, 0.0, 1.0)),
        ]);
        assert_eq!(tr.position_at(0.0), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(tr.position_at(2.0), Vec3::new(1.0, 0.0, 1.0));
        assert_eq!(tr.position_at(9.0), Vec3::new(2.0, 0.0, 1.0));
        assert!(!tr.is_static());
    }
}
