//! Frequency-domain delay-and-sum beamforming with overlap-add
//! reconstruction.
//!
//! Each `N`-sample chunk is transformed per channel, every non-negative
//! frequency bin `k` is rotated by `exp(j 2 pi f_k tau_m)` with
//! `f_k = k f_s / N`, the channels are averaged and the result is transformed
//! back. The negative-frequency half is the conjugate mirror of the positive
//! half so the output is real; DC and Nyquist keep the real part of their
//! rotated value. Frames are tapered by a periodic Hann window and
//! overlap-added at hop `H = N/2`, which sums to unity.
//!
//! Streams are framed so that chunk `r` covers input samples
//! `[(r-1)H, (r+1)H)` (zeros before the start and after the end). The block
//! emitted for chunk `r` is complete for input samples `[(r-1)H, rH)`, so the
//! output is the input delayed by `H` samples and its first `H` samples are
//! the zero warm-up.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rustfft::num_complex::Complex64;

use crate::audio::MultichannelSignal;
use crate::dsp::{periodic_hann, FftPair};
use crate::error::{Error, Result};
use crate::geometry::{steering_delays, DoaAngles, MicArray, PropagationConfig};

pub const DEFAULT_FRAME_LENGTH: usize = 256;

/// Frame length `N` and hop `H = N/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpec {
    frame_length: usize,
}

impl FrameSpec {
    pub fn new(frame_length: usize) -> Result<Self> {
        if frame_length < 2 || frame_length % 2 != 0 {
            return Err(Error::invalid(format!(
                "frame length must be even and >= 2, got {frame_length}"
            )));
        }
        Ok(Self { frame_length })
    }

    /// Accepts an explicit hop, which must equal `N/2`.
    pub fn with_hop(frame_length: usize, hop: usize) -> Result<Self> {
        let spec = Self::new(frame_length)?;
        if hop != spec.hop() {
            return Err(Error::invalid(format!(
                "hop must be frame_length/2 = {}, got {hop}",
                spec.hop()
            )));
        }
        Ok(spec)
    }

    pub fn frame_length(&self) -> usize {
        self.frame_length
    }

    pub fn hop(&self) -> usize {
        self.frame_length / 2
    }

    pub fn synthesis_window(&self) -> Vec<f64> {
        periodic_hann(self.frame_length)
    }

    /// Chunks needed to emit `len` output samples.
    pub fn chunk_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop())
    }
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            frame_length: DEFAULT_FRAME_LENGTH,
        }
    }
}

/// One `M x N` block of a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioChunk {
    pub samples: Vec<Vec<f64>>,
    /// Capture time of the first sample, seconds on the shared clock.
    pub timestamp: f64,
    pub chunk_index: u64,
}

impl AudioChunk {
    pub fn num_channels(&self) -> usize {
        self.samples.len()
    }

    /// Timestamp of the middle of the chunk, `timestamp + N / (2 f_s)`.
    pub fn midpoint(&self, spec: &FrameSpec, sample_rate: f64) -> f64 {
        self.timestamp + spec.frame_length() as f64 / (2.0 * sample_rate)
    }
}

/// Cuts a signal into 50%-overlapped chunks, chunk `r` covering
/// `[(r-1)H, (r+1)H)`.
#[derive(Debug, Clone)]
pub struct ChunkFramer<'a> {
    signal: &'a MultichannelSignal,
    spec: FrameSpec,
}

impl<'a> ChunkFramer<'a> {
    pub fn new(signal: &'a MultichannelSignal, spec: FrameSpec) -> Self {
        Self { signal, spec }
    }

    pub fn len(&self) -> usize {
        self.spec.chunk_count(self.signal.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestamp(&self, index: u64) -> f64 {
        chunk_timestamp(self.signal.start_time(), index, &self.spec, self.signal.sample_rate())
    }

    pub fn chunk(&self, index: u64) -> AudioChunk {
        let hop = self.spec.hop() as i64;
        let n = self.spec.frame_length();
        let start = (index as i64 - 1) * hop;
        let len = self.signal.len() as i64;
        let samples = self
            .signal
            .channels()
            .iter()
            .map(|ch| {
                (0..n as i64)
                    .map(|j| {
                        let i = start + j;
                        if i < 0 || i >= len {
                            0.0
                        } else {
                            ch[i as usize]
                        }
                    })
                    .collect()
            })
            .collect();
        AudioChunk {
            samples,
            timestamp: self.timestamp(index),
            chunk_index: index,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = AudioChunk> + '_ {
        (0..self.len() as u64).map(move |r| self.chunk(r))
    }
}

/// Capture timestamp of chunk `index` of a stream starting at `start_time`.
pub fn chunk_timestamp(start_time: f64, index: u64, spec: &FrameSpec, sample_rate: f64) -> f64 {
    start_time + (index as f64 - 1.0) * spec.hop() as f64 / sample_rate
}

/// Wall time spent in the two halves of [`BeamformerState::process_chunk`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChunkTiming {
    pub beamform: Duration,
    pub overlap_add: Duration,
}

/// Streaming beamformer. Owned by a single thread; steering changes apply
/// from the next chunk on.
#[derive(Debug, Clone)]
pub struct BeamformerState {
    spec: FrameSpec,
    sample_rate: f64,
    channels: usize,
    delays: Vec<f64>,
    // Per-channel phase rotation for bins 0..=N/2.
    phasors: Vec<Vec<Complex64>>,
    tail: Vec<f64>,
    frames_processed: u64,
    window: Vec<f64>,
    fft: FftPair,
    scratch: Vec<Complex64>,
    acc: Vec<Complex64>,
    frame: Vec<f64>,
}

impl BeamformerState {
    pub fn new(spec: FrameSpec, channels: usize, sample_rate: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("beamformer needs at least one channel"));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::invalid("sample rate must be > 0"));
        }
        let n = spec.frame_length();
        let mut state = Self {
            spec,
            sample_rate,
            channels,
            delays: vec![0.0; channels],
            phasors: Vec::new(),
            tail: vec![0.0; n - spec.hop()],
            frames_processed: 0,
            window: spec.synthesis_window(),
            fft: FftPair::new(n),
            scratch: vec![Complex64::default(); n],
            acc: vec![Complex64::default(); n],
            frame: vec![0.0; n],
        };
        state.update_phasors();
        Ok(state)
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    pub fn frames_processed(&self) -> u64 {
        self.frames_processed
    }

    /// Steers toward `doa`. On error the previous delays stay in effect.
    pub fn steer(&mut self, doa: &DoaAngles, array: &MicArray, prop: &PropagationConfig) -> Result<()> {
        if array.len() != self.channels {
            return Err(Error::invalid(format!(
                "array has {} microphones, beamformer has {} channels",
                array.len(),
                self.channels
            )));
        }
        let delays = steering_delays(array, doa, prop)?;
        self.set_delays(delays)
    }

    pub fn steer_broadside(&mut self) {
        self.delays.iter_mut().for_each(|d| *d = 0.0);
        self.update_phasors();
    }

    /// Installs arbitrary per-channel delays, seconds.
    pub fn set_delays(&mut self, delays: Vec<f64>) -> Result<()> {
        if delays.len() != self.channels {
            return Err(Error::invalid(format!(
                "{} delays for {} channels",
                delays.len(),
                self.channels
            )));
        }
        if delays.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("non-finite steering delay"));
        }
        if delays != self.delays {
            self.delays = delays;
            self.update_phasors();
        }
        Ok(())
    }

    fn update_phasors(&mut self) {
        let n = self.spec.frame_length();
        let bins = n / 2 + 1;
        self.phasors = self
            .delays
            .iter()
            .map(|tau| {
                (0..bins)
                    .map(|k| {
                        let f_k = k as f64 * self.sample_rate / n as f64;
                        Complex64::from_polar(1.0, 2.0 * PI * f_k * tau)
                    })
                    .collect()
            })
            .collect();
    }

    fn validate(&self, chunk: &AudioChunk) -> Result<()> {
        if chunk.num_channels() != self.channels {
            return Err(Error::invalid(format!(
                "chunk has {} channels, beamformer expects {}",
                chunk.num_channels(),
                self.channels
            )));
        }
        let n = self.spec.frame_length();
        for (m, ch) in chunk.samples.iter().enumerate() {
            if ch.len() != n {
                return Err(Error::invalid(format!(
                    "channel {m} has {} samples, frame length is {n}",
                    ch.len()
                )));
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("channel {m} has non-finite samples")));
            }
        }
        Ok(())
    }

    /// Beamforms one chunk and returns the `H` completed output samples.
    pub fn process_chunk(&mut self, chunk: &AudioChunk) -> Result<Vec<f64>> {
        self.process_chunk_timed(chunk).map(|(out, _)| out)
    }

    pub fn process_chunk_timed(&mut self, chunk: &AudioChunk) -> Result<(Vec<f64>, ChunkTiming)> {
        self.validate(chunk)?;
        let t0 = Instant::now();
        self.beamform_frame(chunk);
        let t1 = Instant::now();
        let out = self.overlap_add();
        let t2 = Instant::now();
        self.frames_processed += 1;
        Ok((
            out,
            ChunkTiming {
                beamform: t1 - t0,
                overlap_add: t2 - t1,
            },
        ))
    }

    fn beamform_frame(&mut self, chunk: &AudioChunk) {
        let n = self.spec.frame_length();
        let half = n / 2;
        self.acc.iter_mut().for_each(|c| *c = Complex64::default());
        for (x, phasors) in chunk.samples.iter().zip(&self.phasors) {
            self.fft.forward_real(x, &mut self.scratch);
            for k in 0..half {
                self.acc[k] += self.scratch[k] * phasors[k];
            }
            let nyq = self.scratch[half] * phasors[half];
            self.acc[half] += Complex64::new(nyq.re, 0.0);
        }
        let inv_m = 1.0 / self.channels as f64;
        self.acc[0] = Complex64::new(self.acc[0].re * inv_m, 0.0);
        self.acc[half] *= inv_m;
        for k in 1..half {
            let v = self.acc[k] * inv_m;
            self.acc[k] = v;
            self.acc[n - k] = v.conj();
        }
        self.fft.inverse(&mut self.acc);
        let scale = 1.0 / n as f64;
        for ((f, c), w) in self.frame.iter_mut().zip(&self.acc).zip(&self.window) {
            *f = c.re * scale * w;
        }
    }

    fn overlap_add(&mut self) -> Vec<f64> {
        let hop = self.spec.hop();
        let out: Vec<f64> = self.tail.iter().zip(&self.frame[..hop]).map(|(t, f)| t + f).collect();
        self.tail.copy_from_slice(&self.frame[hop..]);
        out
    }
}

/// Index of the entry with the greatest time `<= t`; among equal times, the
/// last one. `entries` must be sorted by time.
pub fn latest_at_or_before<T>(entries: &[(f64, T)], t: f64) -> Option<usize> {
    entries.partition_point(|(ts, _)| *ts <= t).checked_sub(1)
}

/// Batch driver: beamforms a whole recording, steering every chunk with the
/// latest schedule entry at or before the chunk midpoint (broadside before
/// the first entry). Returns a mono signal of the input length, delayed by
/// `H` samples.
pub fn process_offline(
    signal: &MultichannelSignal,
    schedule: &[(f64, DoaAngles)],
    array: &MicArray,
    prop: &PropagationConfig,
    spec: FrameSpec,
) -> Result<MultichannelSignal> {
    if signal.is_empty() {
        return Err(Error::invalid("cannot beamform an empty signal"));
    }
    if signal.num_channels() != array.len() {
        return Err(Error::invalid(format!(
            "signal has {} channels, array has {} microphones",
            signal.num_channels(),
            array.len()
        )));
    }
    if schedule.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::invalid("steering schedule times must be non-decreasing"));
    }
    let fs = signal.sample_rate();
    let mut state = BeamformerState::new(spec, array.len(), fs)?;
    let framer = ChunkFramer::new(signal, spec);
    let mut out = Vec::with_capacity(framer.len() * spec.hop());
    for chunk in framer.iter() {
        let mid = chunk.midpoint(&spec, fs);
        match latest_at_or_before(schedule, mid) {
            Some(i) => state.steer(&schedule[i].1, array, prop)?,
            None => state.steer_broadside(),
        }
        out.extend(state.process_chunk(&chunk)?);
    }
    out.truncate(signal.len());
    Ok(MultichannelSignal::mono(fs, out)?.with_start_time(signal.start_time()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::rms;
    use crate::geometry::Vec3;
    use crate::scene::{synthesize_scene, SourceSpec, SynthesisOptions, Trajectory};
    use std::f64::consts::FRAC_PI_4;

    fn sine(len: usize, freq: f64, fs: f64) -> Vec<f64> {
        (0..len).map(|n| (2.0 * PI * freq * n as f64 / fs).sin()).collect()
    }

    #[test]
    fn frame_spec_rules() {
        assert!(FrameSpec::new(255).is_err());
        assert!(FrameSpec::with_hop(256, 64).is_err());
        let s = FrameSpec::with_hop(256, 128).unwrap();
        assert_eq!(s.hop(), 128);
        assert_eq!(s.chunk_count(1000), 8);
    }

    #[test]
    fn single_channel_pass_through() {
        let fs = 8000.0;
        let x: Vec<f64> = (0..8000).map(|n| ((n * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
        let sig = MultichannelSignal::mono(fs, x.clone()).unwrap();
        let arr = MicArray::concentric(&[0.0], &[1]).unwrap();
        let y = process_offline(&sig, &[], &arr, &PropagationConfig::default(), FrameSpec::default()).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(y.channel(0)[..128].iter().all(|v| v.abs() < 1e-12));
        let err: Vec<f64> = y.channel(0)[128..].iter().zip(&x).map(|(a, b)| a - b).collect();
        assert!(rms(&err) / rms(&x) < 1e-10);
    }

    #[test]
    fn zero_in_zero_out() {
        let mut st = BeamformerState::new(FrameSpec::default(), 3, 8000.0).unwrap();
        st.set_delays(vec![1e-4, -2e-4, 0.0]).unwrap();
        let chunk = AudioChunk {
            samples: vec![vec![0.0; 256]; 3],
            timestamp: 0.0,
            chunk_index: 0,
        };
        for _ in 0..3 {
            assert!(st.process_chunk(&chunk).unwrap().iter().all(|v| *v == 0.0));
        }
        assert_eq!(st.frames_processed(), 3);
    }

    #[test]
    fn rejects_bad_chunks() {
        let mut st = BeamformerState::new(FrameSpec::default(), 2, 8000.0).unwrap();
        let wrong_m = AudioChunk {
            samples: vec![vec![0.0; 256]; 3],
            timestamp: 0.0,
            chunk_index: 0,
        };
        assert!(st.process_chunk(&wrong_m).is_err());
        let mut nan = AudioChunk {
            samples: vec![vec![0.0; 256]; 2],
            timestamp: 0.0,
            chunk_index: 0,
        };
        nan.samples[1][3] = f64::NAN;
        assert!(st.process_chunk(&nan).is_err());
        assert_eq!(st.frames_processed(), 0);
    }

    #[test]
    fn steer_examples() {
        let arr = MicArray::two_ring();
        let prop = PropagationConfig::default();
        let mut st = BeamformerState::new(FrameSpec::default(), 13, 8000.0).unwrap();
        st.steer(&DoaAngles::BROADSIDE, &arr, &prop).unwrap();
        assert!(st.delays().iter().all(|d| *d == 0.0));

        let doa = DoaAngles::new(0.0, 3.0 * FRAC_PI_4);
        st.steer(&doa, &arr, &prop).unwrap();
        let first = st.delays().to_vec();
        st.steer(&doa, &arr, &prop).unwrap();
        assert_eq!(st.delays(), first.as_slice());
        assert_eq!(first, steering_delays(&arr, &doa, &prop).unwrap());
        assert!((first[5] + 0.045 / (2f64.sqrt() * 343.0)).abs() < 1e-18);

        // invalid direction keeps the previous delays
        assert!(st.steer(&DoaAngles::new(0.0, PI / 2.0), &arr, &prop).is_err());
        assert_eq!(st.delays(), first.as_slice());
    }

    #[test]
    fn steered_tone_matches_center_mic_and_beampattern() {
        let arr = MicArray::two_ring();
        let prop = PropagationConfig::default();
        let fs = prop.sample_rate();
        let pos = Vec3::new(-1.0, 0.2, 1.0);
        let src = SourceSpec::tone("t", 2000.0, 0.5, Trajectory::fixed(pos));
        let scene = synthesize_scene(&arr, &[src], &prop, 1.0, &SynthesisOptions::default()).unwrap();
        let doa = DoaAngles::from_direction(&pos).unwrap();

        let y = process_offline(&scene.signal, &[(0.0, doa)], &arr, &prop, FrameSpec::default()).unwrap();
        let center = scene.signal.channel(0);
        let steady = 512..7000;
        let err: Vec<f64> = steady.clone().map(|n| y.channel(0)[n + 128] - center[n]).collect();
        let ref_rms = rms(&center[steady.clone()]);
        assert!(20.0 * (rms(&err) / ref_rms).log10() < -60.0);

        // A look direction 90 degrees away in the horizontal plane.
        let u = pos.normalize();
        let mut away = u.cross(&Vec3::y()).normalize();
        if away.z < 0.0 {
            away = -away;
        }
        assert!((crate::geometry::angle_between(&u, &away) - PI / 2.0).abs() < 1e-12);
        let look = DoaAngles::from_direction(&away).unwrap();
        let b = crate::geometry::beampattern(&arr, &look, &doa, 2000.0, &prop).unwrap().norm();
        let y = process_offline(&scene.signal, &[(0.0, look)], &arr, &prop, FrameSpec::default()).unwrap();
        let got = rms(&y.channel(0)[steady.start + 128..steady.end + 128]) / ref_rms;
        assert!((20.0 * (got / b).log10()).abs() < 0.2, "got {got}, beampattern {b}");
        let _ = fs;
    }

    #[test]
    fn offline_schedule_rules() {
        let arr = MicArray::concentric(&[0.0, 0.03], &[1, 3]).unwrap();
        let prop = PropagationConfig::default();
        let sig = MultichannelSignal::new(8000.0, (0..4).map(|m| sine(2000, 500.0 + 100.0 * m as f64, 8000.0)).collect()).unwrap();
        let spec = FrameSpec::default();
        let a = process_offline(&sig, &[], &arr, &prop, spec).unwrap();
        let b = process_offline(&sig, &[(0.0, DoaAngles::BROADSIDE)], &arr, &prop, spec).unwrap();
        assert_eq!(a, b);

        let d = DoaAngles::new(0.2, 2.6);
        let single = process_offline(&sig, &[(-1.0, d)], &arr, &prop, spec).unwrap();
        let mut st = BeamformerState::new(spec, 4, 8000.0).unwrap();
        st.steer(&d, &arr, &prop).unwrap();
        let mut manual = Vec::new();
        for c in ChunkFramer::new(&sig, spec).iter() {
            manual.extend(st.process_chunk(&c).unwrap());
        }
        manual.truncate(2000);
        assert_eq!(single.channel(0), manual.as_slice());

        assert!(process_offline(&sig, &[(1.0, d), (0.5, d)], &arr, &prop, spec).is_err());
        let empty = MultichannelSignal::new(8000.0, vec![vec![]; 4]).unwrap();
        assert!(process_offline(&empty, &[], &arr, &prop, spec).is_err());
    }

    #[test]
    fn lookup_rule() {
        let e = [(0.0, 'a'), (0.1, 'b'), (0.1, 'c'), (0.3, 'd')];
        assert_eq!(latest_at_or_before(&e, -0.1), None);
        assert_eq!(latest_at_or_before(&e, 0.05), Some(0));
        assert_eq!(latest_at_or_before(&e, 0.1), Some(2));
        assert_eq!(latest_at_or_before(&e, 5.0), Some(3));
    }

    #[test]
    fn framing_timestamps() {
        let sig = MultichannelSignal::mono(8000.0, vec![1.0; 300]).unwrap();
        let f = ChunkFramer::new(&sig, FrameSpec::default());
        assert_eq!(f.len(), 3);
        let c0 = f.chunk(0);
        assert_eq!(c0.timestamp, -128.0 / 8000.0);
        assert_eq!(c0.midpoint(&FrameSpec::default(), 8000.0), 0.0);
        assert!(c0.samples[0][..128].iter().all(|v| *v == 0.0));
        assert!(c0.samples[0][128..].iter().all(|v| *v == 1.0));
        let c2 = f.chunk(2);
        assert_eq!(c2.samples[0].iter().filter(|v| **v == 1.0).count(), 300 - 128);
    }
}
