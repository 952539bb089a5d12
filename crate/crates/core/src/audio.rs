//! Multichannel sample buffers and RIFF/WAV I/O.

use std::io::{Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::output::atomic_write;

/// `M` equal-length channels of samples at a common rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSignal {
    sample_rate: f64,
    channels: Vec<Vec<f64>>,
    start_time: f64,
}

impl MultichannelSignal {
    pub fn new(sample_rate: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::invalid(format!("sample rate must be > 0, got {sample_rate}")));
        }
        if channels.is_empty() {
            return Err(Error::invalid("signal needs at least one channel"));
        }
        let len = channels[0].len();
        if let Some(i) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::invalid(format!(
                "channel {i} has {} samples, channel 0 has {len}",
                channels[i].len()
            )));
        }
        Ok(Self {
            sample_rate,
            channels,
            start_time: 0.0,
        })
    }

    pub fn zeros(sample_rate: f64, channels: usize, len: usize) -> Result<Self> {
        Self::new(sample_rate, vec![vec![0.0; len]; channels])
    }

    pub fn mono(sample_rate: f64, samples: Vec<f64>) -> Result<Self> {
        Self::new(sample_rate, vec![samples])
    }

    pub fn with_start_time(mut self, start_time: f64) -> Self {
        self.start_time = start_time;
        self
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn peak(&self) -> f64 {
        self.channels
            .iter()
            .flatten()
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    /// Samplewise sum of two signals of identical shape.
    pub fn add(&mut self, other: &MultichannelSignal) -> Result<()> {
        if other.num_channels() != self.num_channels() || other.len() != self.len() {
            return Err(Error::invalid("cannot add signals of different shape"));
        }
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    #[default]
    Float32,
    Int16,
}

pub fn write_wav(signal: &MultichannelSignal, path: &Path, encoding: WavEncoding) -> Result<()> {
    if signal.channels.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot write non-finite samples"));
    }
    let rate = signal.sample_rate.round();
    if rate != signal.sample_rate || rate > u32::MAX as f64 {
        return Err(Error::invalid(format!(
            "WAV needs an integral sample rate, got {}",
            signal.sample_rate
        )));
    }
    let channels = u16::try_from(signal.num_channels())
        .map_err(|_| Error::invalid("too many channels for WAV"))?;
    atomic_write(path, |w| encode(signal, w, channels, rate as u32, encoding, path))
}

fn encode<W: Write + Seek>(
    signal: &MultichannelSignal,
    w: &mut W,
    channels: u16,
    rate: u32,
    encoding: WavEncoding,
    path: &Path,
) -> Result<()> {
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let spec = match encoding {
        WavEncoding::Float32 => WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
        WavEncoding::Int16 => WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
    };
    let mut writer = WavWriter::new(w, spec).map_err(wav_err)?;
    for n in 0..signal.len() {
        for ch in &signal.channels {
            match encoding {
                WavEncoding::Float32 => writer.write_sample(ch[n] as f32),
                WavEncoding::Int16 => {
                    let v = (ch[n] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v)
                }
            }
            .map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}

/// Reads a float32 or int16 WAV file; int16 samples are scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<MultichannelSignal> {
    let wav_err = |message: String| Error::Wav {
        path: path.to_path_buf(),
        message,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(other.to_string()),
    })?;
    let spec = reader.spec();
    let m = spec.channels as usize;
    if m == 0 {
        return Err(wav_err("file declares zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => return Err(wav_err(format!("unsupported encoding {fmt:?}/{bits} bit"))),
    }
    .map_err(|e| wav_err(e.to_string()))?;
    if interleaved.len() % m != 0 {
        return Err(wav_err("truncated sample data".into()));
    }
    let len = interleaved.len() / m;
    let mut channels = vec![Vec::with_capacity(len); m];
    for frame in interleaved.chunks_exact(m) {
        for (ch, &v) in channels.iter_mut().zip(frame) {
            ch.push(v);
        }
    }
    MultichannelSignal::new(f64::from(spec.sample_rate), channels)
}
