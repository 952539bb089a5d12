//! Scenario files: one TOML document describing the array, the camera, the
//! sources, the simulated detector, the pipeline and the evaluation.
//!
//! Unknown keys are rejected. Every cross-field rule is checked at load, and
//! errors carry the offending key path plus its line in the file when it can
//! be located.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, MultichannelSignal};
use crate::beamformer::FrameSpec;
use crate::detection::{
    generate_detections, read_detections_csv, TargetScript, TrajectoryScript, DEFAULT_DEPTH_NOISE_REL, DEFAULT_FPS,
    DEFAULT_LATENCY_S, DEFAULT_PIXEL_NOISE_PX,
};
use crate::error::{Error, Result};
use crate::evaluation::EvaluationSettings;
use crate::geometry::{MicArray, PropagationConfig, DEFAULT_SAMPLE_RATE, DEFAULT_SPEED_OF_SOUND, DEFAULT_MICS_PER_RING, DEFAULT_RING_RADII};
use crate::pipeline::{PipelineInputs, PipelineMode, PipelineSettings};
use crate::scene::{synthesize_scene, DiffuseNoise, SourceSpec, SynthesisOptions, SynthesizedScene, Trajectory, Waveform};
use crate::vision::{array_relative, project_to_pixel, CameraModel, DetectionEvent, MountingOffset};

/// A rejected scenario: the key path (e.g. `sources[1].waveform.freq_hz`),
/// its line in the file when known, and what is wrong.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if !self.key.is_empty() {
            write!(f, "{}: ", self.key)?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

fn default_seed() -> u64 {
    0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArraySection {
    pub ring_radii_m: Vec<f64>,
    pub mics_per_ring: Vec<usize>,
}

impl Default for ArraySection {
    fn default() -> Self {
        Self {
            ring_radii_m: DEFAULT_RING_RADII.to_vec(),
            mics_per_ring: DEFAULT_MICS_PER_RING.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationSection {
    pub speed_of_sound_m_s: f64,
    pub sample_rate_hz: f64,
}

impl Default for PropagationSection {
    fn default() -> Self {
        Self {
            speed_of_sound_m_s: DEFAULT_SPEED_OF_SOUND,
            sample_rate_hz: DEFAULT_SAMPLE_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameSection {
    pub frame_length: usize,
    /// Must equal `frame_length / 2` when given.
    pub hop: Option<usize>,
}

impl Default for FrameSection {
    fn default() -> Self {
        Self {
            frame_length: crate::beamformer::DEFAULT_FRAME_LENGTH,
            hop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    /// `K`, row-major.
    pub intrinsics: [f64; 9],
    /// `R`, row-major.
    pub rotation: [f64; 9],
    pub translation_m: [f64; 3],
    pub baseline_m: Option<f64>,
    /// Vertical offset `h` between camera and array origins.
    pub mounting_offset_m: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            intrinsics: [700.0, 0.0, 640.0, 0.0, 700.0, 360.0, 0.0, 0.0, 1.0],
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation_m: [0.0; 3],
            baseline_m: None,
            mounting_offset_m: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionTarget {
    pub label: String,
    /// Defaults to the trajectory of the source with the same label.
    #[serde(default)]
    pub trajectory: Option<Trajectory>,
    #[serde(default = "d_fps")]
    pub fps: f64,
    #[serde(default = "d_pixel_noise")]
    pub pixel_noise_px: f64,
    #[serde(default = "d_depth_noise")]
    pub depth_noise_rel: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "d_latency")]
    pub latency_s: f64,
    #[serde(default = "d_box")]
    pub box_size_m: [f64; 2],
}

fn d_fps() -> f64 {
    DEFAULT_FPS
}
fn d_pixel_noise() -> f64 {
    DEFAULT_PIXEL_NOISE_PX
}
fn d_depth_noise() -> f64 {
    DEFAULT_DEPTH_NOISE_REL
}
fn d_latency() -> f64 {
    DEFAULT_LATENCY_S
}
fn d_box() -> [f64; 2] {
    [0.3, 0.3]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSection {
    /// Label of the target the beam follows. Defaults to the only target
    /// when exactly one is scripted.
    pub steer_label: Option<String>,
    pub targets: Vec<DetectionTarget>,
}

/// Prerecorded inputs replacing the synthetic scene or detector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub wav: Option<PathBuf>,
    pub detections_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub array: ArraySection,
    #[serde(default)]
    pub propagation: PropagationSection,
    #[serde(default)]
    pub frame: FrameSection,
    #[serde(default)]
    pub camera: CameraSection,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub diffuse_noise: Option<DiffuseNoise>,
    #[serde(default)]
    pub detection: DetectionSection,
    #[serde(default)]
    pub pipeline: PipelineSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub input: InputSection,
    /// Directory relative paths in the file are resolved against.
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub frame_length: Option<usize>,
    pub hop: Option<usize>,
    pub mode: Option<PipelineMode>,
}

impl ScenarioConfig {
    /// Reads and validates a scenario file. Relative paths inside it are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate().map_err(|e| Error::Config(locate(text, e)))?;
        Ok(cfg)
    }

    /// Applies overrides and re-validates.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(n) = o.frame_length {
            self.frame.frame_length = n;
            if o.hop.is_none() {
                self.frame.hop = None;
            }
        }
        if let Some(h) = o.hop {
            self.frame.hop = Some(h);
        }
        if let Some(m) = o.mode {
            self.pipeline.mode = m;
        }
        self.validate().map_err(Error::Config)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: &Path) {
        self.base_dir = dir.to_path_buf();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Output directory, relative to the working directory.
    pub fn output_dir(&self) -> &Path {
        &self.output_dir
    }

    pub fn array(&self) -> Result<MicArray> {
        MicArray::concentric(&self.array.ring_radii_m, &self.array.mics_per_ring)
    }

    pub fn propagation(&self) -> Result<PropagationConfig> {
        PropagationConfig::new(self.propagation.speed_of_sound_m_s, self.propagation.sample_rate_hz)
    }

    pub fn frame_spec(&self) -> Result<FrameSpec> {
        match self.frame.hop {
            Some(h) => FrameSpec::with_hop(self.frame.frame_length, h),
            None => FrameSpec::new(self.frame.frame_length),
        }
    }

    pub fn camera(&self) -> Result<CameraModel> {
        let c = &self.camera;
        let cam = CameraModel::new(
            Matrix3::from_row_slice(&c.intrinsics),
            Matrix3::from_row_slice(&c.rotation),
            c.translation_m.into(),
        )?;
        match c.baseline_m {
            Some(b) => cam.with_stereo_baseline(b),
            None => Ok(cam),
        }
    }

    pub fn mounting_offset(&self) -> MountingOffset {
        MountingOffset(self.camera.mounting_offset_m)
    }

    /// Sources with sample-file paths resolved.
    pub fn sources(&self) -> Vec<SourceSpec> {
        self.sources
            .iter()
            .map(|s| {
                let mut s = s.clone();
                if let Waveform::SampleFile { path, .. } = &mut s.waveform {
                    *path = self.resolve(path);
                }
                s
            })
            .collect()
    }

    pub fn source(&self, label: &str) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.label == label)
    }

    pub fn synthesis_options(&self) -> SynthesisOptions {
        SynthesisOptions {
            mounting_offset: self.mounting_offset(),
            seed: self.seed,
            diffuse_noise: self.diffuse_noise,
            ..SynthesisOptions::default()
        }
    }

    /// The microphone signals: the prerecorded WAV if one is configured,
    /// otherwise the synthesized scene.
    pub fn scene(&self) -> Result<SynthesizedScene> {
        if let Some(wav) = &self.input.wav {
            let signal = read_wav(&self.resolve(wav))?;
            let m = self.array()?.len();
            if signal.num_channels() != m {
                return Err(Error::invalid(format!(
                    "{} has {} channels, the configured array has {m}",
                    wav.display(),
                    signal.num_channels()
                )));
            }
            if signal.sample_rate() != self.propagation.sample_rate_hz {
                return Err(Error::invalid(format!(
                    "{} is sampled at {} Hz, the config says {} Hz",
                    wav.display(),
                    signal.sample_rate(),
                    self.propagation.sample_rate_hz
                )));
            }
            return Ok(SynthesizedScene {
                clipped_samples: 0,
                seeds: Vec::new(),
                signal,
            });
        }
        synthesize_scene(
            &self.array()?,
            &self.sources(),
            &self.propagation()?,
            self.duration_s,
            &self.synthesis_options(),
        )
    }

    pub fn steer_label(&self) -> Option<String> {
        self.detection.steer_label.clone().or_else(|| match self.detection.targets.as_slice() {
            [only] => Some(only.label.clone()),
            _ => None,
        })
    }

    fn target_trajectory(&self, t: &DetectionTarget) -> Option<Trajectory> {
        t.trajectory.clone().or_else(|| self.source(&t.label).map(|s| s.trajectory.clone()))
    }

    pub fn detection_script(&self) -> TrajectoryScript {
        let targets = self
            .detection
            .targets
            .iter()
            .filter_map(|t| {
                Some(TargetScript {
                    label: t.label.clone(),
                    trajectory: self.target_trajectory(t)?,
                    fps: t.fps,
                    pixel_noise_px: t.pixel_noise_px,
                    depth_noise_rel: t.depth_noise_rel,
                    dropout: t.dropout,
                    latency_s: t.latency_s,
                    box_size_m: t.box_size_m,
                })
            })
            .collect();
        TrajectoryScript {
            targets,
            duration_s: self.duration_s,
        }
    }

    /// Seed of the simulated detector, decorrelated from the scene seed.
    pub fn detection_seed(&self) -> u64 {
        self.seed.wrapping_add(0x5DEE_CE66_D1CE_4E5B)
    }

    /// Detector events: the configured CSV if any, otherwise simulated.
    pub fn detections(&self) -> Result<Vec<DetectionEvent>> {
        if let Some(csv) = &self.input.detections_csv {
            return read_detections_csv(&self.resolve(csv));
        }
        if self.detection.targets.is_empty() {
            return Ok(Vec::new());
        }
        generate_detections(&self.detection_script(), &self.camera()?, self.detection_seed())
    }

    pub fn pipeline_inputs(&self, signal: MultichannelSignal) -> Result<PipelineInputs> {
        Ok(PipelineInputs {
            signal,
            detections: self.detections()?,
            array: self.array()?,
            prop: self.propagation()?,
            camera: self.camera()?,
            mounting_offset: self.mounting_offset(),
            frame: self.frame_spec()?,
            steer_label: self.steer_label(),
            detection_latency: self
                .detection
                .targets
                .iter()
                .map(|t| (t.label.clone(), t.latency_s))
                .collect::<HashMap<_, _>>(),
        })
    }

    /// Checks every cross-field rule.
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let err = |key: &str, msg: String| Err(ConfigError::new(key, msg));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return err("duration_s", format!("must be > 0, got {}", self.duration_s));
        }
        self.array().map_err(|e| ConfigError::new("array", strip(e)))?;
        let p = &self.propagation;
        if !(p.speed_of_sound_m_s.is_finite() && p.speed_of_sound_m_s > 0.0) {
            return err("propagation.speed_of_sound_m_s", "must be > 0".into());
        }
        if !(p.sample_rate_hz.is_finite() && p.sample_rate_hz > 0.0) {
            return err("propagation.sample_rate_hz", "must be > 0".into());
        }
        let nyquist = p.sample_rate_hz / 2.0;
        let n = self.frame.frame_length;
        if n < 2 || n % 2 != 0 {
            return err("frame.frame_length", format!("must be even and >= 2, got {n}"));
        }
        if let Some(h) = self.frame.hop {
            if h != n / 2 {
                return err("frame.hop", format!("must equal frame_length / 2 = {}, got {h}", n / 2));
            }
        }
        self.camera().map_err(|e| ConfigError::new("camera", strip(e)))?;
        if !self.camera.mounting_offset_m.is_finite() {
            return err("camera.mounting_offset_m", "must be finite".into());
        }
        let offset = self.mounting_offset();

        let mut labels = HashSet::new();
        for (i, s) in self.sources.iter().enumerate() {
            let key = |k: &str| format!("sources[{i}]{k}");
            if s.label.is_empty() {
                return err(&key(".label"), "must not be empty".into());
            }
            if !labels.insert(s.label.as_str()) {
                return err(&key(".label"), format!("duplicate source label '{}'", s.label));
            }
            match &s.waveform {
                Waveform::Tone { freq_hz, amplitude, phase_rad } => {
                    if !(*freq_hz >= 0.0 && *freq_hz < nyquist) {
                        return err(
                            &key(".waveform.freq_hz"),
                            format!(
                                "tone at {freq_hz} Hz breaks the Nyquist rule: must be below f_s/2 = {nyquist} Hz"
                            ),
                        );
                    }
                    if !amplitude.is_finite() || !phase_rad.is_finite() {
                        return err(&key(".waveform"), "tone amplitude and phase must be finite".into());
                    }
                }
                Waveform::WhiteNoise { amplitude, .. } => {
                    if !(amplitude.is_finite() && *amplitude >= 0.0) {
                        return err(&key(".waveform.amplitude"), "must be finite and >= 0".into());
                    }
                }
                Waveform::SampleFile { gain, .. } => {
                    if !gain.is_finite() {
                        return err(&key(".waveform.gain"), "must be finite".into());
                    }
                }
            }
            s.trajectory.validate().map_err(|e| ConfigError::new(key(".trajectory"), strip(e)))?;
            for (j, w) in s.trajectory.0.iter().enumerate() {
                if array_relative(&w.position(), offset).z <= 0.0 {
                    return err(
                        &key(&format!(".trajectory[{j}].position")),
                        "source must be in front of the array (z > 0)".into(),
                    );
                }
            }
        }
        if let Some(dn) = &self.diffuse_noise {
            if !dn.snr_db.is_finite() {
                return err("diffuse_noise.snr_db", "must be finite".into());
            }
        }
        if self.input.wav.is_none() && self.sources.is_empty() && self.detection.targets.is_empty() {
            log::warn!("scenario has no sources: the scene will be silent");
        }

        let camera = self.camera().map_err(|e| ConfigError::new("camera", strip(e)))?;
        let mut target_labels = HashSet::new();
        for (i, t) in self.detection.targets.iter().enumerate() {
            let key = |k: &str| format!("detection.targets[{i}]{k}");
            if !target_labels.insert(t.label.as_str()) {
                return err(&key(".label"), format!("duplicate target label '{}'", t.label));
            }
            let Some(traj) = self.target_trajectory(t) else {
                return err(
                    &key(".label"),
                    format!("no trajectory given and no source is labelled '{}'", t.label),
                );
            };
            let script = TargetScript {
                label: t.label.clone(),
                trajectory: traj.clone(),
                fps: t.fps,
                pixel_noise_px: t.pixel_noise_px,
                depth_noise_rel: t.depth_noise_rel,
                dropout: t.dropout,
                latency_s: t.latency_s,
                box_size_m: t.box_size_m,
            };
            if !(t.fps.is_finite() && t.fps > 0.0) {
                return err(&key(".fps"), "must be > 0".into());
            }
            if !(0.0..=1.0).contains(&t.dropout) {
                return err(&key(".dropout"), format!("must lie in [0, 1], got {}", t.dropout));
            }
            script.validate().map_err(|e| ConfigError::new(key(""), strip(e)))?;
            for (j, w) in traj.0.iter().enumerate() {
                if project_to_pixel(&camera, &w.position()).is_err() {
                    let k = if t.trajectory.is_some() {
                        key(&format!(".trajectory[{j}]"))
                    } else {
                        key(".label")
                    };
                    return err(&k, format!("waypoint at t = {} s is behind the camera", w.t));
                }
            }
        }
        if let Some(label) = &self.detection.steer_label {
            if !target_labels.contains(label.as_str()) && self.input.detections_csv.is_none() {
                return err(
                    "detection.steer_label",
                    format!("no detection target is labelled '{label}'"),
                );
            }
        }

        self.pipeline
            .validate()
            .map_err(|e| ConfigError::new("pipeline", strip(e)))?;

        let ev = &self.evaluation;
        if !(ev.band_hz.is_finite() && ev.band_hz > 0.0) {
            return err("evaluation.band_hz", "must be > 0".into());
        }
        for (k, f) in [("target_freq_hz", ev.target_freq_hz), ("interferer_freq_hz", ev.interferer_freq_hz)] {
            if !(f - ev.band_hz / 2.0 > 0.0 && f + ev.band_hz / 2.0 < nyquist) {
                return err(
                    &format!("evaluation.{k}"),
                    format!("band around {f} Hz must lie inside (0, {nyquist}) Hz"),
                );
            }
        }
        if (ev.target_freq_hz - ev.interferer_freq_hz).abs() < ev.band_hz {
            return err("evaluation.interferer_freq_hz", "target and interferer bands overlap".into());
        }
        if ev.window < 2 {
            return err("evaluation.window", "must be >= 2".into());
        }
        if ev.hop == 0 {
            return err("evaluation.hop", "must be >= 1".into());
        }
        for (k, l) in [("target_label", &ev.target_label), ("interferer_label", &ev.interferer_label)] {
            if let Some(l) = l {
                if self.source(l).is_none() {
                    return err(&format!("evaluation.{k}"), format!("no source is labelled '{l}'"));
                }
            }
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) | Error::Domain(m) => m,
        other => other.to_string(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e.span().map(|s| line_of(text, s.start));
    let message = e.message().trim().to_string();
    Error::Config(ConfigError {
        key: String::new(),
        line,
        message,
    })
}

enum Segment<'a> {
    Key(&'a str),
    Index(usize),
}

fn segments(path: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    for part in path.split('.') {
        let (name, rest) = part.split_once('[').map_or((part, ""), |(n, r)| (n, r));
        if !name.is_empty() {
            out.push(Segment::Key(name));
        }
        for idx in rest.split('[') {
            if let Ok(i) = idx.trim_end_matches(']').parse() {
                out.push(Segment::Index(i));
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Node<'a> {
    Table(&'a toml_edit::Table),
    Tables(&'a toml_edit::ArrayOfTables),
    Value(&'a toml_edit::Value),
    Empty,
}

fn item_node(item: &toml_edit::Item) -> Node<'_> {
    match item {
        toml_edit::Item::Table(t) => Node::Table(t),
        toml_edit::Item::ArrayOfTables(a) => Node::Tables(a),
        toml_edit::Item::Value(v) => Node::Value(v),
        toml_edit::Item::None => Node::Empty,
    }
}

/// Attaches the line of the deepest part of `err.key` found in `text`.
fn locate(text: &str, mut err: ConfigError) -> ConfigError {
    use toml_edit::Value;
    let Ok(doc) = toml_edit::Document::parse(text) else {
        return err;
    };
    let mut node = Node::Table(doc.as_table());
    let mut best: Option<usize> = None;
    for seg in segments(&err.key) {
        let mut mark = |span: Option<std::ops::Range<usize>>| {
            if let Some(s) = span {
                best = Some(s.start);
            }
        };
        let next = match (node, seg) {
            (Node::Table(t), Segment::Key(k)) => t.get_key_value(k).map(|(key, item)| {
                mark(key.span());
                item_node(item)
            }),
            (Node::Value(Value::InlineTable(t)), Segment::Key(k)) => t.get_key_value(k).map(|(key, item)| {
                mark(key.span());
                item_node(item)
            }),
            (Node::Tables(a), Segment::Index(i)) => a.get(i).map(|t| {
                mark(t.span());
                Node::Table(t)
            }),
            (Node::Value(Value::Array(a)), Segment::Index(i)) => a.get(i).map(|v| {
                mark(v.span());
                Node::Value(v)
            }),
            _ => None,
        };
        match next {
            Some(n) => node = n,
            None => break,
        }
    }
    err.line = best.map(|s| line_of(text, s));
    err
}
