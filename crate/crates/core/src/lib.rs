//! Vision-steered delay-and-sum beamforming for a planar microphone array.
//!
//! The crate covers array and camera geometry, plane-wave scene synthesis,
//! a frequency-domain beamformer with overlap-add output, the threaded
//! capture/fusion pipeline, a scripted detector and SIR evaluation.

pub mod audio;
pub mod beamformer;
pub mod config;
pub mod detection;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod output;
pub mod pipeline;
pub mod scene;
pub mod vision;

pub use audio::{read_wav, write_wav, MultichannelSignal, WavEncoding};
pub use beamformer::{process_offline, AudioChunk, BeamformerState, ChunkFramer, FrameSpec};
pub use config::{ConfigError, Overrides, ScenarioConfig};
pub use detection::{generate_detections, TargetScript, TrajectoryScript};
pub use error::{Error, Result};
pub use evaluation::{
    band_power, delta_sir, run_experiment, sir_broadband, sir_tone_tone, ExperimentKind, ExperimentResult, SirParams,
    SirSeries, SirVariant,
};
pub use geometry::{beampattern, steering_delays, DoaAngles, MicArray, PropagationConfig, Vec3};
pub use pipeline::{
    latency_stats, lookup_closest_not_future, run_pipeline, DoaHistory, LatencyRecord, PipelineInputs, PipelineMode,
    PipelineReport, PipelineSettings, Stage,
};
pub use scene::{synthesize_scene, SourceSpec, SynthesisOptions, Trajectory, Waveform, Waypoint};
pub use vision::{CameraModel, DetectionEvent, MountingOffset};
