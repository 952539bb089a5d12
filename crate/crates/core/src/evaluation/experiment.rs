//! Scripted two-source experiments: synthesize, run the pipeline, compare
//! the beamformed output with the centre microphone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::audio::{write_wav, MultichannelSignal, WavEncoding};
use crate::config::{ConfigError, ScenarioConfig};
use crate::error::{Error, Result};
use crate::geometry::{angle_between, beampattern, DoaAngles, Vec3};
use crate::output::{atomic_write, atomic_write_str};
use crate::pipeline::{run_pipeline, write_latency_csv, write_steering_log_csv, PipelineReport};
use crate::scene::SourceSpec;
use crate::vision::doa_from_position;

use super::{delta_sir, poly_trend, sir_broadband, sir_tone_tone, write_sir_csv, SirSeries, SirVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    /// Both sources fixed, no sensor noise.
    AnechoicStatic,
    /// At least one source moves, no sensor noise.
    AnechoicDynamic,
    /// Moving sources with diffuse sensor noise standing in for the room.
    RoomDynamic,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 3] = [
        ExperimentKind::AnechoicStatic,
        ExperimentKind::AnechoicDynamic,
        ExperimentKind::RoomDynamic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::AnechoicStatic => "anechoic_static",
            ExperimentKind::AnechoicDynamic => "anechoic_dynamic",
            ExperimentKind::RoomDynamic => "room_dynamic",
        }
    }

    fn check(&self, cfg: &ScenarioConfig) -> std::result::Result<(), ConfigError> {
        let moving = cfg.sources.iter().any(|s| !s.trajectory.is_static());
        match self {
            ExperimentKind::AnechoicStatic if moving => {
                Err(ConfigError::new("sources", "anechoic_static needs every source to be static"))
            }
            ExperimentKind::AnechoicDynamic if !moving => {
                Err(ConfigError::new("sources", "anechoic_dynamic needs a moving source"))
            }
            ExperimentKind::AnechoicStatic | ExperimentKind::AnechoicDynamic if cfg.diffuse_noise.is_some() => Err(
                ConfigError::new("diffuse_noise", format!("{} takes no diffuse noise", self.as_str())),
            ),
            ExperimentKind::RoomDynamic if cfg.diffuse_noise.is_none() => {
                Err(ConfigError::new("diffuse_noise", "room_dynamic needs a [diffuse_noise] section"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown experiment '{s}' (expected anechoic_static, anechoic_dynamic or room_dynamic)"))
    }
}

/// True and estimated steering for one chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t_s: f64,
    pub true_doa: DoaAngles,
    pub estimated_doa: Option<DoaAngles>,
    /// Angle between the true target and interferer directions, degrees.
    pub separation_deg: f64,
    /// Angle between the true and the steered direction, degrees.
    pub steering_error_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub windows: usize,
    pub absent_windows: usize,
    pub mean_delta_db: Option<f64>,
    pub std_delta_db: Option<f64>,
    pub median_delta_db: Option<f64>,
    pub fraction_positive: f64,
    pub mean_bf_sir_db: Option<f64>,
    pub mean_nbf_sir_db: Option<f64>,
    /// Array-factor prediction of ΔSIR; static tone-tone scenes only.
    pub predicted_delta_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    pub target_label: String,
    pub interferer_label: String,
    pub bf_sir: SirSeries,
    pub nbf_sir: SirSeries,
    pub delta: SirSeries,
    /// Source separation at every ΔSIR window centre, degrees.
    pub separation_deg: Vec<f64>,
    pub trend: Option<Vec<f64>>,
    pub trajectory: Vec<TrajectoryRow>,
    pub summary: ExperimentSummary,
    pub pipeline: PipelineReport,
    pub clipped_samples: usize,
}

impl ExperimentResult {
    /// Mean ΔSIR over windows whose separation lies within `tol_deg` of
    /// `deg`.
    pub fn mean_delta_near(&self, deg: f64, tol_deg: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .delta
            .values
            .iter()
            .zip(&self.separation_deg)
            .filter(|(_, s)| (**s - deg).abs() <= tol_deg)
            .filter_map(|(v, _)| *v)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn summary_toml(&self) -> String {
        use toml::{Table, Value};
        let s = &self.summary;
        let mut t = Table::new();
        t.insert("experiment".into(), Value::from(self.kind.as_str()));
        t.insert("variant".into(), Value::from(self.delta.variant.as_str()));
        t.insert("target".into(), Value::from(self.target_label.clone()));
        t.insert("interferer".into(), Value::from(self.interferer_label.clone()));
        t.insert("windows".into(), Value::Integer(s.windows as i64));
        t.insert("absent_windows".into(), Value::Integer(s.absent_windows as i64));
        t.insert("fraction_positive".into(), Value::Float(s.fraction_positive));
        let opt = [
            ("mean_delta_sir_db", s.mean_delta_db),
            ("std_delta_sir_db", s.std_delta_db),
            ("median_delta_sir_db", s.median_delta_db),
            ("mean_bf_sir_db", s.mean_bf_sir_db),
            ("mean_nbf_sir_db", s.mean_nbf_sir_db),
            ("predicted_delta_sir_db", s.predicted_delta_db),
        ];
        for (k, v) in opt {
            if let Some(v) = v {
                t.insert(k.into(), Value::Float(v));
            }
        }
        t.insert("clipped_samples".into(), Value::Integer(self.clipped_samples as i64));
        t.insert("causality_violations".into(), Value::Integer(self.pipeline.causality_violations() as i64));
        t.insert("visual_lock".into(), Value::Boolean(self.pipeline.visual_lock()));
        let mut root = Table::new();
        root.insert("summary".into(), Value::Table(t));
        toml::to_string(&root).unwrap_or_default()
    }
}

fn pick_sources<'a>(cfg: &'a ScenarioConfig) -> Result<(&'a SourceSpec, &'a SourceSpec)> {
    let cfg_err = |k: &str, m: String| Error::Config(ConfigError::new(k, m));
    let target_label = cfg
        .evaluation
        .target_label
        .clone()
        .or_else(|| cfg.steer_label())
        .ok_or_else(|| cfg_err("evaluation.target_label", "no target: set it or detection.steer_label".into()))?;
    let target = cfg
        .source(&target_label)
        .ok_or_else(|| cfg_err("evaluation.target_label", format!("no source is labelled '{target_label}'")))?;
    let interferer = match &cfg.evaluation.interferer_label {
        Some(l) => cfg.source(l),
        None => cfg.sources.iter().find(|s| s.label != target.label),
    }
    .ok_or_else(|| cfg_err("sources", "an experiment needs a target and an interferer source".into()))?;
    Ok((target, interferer))
}

fn separation_at(cfg: &ScenarioConfig, a: &SourceSpec, b: &SourceSpec, t: f64) -> f64 {
    let off = cfg.mounting_offset();
    angle_between(&a.direction_at(t, off), &b.direction_at(t, off)).to_degrees()
}

/// Runs one experiment end to end. Nothing is written to disk.
pub fn run_experiment(kind: ExperimentKind, cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    kind.check(cfg).map_err(Error::Config)?;
    if cfg.input.wav.is_some() {
        return Err(Error::Config(ConfigError::new(
            "input.wav",
            "experiments synthesize their scene; remove [input].wav",
        )));
    }
    let (target, interferer) = pick_sources(cfg)?;
    let scene = cfg.scene()?;
    let array = cfg.array()?;
    let prop = cfg.propagation()?;
    let spec = cfg.frame_spec()?;
    let fs = prop.sample_rate();
    let centre = scene.signal.channel(array.center_index()).to_vec();
    let inputs = cfg.pipeline_inputs(scene.signal)?;
    let report = run_pipeline(&inputs, &cfg.pipeline)?;

    // The beamformer output lags its input by one hop; realign before
    // comparing against the raw centre channel.
    let hop = spec.hop();
    let out = report.output.channel(0);
    if out.len() <= hop {
        return Err(Error::invalid("scene is shorter than one beamformer hop"));
    }
    let bf = &out[hop..];
    let nbf = &centre[..centre.len() - hop];

    let ev = &cfg.evaluation;
    let params = ev.params();
    let (bf_sir, nbf_sir) = match ev.variant {
        SirVariant::ToneTone => (
            sir_tone_tone(bf, fs, ev.target_freq_hz, ev.interferer_freq_hz, &params)?,
            sir_tone_tone(nbf, fs, ev.target_freq_hz, ev.interferer_freq_hz, &params)?,
        ),
        SirVariant::Broadband => (
            sir_broadband(bf, fs, ev.interferer_freq_hz, &params)?,
            sir_broadband(nbf, fs, ev.interferer_freq_hz, &params)?,
        ),
    };
    let delta = delta_sir(&bf_sir, &nbf_sir)?;
    let separation_deg: Vec<f64> = delta
        .times
        .iter()
        .map(|t| separation_at(cfg, target, interferer, *t))
        .collect();
    let trend = poly_trend(&delta, ev.trend_order);

    let off = cfg.mounting_offset();
    let trajectory = report
        .steering_log
        .iter()
        .map(|e| {
            let t = e.chunk_midpoint_s;
            let truth = target.direction_at(t, off);
            let steered = e
                .doa_timestamp_s
                .map(|_| e.doa.unit_vector())
                .transpose()?
                .unwrap_or_else(|| Vec3::new(0.0, 0.0, 1.0));
            Ok(TrajectoryRow {
                t_s: t,
                true_doa: doa_from_position(&target.trajectory.position_at(t), off)?,
                estimated_doa: e.doa_timestamp_s.map(|_| e.doa),
                separation_deg: separation_at(cfg, target, interferer, t),
                steering_error_deg: angle_between(&truth, &steered).to_degrees(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let predicted_delta_db = if kind == ExperimentKind::AnechoicStatic && ev.variant == SirVariant::ToneTone {
        let look = doa_from_position(&target.trajectory.position_at(0.0), off)?;
        let int = doa_from_position(&interferer.trajectory.position_at(0.0), off)?;
        let gain_t = beampattern(&array, &look, &look, ev.target_freq_hz, &prop)?.norm();
        let gain_i = beampattern(&array, &look, &int, ev.interferer_freq_hz, &prop)?.norm();
        Some(20.0 * (gain_t / gain_i).log10())
    } else {
        None
    };

    let present: Vec<f64> = delta.present().collect();
    let summary = ExperimentSummary {
        windows: delta.len(),
        absent_windows: delta.absent_count(),
        mean_delta_db: delta.mean(),
        std_delta_db: delta.std(),
        median_delta_db: delta.median(),
        fraction_positive: if present.is_empty() {
            0.0
        } else {
            present.iter().filter(|v| **v > 0.0).count() as f64 / present.len() as f64
        },
        mean_bf_sir_db: bf_sir.mean(),
        mean_nbf_sir_db: nbf_sir.mean(),
        predicted_delta_db,
    };
    Ok(ExperimentResult {
        kind,
        target_label: target.label.clone(),
        interferer_label: interferer.label.clone(),
        bf_sir,
        nbf_sir,
        delta,
        separation_deg,
        trend,
        trajectory,
        summary,
        pipeline: report,
        clipped_samples: scene.clipped_samples,
    })
}

fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    atomic_write(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "t_s",
            "true_theta_rad",
            "true_phi_rad",
            "est_theta_rad",
            "est_phi_rad",
            "separation_deg",
            "steering_error_deg",
        ])?;
        for r in rows {
            let est = |f: fn(&DoaAngles) -> f64| r.estimated_doa.as_ref().map(f).map(|v| v.to_string()).unwrap_or_default();
            wr.write_record([
                r.t_s.to_string(),
                r.true_doa.theta.to_string(),
                r.true_doa.phi.to_string(),
                est(|d| d.theta),
                est(|d| d.phi),
                r.separation_deg.to_string(),
                r.steering_error_deg.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    })
}

/// Writes the result bundle into `dir` and returns the written paths.
pub fn write_experiment_outputs(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let p = |name: &str| dir.join(name);
    let files = [
        p("sir_bf.csv"),
        p("sir_nbf.csv"),
        p("delta_sir.csv"),
        p("trajectory.csv"),
        p("steering_log.csv"),
        p("latency.csv"),
        p("beamformed.wav"),
        p("pipeline_report.toml"),
        p("summary.toml"),
    ];
    write_sir_csv(&files[0], &result.bf_sir, None, None)?;
    write_sir_csv(&files[1], &result.nbf_sir, None, None)?;
    write_sir_csv(&files[2], &result.delta, result.trend.as_deref(), Some(&result.separation_deg))?;
    write_trajectory_csv(&files[3], &result.trajectory)?;
    write_steering_log_csv(&files[4], &result.pipeline.steering_log)?;
    write_latency_csv(&files[5], &result.pipeline.latency)?;
    write_output_wav(&files[6], &result.pipeline.output)?;
    atomic_write_str(&files[7], &result.pipeline.to_toml_string(Some(&files[6])))?;
    atomic_write_str(&files[8], &result.summary_toml())?;
    Ok(files.to_vec())
}

fn write_output_wav(path: &Path, signal: &MultichannelSignal) -> Result<()> {
    write_wav(signal, path, WavEncoding::Float32)
}
