use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use visbeam::audio::{read_wav, write_wav, WavEncoding};
use visbeam::beamformer::{process_offline, FrameSpec};
use visbeam::config::{Overrides, ScenarioConfig};
use visbeam::detection::write_detections_csv;
use visbeam::evaluation::{run_experiment, write_experiment_outputs, ExperimentKind};
use visbeam::geometry::{self, DoaAngles, MicArray, PropagationConfig, Vec3, DEFAULT_SPEED_OF_SOUND};
use visbeam::output::atomic_write;
use visbeam::pipeline::{
    run_pipeline, write_latency_csv, write_steering_log_csv, PipelineMode, PipelineReport, Stage,
};
use visbeam::{Error, Result};

use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct BeamformArgs {
    /// Multichannel input WAV.
    #[arg(long, short = 'i')]
    input: PathBuf,

    /// Destination WAV; defaults to <out-dir>/beamformed.wav.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,

    /// Fixed look direction as THETA,PHI in radians.
    #[arg(long, value_parser = parse_doa, conflicts_with = "schedule", allow_hyphen_values = true)]
    doa: Option<DoaAngles>,

    /// Steering schedule CSV with columns t_s,theta_rad,phi_rad.
    #[arg(long)]
    schedule: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BeampatternArgs {
    /// Azimuth samples.
    #[arg(long, default_value_t = 360)]
    n_phi: usize,

    /// Elevation samples.
    #[arg(long, default_value_t = 1)]
    n_theta: usize,

    /// Frequencies in Hz, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [3000.0])]
    freq: Vec<f64>,

    /// Look direction as THETA,PHI in radians; broadside by default.
    #[arg(long, value_parser = parse_doa, allow_hyphen_values = true)]
    look: Option<DoaAngles>,

    /// Destination CSV; defaults to <out-dir>/beampattern.csv.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Run length in seconds; the scenario audio is looped to fill it.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,

    /// Seconds discarded from the statistics; defaults to the scenario value.
    #[arg(long)]
    warmup: Option<f64>,
}

fn parse_doa(s: &str) -> std::result::Result<DoaAngles, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [t, p] = parts.as_slice() else {
        return Err("expected THETA,PHI in radians".into());
    };
    let theta: f64 = t.parse().map_err(|e| format!("theta: {e}"))?;
    let phi: f64 = p.parse().map_err(|e| format!("phi: {e}"))?;
    let doa = DoaAngles::new(theta, phi);
    doa.unit_vector().map_err(|e| e.to_string())?;
    Ok(doa)
}

fn overrides(g: &GlobalArgs) -> Overrides {
    Overrides {
        seed: g.seed,
        output_dir: g.out_dir.clone(),
        frame_length: g.frame_length,
        hop: g.hop,
        mode: g.mode,
    }
}

fn load(g: &GlobalArgs) -> Result<Option<ScenarioConfig>> {
    let Some(path) = &g.config else {
        return Ok(None);
    };
    let mut cfg = ScenarioConfig::load(path)?;
    cfg.apply(&overrides(g))?;
    Ok(Some(cfg))
}

fn require(g: &GlobalArgs) -> Result<ScenarioConfig> {
    load(g)?.ok_or_else(|| Error::InvalidArgument("this command needs --config".into()))
}

fn out_dir(g: &GlobalArgs, cfg: Option<&ScenarioConfig>) -> PathBuf {
    g.out_dir
        .clone()
        .or_else(|| cfg.map(|c| c.output_dir().to_path_buf()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn frame_from_flags(g: &GlobalArgs) -> Result<FrameSpec> {
    let n = g.frame_length.unwrap_or(visbeam::beamformer::DEFAULT_FRAME_LENGTH);
    match g.hop {
        Some(h) => FrameSpec::with_hop(n, h),
        None => FrameSpec::new(n),
    }
}

pub fn synthesize(g: &GlobalArgs, output: Option<&Path>) -> Result<()> {
    let cfg = require(g)?;
    let scene = cfg.scene()?;
    let dir = out_dir(g, Some(&cfg));
    let wav = output.map(Path::to_path_buf).unwrap_or_else(|| dir.join("scene.wav"));
    write_wav(&scene.signal, &wav, WavEncoding::Float32)?;
    println!(
        "wrote {} ({} channels, {:.3} s at {} Hz)",
        wav.display(),
        scene.signal.num_channels(),
        scene.signal.duration(),
        scene.signal.sample_rate()
    );
    if scene.clipped_samples > 0 {
        eprintln!("warning: {} samples exceed full scale", scene.clipped_samples);
    }
    if cfg.input.detections_csv.is_none() && !cfg.detection.targets.is_empty() {
        let det = wav.with_file_name("detections.csv");
        let events = cfg.detections()?;
        write_detections_csv(&det, &events)?;
        println!("wrote {} ({} detections)", det.display(), events.len());
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ScheduleRow {
    t_s: f64,
    theta_rad: f64,
    phi_rad: f64,
}

fn read_schedule(path: &Path) -> Result<Vec<(f64, DoaAngles)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut rows = Vec::new();
    for (i, rec) in csv::Reader::from_reader(file).deserialize::<ScheduleRow>().enumerate() {
        let r = rec.map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        let doa = DoaAngles::new(r.theta_rad, r.phi_rad);
        doa.unit_vector()
            .map_err(|e| Error::Csv(format!("{} row {}: {e}", path.display(), i + 1)))?;
        rows.push((r.t_s, doa));
    }
    Ok(rows)
}

/// Array for a WAV beamformed without a scenario: one channel is a lone
/// microphone at the origin, 13 channels the default concentric array.
fn implied_array(channels: usize) -> Result<MicArray> {
    match channels {
        1 => MicArray::new(vec![Vec3::zeros()]),
        13 => Ok(MicArray::two_ring()),
        n => Err(Error::InvalidArgument(format!(
            "{n}-channel input: pass --config describing the array"
        ))),
    }
}

pub fn beamform(g: &GlobalArgs, a: &BeamformArgs) -> Result<()> {
    let cfg = load(g)?;
    let signal = read_wav(&a.input)?;
    let (array, prop, spec) = match &cfg {
        Some(c) => {
            let prop = c.propagation()?;
            if prop.sample_rate() != signal.sample_rate() {
                return Err(Error::InvalidArgument(format!(
                    "{} is sampled at {} Hz, the scenario expects {} Hz",
                    a.input.display(),
                    signal.sample_rate(),
                    prop.sample_rate()
                )));
            }
            (c.array()?, prop, c.frame_spec()?)
        }
        None => (
            implied_array(signal.num_channels())?,
            PropagationConfig::new(DEFAULT_SPEED_OF_SOUND, signal.sample_rate())?,
            frame_from_flags(g)?,
        ),
    };
    if signal.num_channels() != array.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} channels but the array has {} microphones",
            a.input.display(),
            signal.num_channels(),
            array.len()
        )));
    }
    let schedule = match (&a.doa, &a.schedule) {
        (Some(d), _) => vec![(f64::NEG_INFINITY, *d)],
        (None, Some(p)) => read_schedule(p)?,
        (None, None) => Vec::new(),
    };
    let out = process_offline(&signal, &schedule, &array, &prop, spec)?;
    let path = a
        .output
        .clone()
        .unwrap_or_else(|| out_dir(g, cfg.as_ref()).join("beamformed.wav"));
    write_wav(&out, &path, WavEncoding::Float32)?;
    println!(
        "wrote {} ({} samples, output lags input by {} samples)",
        path.display(),
        out.len(),
        spec.hop()
    );
    Ok(())
}

/// Grid offsets that are symmetric about zero, include zero and stay
/// strictly inside (-pi/2, pi/2).
fn grid_offsets(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| PI * (i as f64 - (n / 2) as f64) / (n + 1) as f64)
        .collect()
}

pub fn beampattern(g: &GlobalArgs, a: &BeampatternArgs) -> Result<()> {
    if a.n_phi == 0 || a.n_theta == 0 || a.freq.is_empty() {
        return Err(Error::InvalidArgument("the grid needs at least one point per axis".into()));
    }
    let cfg = load(g)?;
    let (array, prop) = match &cfg {
        Some(c) => (c.array()?, c.propagation()?),
        None => (MicArray::two_ring(), PropagationConfig::default()),
    };
    let look = a.look.unwrap_or(DoaAngles::BROADSIDE);
    let path = a
        .output
        .clone()
        .unwrap_or_else(|| out_dir(g, cfg.as_ref()).join("beampattern.csv"));
    let mut rows = Vec::with_capacity(a.n_phi * a.n_theta * a.freq.len());
    let mut peak = (0.0f64, DoaAngles::BROADSIDE, 0.0);
    for &f in &a.freq {
        for dt in grid_offsets(a.n_theta) {
            for dp in grid_offsets(a.n_phi) {
                let src = DoaAngles::new(dt, PI + dp);
                let mag = geometry::beampattern(&array, &look, &src, f, &prop)?.norm();
                if mag > peak.0 {
                    peak = (mag, src, f);
                }
                rows.push((src, f, mag));
            }
        }
    }
    atomic_write(&path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["phi_rad", "theta_rad", "freq_hz", "magnitude", "magnitude_db"])?;
        for (src, f, mag) in &rows {
            wr.write_record([
                src.phi.to_string(),
                src.theta.to_string(),
                f.to_string(),
                mag.to_string(),
                (20.0 * mag.max(1e-12).log10()).to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    println!(
        "wrote {} ({} rows); peak |B| = {:.6} at theta {:.4}, phi {:.4}, {} Hz",
        path.display(),
        rows.len(),
        peak.0,
        peak.1.theta,
        peak.1.phi,
        peak.2
    );
    Ok(())
}

fn latency_table(report: &PipelineReport) -> String {
    let mut s = format!("{:<18} {:>8} {:>10} {:>10} {:>10} {:>10}\n", "stage", "count", "mean ms", "std ms", "p95 ms", "max ms");
    for (stage, stats) in report.stage_stats() {
        match stats {
            Some(st) => s.push_str(&format!(
                "{:<18} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>10.3}\n",
                stage.as_str(),
                st.count,
                st.mean_ms,
                st.std_ms,
                st.p95_ms,
                st.max_ms
            )),
            None => s.push_str(&format!("{:<18} {:>8} {:>10}\n", stage.as_str(), 0, "-")),
        }
    }
    s
}

fn write_pipeline_artifacts(report: &PipelineReport, dir: &Path) -> Result<()> {
    let wav = dir.join("beamformed.wav");
    write_wav(&report.output, &wav, WavEncoding::Float32)?;
    write_steering_log_csv(&dir.join("steering_log.csv"), &report.steering_log)?;
    write_latency_csv(&dir.join("latency.csv"), &report.latency)?;
    visbeam::output::atomic_write_str(&dir.join("pipeline_report.toml"), &report.to_toml_string(Some(&wav)))
}

pub fn pipeline(g: &GlobalArgs) -> Result<()> {
    let cfg = require(g)?;
    let scene = cfg.scene()?;
    let inputs = cfg.pipeline_inputs(scene.signal)?;
    let report = run_pipeline(&inputs, &cfg.pipeline)?;
    let dir = out_dir(g, Some(&cfg));
    write_pipeline_artifacts(&report, &dir)?;
    println!(
        "{} mode: {} chunks in {:.2} s, {} DoA updates, {} causality violations",
        report.mode,
        report.chunks_processed(),
        report.wall_time_s,
        report.doa_updates,
        report.causality_violations()
    );
    if !report.visual_lock() {
        println!("no visual lock: every chunk was steered broadside");
    }
    print!("{}", latency_table(&report));
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn experiment(g: &GlobalArgs, kind: ExperimentKind) -> Result<()> {
    let cfg = require(g)?;
    let result = run_experiment(kind, &cfg)?;
    let dir = out_dir(g, Some(&cfg));
    let files = write_experiment_outputs(&result, &dir)?;
    print!("{}", result.summary_toml());
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

pub fn bench(g: &GlobalArgs, a: &BenchArgs) -> Result<()> {
    let mut cfg = require(g)?;
    if g.mode.is_none() {
        cfg.pipeline.mode = PipelineMode::RealtimePaced;
    }
    if let Some(w) = a.warmup {
        cfg.pipeline.warmup_s = w;
    }
    if !(a.duration.is_finite() && a.duration > cfg.pipeline.warmup_s) {
        return Err(Error::InvalidArgument(format!(
            "--duration ({} s) must exceed the warm-up ({} s)",
            a.duration, cfg.pipeline.warmup_s
        )));
    }
    cfg.pipeline.run_duration_s = Some(a.duration);
    let scene = cfg.scene()?;
    let inputs = cfg.pipeline_inputs(scene.signal)?;
    let report = run_pipeline(&inputs, &cfg.pipeline)?;
    let dir = out_dir(g, Some(&cfg));
    write_latency_csv(&dir.join("bench_latency.csv"), &report.latency)?;
    visbeam::output::atomic_write_str(&dir.join("bench_report.toml"), &report.to_toml_string(None))?;
    println!(
        "{} s {} run, first {} s discarded, {} chunks of {}x{} samples",
        a.duration,
        report.mode,
        cfg.pipeline.warmup_s,
        report.chunks_processed(),
        inputs.array.len(),
        inputs.frame.frame_length()
    );
    print!("{}", latency_table(&report));
    if let Some((_, Some(bf))) = report.stage_stats().into_iter().find(|(s, _)| *s == Stage::Beamforming) {
        let chunk_ms = 1e3 * inputs.frame.frame_length() as f64 / inputs.prop.sample_rate();
        println!("real-time factor (beamforming / chunk duration): {:.4}", bf.mean_ms / chunk_ms);
    }
    Ok(())
}
