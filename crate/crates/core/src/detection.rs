//! Scripted stand-in for the camera and detector: samples ground-truth
//! trajectories at the detector frame rate, projects them into the image
//! and perturbs the result the way a real detector would.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::output::atomic_write;
use crate::scene::Trajectory;
use crate::vision::{project_to_pixel, CameraModel, DetectionEvent};

pub const DEFAULT_FPS: f64 = 30.0;
pub const DEFAULT_PIXEL_NOISE_PX: f64 = 2.0;
pub const DEFAULT_DEPTH_NOISE_REL: f64 = 0.02;
/// Visual pipeline latency the simulated detector adds to every frame time.
pub const DEFAULT_LATENCY_S: f64 = 0.064;

/// How one target is seen by the simulated detector.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetScript {
    pub label: String,
    pub trajectory: Trajectory,
    pub fps: f64,
    pub pixel_noise_px: f64,
    pub depth_noise_rel: f64,
    pub dropout: f64,
    pub latency_s: f64,
    /// Physical bounding-box width and height, metres.
    pub box_size_m: [f64; 2],
}

impl TargetScript {
    /// Noise-free, lossless detector with the default frame rate and latency.
    pub fn ideal(label: &str, trajectory: Trajectory) -> Self {
        Self {
            label: label.into(),
            trajectory,
            fps: DEFAULT_FPS,
            pixel_noise_px: 0.0,
            depth_noise_rel: 0.0,
            dropout: 0.0,
            latency_s: DEFAULT_LATENCY_S,
            box_size_m: [0.3, 0.3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid(format!("target '{}': fps must be > 0", self.label)));
        }
        if !(self.pixel_noise_px >= 0.0 && self.depth_noise_rel >= 0.0)
            || !self.pixel_noise_px.is_finite()
            || !self.depth_noise_rel.is_finite()
        {
            return Err(Error::invalid(format!(
                "target '{}': noise levels must be finite and >= 0",
                self.label
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "target '{}': dropout must lie in [0, 1]",
                self.label
            )));
        }
        if !(self.latency_s.is_finite() && self.latency_s >= 0.0) {
            return Err(Error::invalid(format!("target '{}': latency must be >= 0", self.label)));
        }
        if !self.box_size_m.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::invalid(format!("target '{}': box size must be >= 0", self.label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryScript {
    pub targets: Vec<TargetScript>,
    pub duration_s: f64,
}

/// Per-target RNG seed; each target draws from its own stream so adding a
/// target does not perturb the others.
fn target_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Time-ordered detections of every scripted target. Frames fall at `k / fps`
/// for `k < floor(duration * fps)`; each event is stamped with its frame time
/// plus the target's latency.
pub fn generate_detections(script: &TrajectoryScript, camera: &CameraModel, seed: u64) -> Result<Vec<DetectionEvent>> {
    if !(script.duration_s.is_finite() && script.duration_s > 0.0) {
        return Err(Error::invalid("detection script duration must be > 0"));
    }
    let fx = camera.focal_length();
    let mut events = Vec::new();
    for (i, target) in script.targets.iter().enumerate() {
        target.validate()?;
        for w in &target.trajectory.0 {
            project_to_pixel(camera, &w.position()).map_err(|_| {
                Error::invalid(format!(
                    "target '{}': waypoint at t = {} s is behind the camera",
                    target.label, w.t
                ))
            })?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(target_seed(seed, i));
        let frames = (script.duration_s * target.fps).floor() as u64;
        for k in 0..frames {
            let t = k as f64 / target.fps;
            let (pixel, depth) = project_to_pixel(camera, &target.trajectory.position_at(t))?;
            // Always draw, so the stream stays aligned whatever the settings.
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let nz: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            if u < target.dropout {
                continue;
            }
            let noisy_depth = depth * (1.0 + target.depth_noise_rel * nz).max(1e-3);
            events.push(DetectionEvent {
                t_s: t + target.latency_s,
                x_px: pixel.x + target.pixel_noise_px * nx,
                y_px: pixel.y + target.pixel_noise_px * ny,
                w_px: fx * target.box_size_m[0] / depth,
                h_px: fx * target.box_size_m[1] / depth,
                depth_m: noisy_depth,
                target_label: target.label.clone(),
            });
        }
    }
    events.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    Ok(events)
}

pub fn write_detections_csv(path: &Path, events: &[DetectionEvent]) -> Result<()> {
    atomic_write(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        for e in events {
            wr.serialize(e)?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    })
}

/// Reads an event list and returns it sorted by timestamp.
pub fn read_detections_csv(path: &Path) -> Result<Vec<DetectionEvent>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(file);
    let mut events = Vec::new();
    for (row, rec) in rd.deserialize::<DetectionEvent>().enumerate() {
        let e = rec.map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        e.validate()
            .map_err(|err| Error::Csv(format!("{} row {}: {err}", path.display(), row + 1)))?;
        events.push(e);
    }
    events.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    Ok(events)
}
