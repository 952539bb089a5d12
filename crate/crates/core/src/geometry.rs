//! Planar microphone array geometry, steering delays and the analytic array
//! factor.
//!
//! Directions are parameterised by an elevation `theta` and an azimuth `phi`
//! following the camera-derived convention
//!
//! ```text
//! phi   = pi - atan(x / z)
//! theta = atan(y / z)
//! ```
//!
//! so the unit vector toward a direction is `normalize(-tan phi, tan theta, 1)`.
//! The array lies in the `z = 0` plane and `+z` points into the scene; only
//! directions strictly in front of the array are representable.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Default speed of sound (dry air at 20 °C), m/s.
pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
/// Default sampling rate, Hz.
pub const DEFAULT_SAMPLE_RATE: f64 = 8000.0;

/// Ring radii of the reference 13-microphone concentric array, metres.
pub const DEFAULT_RING_RADII: [f64; 3] = [0.0, 0.025, 0.045];
/// Microphones per ring of the reference array.
pub const DEFAULT_MICS_PER_RING: [usize; 3] = [1, 4, 8];

// Below this |cos| the tangent parameterisation no longer describes a
// direction in front of the array.
const TAN_SINGULARITY_EPS: f64 = 1e-12;

/// Positions of the microphones of a planar array, in the array frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MicArray {
    positions: Vec<Vec3>,
}

impl MicArray {
    pub fn new(positions: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("array needs at least one microphone"));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("microphone {i} has a non-finite position")));
            }
            if p.z != 0.0 {
                return Err(Error::invalid(format!(
                    "microphone {i} is off the array plane (z = {})",
                    p.z
                )));
            }
        }
        for i in 0..positions.len() {
            for j in i + 1..positions.len() {
                if positions[i] == positions[j] {
                    return Err(Error::invalid(format!(
                        "microphones {i} and {j} share the same position"
                    )));
                }
            }
        }
        Ok(Self { positions })
    }

    /// Concentric circular array. Ring `r` holds `mics_per_ring[r]`
    /// microphones at angles `2*pi*k/count`, starting on the `+x` axis and
    /// turning counter-clockwise; microphones are ordered ring by ring.
    pub fn concentric(ring_radii: &[f64], mics_per_ring: &[usize]) -> Result<Self> {
        if ring_radii.len() != mics_per_ring.len() {
            return Err(Error::invalid(format!(
                "{} ring radii but {} microphone counts",
                ring_radii.len(),
                mics_per_ring.len()
            )));
        }
        if ring_radii.is_empty() {
            return Err(Error::invalid("array needs at least one ring"));
        }
        let mut positions = Vec::with_capacity(mics_per_ring.iter().sum());
        for (r, (&radius, &count)) in ring_radii.iter().zip(mics_per_ring).enumerate() {
            if !radius.is_finite() || radius < 0.0 {
                return Err(Error::invalid(format!("ring {r} has invalid radius {radius}")));
            }
            if r > 0 && radius <= ring_radii[r - 1] {
                if radius == ring_radii[r - 1] {
                    return Err(Error::invalid(format!("duplicate ring radius {radius}")));
                }
                return Err(Error::invalid("ring radii must be strictly increasing"));
            }
            if count == 0 {
                return Err(Error::invalid(format!("ring {r} has no microphones")));
            }
            if radius == 0.0 && count > 1 {
                return Err(Error::invalid(format!(
                    "ring {r} has radius 0 but {count} microphones"
                )));
            }
            for k in 0..count {
                let angle = 2.0 * PI * k as f64 / count as f64;
                positions.push(Vec3::new(radius * angle.cos(), radius * angle.sin(), 0.0));
            }
        }
        Self::new(positions)
    }

    /// The 13-microphone array with rings at 0, 2.5 and 4.5 cm.
    pub fn two_ring() -> Self {
        Self::concentric(&DEFAULT_RING_RADII, &DEFAULT_MICS_PER_RING)
            .expect("reference array geometry is valid")
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Largest distance of any microphone from the array origin.
    pub fn aperture_radius(&self) -> f64 {
        self.positions.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Index of the microphone closest to the array origin.
    pub fn center_index(&self) -> usize {
        self.positions
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Elevation/azimuth steering target, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoaAngles {
    pub theta: f64,
    pub phi: f64,
}

impl DoaAngles {
    pub const BROADSIDE: DoaAngles = DoaAngles { theta: 0.0, phi: PI };

    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    /// Angles of a direction vector with positive `z`. Exact inverse of
    /// [`DoaAngles::unit_vector`].
    pub fn from_direction(d: &Vec3) -> Result<Self> {
        if !d.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite direction"));
        }
        if d.z <= 0.0 {
            return Err(Error::domain(format!(
                "direction {:?} is not in front of the array (z <= 0)",
                d.as_slice()
            )));
        }
        Ok(Self {
            theta: (d.y / d.z).atan(),
            phi: PI - (d.x / d.z).atan(),
        })
    }

    /// Unit vector toward this direction, `normalize(-tan phi, tan theta, 1)`.
    pub fn unit_vector(&self) -> Result<Vec3> {
        if !self.theta.is_finite() || !self.phi.is_finite() {
            return Err(Error::domain("non-finite steering angles"));
        }
        if self.theta.cos().abs() < TAN_SINGULARITY_EPS || self.phi.cos().abs() < TAN_SINGULARITY_EPS {
            return Err(Error::domain(format!(
                "angles (theta={}, phi={}) do not point in front of the array",
                self.theta, self.phi
            )));
        }
        // tan(pi - phi) == -tan(phi), evaluated so that phi = pi gives exactly 0.
        Ok(Vec3::new((PI - self.phi).tan(), self.theta.tan(), 1.0).normalize())
    }
}

/// Speed of sound and sampling rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    speed_of_sound: f64,
    sample_rate: f64,
}

impl PropagationConfig {
    pub fn new(speed_of_sound: f64, sample_rate: f64) -> Result<Self> {
        if !(speed_of_sound.is_finite() && speed_of_sound > 0.0) {
            return Err(Error::invalid(format!("speed of sound must be > 0, got {speed_of_sound}")));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::invalid(format!("sample rate must be > 0, got {sample_rate}")));
        }
        Ok(Self {
            speed_of_sound,
            sample_rate,
        })
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate / 2.0
    }
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// Plane-wave steering delays `tau_m = -(r_m . u) / c`, seconds.
pub fn steering_delays(array: &MicArray, doa: &DoaAngles, prop: &PropagationConfig) -> Result<Vec<f64>> {
    let u = doa.unit_vector()?;
    Ok(delays_toward(array, &u, prop))
}

/// Steering delays toward an arbitrary unit vector.
pub fn delays_toward(array: &MicArray, u: &Vec3, prop: &PropagationConfig) -> Vec<f64> {
    array
        .positions
        .iter()
        .map(|r| -r.dot(u) / prop.speed_of_sound)
        .collect()
}

/// Complex gain of a delay-and-sum beam looking at `look` for a plane wave
/// arriving from `source` at frequency `freq`:
/// `B = 1/M * sum_m exp(j 2 pi f (tau_m(look) - tau_m(source)))`.
pub fn beampattern(
    array: &MicArray,
    look: &DoaAngles,
    source: &DoaAngles,
    freq: f64,
    prop: &PropagationConfig,
) -> Result<Complex64> {
    let u_look = look.unit_vector()?;
    let u_src = source.unit_vector()?;
    if !(0.0..=prop.nyquist()).contains(&freq) {
        return Err(Error::domain(format!(
            "frequency {freq} Hz outside [0, {}] Hz",
            prop.nyquist()
        )));
    }
    Ok(array_factor(array, &u_look, &u_src, freq, prop))
}

/// [`beampattern`] on unit vectors.
pub fn array_factor(array: &MicArray, u_look: &Vec3, u_src: &Vec3, freq: f64, prop: &PropagationConfig) -> Complex64 {
    let look = delays_toward(array, u_look, prop);
    let src = delays_toward(array, u_src, prop);
    let sum: Complex64 = look
        .iter()
        .zip(&src)
        .map(|(tl, ts)| Complex64::from_polar(1.0, 2.0 * PI * freq * (tl - ts)))
        .sum();
    sum / array.len() as f64
}

/// Angle between two directions, radians. Uses `atan2(|a x b|, a . b)` which
/// stays accurate for nearly parallel vectors.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}
