//! Shared inputs for the criterion benchmarks in `benches/`.

use visbeam::beamformer::AudioChunk;
use visbeam::geometry::{MicArray, PropagationConfig, Vec3};
use visbeam::scene::{synthesize_scene, SourceSpec, SynthesisOptions, Trajectory};
use visbeam::MultichannelSignal;

/// Deterministic 13 x 256 block of pseudo-random samples.
pub fn sample_chunk() -> AudioChunk {
    let mut state = 0x2545_F491_4F6C_DD1Du64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    AudioChunk {
        samples: (0..13).map(|_| (0..256).map(|_| next()).collect()).collect(),
        timestamp: 0.0,
        chunk_index: 0,
    }
}

/// Two static tones seen by the default array.
pub fn two_tone_scene(duration_s: f64) -> MultichannelSignal {
    let sources = two_tone_sources();
    synthesize_scene(
        &MicArray::two_ring(),
        &sources,
        &PropagationConfig::default(),
        duration_s,
        &SynthesisOptions::default(),
    )
    .expect("bench scene")
    .signal
}

pub fn two_tone_sources() -> [SourceSpec; 2] {
    [
        SourceSpec::tone("target", 2000.0, 0.25, Trajectory::fixed(Vec3::new(0.0, 0.0, 2.0))),
        SourceSpec::tone("interferer", 3000.0, 0.25, Trajectory::fixed(Vec3::new(2.0, 0.0, 2.0))),
    ]
}
