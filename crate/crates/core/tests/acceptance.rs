//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! The realtime latency run lasts 600 s by default; set
//! `VISBEAM_ACCEPT_REALTIME_S` to shorten it for local iteration.

use std::f64::consts::PI;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visbeam::beamformer::{process_offline, AudioChunk, BeamformerState, ChunkFramer, FrameSpec};
use visbeam::config::ScenarioConfig;
use visbeam::detection::{generate_detections, TargetScript, TrajectoryScript};
use visbeam::dsp::rms;
use visbeam::evaluation::{run_experiment, write_experiment_outputs, ExperimentKind, ExperimentResult};
use visbeam::geometry::{angle_between, beampattern, DoaAngles, MicArray, PropagationConfig, Vec3};
use visbeam::pipeline::{lookup_closest_not_future, run_pipeline, DoaHistory, PipelineMode, PipelineSettings, Stage};
use visbeam::scene::Trajectory;
use visbeam::vision::{array_relative, detection_to_doa, triangulate_depth, CameraModel, MountingOffset};
use visbeam::MultichannelSignal;

const FS: f64 = 8000.0;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn prop() -> PropagationConfig {
    PropagationConfig::new(343.0, FS).unwrap()
}

fn random_doa(rng: &mut ChaCha8Rng) -> DoaAngles {
    DoaAngles::new(rng.random_range(-1.4..1.4), rng.random_range(PI / 2.0 + 0.02..1.5 * PI - 0.02))
}

fn cola_pass_through() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let len = 8000 * 12;
    let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let arr = MicArray::new(vec![Vec3::zeros()]).map_err(|e| e.to_string())?;
    let sig = MultichannelSignal::mono(FS, x.clone()).unwrap();
    let y = process_offline(&sig, &[], &arr, &prop(), FrameSpec::default()).map_err(|e| e.to_string())?;
    let y = y.channel(0);
    let err: Vec<f64> = (128..len).map(|n| y[n] - x[n - 128]).collect();
    let rel = rms(&err) / rms(&x[..len - 128]);
    check(rel < 1e-10, format!("12 s of audio, relative RMS error {rel:.2e} (bound 1e-10)"))
}

fn beampattern_unity_and_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_unity, mut worst_mag) = (0.0f64, 0.0f64);
    let cases = 10_000;
    for _ in 0..cases {
        let n = rng.random_range(1..=16);
        let mut pos = Vec::new();
        while pos.len() < n {
            let p = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
            if pos.iter().all(|q: &Vec3| (q - p).norm() > 1e-4) {
                pos.push(p);
            }
        }
        let arr = MicArray::new(pos).map_err(|e| e.to_string())?;
        let (look, src) = (random_doa(&mut rng), random_doa(&mut rng));
        let f = rng.random_range(0.0..=4000.0);
        let unity = beampattern(&arr, &look, &look, f, &prop()).map_err(|e| e.to_string())?;
        let b = beampattern(&arr, &look, &src, f, &prop()).map_err(|e| e.to_string())?;
        worst_unity = worst_unity.max((unity - 1.0).norm());
        worst_mag = worst_mag.max(b.norm());
    }
    check(
        worst_unity < 1e-12 && worst_mag <= 1.0 + 1e-12,
        format!("{cases} tuples, max |B(look,look)-1| = {worst_unity:.1e}, max |B| = {worst_mag:.15}"),
    )
}

/// Brute-force `|B|` for the 13-mic array, independent of the library.
fn brute_gain(look: [f64; 3], src: [f64; 3], f: f64) -> f64 {
    let mut pos = vec![[0.0, 0.0]];
    for (r, n) in [(0.025, 4), (0.045, 8)] {
        for k in 0..n {
            let a = 2.0 * PI * k as f64 / n as f64;
            pos.push([r * a.cos(), r * a.sin()]);
        }
    }
    let norm = |v: [f64; 3]| {
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / l, v[1] / l, v[2] / l]
    };
    let (ul, us) = (norm(look), norm(src));
    let (mut re, mut im) = (0.0, 0.0);
    for p in &pos {
        let dt = (p[0] * (us[0] - ul[0]) + p[1] * (us[1] - ul[1])) / 343.0;
        re += (2.0 * PI * f * dt).cos();
        im += (2.0 * PI * f * dt).sin();
    }
    re.hypot(im) / pos.len() as f64
}

fn steering_oracle(r: &ExperimentResult) -> Outcome {
    let min_sep = r.separation_deg.iter().copied().fold(f64::INFINITY, f64::min);
    let predicted = 20.0 * (brute_gain([0.0, 0.0, 2.0], [0.0, 0.0, 2.0], 2000.0)
        / brute_gain([0.0, 0.0, 2.0], [2.0, 0.0, 2.0], 3000.0))
    .log10();
    let measured = r.summary.mean_delta_db.ok_or("no ΔSIR windows")?;
    let lib = r.summary.predicted_delta_db.ok_or("no library prediction")?;
    check(
        min_sep >= 40.0 && (measured - predicted).abs() <= 1.0 && (lib - predicted).abs() < 1e-9,
        format!("separation {min_sep:.1} deg, mean ΔSIR {measured:.3} dB vs predicted {predicted:.3} dB"),
    )
}

fn anechoic_trend(r: &ExperimentResult) -> Outcome {
    let near5 = r.mean_delta_near(5.0, 2.5).ok_or("no windows near 5 deg")?;
    let near40 = r.mean_delta_near(40.0, 2.5).ok_or("no windows near 40 deg")?;
    let wide: Vec<f64> = r
        .delta
        .values
        .iter()
        .zip(&r.separation_deg)
        .filter(|(_, s)| **s >= 20.0)
        .filter_map(|(v, _)| *v)
        .collect();
    let frac = wide.iter().filter(|v| **v >= 0.0).count() as f64 / wide.len().max(1) as f64;
    check(
        near5 < near40 && frac >= 0.9 && !wide.is_empty(),
        format!(
            "ΔSIR {near5:.2} dB at 5 deg < {near40:.2} dB at 40 deg; {:.1}% of {} windows >= 0 dB while separation >= 20 deg",
            100.0 * frac,
            wide.len()
        ),
    )
}

fn room_trend(tones: &ExperimentResult, noise: &ExperimentResult) -> Outcome {
    let a = tones.summary.median_delta_db.ok_or("tone-tone series empty")?;
    let b = noise.summary.median_delta_db.ok_or("tone+noise series empty")?;
    check(
        a > 0.0 && b > 0.0,
        format!("median ΔSIR {a:.2} dB (tone-tone), {b:.2} dB (tone + white noise) at 20 dB SNR"),
    )
}

fn frequency_time_cross_check() -> Outcome {
    let (m, len, hop) = (13usize, 256 * 64, 128i64);
    let x: Vec<Vec<f64>> = (0..m)
        .map(|ch| {
            (0..len)
                .map(|n| {
                    [(8, 0.3), (64, 0.4), (96, 0.2), (127, 0.1)]
                        .iter()
                        .map(|(k, a)| a * (2.0 * PI * *k as f64 * n as f64 / 256.0 + 0.9 * ch as f64).sin())
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let d: Vec<i64> = (0..m).map(|_| rng.random_range(-6..=6)).collect();
        let mut state = BeamformerState::new(FrameSpec::default(), m, FS).map_err(|e| e.to_string())?;
        state.set_delays(d.iter().map(|v| *v as f64 / FS).collect()).map_err(|e| e.to_string())?;
        let sig = MultichannelSignal::new(FS, x.clone()).unwrap();
        let framer = ChunkFramer::new(&sig, FrameSpec::default());
        let out: Vec<f64> = framer.iter().flat_map(|c: AudioChunk| state.process_chunk(&c).unwrap()).collect();
        let oracle: Vec<f64> = (0..len)
            .map(|n| {
                x.iter()
                    .zip(&d)
                    .map(|(ch, dm)| ch[(n as i64 - hop + dm).rem_euclid(len as i64) as usize])
                    .sum::<f64>()
                    / m as f64
            })
            .collect();
        let err: Vec<f64> = (256..len).map(|i| out[i] - oracle[i]).collect();
        worst = worst.max(rms(&err) / rms(&oracle[256..]));
    }
    check(worst < 1e-9, format!("20 integer-delay sets, worst relative RMS {worst:.2e} (bound 1e-9)"))
}

fn geometry_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let points = 10_000;
    for i in 0..points {
        let f = rng.random_range(400.0..1400.0);
        let cam = CameraModel::pinhole(f, rng.random_range(500.0..800.0), rng.random_range(300.0..420.0))
            .map_err(|e| e.to_string())?;
        let h = MountingOffset(rng.random_range(-0.2..0.2));
        let z: f64 = rng.random_range(0.5..8.0);
        let p = Vec3::new(z * rng.random_range(-0.5..0.5), z * rng.random_range(-0.3..0.3), z);
        let mut target = TargetScript::ideal("t", Trajectory::fixed(p));
        target.latency_s = 0.0;
        let script = TrajectoryScript { targets: vec![target], duration_s: 1.0 / target_fps() };
        let ev = generate_detections(&script, &cam, i).map_err(|e| e.to_string())?;
        let [ev] = ev.as_slice() else {
            return Err(format!("expected one detection, got {}", ev.len()));
        };
        let u = detection_to_doa(&cam, h, ev)
            .and_then(|d| d.unit_vector())
            .map_err(|e| e.to_string())?;
        worst = worst.max(angle_between(&u, &array_relative(&p, h)));
    }
    let exact = [(700.0, 0.12, 42.0, 2.0), (800.0, 0.25, 50.0, 4.0), (1000.0, 0.5, 125.0, 4.0)]
        .iter()
        .all(|(f, b, d, z)| triangulate_depth(*f, *b, *d).ok() == Some(*z));
    check(
        worst < 1e-9 && exact,
        format!("{points} points, worst direction error {worst:.2e} rad; stereo depth exact: {exact}"),
    )
}

fn target_fps() -> f64 {
    visbeam::detection::DEFAULT_FPS
}

fn closest_not_future(dynamic: &ExperimentResult) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cases = 10_000;
    for case in 0..cases {
        let cap: usize = rng.random_range(1..=64);
        let n: usize = rng.random_range(0..100);
        let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        ts.sort_by(f64::total_cmp);
        let mut hist = DoaHistory::new(cap).unwrap();
        for t in &ts {
            hist.push(*t, DoaAngles::BROADSIDE).unwrap();
        }
        let q = rng.random_range(-1.0..11.0);
        let want = ts[n.saturating_sub(cap)..].iter().copied().filter(|t| *t <= q).reduce(f64::max);
        let got = lookup_closest_not_future(&hist, q).map(|(t, _)| t);
        if got != want {
            return Err(format!("case {case}: got {got:?}, want {want:?}"));
        }
    }
    let log = &dynamic.pipeline.steering_log;
    let violations = dynamic.pipeline.causality_violations();
    check(
        violations == 0 && !log.is_empty(),
        format!("{cases} random histories agree; {} logged chunks, {violations} causality violations", log.len()),
    )
}

fn beamforming_cost_ms() -> Result<f64, String> {
    let arr = MicArray::two_ring();
    let mut state = BeamformerState::new(FrameSpec::default(), 13, FS).map_err(|e| e.to_string())?;
    state.steer(&DoaAngles::new(0.2, 2.7), &arr, &prop()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let chunk = AudioChunk {
        samples: (0..13).map(|_| (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        timestamp: 0.0,
        chunk_index: 0,
    };
    for _ in 0..200 {
        state.process_chunk(&chunk).unwrap();
    }
    let n = 20_000;
    let t0 = Instant::now();
    for _ in 0..n {
        std::hint::black_box(state.process_chunk(std::hint::black_box(&chunk)).unwrap());
    }
    Ok(t0.elapsed().as_secs_f64() * 1e3 / n as f64)
}

fn realtime_run(seconds: f64) -> Result<(f64, f64, usize), String> {
    let cfg = config("anechoic_dynamic.toml");
    let scene = cfg.scene().map_err(|e| e.to_string())?;
    let inputs = cfg.pipeline_inputs(scene.signal).map_err(|e| e.to_string())?;
    let settings = PipelineSettings {
        mode: PipelineMode::RealtimePaced,
        warmup_s: 10.0,
        run_duration_s: Some(seconds),
        ..cfg.pipeline.clone()
    };
    let rep = run_pipeline(&inputs, &settings).map_err(|e| e.to_string())?;
    let stats = rep.stage_stats();
    let mean = |stage| stats.iter().find(|(s, _)| *s == stage).and_then(|(_, s)| s.as_ref()).map(|s| s.mean_ms);
    Ok((
        mean(Stage::AudioE2e).ok_or("no audio records after warm-up")?,
        mean(Stage::Beamforming).ok_or("no beamforming records")?,
        rep.causality_violations(),
    ))
}

fn latency_budget(realtime: Result<(f64, f64, usize), String>, seconds: f64) -> Outcome {
    let bf = beamforming_cost_ms()?;
    let (audio, bf_pipeline, violations) = realtime?;
    check(
        bf < 2.0 && (32.0..100.0).contains(&audio) && violations == 0,
        format!(
            "beamforming {bf:.4} ms per 13x256 chunk (RTF {:.4}); {seconds:.0} s realtime run: audio e2e mean {audio:.2} ms, in-pipeline beamforming {bf_pipeline:.4} ms",
            bf / 32.0
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = config("anechoic_dynamic.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let r = run_experiment(ExperimentKind::AnechoicDynamic, &cfg).map_err(|e| e.to_string())?;
        write_experiment_outputs(&r, d.path()).map_err(|e| e.to_string())?;
    }
    let files = ["beamformed.wav", "steering_log.csv", "sir_bf.csv", "sir_nbf.csv", "delta_sir.csv"];
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        if a != b || a.is_empty() {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} byte-identical across two runs", files.join(", ")))
}

fn main() -> ExitCode {
    let seconds: f64 = std::env::var("VISBEAM_ACCEPT_REALTIME_S")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(600.0);
    let started = Instant::now();
    let realtime = std::thread::spawn(move || realtime_run(seconds));

    let experiment = |name: &str, kind| run_experiment(kind, &config(name)).map_err(|e| e.to_string());
    let fixed = experiment("anechoic_static.toml", ExperimentKind::AnechoicStatic);
    let dynamic = experiment("anechoic_dynamic.toml", ExperimentKind::AnechoicDynamic);
    let room_tones = experiment("room_dynamic_tones.toml", ExperimentKind::RoomDynamic);
    let room_noise = experiment("room_dynamic_noise.toml", ExperimentKind::RoomDynamic);

    let mut results: Vec<(&str, Outcome)> = vec![
        ("COLA pass-through", cola_pass_through()),
        ("beampattern unity and bound", beampattern_unity_and_bound()),
        ("steering oracle equivalence", fixed.as_ref().map_err(Clone::clone).and_then(steering_oracle)),
        ("anechoic dynamic trend", dynamic.as_ref().map_err(Clone::clone).and_then(anechoic_trend)),
        ("room dynamic trend", match (&room_tones, &room_noise) {
            (Ok(a), Ok(b)) => room_trend(a, b),
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        }),
        ("frequency/time cross-check", frequency_time_cross_check()),
        ("geometry round-trip", geometry_round_trip()),
        ("closest-not-future contract", dynamic.as_ref().map_err(Clone::clone).and_then(closest_not_future)),
    ];
    let realtime = realtime.join().unwrap_or_else(|_| Err("realtime run panicked".into()));
    results.push(("latency budget", latency_budget(realtime, seconds)));
    results.push(("determinism", determinism()));

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
