//! Checks against independently computed reference values: brute-force sums,
//! naive DFTs and time-domain sample shifting.

use std::f64::consts::PI;

use visbeam::beamformer::{process_offline, AudioChunk, BeamformerState, FrameSpec};
use visbeam::dsp::rms;
use visbeam::evaluation::band_power;
use visbeam::geometry::{beampattern, DoaAngles, MicArray, PropagationConfig};
use visbeam::vision::triangulate_depth;
use visbeam::MultichannelSignal;

const FS: f64 = 8000.0;
const C: f64 = 343.0;

/// 13 mics: centre, 4 at 2.5 cm, 8 at 4.5 cm, first mic of each ring on +x.
fn two_ring_positions() -> Vec<[f64; 2]> {
    let mut p = vec![[0.0, 0.0]];
    for (r, n) in [(0.025, 4), (0.045, 8)] {
        for k in 0..n {
            let a = 2.0 * PI * k as f64 / n as f64;
            p.push([r * a.cos(), r * a.sin()]);
        }
    }
    p
}

fn unit(theta: f64, phi: f64) -> [f64; 3] {
    let v = [(PI - phi).tan(), theta.tan(), 1.0];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn brute_beampattern(look: (f64, f64), src: (f64, f64), f: f64) -> (f64, f64) {
    let (ul, us) = (unit(look.0, look.1), unit(src.0, src.1));
    let pos = two_ring_positions();
    let (mut re, mut im) = (0.0, 0.0);
    for p in &pos {
        let tl = -(p[0] * ul[0] + p[1] * ul[1]) / C;
        let ts = -(p[0] * us[0] + p[1] * us[1]) / C;
        let arg = 2.0 * PI * f * (tl - ts);
        re += arg.cos();
        im += arg.sin();
    }
    (re / pos.len() as f64, im / pos.len() as f64)
}

#[test]
fn beampattern_matches_brute_force_sum() {
    let arr = MicArray::two_ring();
    for (i, p) in arr.positions().iter().enumerate() {
        let q = two_ring_positions()[i];
        assert!((p.x - q[0]).abs() < 1e-15 && (p.y - q[1]).abs() < 1e-15 && p.z == 0.0);
    }
    let prop = PropagationConfig::new(C, FS).unwrap();
    let looks = [(0.0, PI), (0.3, 2.5), (-0.4, 3.9)];
    let srcs = [(0.0, 3.0 * PI / 4.0), (0.1, 3.3), (-0.7, 2.0)];
    for look in looks {
        for src in srcs {
            for f in [250.0, 1000.0, 2000.0, 3000.0, 3990.0] {
                let b = beampattern(&arr, &DoaAngles::new(look.0, look.1), &DoaAngles::new(src.0, src.1), f, &prop)
                    .unwrap();
                let (re, im) = brute_beampattern(look, src, f);
                assert!((b.re - re).abs() < 1e-13 && (b.im - im).abs() < 1e-13);
            }
        }
    }
}

#[test]
fn beampattern_golden_value() {
    // Broadside look, 45 degree source, 3 kHz.
    let (re, im) = brute_beampattern((0.0, PI), (0.0, 3.0 * PI / 4.0), 3000.0);
    let oracle = re.hypot(im);
    assert!((oracle - 0.5451371300958778).abs() < 1e-13);
    let b = beampattern(
        &MicArray::two_ring(),
        &DoaAngles::BROADSIDE,
        &DoaAngles::new(0.0, 3.0 * PI / 4.0),
        3000.0,
        &PropagationConfig::default(),
    )
    .unwrap();
    assert!((b.norm() - 0.5451371300958778).abs() < 1e-13);
}

/// Sum of exact-bin tones (period 256), a different mix per channel.
fn periodic_channels(m: usize, len: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|ch| {
            (0..len)
                .map(|n| {
                    [(16, 0.4), (64, 0.3), (96, 0.2), (101, 0.1)]
                        .iter()
                        .map(|(k, a)| {
                            let ph = 0.7 * ch as f64 + *k as f64 * 0.01;
                            a * (2.0 * PI * *k as f64 * n as f64 / 256.0 + ph).cos()
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

#[test]
fn frequency_domain_steering_matches_time_domain_shift() {
    let (m, len, hop) = (13, 256 * 40, 128);
    let x = periodic_channels(m, len);
    let delays_samples: Vec<i64> = (0..m as i64).map(|i| (i * 7) % 11 - 5).collect();
    let mut state = BeamformerState::new(FrameSpec::default(), m, FS).unwrap();
    state
        .set_delays(delays_samples.iter().map(|d| *d as f64 / FS).collect())
        .unwrap();
    let sig = MultichannelSignal::new(FS, x.clone()).unwrap();
    let framer = visbeam::ChunkFramer::new(&sig, FrameSpec::default());
    let out: Vec<f64> = framer.iter().flat_map(|c: AudioChunk| state.process_chunk(&c).unwrap()).collect();

    // Time-domain delay-and-sum: y[n] = 1/M sum_m x_m[n - H + d_m], periodic input.
    let oracle: Vec<f64> = (0..len)
        .map(|n| {
            x.iter()
                .zip(&delays_samples)
                .map(|(ch, d)| ch[(n as i64 - hop + d).rem_euclid(len as i64) as usize])
                .sum::<f64>()
                / m as f64
        })
        .collect();
    // Skip the first chunk, whose tail has no predecessor.
    let range = 256..len;
    let err: Vec<f64> = range.clone().map(|i| out[i] - oracle[i]).collect();
    let rel = rms(&err) / rms(&oracle[range]);
    assert!(rel < 1e-9, "relative rms error {rel:e}");
}

#[test]
fn single_channel_broadside_is_a_delay_line() {
    let len = 8000 * 3;
    let x: Vec<f64> = (0..len).map(|n| ((n * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    let sig = MultichannelSignal::mono(FS, x.clone()).unwrap();
    let arr = MicArray::new(vec![visbeam::Vec3::zeros()]).unwrap();
    let y = process_offline(&sig, &[], &arr, &PropagationConfig::default(), FrameSpec::default()).unwrap();
    let y = y.channel(0);
    assert!(y[..128].iter().all(|v| v.abs() < 1e-12));
    let err: Vec<f64> = (128..len).map(|n| y[n] - x[n - 128]).collect();
    assert!(rms(&err) / rms(&x) < 1e-10);
}

/// One-sided Hann periodogram by direct O(N^2) DFT, integrated over the band.
fn naive_band_power(x: &[f64], centre: f64, bw: f64) -> f64 {
    let n = x.len();
    let w: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let energy: f64 = w.iter().map(|v| v * v).sum();
    let mut total = 0.0;
    for k in 0..=n / 2 {
        let f = k as f64 * FS / n as f64;
        if f < centre - bw / 2.0 - 1e-9 || f > centre + bw / 2.0 + 1e-9 {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (i, (v, wi)) in x.iter().zip(&w).enumerate() {
            let a = -2.0 * PI * (k * i) as f64 / n as f64;
            re += v * wi * a.cos();
            im += v * wi * a.sin();
        }
        let mut psd = (re * re + im * im) / (FS * energy);
        if k != 0 && k != n / 2 {
            psd *= 2.0;
        }
        total += psd * FS / n as f64;
    }
    total
}

#[test]
fn band_power_matches_naive_periodogram() {
    let n = 1024;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / FS;
            0.7 * (2.0 * PI * 2000.0 * t).sin() + 0.2 * (2.0 * PI * 2987.0 * t + 0.3).cos() + 0.05 * ((i * 31) % 17) as f64 / 17.0
        })
        .collect();
    for (c, bw) in [(2000.0, 100.0), (3000.0, 100.0), (1000.0, 300.0), (500.0, 50.0)] {
        let got = band_power(&x, FS, c, bw, n).unwrap();
        let want = naive_band_power(&x, c, bw);
        assert!((got - want).abs() <= 1e-10 * want.max(1e-12), "{c} Hz: {got} vs {want}");
    }
}

#[test]
fn unit_sine_band_power_is_half() {
    let x: Vec<f64> = (0..8000 * 4).map(|i| (2.0 * PI * 2000.0 * i as f64 / FS).sin()).collect();
    let p = band_power(&x, FS, 2000.0, 100.0, 1024).unwrap();
    assert!((p - 0.5).abs() < 0.005, "{p}");
}

#[test]
fn triangulation_is_exact_on_rationals() {
    assert_eq!(triangulate_depth(700.0, 0.12, 42.0).unwrap(), 2.0);
    assert_eq!(triangulate_depth(800.0, 0.25, 50.0).unwrap(), 4.0);
    assert_eq!(triangulate_depth(1000.0, 0.5, 125.0).unwrap(), 4.0);
}
