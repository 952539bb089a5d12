use std::path::Path;

use visbeam::config::{Overrides, ScenarioConfig};
use visbeam::pipeline::PipelineMode;
use visbeam::Error;

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const TWO_TONE: &str = r#"
duration_s = 1.0

[[sources]]
label = "a"
waveform = { kind = "tone", freq_hz = 2000.0, amplitude = 0.2 }
trajectory = [{ t = 0.0, position = [0.0, 0.0, 2.0] }]

[[sources]]
label = "b"
waveform = { kind = "tone", freq_hz = 3000.0, amplitude = 0.2 }
trajectory = [{ t = 0.0, position = [1.0, 0.0, 2.0] }]
"#;

fn parse(text: &str) -> Result<ScenarioConfig, visbeam::ConfigError> {
    match ScenarioConfig::from_toml_str(text, Path::new(".")) {
        Ok(c) => Ok(c),
        Err(Error::Config(e)) => Err(e),
        Err(e) => panic!("expected a config error, got {e}"),
    }
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            n += 1;
        }
    }
    assert!(n >= 4);
}

#[test]
fn minimal_config_uses_defaults() {
    let cfg = parse(TWO_TONE).unwrap();
    assert_eq!(cfg.array().unwrap().len(), 13);
    assert_eq!(cfg.frame_spec().unwrap().hop(), 128);
    assert_eq!(cfg.propagation().unwrap().sample_rate(), 8000.0);
    assert_eq!(cfg.pipeline.mode, PipelineMode::AsFastAsPossible);
    assert!(cfg.detections().unwrap().is_empty());
    let scene = cfg.scene().unwrap();
    assert_eq!((scene.signal.num_channels(), scene.signal.len()), (13, 8000));
}

#[test]
fn tone_above_nyquist_names_the_rule_and_line() {
    let text = TWO_TONE.replace("freq_hz = 3000.0", "freq_hz = 5000.0");
    let e = parse(&text).unwrap_err();
    assert!(e.message.contains("Nyquist"), "{e}");
    assert_eq!(e.key, "sources[1].waveform.freq_hz");
    let line = text.lines().position(|l| l.contains("5000.0")).unwrap() + 1;
    assert_eq!(e.line, Some(line), "{e}");
    assert!(e.to_string().starts_with(&format!("line {line}")));
}

#[test]
fn unknown_keys_are_rejected_with_line() {
    let text = TWO_TONE.replace("duration_s = 1.0", "duration_s = 1.0\ndurration = 2.0");
    let e = parse(&text).unwrap_err();
    assert!(e.message.contains("durration"), "{e}");
    assert_eq!(e.line, Some(3));

    let text = format!("{TWO_TONE}\n[pipeline]\nmode = \"as_fast_as_possible\"\nhistory_capacty = 3\n");
    let e = parse(&text).unwrap_err();
    assert!(e.message.contains("history_capacty"), "{e}");
    assert!(e.line.is_some());
}

#[test]
fn hop_must_be_half_the_frame() {
    let text = format!("{TWO_TONE}\n[frame]\nframe_length = 256\nhop = 100\n");
    let e = parse(&text).unwrap_err();
    assert!(e.key.starts_with("frame"), "{e}");
    assert!(e.line.is_some());
}

#[test]
fn missing_duration_is_reported() {
    let e = parse("seed = 1\n").unwrap_err();
    assert!(e.message.contains("duration_s"), "{e}");
}

#[test]
fn unknown_steer_label_is_rejected() {
    let text = format!("{TWO_TONE}\n[detection]\nsteer_label = \"nobody\"\n");
    let e = parse(&text).unwrap_err();
    assert_eq!(e.key, "detection.steer_label");
}

#[test]
fn overrides_are_applied_and_revalidated() {
    let mut cfg = parse(TWO_TONE).unwrap();
    cfg.apply(&Overrides {
        seed: Some(99),
        output_dir: Some("elsewhere".into()),
        frame_length: Some(512),
        hop: None,
        mode: Some(PipelineMode::RealtimePaced),
    })
    .unwrap();
    assert_eq!(cfg.seed, 99);
    assert_eq!(cfg.output_dir(), Path::new("elsewhere"));
    assert_eq!(cfg.frame_spec().unwrap().hop(), 256);
    assert_eq!(cfg.pipeline.mode, PipelineMode::RealtimePaced);

    let bad = Overrides { hop: Some(100), ..Default::default() };
    assert!(matches!(cfg.apply(&bad), Err(Error::Config(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let e = ScenarioConfig::load(Path::new("/definitely/not/here.toml")).unwrap_err();
    assert!(matches!(e, Error::Io { .. }), "{e:?}");
}

#[test]
fn generated_detections_follow_the_seed() {
    let text = format!("{TWO_TONE}\n[[detection.targets]]\nlabel = \"a\"\n");
    let a = parse(&text).unwrap();
    let mut b = a.clone();
    assert_eq!(a.detections().unwrap(), b.detections().unwrap());
    b.seed += 1;
    assert_ne!(a.detections().unwrap(), b.detections().unwrap());
    assert_eq!(a.detections().unwrap().len(), 30);
    assert_eq!(a.steer_label().as_deref(), Some("a"));
}
