mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use image::{Rgb, RgbImage};

use multiview::imageio::{self, ImageIoError, Preprocess};
use multiview::inference::{predict, Backend, FileRasters, MethodSpec};
use multiview::io::{self, IoError};
use multiview::report::ExperimentReport;
use multiview::scorer::{ScoreItem, Scorer, ScorerError, ScorerSpec};
use multiview::synth::{self, SynthMode, SynthSpec};
use multiview::{ImageRef, ImageSource, StreamKey};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multiview"))
}

fn script(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    }
    path.display().to_string()
}

#[test]
fn manifest_round_trip_on_synthetic_datasets() {
    for seed in 0..20u64 {
        let spec = SynthSpec {
            n_lesions: 10 + seed as usize,
            images_per_lesion: 1 + (seed as usize % 6),
            population_samples: 100,
            ..SynthSpec::default()
        };
        let data = synth::generate(&spec, &mut StreamKey::new(seed, "rt").rng()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        io::write_manifest(&data.dataset, &path).unwrap();
        assert_eq!(io::parse_manifest(&path).unwrap(), data.dataset);
        let scores = dir.path().join("s.csv");
        io::write_score_table(&data.scores, &scores).unwrap();
        assert_eq!(io::read_score_table(&scores).unwrap(), data.scores);
    }
}

#[test]
fn black_border_is_cropped_before_resizing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("border.png");
    let img = RgbImage::from_fn(400, 400, |x, y| {
        if (50..350).contains(&x) && (50..350).contains(&y) {
            Rgb([(x % 200) as u8 + 40, (y % 200) as u8 + 40, 128])
        } else {
            Rgb([2, 2, 2])
        }
    });
    img.save(&path).unwrap();
    let r = imageio::load_raster(&path, &Preprocess::default()).unwrap();
    assert_eq!((r.width(), r.height()), (300, 300));
    // Interior pixel (60, 70) lands at (10, 20) with no resampling.
    let expected = [100.0 / 255.0, 110.0 / 255.0, 128.0 / 255.0];
    for (c, e) in expected.iter().enumerate() {
        assert!((r.get(10, 20, c) - e).abs() < 1e-6);
    }
}

#[test]
fn unreadable_images_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.png");
    let mut bytes = Vec::new();
    RgbImage::new(20, 20)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        imageio::load_raster(&path, &Preprocess::default()),
        Err(ImageIoError::UnreadableImage { .. })
    ));
}

#[test]
fn external_scorer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    // Scores each image by the length of its path modulo 10, as tenths.
    let cmd = script(dir.path(), "score.sh", r#"while read -r p; do echo "0.$(( ${#p} % 10 ))"; done"#);
    let spec = ScorerSpec::ExternalProcess {
        command: vec![cmd],
        workdir: None,
    };
    let scorer = spec.build().unwrap();
    let img_path = dir.path().join("a.png");
    imageio::save_png(&multiview::raster::Raster::filled(4, 4, 0.5), &img_path).unwrap();
    let image = ImageRef {
        lesion_id: "A".into(),
        index: 0,
        source: ImageSource::Path(img_path.clone()),
    };
    let scores = scorer.score_batch(&[ScoreItem::Stored { image: &image, raster: None }]).unwrap();
    let expected = (img_path.display().to_string().len() % 10) as f64 / 10.0;
    assert_eq!(scores[0].value(), expected);

    // Generated views are handed over as temporary PNG files.
    let rasters = FileRasters {
        base_dir: None,
        preprocess: Preprocess {
            size: 8,
            ..Preprocess::default()
        },
    };
    let backend = Backend::new(&scorer, &rasters);
    let method = MethodSpec::mv_artificial(multiview::augment::Preset::Mild, 3);
    let p = predict(&method, &image, &[], &backend, &mut StreamKey::new(1, "x").rng()).unwrap();
    assert!((0.0..=1.0).contains(&p.value()));
}

#[test]
fn external_scorer_protocol_violations() {
    let dir = tempfile::tempdir().unwrap();
    let image = ImageRef {
        lesion_id: "A".into(),
        index: 0,
        source: ImageSource::Path(dir.path().join("a.png")),
    };
    let items = [ScoreItem::Stored { image: &image, raster: None }];
    for (name, body) in [
        ("short.sh", "cat > /dev/null"),
        ("garbage.sh", "cat > /dev/null; echo nope"),
        ("range.sh", "cat > /dev/null; echo 1.5"),
        ("fail.sh", "cat > /dev/null; echo 0.5; exit 4"),
    ] {
        let scorer = Scorer::External(multiview::scorer::ExternalScorer::new(
            vec![script(dir.path(), name, body)],
            None,
        ));
        let err = scorer.score_batch(&items).unwrap_err();
        assert!(matches!(err, ScorerError::Protocol(_)), "{name}: {err}");
    }
}

#[test]
fn cli_synth_evaluate_and_rerender() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| bin().current_dir(d).args(args).output().unwrap();

    let out = run(&["synth", "--lesions", "80", "--mode", "rasters", "--seed", "5", "--out", "syn"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("syn/images").is_dir());

    let out = run(&["validate", "syn/manifest.csv"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("80 lesions"));

    let args = [
        "evaluate", "syn/manifest.csv", "--image-size", "16", "--bootstrap", "50", "--repeats", "2", "--seed", "9",
    ];
    let out = run(&[&args[..], &["--out", "a"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[&args[..], &["--out", "b"]].concat());
    assert!(out.status.success());
    for f in ["report.json", "report.md", "report.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let report: ExperimentReport = io::read_json(&d.join("a/report.json")).unwrap();
    assert_eq!(report.config.seed, 9);
    assert_eq!(report.config.n_bootstrap, 50);
    assert_eq!(report.repeats.len(), 2);

    let out = run(&["report", "a/report.json", "--out", "c"]);
    assert!(out.status.success());
    assert_eq!(fs::read(d.join("a/report.md")).unwrap(), fs::read(d.join("c/report.md")).unwrap());

    let out = run(&["sweep", "syn/manifest.csv", "--scores", "syn/scores.csv", "--bootstrap", "50", "--out", "s"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn cli_score_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| bin().current_dir(d).args(args).output().unwrap();
    assert!(run(&["synth", "--lesions", "20", "--mode", "rasters", "--out", "syn"]).status.success());
    let out = run(&["score", "syn/manifest.csv", "--image-size", "16", "--out", "scored"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scored = io::read_score_table(&d.join("scored/scores.csv")).unwrap();
    let intended = io::read_score_table(&d.join("syn/scores.csv")).unwrap();
    assert_eq!(scored.len(), 120);
    // PNG quantization moves the builtin score by at most 12 * 0.5 / 255 in logit.
    for (id, idx, p) in scored.iter() {
        assert!((p.value() - intended.get(id, idx).unwrap().value()).abs() < 0.02);
    }
}

#[test]
fn cli_augment_writes_views() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    imageio::save_png(&multiview::raster::Raster::filled(10, 10, 0.6), &d.join("x.png")).unwrap();
    let out = bin()
        .current_dir(d)
        .args(["augment", "x.png", "--views", "3", "--image-size", "10", "--preset", "strong", "--out", "views"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for v in 0..3 {
        assert!(d.join(format!("views/x_strong_{v}.png")).is_file());
    }
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.csv"), "lesion_id,image_index,source\nA,0,scores\n").unwrap();
    let out = bin().current_dir(d).args(["validate", "bad.csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label"));

    fs::write(d.join("gap.csv"), "lesion_id,image_index,label,source\nA,0,nevus,scores\nA,2,nevus,scores\n").unwrap();
    let out = bin().current_dir(d).args(["validate", "gap.csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let status = bin()
        .current_dir(d)
        .args(["synth", "--lesions", "30", "--mode", "rasters", "--out", "syn"])
        .status()
        .unwrap();
    assert!(status.success());
    let broken = script(d, "broken.sh", "cat > /dev/null; echo not-a-number");
    let out = bin()
        .current_dir(d)
        .args(["evaluate", "syn/manifest.csv", "--bootstrap", "10", "--external", &broken])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_score_table_is_an_io_error() {
    let err = ScorerSpec::ScoreTable {
        path: "/nonexistent/scores.csv".into(),
    }
    .build()
    .unwrap_err();
    assert!(matches!(err, IoError::Io { .. }));
}

#[test]
fn raster_backed_synth_survives_png_export() {
    let spec = SynthSpec {
        n_lesions: 12,
        mode: SynthMode::RasterBacked,
        population_samples: 100,
        ..SynthSpec::default()
    };
    let data = synth::generate(&spec, &mut StreamKey::new(3, "png").rng()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    io::write_synth(&data, dir.path()).unwrap();
    let dataset = io::parse_manifest(&dir.path().join("manifest.csv")).unwrap();
    let rasters = io::load_rasters(
        &dataset,
        Some(dir.path()),
        &Preprocess {
            size: 16,
            ..Preprocess::default()
        },
    )
    .unwrap();
    assert_eq!(rasters.len(), 72);
}
