use std::fs;
use std::path::Path;
use std::process::Command;

use srcot::io::{csv_matrix, load_density, parse_csv_matrix, parse_pgm, pgm_p2, Manifest};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_srcot"))
}

fn write_pair(dir: &Path) -> (String, String) {
    let a = dir.join("a.csv");
    let b = dir.join("b.pgm");
    fs::write(&a, "2,2,0,0\n2,2,0,0\n0,0,0,0\n0,0,0,0\n").unwrap();
    fs::write(&b, "P2\n4 4\n255\n255 255 0 0\n255 255 0 0\n0 0 0 255\n0 0 255 255\n").unwrap();
    (a.to_str().unwrap().to_string(), b.to_str().unwrap().to_string())
}

#[test]
fn csv_output_round_trips_through_loader() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).exp() / 3.0).collect();
    let p = dir.path().join("frame.csv");
    fs::write(&p, csv_matrix(3, &values)).unwrap();
    let back = load_density(&p, 3, None).unwrap();
    for (i, v) in values.iter().enumerate() {
        assert_eq!(back[2 * i], *v);
        assert_eq!(back[2 * i + 1], *v);
    }
    let raw = parse_csv_matrix(&fs::read_to_string(&p).unwrap(), "frame.csv").unwrap();
    assert_eq!((raw.width, raw.height), (3, 3));
}

#[test]
fn pgm_output_round_trips() {
    let values: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
    let text = pgm_p2(4, 3, 255, &values, |v| v);
    let img = parse_pgm(text.as_bytes(), "x").unwrap();
    assert_eq!((img.width, img.height, img.maxval), (4, 3, Some(255)));
    for (p, v) in img.pixels.iter().zip(&values) {
        assert_eq!(*p, (v * 255.0).round());
    }
}

#[test]
fn upsampling_replicates_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.pgm");
    let mut raw = b"P5\n2 2\n255\n".to_vec();
    raw.extend_from_slice(&[255, 0, 51, 102]);
    fs::write(&p, raw).unwrap();
    let d = load_density(&p, 4, Some(2.0)).unwrap();
    let cell = |r: usize, c: usize| d[2 * (r * 4 + c)];
    assert_eq!(cell(0, 0), 2.0);
    assert_eq!(cell(1, 1), 2.0);
    assert_eq!(cell(0, 3), 0.0);
    assert!((cell(3, 0) - 0.4).abs() < 1e-15);
    assert!((cell(2, 3) - 0.8).abs() < 1e-15);
}

#[test]
fn cli_writes_complete_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pair(dir.path());
    let out = dir.path().join("run");
    let status = bin()
        .args(["--a", &a, "--b", &b, "--nx", "4", "--nt", "3", "--iters", "5", "--log-every", "0"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let manifest = Manifest::parse(&fs::read_to_string(out.join("manifest.txt")).unwrap());
    assert_eq!(manifest.get("outputs"), Some("complete"));
    assert_eq!(manifest.get("status"), Some("max_iters_reached"));
    assert_eq!(manifest.get("converged"), Some("false"));
    assert_eq!(manifest.get("iterations"), Some("5"));
    assert_eq!(manifest.get("nx"), Some("4"));
    assert_eq!(manifest.get("a_sha256").map(str::len), Some(64));
    for k in 0..=3 {
        assert!(out.join(format!("frame_{k:03}.pgm")).exists());
        assert!(out.join(format!("source_{k:03}.csv")).exists());
    }
    assert!(out.join("momentum_002.pgm").exists());
    assert!(!out.join("frame_004.pgm").exists());

    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iter,residual,energy,transport,source,mass_defect"));
    assert_eq!(lines.count(), 5);
    let profiles = fs::read_to_string(out.join("profiles.csv")).unwrap();
    assert_eq!(profiles.lines().next(), Some("t,mass,src_abs,src_pos,src_neg"));
    assert_eq!(profiles.lines().count(), 5);

    // the first frame is the initial density
    let first = load_density(&out.join("frame_000.csv"), 4, None).unwrap();
    let a_cells = load_density(Path::new(&a), 4, None).unwrap();
    assert_eq!(first, a_cells);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = write_pair(dir.path());
    let out = dir.path().join("same");
    let run = |args: &[&str]| bin().args(args).output().unwrap();

    // identical endpoints are a fixed point
    let o = run(&["--a", &a, "--b", &a, "--nx", "4", "--nt", "2", "--log-every", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--a", &a]).status.code(), Some(1));
    let o = run(&["--a", &a, "--b", &a, "--alpha", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha must lie in (0,2)"));
    assert_eq!(run(&["--a", "/nonexistent.pgm", "--b", &a]).status.code(), Some(1));

    let bad = dir.path().join("neg.csv");
    fs::write(&bad, "1,-1\n1,1\n").unwrap();
    assert_eq!(run(&["--a", bad.to_str().unwrap(), "--b", &a]).status.code(), Some(1));

    let o = run(&[
        "--a", &a, "--b", &a, "--nx", "2", "--nt", "2", "--source", "l1l1", "--log-every", "0", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pair(dir.path());
    let out = dir.path().join("cfg");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("a={a}\nb={b}\nnx=4\nnt=4\niters=3\ndelta=0.5\nlog-every=0\nout={}\n", out.display())).unwrap();
    let status = bin().args(["--config", cfg.to_str().unwrap(), "--nt", "2"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let m = Manifest::parse(&fs::read_to_string(out.join("manifest.txt")).unwrap());
    assert_eq!(m.get("nt"), Some("2"));
    assert_eq!(m.get("nx"), Some("4"));
    assert_eq!(m.get("delta"), Some("0.5"));
}
