//! End-to-end checks of the command-line interface: deterministic reruns,
//! write-once outputs, config plumbing, and error reporting.

use std::path::Path;
use std::process::Command;

fn hamflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hamflow"))
}

fn read(dir: &Path, pattern: &str, file: &str) -> String {
    let sub = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with(pattern))
        .unwrap_or_else(|| panic!("no {pattern}* under {}", dir.display()));
    std::fs::read_to_string(sub.path().join(file)).unwrap()
}

#[test]
fn classify_and_rerun_determinism() {
    let tmp = tempdir("cli-classify");
    let out = tmp.join("runs");
    let status = hamflow()
        .args(["classify", "--preset", "cellular_sine", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("\"Cellular\""));
    let first = read(&out, "classify-", "classify.json");
    assert!(first.contains("\"schema_version\": 1"));
    assert!(first.contains("\"n_saddles\": 4"));

    // Byte-identical rerun into the same content-addressed directory.
    let status = hamflow()
        .args(["classify", "--preset", "cellular_sine", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success());
    let second = read(&out, "classify-", "classify.json");
    assert_eq!(first, second);
}

#[test]
fn scaling_outputs_are_byte_identical_across_reruns() {
    let tmp = tempdir("cli-scaling");
    let out = tmp.join("runs");
    // A deliberately tiny, fast configuration; determinism is the point.
    let args = |out: &Path| {
        let mut c = hamflow();
        c.args([
            "scaling",
            "--preset",
            "shear",
            "--seed",
            "5",
            "--set",
            "scaling.epsilons=0.4,0.2,0.1",
            "--set",
            "scaling.n_paths=200",
            "--set",
            "effdiff.t_final=20",
            "--set",
            "scaling.method=msd",
            "--out",
        ])
        .arg(out);
        c
    };
    let o1 = args(&out).output().unwrap();
    assert!(o1.status.success(), "{}", String::from_utf8_lossy(&o1.stderr));
    let csv1 = read(&out, "scaling-", "scaling.csv");
    let gp1 = read(&out, "scaling-", "scaling.gp");

    let out2 = tmp.join("runs2");
    let o2 = args(&out2).output().unwrap();
    assert!(o2.status.success());
    let csv2 = read(&out2, "scaling-", "scaling.csv");
    let gp2 = read(&out2, "scaling-", "scaling.gp");
    assert_eq!(csv1, csv2, "scaling CSV must be byte-identical for a fixed seed");
    assert_eq!(gp1, gp2);
    assert!(csv1.starts_with("epsilon,D11,D22,D12,"), "header row mandatory");
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempdir("cli-config");
    let cfg_path = tmp.join("exp.cfg");
    std::fs::write(
        &cfg_path,
        "preset = open_channel\nseed = 11\n[kernel]\nbins_per_edge = 8\nmc_paths = 2000\n",
    )
    .unwrap();
    let out = tmp.join("runs");
    let o = hamflow()
        .args(["kernel", "--config"])
        .arg(&cfg_path)
        .args(["--preset", "cellular_sine", "--out"]) // flag overrides file
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg_text = read(&out, "kernel-", "config.txt");
    assert!(cfg_text.contains("preset = cellular_sine"), "flag must override file");
    assert!(cfg_text.contains("kernel.bins_per_edge = 8"));
}

#[test]
fn invalid_config_and_unknown_preset_fail_loudly() {
    let tmp = tempdir("cli-errors");
    let out = tmp.join("runs");
    let o = hamflow()
        .args(["classify", "--preset", "nope", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));

    let o = hamflow()
        .args(["chain", "--preset", "cellular_sine", "--set", "alpha1=0.6", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha1"), "stderr names the violated precondition: {err}");

    // Chain on an open-channel flow is a module error surfaced with its name.
    let o = hamflow()
        .args(["chain", "--preset", "open_channel", "--set", "chain.n_steps=10", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("not cellular"));
}

#[test]
fn resolved_config_reruns_to_identical_results() {
    // The config embedded in an output directory re-runs to the same
    // content-addressed directory with identical files.
    let tmp = tempdir("cli-roundtrip");
    let out = tmp.join("runs");
    let o = hamflow()
        .args([
            "kernel",
            "--preset",
            "cellular_sine",
            "--seed",
            "3",
            "--set",
            "kernel.mc_paths=2000",
            "--set",
            "kernel.bins_per_edge=8",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.file_name().to_string_lossy().starts_with("kernel-"))
        .unwrap()
        .path();
    let first = std::fs::read_to_string(dir.join("kernel.json")).unwrap();

    let out2 = tmp.join("runs2");
    let o = hamflow()
        .args(["kernel", "--config"])
        .arg(dir.join("config.txt"))
        .arg("--out")
        .arg(&out2)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let second = read(&out2, "kernel-", "kernel.json");
    assert_eq!(first, second);
}

#[test]
fn effdiff_trajectory_dump() {
    let tmp = tempdir("cli-dump");
    let out = tmp.join("runs");
    let o = hamflow()
        .args([
            "effdiff",
            "--preset",
            "shear",
            "--set",
            "effdiff.epsilon=0.1",
            "--set",
            "effdiff.n_paths=200",
            "--set",
            "effdiff.t_final=5",
            "--set",
            "effdiff.dump_paths=2",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dump = read(&out, "effdiff-", "trajectories.csv");
    assert!(dump.starts_with("path,t,x1,x2,w1,w2\n"), "documented column order");
    assert!(dump.lines().count() > 10);
}

#[test]
fn modes_file_roundtrip() {
    let tmp = tempdir("cli-modes");
    let modes = tmp.join("field.modes");
    // The expanded sine product: must classify as cellular.
    std::fs::write(&modes, "1 -1 0.5 0\n1 1 -0.5 0\n").unwrap();
    let out = tmp.join("runs");
    let o = hamflow()
        .args(["classify", "--modes"])
        .arg(&modes)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"Cellular\""));
}

fn tempdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("hamflow-test-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
