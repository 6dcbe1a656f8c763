use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bdsde(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdsde"))
        .args(args)
        .env("BDSDE_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const BSB: &str = "[problem]\nname = \"bsb_quadratic\"\nbackend = \"dp\"\n\n[grid]\nhorizon = 1.0\nn_steps = 64\n";

#[test]
fn run_writes_csv_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bsb.toml", BSB);
    let out = bdsde(&["run", "--config", &cfg, "--quiet"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("bsb_quadratic_dp.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("quantity,dt,value,oracle,abs_error,seed_w,seed_b"));
    let y0: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(y0[0], "y0");
    assert!((y0[2].parse::<f64>().unwrap() - 3.0).abs() < 0.06);
    assert_eq!(y0[3].parse::<f64>().unwrap(), 3.0);
}

#[test]
fn tolerance_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "coarse.toml",
        "[problem]\nname = \"heat\"\nbackend = \"tree\"\n[grid]\nhorizon = 1.0\nn_steps = 8\n",
    );
    let out = bdsde(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn malformed_config_exits_one_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[problem]\nname = \"heat\"\nbackend = \"tree\"\n");
    let out = bdsde(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("grid"), "{err}");

    let cfg = write_config(dir.path(), "typo.toml", &BSB.replace("n_steps", "nsteps"));
    let out = bdsde(&["run", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nsteps") && err.contains("line"), "{err}");

    let cfg = write_config(dir.path(), "unknown.toml", &BSB.replace("bsb_quadratic", "bsb_cubic"));
    assert_eq!(bdsde(&["run", "--config", &cfg], dir.path()).status.code(), Some(1));
}

#[test]
fn csv_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[problem]\nname = \"doss_bsb\"\nbackend = \"dp\"\n[grid]\nhorizon = 1.0\nn_steps = 32\n[execution]\nw_samples = 3\nworkers = WORKERS\n";
    let mut files = Vec::new();
    for workers in ["1", "4"] {
        let cfg = write_config(dir.path(), &format!("w{workers}.toml"), &body.replace("WORKERS", workers));
        let csv = dir.path().join(format!("w{workers}.csv"));
        let out = bdsde(
            &["run", "--config", &cfg, "--seed", "17", "--out", csv.to_str().unwrap(), "--quiet"],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        files.push(fs::read(csv).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert!(String::from_utf8_lossy(&files[0]).contains(",17,18"));
}

#[test]
fn study_and_listing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "heat.toml",
        "[problem]\nname = \"heat\"\nbackend = \"tree\"\n[grid]\nhorizon = 1.0\nn_steps = 16\n",
    );
    let out = bdsde(&["study", "--config", &cfg, "--halvings", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    let order: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("fitted order "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((order - 1.0).abs() < 0.3, "{text}");
    let csv = fs::read_to_string(dir.path().join("heat_tree_study.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("y0,")).count(), 4);

    let list = bdsde(&["list-problems"], dir.path());
    assert_eq!(list.status.code(), Some(0));
    let text = String::from_utf8_lossy(&list.stdout);
    assert!(text.contains("bsb_quadratic") && text.contains("oracle: none"));
}

#[test]
fn props_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = bdsde(&["props", "--suite", "conjugate-order", "--seed", "5"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    assert_eq!(bdsde(&["props", "--suite", "nope"], dir.path()).status.code(), Some(1));
}
