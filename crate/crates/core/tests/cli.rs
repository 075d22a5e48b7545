use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn netobs() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_netobs"));
    cmd.env_remove("NETOBS_OUTPUT_DIR");
    cmd
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Rows of a CSV file as header -> value maps.
fn table(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let head = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| head.iter().map(String::from).zip(r.unwrap().iter().map(String::from)).collect())
        .collect()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    table(path).iter().map(|r| r[name].parse().unwrap()).collect()
}

const SCALAR: &str = r#"
[system]
family = "linear"
matrix = [[0.9]]

[observation]
nodes = "all"
variables = ["x"]
sigma = 1e-2

[experiment]
kind = "reconstruct"
n_steps = 20
burn_in = 0

[seeds]
dynamics = 3
noise_master = 4
network = 1
params = 1
"#;

const SMALL_KAPPA: &str = r#"
[system]
family = "henon"
a = 1.4
b = 0.3
c = 0.1

[network]
kind = "path"
n = 4

[observation]
nodes = [1, 3]
variables = ["x", "y"]
sigma = 1e-3

[experiment]
kind = "kappa"
n_steps = 20
trials = 4

[seeds]
dynamics = 1
noise_master = 2
network = 3
params = 4
"#;

#[test]
fn version_prints_the_crate_version() {
    let out = netobs().arg("version").output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), format!("netobs {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn bundled_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            let out = netobs().arg("validate").arg(&path).output().unwrap();
            assert!(out.status.success(), "{}: {}", path.display(), stderr(&out));
            // The printed manifest is itself a valid config.
            let dir = tempfile::tempdir().unwrap();
            let again = write(dir.path(), "m.cfg", &String::from_utf8(out.stdout).unwrap());
            assert!(netobs().arg("validate").arg(&again).output().unwrap().status.success());
            n += 1;
        }
    }
    assert!(n >= 10, "found {n} configs");
}

#[test]
fn missing_sigma_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", &SCALAR.replace("sigma = 1e-2", ""));
    for sub in ["validate", "run"] {
        let out = netobs().arg(sub).arg(&cfg).current_dir(dir.path()).output().unwrap();
        assert!(!out.status.success());
        assert!(stderr(&out).contains("observation.sigma"), "{}", stderr(&out));
    }
    assert!(!dir.path().join("netobs-output").exists());
}

#[test]
fn bad_seed_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", SCALAR);
    for arg in ["nosuch=1", "noise_master", "noise_master=x"] {
        let out = netobs().args(["run", "--seed-override", arg]).arg(&cfg).arg("-o").arg(dir.path().join("o")).output().unwrap();
        assert!(!out.status.success(), "{arg}");
    }
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", SCALAR);
    let env_dir = dir.path().join("from_env");
    let flag_dir = dir.path().join("from_flag");
    let ok = netobs().arg("run").arg(&cfg).env("NETOBS_OUTPUT_DIR", &env_dir).output().unwrap().status;
    assert!(ok.success());
    assert!(env_dir.join("errors.csv").exists());
    let ok = netobs().arg("run").arg(&cfg).arg("--output-dir").arg(&flag_dir).env("NETOBS_OUTPUT_DIR", &env_dir).output().unwrap().status;
    assert!(ok.success());
    assert!(flag_dir.join("errors.csv").exists());
    // A directory in the config beats the environment.
    let with_dir = write(dir.path(), "d.cfg", &format!("{SCALAR}\n[output]\ndir = \"from_config\"\n"));
    let ok = netobs().arg("run").arg(&with_dir).current_dir(dir.path()).env("NETOBS_OUTPUT_DIR", &env_dir).output().unwrap().status;
    assert!(ok.success());
    assert!(dir.path().join("from_config/errors.csv").exists());
    let ok = netobs().arg("run").arg(&cfg).current_dir(dir.path()).output().unwrap().status;
    assert!(ok.success());
    assert!(dir.path().join("netobs-output/manifest.toml").exists());
}

#[test]
fn scalar_reconstruction_matches_the_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", SCALAR);
    let out_dir = dir.path().join("out");
    let out = netobs().arg("run").arg(&cfg).arg("-o").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let x = column(&out_dir.join("truth.csv"), "x1");
    let y = column(&out_dir.join("observations.csv"), "x1");
    let a: f64 = 0.9;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..x.len() {
        num += a.powi(i as i32) * (y[i] - x[i]);
        den += a.powi(2 * i as i32);
    }
    let want = x[0] + num / den;
    let errors = table(&out_dir.join("errors.csv"));
    assert_eq!(errors.len(), 1);
    let got: f64 = errors[0]["recon_first"].parse().unwrap();
    assert!((got - want).abs() <= 1e-8 * want.abs(), "{got} vs {want}");
    let z = column(&out_dir.join("reconstruction.csv"), "x1");
    assert_eq!(z[0], got);
}

#[test]
fn fhn_reconstruction_covers_every_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = netobs().arg("run").arg(configs().join("fig3_reconstruct.cfg")).arg("-o").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let errors = table(&dir.path().join("errors.csv"));
    assert_eq!(errors.len(), 16);
    for row in &errors {
        let node: usize = row["node"].parse().unwrap();
        assert_eq!(row["observed"] == "true", node <= 4, "{row:?}");
        assert!(row["error_ratio"].parse::<f64>().unwrap().is_finite());
    }
    let recon = table(&dir.path().join("reconstruction.csv"));
    assert_eq!(recon.len(), 400);
    assert_eq!(recon[0].len(), 17);
    let diag = table(&dir.path().join("diagnostics.csv"));
    assert_eq!(diag[0]["converged"], "true");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "k.cfg", SMALL_KAPPA);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (d, threads) in [(&a, "1"), (&b, "3")] {
        let out = netobs().arg("run").arg(&cfg).arg("-o").arg(d).args(["--threads", threads]).output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "kappa.csv"));
    for name in names {
        let (x, y) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
        assert!(x == y, "{name:?} differs");
        if name.to_string_lossy().ends_with(".csv") {
            let text = String::from_utf8(x).unwrap();
            assert!(!text.contains('\r') && !text.starts_with('#'), "{name:?}");
        }
    }
    // A different noise seed changes the numbers.
    let c = dir.path().join("c");
    let ok = netobs().arg("run").arg(&cfg).arg("-o").arg(&c).args(["--seed-override", "noise_master=99"]).output().unwrap().status;
    assert!(ok.success());
    assert_ne!(std::fs::read(a.join("kappa.csv")).unwrap(), std::fs::read(c.join("kappa.csv")).unwrap());
    assert!(std::fs::read_to_string(c.join("manifest.toml")).unwrap().contains("noise_master = 99"));
}
