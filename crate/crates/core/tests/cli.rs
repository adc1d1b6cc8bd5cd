use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fstoch(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fstoch"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("FSTOCH_THREADS", "2")
        .output()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn anchors_are_printed_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let o = fstoch(dir.path(), &["anchors"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Z       = 2.5612322"), "{text}");
    let v = json(&dir.path().join("anchors.json"));
    assert_eq!(v["seed"], 1);
    assert!((v["anchors"]["t_gamma_r"].as_f64().unwrap() - 4.26322633).abs() < 1e-6);
    assert_eq!(v["config"]["command"], "anchors");
}

#[test]
fn oscillation_figure_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["figure", "2", "--eps", "1e-4", "--n", "12", "--seed", "5"];
    assert!(fstoch(dir.path(), &args).status.success());
    let csv1 = fs::read(dir.path().join("figure2.csv")).unwrap();
    let json1 = fs::read(dir.path().join("figure2.json")).unwrap();
    assert!(fstoch(dir.path(), &args).status.success());
    assert_eq!(csv1, fs::read(dir.path().join("figure2.csv")).unwrap());
    assert_eq!(json1, fs::read(dir.path().join("figure2.json")).unwrap());

    let mut rdr = csv::Reader::from_path(dir.path().join("figure2.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["eps", "diff_mean", "diff_ci", "std_mean", "std_ci", "seed", "config"]);
    let row = rdr.records().next().unwrap().unwrap();
    assert_eq!(&row[5], "5");
    let cfg: serde_json::Value = serde_json::from_str(&row[6]).unwrap();
    assert_eq!(cfg["n"], 12);
}

#[test]
fn combine_reports_labelled_terms() {
    let dir = tempfile::tempdir().unwrap();
    let o = fstoch(dir.path(), &["combine", "--eps", "1e-4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.path().join("combine.json"));
    let p = &v["predictions"][0];
    assert_eq!(p["diff_terms"].as_array().unwrap().len(), 9);
    assert_eq!(p["var_terms"].as_array().unwrap().len(), 9);
    assert!(p["diff_terms"][0]["term"].is_string());
    let varrho = v["varrho"].as_f64().unwrap();
    assert!((varrho + 0.68).abs() < 0.05);
    let pred = &p["prediction"];
    assert_eq!(pred["diff_osc"].as_f64().unwrap(), 2.0 * pred["diff_half"].as_f64().unwrap());
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# desk run\neps = 1e-5\nseed = 42\n").unwrap();
    let o = fstoch(dir.path(), &["--config", cfg.to_str().unwrap(), "regular"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.path().join("regular.json"));
    assert_eq!(v["seed"], 42);
    assert_eq!(v["config"]["eps"], serde_json::json!([1e-5]));
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = fstoch(dir.path(), &["figure", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("figure 3"));
    let o = fstoch(dir.path(), &["regular", "--eps", "-1e-4"]);
    assert_ne!(o.status.code(), Some(0));
    let o = fstoch(dir.path(), &["nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}
