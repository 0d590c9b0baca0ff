use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn plom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plom"))
        .args(args)
        .env_remove("PLOM_OUTPUT_DIR")
        .output()
        .expect("spawn plom")
}

fn small_config(dir: &Path, out: &Path) -> PathBuf {
    let text = format!(
        r#"seed = 11
n_steps = 3
n_mc = 40
jump_target = 0.3
mi_cap = 300
output = "{}"

[input.synthetic]
kind = "multiconnected-manifold"
nu = 3
n_d = 60
seed = 2

[plom]
n_mch = 4
m0 = 10
"#,
        out.display()
    );
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn metrics_of_a_file_with_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let o = plom(&["gen", "--preset", "gaussian", "--seed", "3", "-o", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = plom(&["metrics", a.to_str().unwrap(), a.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kl_ab"].as_f64(), Some(0.0));
    assert_eq!(v["kl_ba"].as_f64(), Some(0.0));
    assert_eq!(v["a"]["n"].as_u64(), Some(1200));
}

#[test]
fn missing_input_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, format!("output = \"{}\"\n[input]\npath = \"/nonexistent/x.csv\"\n", out.display())).unwrap();
    let o = plom(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["status"], "input-error");
    assert!(out.join("error.json").exists());
}

#[test]
fn unknown_config_key_and_bad_flags_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "kapa = 3.0\n").unwrap();
    assert_eq!(plom(&["run", cfg.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(plom(&["run"]).status.code(), Some(1));
    assert_eq!(plom(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(plom(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = small_config(dir.path(), &a);
    let o = plom(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = plom(&["--threads", "1", "run", cfg.to_str().unwrap(), "--output", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.iter().any(|(p, _)| p == Path::new("run.json")));
    assert!(ta.iter().any(|(p, _)| p == Path::new("learned/rotb.bin")));
    assert_eq!(ta.len(), tb.len());
    for ((pa, da), (pb, db)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        // the echoed output path differs between the two runs
        if pa != Path::new("run.json") {
            assert!(da == db, "{} differs", pa.display());
        }
    }
    let ja: serde_json::Value = serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    let mut jb: serde_json::Value = serde_json::from_slice(&fs::read(b.join("run.json")).unwrap()).unwrap();
    jb["config"]["output"] = ja["config"]["output"].clone();
    assert_eq!(ja, jb);
}

#[test]
fn environment_overrides_config_output() {
    let dir = tempfile::tempdir().unwrap();
    let file_out = dir.path().join("from-file");
    let env_out = dir.path().join("from-env");
    let cfg = small_config(dir.path(), &file_out);
    let o = Command::new(env!("CARGO_BIN_EXE_plom"))
        .args(["bases", cfg.to_str().unwrap()])
        .env("PLOM_OUTPUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(env_out.join("bases.json").exists());
    assert!(!file_out.exists());
}

#[test]
fn first_instant_with_large_kappa_matches_dmaps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, "kind = \"multiconnected-manifold\"\nnu = 3\nn_d = 80\nseed = 5\n").unwrap();
    let o = plom(&["gen", spec.to_str().unwrap(), "-o", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("bases");
    let o = plom(&[
        "bases",
        "--input",
        data.to_str().unwrap(),
        "--n",
        "1",
        "--kappa",
        "1000",
        "--n-mc",
        "2000",
        "--jump",
        "0.3",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: serde_json::Value = serde_json::from_slice(&fs::read(out.join("bases.json")).unwrap()).unwrap();
    let span = rec["angles"][0]["gamma_span_deg"].as_f64().unwrap();
    // what remains is Monte Carlo noise in the transition spreads
    assert!(span < 2.0, "span angle {span}");
    // the cross-Gram angle sits at the floor set by the DMAPS basis itself
    let gamma = rec["angles"][0]["gamma_deg"].as_f64().unwrap();
    let floor = rec["dmaps_self_angle_deg"].as_f64().unwrap();
    assert!((gamma - floor).abs() < 1.0, "angle {gamma}, floor {floor}");
    assert!(out.join("bases/dmaps.bin").exists());
}

#[test]
fn plom_subcommand_accepts_a_basis_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &dir.path().join("b"));
    let o = plom(&["bases", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let basis = dir.path().join("b/bases/dmaps.bin");
    let out = dir.path().join("p");
    let o = plom(&["plom", cfg.to_str().unwrap(), "--basis", basis.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("learned/learned.bin").exists());
    let rec: serde_json::Value = serde_json::from_slice(&fs::read(out.join("plom.json")).unwrap()).unwrap();
    assert_eq!(rec["basis_dim"].as_u64(), Some(4));
    assert_eq!(rec["metrics"]["n_ar"].as_u64(), Some(240));

    let o = plom(&["plom", cfg.to_str().unwrap(), "--basis", "identity", "--output", out.to_str().unwrap()]);
    assert!(o.status.success());
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"nope").unwrap();
    let o = plom(&["plom", cfg.to_str().unwrap(), "--basis", bad.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn reference_prints_table_and_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = plom(&["reference", "--nd", "100", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("err_lambda"));
    assert!(out.join("reference.json").exists());
    assert!(out.join("curves/reference_lambda.csv").exists());
}
