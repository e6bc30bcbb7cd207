use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qhedge_core::oracles;
use serde_json::Value;

const BESSEL: &str = r#"
[model]
kind = "bessel3"

[grid]
n_t = 17
n_x = [33]

[run]
n_paths = 20000
seed = 5
epsilon = 0.1
q_window = [0.0, 3.0]
q_points = 13
p_points = 11
"#;

const GBM: &str = r#"
[model]
kind = "gbm"
parameters = { b = [0.1], s = [[0.2]] }

[run]
n_paths = 40000
seed = 9
q_window = [0.5, 2.0]
q_points = 5
p_points = 6
"#;

fn qhedge(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_qhedge"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn rows(path: PathBuf) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn price_bessel_is_px() {
    let dir = tempfile::tempdir().unwrap();
    let o = qhedge(dir.path(), BESSEL, &["price"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(dir.path().join("out/price.csv"));
    assert_eq!(r.len(), 11);
    assert_eq!(num(&r[0][1]), 0.0);
    for row in &r {
        let (p, v, se) = (num(&row[0]), num(&row[1]), num(&row[2]));
        assert!((v - p).abs() <= 3.0 * se + 1e-12, "p={p}: {v}");
    }
    let doc = json(dir.path().join("out/price.json"));
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["provenance"]["seed"], 5);
    assert_eq!(doc["provenance"]["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(doc["generated_at"], 1700000000);
}

#[test]
fn dual_bessel_is_call_on_q_with_bounded_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BESSEL.replace("epsilon = 0.1", "epsilon = 0.0\nepsilons = [0.5, 0.2, 0.1]");
    let o = qhedge(dir.path(), &cfg, &["dual"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(dir.path().join("out/dual.csv"));
    assert_eq!(num(&r[0][1]), 0.0);
    for row in &r {
        let q = num(&row[0]);
        assert!((num(&row[1]) - (q - 1.0f64).max(0.0)).abs() < 1e-12, "q={q}");
    }
    let gaps = rows(dir.path().join("out/dual_epsilons.csv"));
    assert_eq!(gaps.len(), 3 * 13);
    for g in &gaps {
        assert!(num(&g[4]).abs() <= num(&g[6]) + 3.0 * num(&g[5]));
    }
}

#[test]
fn gbm_price_and_dual_match_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let o = qhedge(dir.path(), GBM, &["compare-oracle"]);
    assert_eq!(code(&o), 0, "{}", fs::read_to_string(dir.path().join("out/oracle.csv")).unwrap());
    let r = rows(dir.path().join("out/price.csv").with_file_name("oracle.csv"));
    assert_eq!(r.len(), 6 + 5);
    let o = qhedge(dir.path(), GBM, &["price"]);
    assert_eq!(code(&o), 0);
    for row in rows(dir.path().join("out/price.csv")) {
        let (p, v, se) = (num(&row[0]), num(&row[1]), num(&row[2]));
        let exact = oracles::gbm_quantile_value(1.0, p, 0.1, 0.2, 1.0).unwrap();
        assert!((v - exact).abs() <= 3.0 * se + 1e-12, "p={p}: {v} vs {exact}");
    }
}

#[test]
fn compare_oracle_without_closed_form_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BESSEL.replace("[grid]", "[payoff]\nkind = \"constant\"\nvalue = 1.0\n\n[grid]");
    assert_eq!(code(&qhedge(dir.path(), &cfg, &["compare-oracle"])), 2);
}

fn shifted(src: &Path, dst: &Path, f: impl Fn(f64) -> f64) {
    let s = qhedge_core::pde::read_surface(&mut fs::File::open(src).unwrap()).unwrap();
    qhedge_core::pde::write_surface(&mut fs::File::create(dst).unwrap(), &s.map(f)).unwrap();
}

#[test]
fn verify_discriminates_surfaces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BESSEL.replace("n_x = [33]", "n_x = [33]\nn_q = 129\nn_p = 41");
    assert_eq!(code(&qhedge(dir.path(), &cfg, &["solve"])), 0);
    let out = dir.path().join("out");
    let primal = out.join("primal_surface.qhs");
    let o = qhedge(dir.path(), &cfg, &["verify", primal.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", fs::read_to_string(out.join("verify.json")).unwrap());
    assert_eq!(json(out.join("verify.json"))["results"]["pass"], true);

    let up = out.join("up.qhs");
    shifted(&primal, &up, |v| v + 0.1);
    assert_eq!(code(&qhedge(dir.path(), &cfg, &["verify", up.to_str().unwrap()])), 1);
    let report = json(out.join("verify.json"));
    assert_eq!(report["results"]["report"]["terminal_pass"], false);

    let scaled = out.join("scaled.qhs");
    shifted(&primal, &scaled, |v| 0.9 * v);
    let args = ["verify", scaled.to_str().unwrap(), "--reference", primal.to_str().unwrap()];
    assert_eq!(code(&qhedge(dir.path(), &cfg, &args)), 1);
    assert_eq!(json(out.join("verify.json"))["results"]["comparison"]["dominates"], false);

    let bad = out.join("bad.qhs");
    fs::write(&bad, b"not a surface").unwrap();
    assert_eq!(code(&qhedge(dir.path(), &cfg, &["verify", bad.to_str().unwrap()])), 2);
    assert_eq!(json(out.join("verify.json"))["results"]["pass"], false);

    let dual = out.join("dual_surface.qhs");
    assert_eq!(code(&qhedge(dir.path(), &cfg, &["verify", dual.to_str().unwrap()])), 2);
}

#[test]
fn study_epsilon_rows_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BESSEL.replace("q_window = [0.0, 3.0]", "q_window = [0.2, 2.0]\nepsilons = [0.5, 0.2, 0.1]");
    let o = qhedge(dir.path(), &cfg, &["study-epsilon"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(dir.path().join("out/epsilon_study.csv"));
    assert_eq!(r.len(), 3);
    assert!(r.iter().all(|row| row[5] == "true"));
    assert!(num(&r[0][1]) > num(&r[1][1]) && num(&r[1][1]) > num(&r[2][1]));

    let missing = qhedge(dir.path(), BESSEL, &["study-epsilon"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("epsilons"));

    let empty = tempfile::tempdir().unwrap();
    let cfg = BESSEL.replace("q_window", "epsilons = []\nq_window");
    assert_eq!(code(&qhedge(empty.path(), &cfg, &["study-epsilon"])), 0);
    assert_eq!(rows(empty.path().join("out/baseline.csv")).len(), 13);
    assert!(rows(empty.path().join("out/epsilon_study.csv")).is_empty());
}

#[test]
fn pde_study_uses_the_solver_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BESSEL.replace("q_window = [0.0, 3.0]", "q_window = [0.2, 2.0]\nepsilons = [0.5, 0.2, 0.1]\nmethod = \"pde\"");
    let o = qhedge(dir.path(), &cfg, &["study-epsilon"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows(dir.path().join("out/epsilon_study.csv")).len(), 3);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&qhedge(dir.path(), "[model]\nkind = \"bessel3\"\n[run]\nbogus = 1\n", &["price"])), 2);
    assert_eq!(code(&qhedge(dir.path(), "[model]\nkind = \"heston\"\n", &["price"])), 2);
    assert_eq!(code(&qhedge(dir.path(), "not toml [", &["price"])), 2);
    assert_eq!(code(&qhedge(dir.path(), BESSEL, &["--method", "fd", "price"])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_qhedge")).arg("price").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = BESSEL.replace("epsilon = 0.1", "epsilon = 0.1\nepsilons = [0.5, 0.2]");
    for (dir, threads) in [(&a, "1"), (&b, "4")] {
        for cmd in ["price", "dual", "solve"] {
            assert_eq!(code(&qhedge(dir.path(), &cfg, &["--threads", threads, cmd])), 0);
        }
        let cfg_gbm = GBM.replace("n_paths = 40000", "n_paths = 5000\nscheme = \"log-euler\"\nn_steps = 16");
        let sub = dir.path().join("gbm");
        fs::create_dir_all(&sub).unwrap();
        assert_eq!(code(&qhedge(&sub, &cfg_gbm, &["--threads", threads, "price"])), 0);
    }
    let files = ["price.csv", "price.json", "dual.csv", "dual.json", "dual_epsilons.csv", "dual_surface.qhs", "primal_surface.qhs", "solve.json"];
    for f in files {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let x = fs::read(a.path().join("gbm/out/price.csv")).unwrap();
    assert_eq!(x, fs::read(b.path().join("gbm/out/price.csv")).unwrap());
}
