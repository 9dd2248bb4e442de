use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn equirag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equirag"))
        .args(args)
        .env_remove("EQUIRAG_CACHE")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let data = fixtures().join("datasets/medmcqa.jsonl");
    let store = fixtures().join("store");
    let text = format!(
        "dataset = {data:?}\nstore = {store:?}\noutput_dir = {out:?}\nseed = 3\n{extra}\n[retrieval]\nk = 4\n",
        out = dir.join("runs")
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_dir(out: &str) -> PathBuf {
    let line = out
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .expect("run directory line");
    PathBuf::from(line.trim())
}

#[test]
fn ingest_index_and_run_from_scratch() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let store_s = store.to_str().unwrap();
    for source in ["pubmed", "textbook", "wikipedia"] {
        let input = fixtures().join("corpus").join(source);
        let out = ok(equirag(&[
            "ingest",
            "--source",
            source,
            "--in",
            input.to_str().unwrap(),
            "--out",
            store_s,
            "--window",
            "64",
            "--stride",
            "48",
        ]));
        assert!(out.starts_with(source), "{out}");
    }
    let shipped = fs::read_to_string(fixtures().join("store/manifest.json")).unwrap();
    assert_eq!(fs::read_to_string(store.join("manifest.json")).unwrap(), shipped);

    let index = tmp.path().join("bm25.json");
    let out = ok(equirag(&["index", "--store", store_s, "--out", index.to_str().unwrap()]));
    assert!(out.contains("indexed 18 snippets"), "{out}");

    let cfg = write_config(tmp.path(), &format!("index = {index:?}"));
    let out = ok(equirag(&["run", "--config", cfg.to_str().unwrap()]));
    assert!(out.contains("## Headline"));
    assert!(run_dir(&out).join("report.json").is_file());
}

#[test]
fn report_formats_and_recompute() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let dir = run_dir(&ok(equirag(&["run", "--config", cfg.to_str().unwrap()])));
    let d = dir.to_str().unwrap();

    let md = ok(equirag(&["report", "--run", d]));
    assert_eq!(md, fs::read_to_string(dir.join("report.md")).unwrap());
    let csv = ok(equirag(&["report", "--run", d, "--format", "csv"]));
    assert!(csv.starts_with("metric,grouping,group,n,value"));
    let json = ok(equirag(&["report", "--run", d, "--format", "json"]));
    let recomputed = ok(equirag(&["report", "--run", d, "--format", "json", "--recompute"]));
    assert_eq!(json, recomputed);
}

#[test]
fn compare_two_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let a = run_dir(&ok(equirag(&["run", "--config", cfg.to_str().unwrap()])));
    let cfg = write_config(tmp.path(), "majority_vote = true");
    let b = run_dir(&ok(equirag(&["run", "--config", cfg.to_str().unwrap()])));
    let out = ok(equirag(&["compare", "--runs", a.to_str().unwrap(), b.to_str().unwrap()]));
    assert!(out.contains("DP"), "{out}");
}

#[test]
fn sweep_over_fixture_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let grid = fixtures().join("configs/mv_ablation.toml");
    let out = ok(equirag(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
    ]));
    let rows = out.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Strategy")).count();
    assert_eq!(rows, 8, "{out}");
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tau_c = 3.0");
    let o = equirag(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(tmp.path(), "unknown_key = 1");
    assert_eq!(equirag(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let missing = tmp.path().join("nope.toml");
    assert_eq!(equirag(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn failing_endpoint_exits_3() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let tmp = tempfile::tempdir().unwrap();
    let model = format!("[model]\nkind = \"remote\"\nbase_url = \"http://127.0.0.1:{port}/v1\"\nmodel_name = \"stub\"\nmax_retries = 0\ntimeout_secs = 2.0\n");
    let cfg = write_config(tmp.path(), &format!("max_items = 2\n{model}"));
    let o = equirag(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}
