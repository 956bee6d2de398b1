use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tte"))
        .args(args)
        .env_remove("TTE_CACHE_DIR")
        .env_remove("TTE_LOG")
        .env_remove("EMBED_API_KEY")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let o = tte(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["ingest", "serialize", "embed", "train", "evaluate", "compare", "project"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
    assert_eq!(code(&tte(&["train", "--help"])), 0);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = tte(&["train", "--arch", "mlp"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--dataset"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_bad_values_exit_one() {
    assert_eq!(code(&tte(&["frobnicate"])), 1);
    assert_eq!(code(&tte(&["train", "--dataset", "x.json", "--arch", "cnn"])), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = tte(&["serialize", "--dataset", s(&missing), "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
}

#[test]
fn llm_training_without_embeddings_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tte(&["ingest", "--fixture", "synthetic", "--out", s(dir.path())])), 0);
    let manifest = dir.path().join("synthetic.json");
    let o = tte(&["train", "--dataset", s(&manifest), "--arch", "mlp", "--encoder", "llm"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--embeddings"));
}

#[test]
fn http_provider_needs_an_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tte(&["ingest", "--fixture", "synthetic", "--out", s(dir.path())])), 0);
    let manifest = dir.path().join("synthetic.json");
    let out = dir.path().join("e.emb");
    let o = tte(&["embed", "--dataset", s(&manifest), "--provider", "http", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--endpoint"));
    assert!(!out.exists());
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn full_pipeline_on_the_fixture() {
    let w = Workspace::new();
    let data = w.p("data");
    let cache = w.p("cache");

    // ingest a bundled fixture, then re-ingest the written manifest
    let o = tte(&["ingest", "--fixture", "synthetic", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["rows"], 200);
    assert_eq!(summary["features"], 5);
    let manifest = data.join("synthetic.json");
    let o = tte(&["ingest", "--dataset", s(&manifest), "--out", s(&w.p("normalised"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(w.p("normalised/synthetic.csv").exists());

    let sentences = w.p("cells.jsonl");
    let o = tte(&["serialize", "--dataset", s(&manifest), "--out", s(&sentences)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&sentences)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 200 * 5);
    assert_eq!(lines[0]["row"], 0);
    assert_eq!(lines[0]["col"], 0);
    assert_eq!(lines[0]["sentence"], "The color is red.");

    let emb = data.join("synthetic.emb");
    let embed = |extra: &[&str]| {
        let mut args = vec![
            "embed",
            "--dataset",
            s(&manifest),
            "--provider",
            "hash",
            "--dimension",
            "16",
            "--out",
            s(&emb),
            "--cache-dir",
            s(&cache),
        ];
        args.extend_from_slice(extra);
        tte(&args)
    };
    let o = embed(&[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = std::fs::read(&emb).unwrap();
    assert!(cache.read_dir().unwrap().next().is_some(), "cache was not populated");

    // existing outputs are kept unless forced; forced reruns hit the cache
    // and reproduce the file byte for byte
    std::fs::write(&emb, b"stale").unwrap();
    assert_eq!(code(&embed(&[])), 0);
    assert_eq!(std::fs::read(&emb).unwrap(), b"stale");
    assert_eq!(code(&embed(&["--force"])), 0);
    assert_eq!(std::fs::read(&emb).unwrap(), first);

    let report = w.p("train.json");
    let config = w.p("config.json");
    std::fs::write(
        &config,
        r#"{"settings": {"hidden": [16], "train": {"max_epochs": 3, "batch_size": 32}}}"#,
    )
    .unwrap();
    let o = tte(&[
        "train",
        "--config",
        s(&config),
        "--dataset",
        s(&manifest),
        "--arch",
        "mlp",
        "--encoder",
        "llm",
        "--embeddings",
        s(&emb),
        "--seed",
        "1",
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let acc = r["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
    assert!(r["stopped_epoch"].as_u64().unwrap() <= 3);

    let plan = data.join("plan.json");
    std::fs::write(
        &plan,
        r#"{
            "datasets": [{"manifest": "synthetic.json", "embeddings": "synthetic.emb"}],
            "architectures": ["mlp", "resnet"],
            "modes": ["base", "llm"],
            "seeds": [0, 1, 2],
            "settings": {"hidden": [16], "layers": 1, "train": {"max_epochs": 3, "batch_size": 32}},
            "workers": 1
        }"#,
    )
    .unwrap();
    let results = w.p("results");
    let o = tte(&["evaluate", "--plan", s(&plan), "--out", s(&results)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["results.jsonl", "table.csv", "table.md"] {
        assert!(results.join(f).exists(), "{f} missing");
    }
    assert_eq!(std::fs::read_to_string(results.join("results.jsonl")).unwrap().lines().count(), 12);
    assert!(stdout(&o).contains("synthetic"));
    // a second run reuses every cell
    let o = tte(&["evaluate", "--plan", s(&plan), "--out", s(&results)]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("0 cells trained, 12 reused"), "{}", stderr(&o));

    let jsonl = results.join("results.jsonl");
    let comparison = w.p("compare.json");
    let o = tte(&["compare", "--results", s(&jsonl), "--mc", "10000", "--out", s(&comparison)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("aggregate: "), "{}", stdout(&o));
    let c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&comparison).unwrap()).unwrap();
    assert_eq!(c["per_dataset"].as_array().unwrap().len(), 2);
    let g = &c["aggregate"];
    let total = g["p_left"].as_f64().unwrap() + g["p_rope"].as_f64().unwrap() + g["p_right"].as_f64().unwrap();
    assert!((total - 1.0).abs() < 1e-9);

    // a single unit falls back to the per-dataset posterior
    let o = tte(&["compare", "--results", s(&jsonl), "--arch", "mlp"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("single unit"));
    assert!(code(&tte(&["compare", "--results", s(&jsonl), "--mc", "10"])) == 1);

    let svg = w.p("plots/proj.svg");
    let o = tte(&[
        "project",
        "--dataset",
        s(&manifest),
        "--embeddings",
        s(&emb),
        "--columns",
        "color,shape",
        "--out",
        s(&svg),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
    let csv = w.p("plots/proj.csv");
    let o = tte(&[
        "project",
        "--dataset",
        s(&manifest),
        "--embeddings",
        s(&emb),
        "--columns",
        "color,shape",
        "--format",
        "csv",
        "--per-feature",
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(w.p("plots/proj-color.csv").exists());
    assert!(w.p("plots/proj-shape.csv").exists());
    let o = tte(&[
        "project",
        "--dataset",
        s(&manifest),
        "--embeddings",
        s(&emb),
        "--columns",
        "colour",
        "--out",
        s(&svg),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("colour"));
}
