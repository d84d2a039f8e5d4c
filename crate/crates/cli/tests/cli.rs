use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn intseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intseg")).args(args).output().expect("binary runs")
}

fn inputs(dir: &Path) -> Vec<String> {
    let i = dir.join("in");
    vec![
        "--pings".into(),
        i.join("pings.csv").display().to_string(),
        "--properties".into(),
        i.join("properties.csv").display().to_string(),
        "--layers".into(),
        i.join("layers.jsonl").display().to_string(),
        "--out-dir".into(),
        dir.join("out").display().to_string(),
    ]
}

fn stage(dir: &Path, extra: &[&str]) -> Output {
    let mut a = inputs(dir);
    a.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = a.iter().map(String::as_str).collect();
    let o = intseg(&refs);
    assert!(o.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

const STAGES: [&str; 7] = ["ingest", "infer-homes", "link-es", "join", "annotate", "segregate", "nsi"];

#[test]
fn synth_then_full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    let dest = d.join("in").display().to_string();
    let o = intseg(&["synth", "--population", "1000", "--seed", "5", "--dest", &dest]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for s in STAGES {
        stage(d, &[s]);
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "pipeline took {secs:.1} s");

    let region: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/region.json")).unwrap()).unwrap();
    let rho = region["estimate"]["rho"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&rho), "{rho}");
    assert_eq!(region["config_hash"].as_str().unwrap().len(), 64);

    let before: Vec<Vec<u8>> = ["network.csv", "annotated.csv", "region.json"]
        .iter()
        .map(|f| std::fs::read(d.join("out").join(f)).unwrap())
        .collect();
    for s in ["join", "annotate", "segregate"] {
        stage(d, &[s]);
    }
    for (f, b) in ["network.csv", "annotated.csv", "region.json"].iter().zip(&before) {
        assert_eq!(&std::fs::read(d.join("out").join(f)).unwrap(), b, "{f} changed on rerun");
    }

    for by in ["hour", "poi-category", "tract-context", "road"] {
        stage(d, &["decompose", "--by", by]);
        let text = std::fs::read_to_string(d.join(format!("out/decompose_{by}.csv"))).unwrap();
        assert!(text.starts_with("filter,interactions,rho"), "{text}");
    }
    stage(d, &["bridge", "--measure", "gini", "--ablate-trials", "50"]);
    let bridge: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/bridge.json")).unwrap()).unwrap();
    assert!(bridge["clusters"].as_array().unwrap().len() >= 1);
    stage(d, &["nullmodel", "homophily", "--degree", "10", "--H", "1", "--kernel", "linear"]);
    assert!(d.join("out/null_homophily.csv").exists());
    stage(d, &["nullmodel", "config-model"]);
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/null_config.json")).unwrap()).unwrap();
    assert!(prov["rewire"].is_object());

    // weighting variant on the same join
    let alt = d.join("alt").display().to_string();
    std::fs::create_dir_all(&alt).unwrap();
    for f in std::fs::read_dir(d.join("out")).unwrap() {
        let f = f.unwrap();
        std::fs::copy(f.path(), Path::new(&alt).join(f.file_name())).unwrap();
    }
    let mut a = inputs(d);
    a.truncate(6);
    let mut args: Vec<&str> = a.iter().map(String::as_str).collect();
    args.extend(["--out-dir", &alt, "--weighting", "count_repeats", "segregate"]);
    let o = intseg(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("robustness variant active"), "{log}");

    let out = d.join("merged.csv").display().to_string();
    let one = d.join("out/region.json").display().to_string();
    let two = Path::new(&alt).join("region.json").display().to_string();
    let o = intseg(&["report", &one, &two, "-o", &out]);
    assert_eq!(o.status.code(), Some(1), "mismatched hashes must be refused");
    let o = intseg(&["report", &one, &two, "-o", &out, "--force"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn report_on_zero_regions_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv").display().to_string();
    let o = intseg(&["report", "-o", &out]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        "label,population,venue_count,venue_cov,venue_is,overall_is,naive_is,bi,interactions\n"
    );
}

#[test]
fn missing_upstream_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let od = dir.path().display().to_string();
    let o = intseg(&["--out-dir", &od, "join"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `ingest` first"));
    let o = intseg(&["--out-dir", &od, "--json-logs", "segregate"]);
    assert_eq!(o.status.code(), Some(2));
    let line = String::from_utf8_lossy(&o.stderr).lines().last().unwrap().to_string();
    let rec: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(rec["level"], "ERROR");
    assert!(rec["message"].as_str().unwrap().contains("link-es"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(intseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(intseg(&["--dist-m=-5", "join"]).status.code(), Some(1));
    assert_eq!(intseg(&["decompose", "--by", "week"]).status.code(), Some(1));
    assert_eq!(intseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"join": {"dist_m": 0.0, "time_s": 300, "tie_strength": {"kind": "any"}, "weighting": "dedup_pairs", "collapse_repeats": true}}"#).unwrap();
    let c = cfg.display().to_string();
    let od = dir.path().display().to_string();
    assert_eq!(intseg(&["--config", &c, "--out-dir", &od, "join"]).status.code(), Some(1));
    let o = intseg(&["--config", &c, "--dist-m", "25", "--out-dir", &od, "join"]);
    assert_eq!(o.status.code(), Some(2), "valid config reaches the missing-upstream check");
}
