use std::path::Path;
use std::process::{Command, Output};

fn claime(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_claime"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn truth_sample_embed_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, cov) = (dir.path().join("emb.json"), dir.path().join("cov.json"));
    let (summary, cohort) = (dir.path().join("s.cooc.gz"), dir.path().join("cohort.tsv"));
    ok(&claime(
        &["make-truth", "--d1", "6", "--d2", "4", "--p", "2", "--seed", "3", "--noise", "case1:0.5", "--emb", p(&emb), "--cov", p(&cov)],
        &[],
    ));
    ok(&claime(&["sample", "--emb", p(&emb), "--cov", p(&cov), "--n", "300", "--out", p(&summary), "--cohort", p(&cohort)], &[]));
    assert!(std::fs::read_to_string(&cohort).unwrap().lines().count() > 300);

    for method in ["claime", "cl", "concate"] {
        let out = dir.path().join(format!("{method}.tsv"));
        ok(&claime(&["embed", "--summary", p(&summary), "--method", method, "--out", p(&out)], &[("CLAIME_P", "2")]));
        assert_eq!(std::fs::read_to_string(&out).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 10);
    }

    let pairs = dir.path().join("pairs.csv");
    let dict = dir.path().join("dict.csv");
    std::fs::write(&pairs, "feature_a,feature_b,label,pair_class\n1,2,sim,similar\n3,7,rel,related\n4,8,rel,related\n").unwrap();
    let mut d = String::from("feature_id,modality,code_string,description\n");
    for i in 1..=10 {
        let (m, code) = if i <= 6 { (1, format!("PheCode:{i}")) } else { (2, format!("CUI:C{i}")) };
        d.push_str(&format!("{i},{m},{code},feature {i}\n"));
    }
    std::fs::write(&dict, d).unwrap();
    let report = dir.path().join("auc.csv");
    let emb_file = dir.path().join("claime.tsv");
    ok(&claime(&["evaluate", "--embeddings", p(&emb_file), "--pairs", p(&pairs), "--dict", p(&dict), "--out", p(&report)], &[]));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("pair_type,group,method,auc,count\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn simulate_is_deterministic_and_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    std::fs::write(
        &config,
        r#"{"experiment":"VaryN","case":"Case1","grids":{"n":[300,500]},"d":8,"p":2,"replications":2,"seed":4,
            "methods":["CLAIME","CL","Concate"]}"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&claime(&["simulate", "--config", p(&config), "--out", p(&a)], &[("CLAIME_JOBS", "1")]));
    ok(&claime(&["simulate", "--config", p(&config), "--out", p(&b), "--jobs", "3"], &[]));
    let ra = std::fs::read(a.join("report.csv")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.csv")).unwrap());
    assert_eq!(String::from_utf8(ra).unwrap().lines().count(), 1 + 2 * 2 * 3);
    assert!(a.join("report.json").exists() && a.join("summary.csv").exists());

    std::fs::write(&config, r#"{"experiment":"VarySNR","case":"Case1","grids":{"c":[-1.0]},"d":8,"p":2,"n":300,"replications":1}"#).unwrap();
    let out = claime(&["simulate", "--config", p(&config)], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_writes_pmi_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, cov) = (dir.path().join("emb.json"), dir.path().join("cov.json"));
    ok(&claime(&["make-truth", "--d1", "4", "--d2", "4", "--p", "2", "--emb", p(&emb), "--cov", p(&cov)], &[]));
    let out = dir.path().join("pop.cpmi");
    ok(&claime(&["oracle-pmi", "--emb", p(&emb), "--cov", p(&cov), "--mc", "2000", "--out", p(&out)], &[]));
    assert!(out.exists());
    let se: Vec<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(dir.path().join("pop.cpmi.se.json")).unwrap()).unwrap();
    assert_eq!(se.len(), 8);
}

#[test]
fn bad_input_is_an_error() {
    let out = claime(&["embed", "--summary", "/nonexistent/summary", "--method", "claime", "--p", "2"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = claime(&["make-truth", "--d1", "4", "--d2", "4", "--p", "2", "--noise", "bogus", "--emb", "/tmp/x", "--cov", "/tmp/y"], &[]);
    assert!(!out.status.success());
}
