mod common;

use std::fs;
use std::path::Path;

use common::{domsel, toy_corpora};
use domsel::embedding_store::{read_all, EmbeddingMatrix, EmbeddingWriter};

fn base_args(toy: &common::Toy, out: &str) -> Vec<String> {
    vec![
        "--in-domain".into(),
        toy.in_domain.display().to_string(),
        "--ood-source".into(),
        toy.ood_source.display().to_string(),
        "--ood-target".into(),
        toy.ood_target.display().to_string(),
        "--out-dir".into(),
        out.into(),
        "--set".into(),
        "hash.dims=64".into(),
        "--set".into(),
        "pca.in_dims=64".into(),
    ]
}

fn run(cmd: &str, args: &[String]) -> std::process::Output {
    let mut all = vec![cmd];
    all.extend(args.iter().map(String::as_str));
    domsel(&all)
}

const STUB_BRIDGE: &str = r#"
import struct, sys
lines = sys.stdin.buffer.read().split(b"\n")
if lines and lines[-1] == b"":
    lines.pop()
dims = 8
out = sys.stdout.buffer
out.write(b"EMB1" + struct.pack("<HIQB", 1, dims, len(lines), 0) + bytes(13))
for i, _ in enumerate(lines):
    out.write(struct.pack("<%df" % dims, *[i * 0.25 + j * 0.125 - 1.0 for j in range(dims)]))
"#;

fn stub_expected(rows: usize) -> EmbeddingMatrix {
    let dims = 8;
    let data = (0..rows)
        .flat_map(|i| (0..dims).map(move |j| i as f32 * 0.25 + j as f32 * 0.125 - 1.0))
        .collect();
    EmbeddingMatrix::new(rows, dims, data).unwrap()
}

#[test]
fn stub_bridge_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_corpora(dir.path(), 12, 40, 3);
    let script = dir.path().join("bridge.py");
    fs::write(&script, STUB_BRIDGE).unwrap();
    let out = dir.path().join("out");
    let mut args = base_args(&toy, out.to_str().unwrap());
    args.extend([
        "--backend".into(),
        "bridge".into(),
        "--bridge-command".into(),
        format!("python3 {}", script.display()),
        "--set".into(),
        "pca.enabled=false".into(),
    ]);
    let o = run("embed", &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let expected = dir.path().join("expected.emb");
    let mut w = EmbeddingWriter::create(&expected, 8, false).unwrap();
    w.push(&stub_expected(12)).unwrap();
    w.finish().unwrap();
    assert_eq!(fs::read(out.join("in_domain.emb")).unwrap(), fs::read(&expected).unwrap());
    assert_eq!(read_all(out.join("ood.emb")).unwrap(), stub_expected(40));
}

#[test]
fn bridge_row_count_mismatch_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_corpora(dir.path(), 5, 20, 4);
    let script = dir.path().join("short.py");
    fs::write(&script, STUB_BRIDGE.replace("len(lines)", "len(lines) - 1").replace("enumerate(lines)", "enumerate(lines[1:])")).unwrap();
    let out = dir.path().join("out");
    let mut args = base_args(&toy, out.to_str().unwrap());
    args.extend([
        "--backend".into(),
        "bridge".into(),
        "--bridge-command".into(),
        format!("python3 {}", script.display()),
        "--set".into(),
        "pca.enabled=false".into(),
    ]);
    let o = run("embed", &args);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rows"));
}

#[test]
fn missing_corpus_fails_validation_before_spawning() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_corpora(dir.path(), 5, 20, 5);
    let marker = dir.path().join("spawned");
    let script = dir.path().join("touch.py");
    fs::write(&script, format!("open({:?}, 'w').close()\n", marker.display().to_string())).unwrap();
    fs::remove_file(&toy.ood_target).unwrap();
    let out = dir.path().join("out");
    let mut args = base_args(&toy, out.to_str().unwrap());
    args.extend([
        "--backend".into(),
        "bridge".into(),
        "--bridge-command".into(),
        format!("python3 {}", script.display()),
    ]);
    let o = run("pipeline", &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ood_target"));
    assert!(!marker.exists());
    assert!(!out.exists());
}

#[test]
fn out_dims_above_in_dims_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_corpora(dir.path(), 5, 20, 6);
    let out = dir.path().join("out");
    let mut args = base_args(&toy, out.to_str().unwrap());
    args.extend(["--pca-out-dims".into(), "65".into()]);
    let o = run("pipeline", &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pca.out_dims"));
}

#[test]
fn stages_run_one_by_one_give_sixty_selection_lines() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_corpora(dir.path(), 10, 100, 7);
    let out = dir.path().join("out");
    let args = base_args(&toy, out.to_str().unwrap());
    for cmd in ["embed", "pca-fit", "pca-apply", "select"] {
        let o = run(cmd, &args);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let tsv = fs::read_to_string(out.join("selection.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 60);
    for (i, line) in tsv.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 4);
        assert_eq!(f[0].parse::<usize>().unwrap(), i / 6);
        assert_eq!(f[1].parse::<usize>().unwrap(), i % 6 + 1);
    }
    assert!(out.join("run_manifest.json").is_file());
    assert!(!out.join(".lock").exists());
}

#[test]
fn select_before_embed_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_corpora(dir.path(), 5, 20, 8);
    let out = dir.path().join("out");
    let o = run("select", &base_args(&toy, out.to_str().unwrap()));
    assert_eq!(o.status.code(), Some(1));
}

fn pipeline_stdout(args: &[String]) -> String {
    let o = run("pipeline", args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn rerun_is_identical_and_resume_redoes_only_build() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_corpora(dir.path(), 30, 600, 9);
    let out = dir.path().join("out");
    let args = base_args(&toy, out.to_str().unwrap());

    let first = pipeline_stdout(&args);
    assert!(first.starts_with("executed\tembed,pca-fit,pca-apply,select,build,centroids\n"));
    let tsv = fs::read(out.join("selection.tsv")).unwrap();
    let before = common::snapshot(&out);

    let second = pipeline_stdout(&args);
    assert_eq!(second, "executed\t\nskipped\tembed,pca-fit,pca-apply,select,build,centroids\n");
    assert_eq!(fs::read(out.join("selection.tsv")).unwrap(), tsv);

    for k in 1..=6 {
        fs::remove_file(out.join(format!("mix{k}.src"))).unwrap();
        fs::remove_file(out.join(format!("mix{k}.tgt"))).unwrap();
    }
    let third = pipeline_stdout(&args);
    assert_eq!(third, "executed\tbuild\nskipped\tembed,pca-fit,pca-apply,select,centroids\n");
    assert_eq!(common::snapshot(&out), before);
}

#[test]
fn changed_parameter_invalidates_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_corpora(dir.path(), 20, 300, 10);
    let out = dir.path().join("out");
    let mut args = base_args(&toy, out.to_str().unwrap());
    pipeline_stdout(&args);
    args.push("--dedup".into());
    let again = pipeline_stdout(&args);
    assert_eq!(again, "executed\tbuild\nskipped\tembed,pca-fit,pca-apply,select,centroids\n");
    args.extend(["--n".into(), "3".into()]);
    let again = pipeline_stdout(&args);
    assert_eq!(again, "executed\tselect,build,centroids\nskipped\tembed,pca-fit,pca-apply\n");
    assert_eq!(fs::read_to_string(out.join("selection.tsv")).unwrap().lines().count(), 60);
    assert!(out.join("mix3.src").is_file());
    assert!(!out.join("top4.src").exists());
    assert!(!out.join("mix6.tgt").exists());
}

fn write_lines(path: &Path, lines: &[&str]) {
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn eval_and_significance_commands() {
    let dir = tempfile::tempdir().unwrap();
    let refs: Vec<String> = (0..120).map(|i| format!("sentence number {i} has a few words in it")).collect();
    let worse: Vec<String> = (0..120).map(|i| format!("sentence {i} words")).collect();
    let r = dir.path().join("ref.txt");
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    write_lines(&r, &refs.iter().map(String::as_str).collect::<Vec<_>>());
    write_lines(&a, &refs.iter().map(String::as_str).collect::<Vec<_>>());
    write_lines(&b, &worse.iter().map(String::as_str).collect::<Vec<_>>());

    let o = domsel(&["eval", "--hyp", a.to_str().unwrap(), "--ref", r.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout), "bleu\t100.00\nchrf2\t100.00\n");

    let tsv = dir.path().join("sig.tsv");
    let o = domsel(&[
        "significance",
        "--metric",
        "chrf2",
        "--hyp-a",
        a.to_str().unwrap(),
        "--hyp-b",
        b.to_str().unwrap(),
        "--ref",
        r.to_str().unwrap(),
        "--iterations",
        "200",
        "--sample-sizes",
        "50,100",
        "--output",
        tsv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&tsv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "metric\tsample_size\tp_value\tci_low\tci_high\tsignificant");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("chrf2\t50\t0.0000\t"));
    assert!(lines[2].ends_with("\ttrue"));

    let o = domsel(&["significance", "--metric", "bleu", "--hyp-a", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
