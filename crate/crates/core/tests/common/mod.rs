#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use domsel::embedding_store::EmbeddingMatrix;
use domsel::pipeline::RunConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "ta", "shi", "po", "ve", "da", "gu", "fe", "zo", "bi", "ha", "ju", "ce", "wa",
    "xi", "no", "se", "ri", "mo", "tu",
];

pub struct Toy {
    pub in_domain: PathBuf,
    pub ood_source: PathBuf,
    pub ood_target: PathBuf,
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(2..=4);
    (0..len).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

fn sentence(rng: &mut ChaCha8Rng, topic: &[String], common: &[String]) -> String {
    let len = rng.gen_range(4..=12);
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.7) {
                topic.choose(rng).unwrap().as_str()
            } else {
                common.choose(rng).unwrap().as_str()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn translate(s: &str) -> String {
    s.split(' ').map(|w| w.chars().rev().collect::<String>()).collect::<Vec<_>>().join(" ")
}

/// Writes a monolingual in-domain corpus drawn from topic 0 and a parallel
/// general-domain corpus mixing five topics.
pub fn toy_corpora(dir: &Path, in_lines: usize, ood_lines: usize, seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common: Vec<String> = (0..60).map(|_| word(&mut rng)).collect();
    let topics: Vec<Vec<String>> = (0..5).map(|_| (0..200).map(|_| word(&mut rng)).collect()).collect();

    let mut in_domain = String::new();
    for _ in 0..in_lines {
        in_domain.push_str(&sentence(&mut rng, &topics[0], &common));
        in_domain.push('\n');
    }
    let (mut src, mut tgt) = (String::new(), String::new());
    for _ in 0..ood_lines {
        let t = rng.gen_range(0..topics.len());
        let s = sentence(&mut rng, &topics[t], &common);
        tgt.push_str(&translate(&s));
        tgt.push('\n');
        src.push_str(&s);
        src.push('\n');
    }
    let toy = Toy {
        in_domain: dir.join("in_domain.txt"),
        ood_source: dir.join("ood.src"),
        ood_target: dir.join("ood.tgt"),
    };
    fs::write(&toy.in_domain, in_domain).unwrap();
    fs::write(&toy.ood_source, src).unwrap();
    fs::write(&toy.ood_target, tgt).unwrap();
    toy
}

/// Hash-backend configuration at a size that keeps tests fast.
pub fn hash_config(toy: &Toy, out_dir: &Path) -> RunConfig {
    RunConfig {
        in_domain: Some(toy.in_domain.clone()),
        ood_source: Some(toy.ood_source.clone()),
        ood_target: Some(toy.ood_target.clone()),
        out_dir: Some(out_dir.to_path_buf()),
        hash_dims: 64,
        pca_in_dims: 64,
        pca_out_dims: 32,
        pca_sample: 20_000,
        chunk_rows: 10_000,
        ..RunConfig::default()
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dims: usize) -> EmbeddingMatrix {
    let data = (0..rows * dims).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(rows, dims, data).unwrap()
}

/// Splits a matrix into consecutive chunks as a streaming reader would.
pub fn chunks(m: &EmbeddingMatrix, chunk_rows: usize) -> Vec<domsel::Result<EmbeddingMatrix>> {
    (0..m.rows())
        .step_by(chunk_rows)
        .map(|start| {
            let idx: Vec<usize> = (start..(start + chunk_rows).min(m.rows())).collect();
            m.select_rows(&idx)
        })
        .collect()
}

pub fn domsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_domsel"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// All regular files under `dir` keyed by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Normalization and scoring written out independently of the library.
pub fn oracle_normalize(m: &EmbeddingMatrix) -> Vec<Vec<f32>> {
    m.iter_rows()
        .map(|row| {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm == 0.0 {
                row.to_vec()
            } else {
                row.iter().map(|&v| (f64::from(v) / norm) as f32).collect()
            }
        })
        .collect()
}

pub fn oracle_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc + 0.0
}

pub fn f64_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let na: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Exhaustive scoring followed by a full sort of every doc.
pub fn oracle_top_n(queries: &EmbeddingMatrix, docs: &EmbeddingMatrix, n: usize) -> Vec<Vec<(u64, f32)>> {
    let q = oracle_normalize(queries);
    let d = oracle_normalize(docs);
    q.iter()
        .map(|qr| {
            let mut all: Vec<(u64, f32)> = d.iter().enumerate().map(|(j, dr)| (j as u64, oracle_dot(qr, dr))).collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            all.truncate(n);
            all
        })
        .collect()
}
