use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tdec::cli::{load_checkpoint, save_checkpoint, Settings, METRICS_HEADER};
use tdec::data::write_idx_images;
use tdec::model::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = "\
dataset = blobs
clusters = 3
blob_per_cluster = 12
blob_dim = 64
hidden = 16
reduction_hidden = 8
embed_dim = 4
encoder_blocks = 1
batch_size = 16
pretrain_epochs = 2
max_iter = 3
k = 5
augment = false
seed = 11
";

fn tdec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdec"))
        .args(args)
        .env("TDEC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_dataset_path_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "dataset = idx\nclusters = 3\n");
    let o = tdec(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`images`"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_key_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tdec(&["cluster"]).status.code(), Some(1));
    let cfg = config(dir.path(), &format!("{}bogus = 1\n", TINY));
    let o = tdec(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`bogus`"));
}

#[test]
fn unreadable_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "dataset = idx\nclusters = 2\nimages = /nonexistent/images.idx\n");
    let o = tdec(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_idx_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.idx");
    write_idx_images(&img, 8, 8, &[7u8; 64 * 3]).unwrap();
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 5]).unwrap();
    let cfg = config(dir.path(), &format!("dataset = idx\nclusters = 2\nimages = {}\n", s(&img)));
    let o = tdec(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_empty_output_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("o");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    assert_eq!(tdec(&["pretrain", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(1));
    let o = tdec(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--force"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("pretrain.ckpt").exists());
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_embed_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("train");
    let o = tdec(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let metrics = csv(&out.join("metrics.csv"));
    assert_eq!(metrics[0].join(","), METRICS_HEADER);
    assert!(metrics.len() >= 2);
    for row in &metrics[1..] {
        assert_eq!(row.len(), 8);
        for v in &row[1..] {
            v.parse::<f64>().unwrap();
        }
    }
    let labels = csv(&out.join("labels.csv"));
    assert_eq!(labels[0], ["index", "label"]);
    assert_eq!(labels.len(), 36 + 1);

    let emb = dir.path().join("emb");
    let ck = out.join("model.ckpt");
    let o = tdec(&["embed", "--checkpoint", s(&ck), "--out", s(&emb)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv(&emb.join("embeddings.csv"));
    assert_eq!(rows[0], ["index", "z1", "z2", "label"]);
    assert_eq!(rows.len(), 36 + 1);

    let o = tdec(&["eval", "--checkpoint", s(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let fields: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(fields[0], "acc");
    let acc: f64 = fields[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn metrics_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(tdec(&["train", "--config", s(&cfg), "--out", s(&a)]).status.code(), Some(0));
    assert_eq!(tdec(&["train", "--config", s(&cfg), "--out", s(&b)]).status.code(), Some(0));
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn resuming_from_pretrain_checkpoint_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let pre = dir.path().join("pre");
    let whole = dir.path().join("whole");
    let resumed = dir.path().join("resumed");
    assert_eq!(tdec(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]).status.code(), Some(0));
    assert_eq!(tdec(&["train", "--config", s(&cfg), "--out", s(&whole)]).status.code(), Some(0));
    let ck = pre.join("pretrain.ckpt");
    let o = tdec(&["train", "--config", s(&cfg), "--out", s(&resumed), "--checkpoint", s(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(whole.join("metrics.csv")).unwrap(),
        std::fs::read(resumed.join("metrics.csv")).unwrap()
    );
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(tdec(&["pretrain", "--config", s(&cfg), "--out", s(&a)]).status.code(), Some(0));
    assert_eq!(
        tdec(&["pretrain", "--config", s(&cfg), "--out", s(&b), "--seed", "12"]).status.code(),
        Some(0)
    );
    assert_ne!(
        std::fs::read(a.join("pretrain.csv")).unwrap(),
        std::fs::read(b.join("pretrain.csv")).unwrap()
    );
}

#[test]
fn sweep_k_writes_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = tdec(&["sweep-k", "--config", s(&cfg), "--out", s(&out), "--list", "0,3,5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv(&out.join("sweep_k.csv"));
    assert_eq!(rows.len(), 4);
    let ks: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ks, ["0", "3", "5"]);
}

fn tiny_checkpoint(dir: &Path) -> (PathBuf, Model, Settings, ChaCha8Rng) {
    let settings = Settings::parse(TINY).unwrap();
    let data = settings.data.load(3, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mc = settings.model.model_config(data.grid().unwrap(), true);
    let model = Model::new(mc, &mut rng).unwrap();
    let path = dir.join("m.ckpt");
    save_checkpoint(&path, &model, &settings, &rng).unwrap();
    (path, model, settings, rng)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model, settings, rng) = tiny_checkpoint(dir.path());
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model, model);
    assert_eq!(ck.settings, settings);
    assert_eq!(ck.rng, rng);
    for (a, b) in ck.model.params.leaves().iter().zip(model.params.leaves()) {
        let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn truncated_or_mismatched_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ..) = tiny_checkpoint(dir.path());
    let bytes = std::fs::read(&path).unwrap();
    for cut in [4, 12, 40, bytes.len() / 2, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{}.ckpt", cut));
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(load_checkpoint(&p).is_err(), "cut at {}", cut);
    }
    let mut versioned = bytes.clone();
    versioned[8] = 99;
    let p = dir.path().join("v.ckpt");
    std::fs::write(&p, &versioned).unwrap();
    let err = load_checkpoint(&p).unwrap_err().to_string();
    assert!(err.contains("version"), "{}", err);
}

#[test]
fn shipped_configs_parse_and_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    for name in ["blobs.cfg", "mnist-179.cfg"] {
        let text = std::fs::read_to_string(root.join("configs").join(name)).unwrap();
        let text = text.replace("crates/core/", &format!("{}/", env!("CARGO_MANIFEST_DIR")));
        let settings = Settings::parse(&text).unwrap();
        assert_eq!(settings.run.clusters, 3, "{}", name);
        let data = settings.data.load(settings.run.clusters, settings.run.seed).unwrap();
        assert_eq!(data.len(), if name == "blobs.cfg" { 600 } else { 900 });
    }
}
