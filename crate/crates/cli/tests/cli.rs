use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use binnet_cli::mnist::{Idx, MnistDataset, Split, IMAGE_MAGIC, LABEL_MAGIC};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn binnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes a small MNIST-shaped set: each class lights a different band of rows.
fn synthetic_mnist(dir: &Path, train: usize, test: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (split, n) in [(Split::Train, train), (Split::Test, test)] {
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let mut pixels = Vec::with_capacity(n * 784);
        for &l in &labels {
            for r in 0..28 {
                for _ in 0..28 {
                    let lit = r / 3 == l as usize;
                    pixels.push(if lit { rng.gen_range(180..=255) } else { rng.gen_range(0..40) });
                }
            }
        }
        let images = Idx {
            dims: vec![n, 28, 28],
            data: pixels,
        };
        let labels = Idx {
            dims: vec![n],
            data: labels,
        };
        fs::write(split.image_path(dir), images.to_bytes()).unwrap();
        fs::write(split.label_path(dir), labels.to_bytes()).unwrap();
    }
}

fn train(data: &Path, out: &Path, metrics: &Path, seed: &str) -> Output {
    binnet(&[
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "50",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
        "--metrics",
        metrics.to_str().unwrap(),
    ])
}

#[test]
fn idx_round_trips_real_mnist_bytes() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let path = Split::Test.label_path(&dir);
    let Ok(bytes) = fs::read(&path) else {
        eprintln!("{} missing, skipping", path.display());
        return;
    };
    let idx = Idx::parse(&bytes).unwrap();
    assert_eq!(idx.magic(), LABEL_MAGIC);
    assert_eq!(idx.dims, vec![10_000]);
    assert_eq!(idx.to_bytes(), bytes);
    let images = Idx::read(&Split::Test.image_path(&dir)).unwrap();
    assert_eq!(images.magic(), IMAGE_MAGIC);
    assert_eq!(images.dims, vec![10_000, 28, 28]);
}

#[test]
fn same_seed_gives_identical_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fs::create_dir(&data).unwrap();
    synthetic_mnist(&data, 300, 100);
    let run = |tag: &str, seed: &str| {
        let (model, metrics) = (tmp.path().join(format!("{tag}.bmx")), tmp.path().join(format!("{tag}.csv")));
        let o = train(&data, &model, &metrics, seed);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (fs::read(model).unwrap(), fs::read_to_string(metrics).unwrap())
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert!(a.1.starts_with("epoch,train_loss,test_acc\n1,"), "{}", a.1);
}

#[test]
fn train_convert_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fs::create_dir(&data).unwrap();
    synthetic_mnist(&data, 300, 20);
    let (model, packed) = (tmp.path().join("m.bmx"), tmp.path().join("p.bmx"));
    let o = train(&data, &model, &tmp.path().join("m.csv"), "3");
    assert!(o.status.success());

    let o = binnet(&["convert", "--input", model.to_str().unwrap(), "--output", packed.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("bytes_before") && text.contains("ratio"), "{text}");
    assert!(fs::metadata(&packed).unwrap().len() * 15 < fs::metadata(&model).unwrap().len());

    // both models predict the same class with probabilities summing to one
    let test = MnistDataset::load(&data, Split::Test).unwrap();
    for index in 0..3 {
        let classes: Vec<String> = [&model, &packed]
            .iter()
            .map(|m| {
                let o = binnet(&[
                    "predict",
                    "--model",
                    m.to_str().unwrap(),
                    "--index",
                    &index.to_string(),
                    "--data-dir",
                    data.to_str().unwrap(),
                ]);
                assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
                let text = stdout(&o);
                let probs: Vec<f64> = text
                    .lines()
                    .find_map(|l| l.strip_prefix("probabilities "))
                    .unwrap()
                    .split(' ')
                    .map(|p| p.parse().unwrap())
                    .collect();
                assert_eq!(probs.len(), 10);
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-4, "{probs:?}");
                text.lines().next().unwrap().to_string()
            })
            .collect();
        assert_eq!(classes[0], classes[1]);
        assert!(test.labels[index] < 10);
    }

    // raw image path: 784 bytes classify, anything else is a usage error
    let raw = tmp.path().join("img.raw");
    fs::write(&raw, vec![0u8; 784]).unwrap();
    let o = binnet(&["predict", "--model", packed.to_str().unwrap(), "--image", raw.to_str().unwrap()]);
    assert!(o.status.success());
    fs::write(&raw, vec![0u8; 100]).unwrap();
    let o = binnet(&["predict", "--model", packed.to_str().unwrap(), "--image", raw.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    // a converted model cannot be converted again, and nothing is written
    let again = tmp.path().join("again.bmx");
    let o = binnet(&["convert", "--input", packed.to_str().unwrap(), "--output", again.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!again.exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(binnet(&["--help"]).status.code(), Some(0));
    assert_eq!(binnet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(binnet(&["train", "--bits", "0"]).status.code(), Some(1));

    let junk = tmp.path().join("junk.bmx");
    fs::write(&junk, b"not a model at all").unwrap();
    let out = tmp.path().join("out.bmx");
    let o = binnet(&["convert", "--input", junk.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let missing = tmp.path().join("nowhere");
    let o = binnet(&["train", "--data-dir", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let o = binnet(&["bench", "gemm", "--m", "4", "--n", "4", "--k", "64", "--repeats", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_gemm_writes_parseable_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bench.csv");
    let o = binnet(&[
        "bench", "gemm", "--m", "8", "--n", "64", "--k", "200", "--repeats", "3", "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("kernel,M,N,K,repeats,median_ns,pack_ns,checksum,seed"));
    let rows: Vec<binnet::gemm::BenchRecord> =
        lines.map(|l| binnet::gemm::BenchRecord::from_csv_row(l).unwrap()).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.checksum == rows[0].checksum && r.k == 200));
}
