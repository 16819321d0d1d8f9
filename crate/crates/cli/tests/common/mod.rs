#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use vcl_core::mnist::{encode_idx_images, encode_idx_labels, PIXELS};
use vcl_core::{Matrix, SeededRng};

/// Writes a small synthetic MNIST-shaped dataset (`train-*` and `t10k-*`
/// IDX files) where each digit is a bright band at its own height.
pub fn write_synthetic_mnist(dir: &Path, per_digit_train: usize, per_digit_test: usize, seed: u64) {
    let mut rng = SeededRng::new(seed);
    for (prefix, per_digit) in [("train", per_digit_train), ("t10k", per_digit_test)] {
        let n = 10 * per_digit;
        let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        rng.shuffle(&mut labels);
        let images = Matrix::<f64>::from_fn(n, PIXELS, |r, c| {
            let band = usize::from(labels[r]) * 2 + 4;
            let base = if (band..band + 4).contains(&(c / 28)) {
                200.0
            } else {
                0.0
            };
            ((base + 55.0 * rng.uniform()).round()) / 255.0
        });
        std::fs::write(
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            encode_idx_images(&images),
        )
        .unwrap();
        std::fs::write(
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
            encode_idx_labels(&labels),
        )
        .unwrap();
    }
}

pub fn vcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcl"))
        .args(args)
        .env_remove("VCL_MNIST_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vcl")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small split run arguments over the synthetic data in `data`.
pub fn tiny_run_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "run",
        "--preset",
        "split-desk",
        "--epochs",
        "2",
        "--runs",
        "2",
        "--tasks",
        "3",
        "--widths",
        "12",
        "--batch-size",
        "64",
        "--eval-samples",
        "5",
        "--train-samples",
        "2",
        "--seed",
        "7",
        "--data-dir",
        data,
        "--output-dir",
        out,
    ]
}
