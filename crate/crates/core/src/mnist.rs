//! MNIST IDX parsing and continual-learning task construction.
//!
//! Task datasets never copy pixel data: every [`ExampleSet`] is a list of
//! row indices into a shared image matrix plus an optional pixel
//! permutation that is applied when a batch is gathered.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const IMAGE_SIDE: usize = 28;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Digit pairs of the five split tasks, in training order.
pub const SPLIT_DIGITS: [(u8, u8); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset<T> {
    /// `N × 784`, pixels in `[0, 1]`.
    pub images: Arc<Matrix<T>>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> RawDataset<T> {
    pub fn new(images: Matrix<T>, labels: Vec<u8>) -> Result<Self> {
        if images.rows() != labels.len() || images.cols() != PIXELS {
            return Err(Error::Shape {
                op: "RawDataset::new",
                left_rows: images.rows(),
                left_cols: images.cols(),
                right_rows: labels.len(),
                right_cols: PIXELS,
            });
        }
        Ok(Self {
            images: Arc::new(images),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::parse(0, format!("gzip stream: {e}")))?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(offset, "truncated header"))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::parse(
            0,
            format!("magic number {magic}, expected {expected}"),
        ));
    }
    Ok(())
}

/// Parses an IDX3 image stream (raw or gzip) into an `N × 784` matrix
/// scaled to `[0, 1]`.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Matrix<T>> {
    let bytes = maybe_gunzip(bytes)?;
    check_magic(&bytes, IMAGE_MAGIC)?;
    let n = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::parse(
            8,
            format!("image dimensions {rows}x{cols}, expected 28x28"),
        ));
    }
    let payload = &bytes[16..];
    let need = n * PIXELS;
    if payload.len() < need {
        return Err(Error::parse(
            16 + payload.len(),
            format!("truncated payload: {} of {need} pixel bytes", payload.len()),
        ));
    }
    let scale = T::of(255.0);
    let data = payload[..need]
        .iter()
        .map(|&b| T::of(b as f64) / scale)
        .collect();
    Matrix::new(n, PIXELS, data)
}

/// Parses an IDX1 label stream (raw or gzip).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let bytes = maybe_gunzip(bytes)?;
    check_magic(&bytes, LABEL_MAGIC)?;
    let n = read_be_u32(&bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::parse(
            8 + payload.len(),
            format!("truncated payload: {} of {n} labels", payload.len()),
        ));
    }
    let labels = payload[..n].to_vec();
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(Error::parse(
            8 + i,
            format!("label {} out of range", labels[i]),
        ));
    }
    Ok(labels)
}

/// Uncompressed IDX3 encoding of `images` (pixels rounded back to bytes).
pub fn encode_idx_images<T: Scalar>(images: &Matrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.data().len());
    for v in [
        IMAGE_MAGIC,
        images.rows() as u32,
        IMAGE_SIDE as u32,
        IMAGE_SIDE as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    let k = T::of(255.0);
    out.extend(
        images
            .data()
            .iter()
            .map(|&x| (x * k).round().as_f64().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_first_existing(dir: &Path, stem: &str) -> Result<Vec<u8>> {
    let plain = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    for path in [&plain, &gz] {
        if path.exists() {
            return std::fs::read(path).map_err(|e| Error::io(path, e));
        }
    }
    Err(Error::io(
        plain,
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "IDX file not found (also tried .gz)",
        ),
    ))
}

/// Loads `{prefix}-images-idx3-ubyte[.gz]` and `{prefix}-labels-idx1-ubyte[.gz]`.
pub fn load_raw<T: Scalar>(dir: &Path, prefix: &str) -> Result<RawDataset<T>> {
    let images = parse_idx_images(&read_first_existing(
        dir,
        &format!("{prefix}-images-idx3-ubyte"),
    )?)?;
    let labels = parse_idx_labels(&read_first_existing(
        dir,
        &format!("{prefix}-labels-idx1-ubyte"),
    )?)?;
    RawDataset::new(images, labels)
}

/// Training (`train`) and test (`t10k`) splits from an MNIST directory.
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<(RawDataset<T>, RawDataset<T>)> {
    Ok((load_raw(dir, "train")?, load_raw(dir, "t10k")?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Benchmark {
    Split,
    Permuted,
}

impl Benchmark {
    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Split => "split",
            Benchmark::Permuted => "permuted",
        }
    }
}

impl std::str::FromStr for Benchmark {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Benchmark::Split),
            "permuted" => Ok(Benchmark::Permuted),
            other => Err(Error::Config(format!("unknown benchmark {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub benchmark: Benchmark,
    /// 1-based.
    pub task_index: usize,
    pub digits: Option<(u8, u8)>,
    /// Permuted pixel `j` is source pixel `permutation[j]`.
    pub permutation: Option<Arc<Vec<usize>>>,
    pub head_id: usize,
}

/// A view of labelled examples: rows of a shared image matrix, optionally
/// pixel-permuted.
#[derive(Clone, Debug)]
pub struct ExampleSet<T> {
    source: Arc<Matrix<T>>,
    rows: Vec<usize>,
    targets: Vec<usize>,
    permutation: Option<Arc<Vec<usize>>>,
}

impl<T: Scalar> ExampleSet<T> {
    pub fn new(
        source: Arc<Matrix<T>>,
        rows: Vec<usize>,
        targets: Vec<usize>,
        permutation: Option<Arc<Vec<usize>>>,
    ) -> Self {
        assert_eq!(rows.len(), targets.len(), "one target per row");
        Self {
            source,
            rows,
            targets,
            permutation,
        }
    }

    /// Every row of `x` with its target.
    pub fn from_matrix(x: Matrix<T>, targets: Vec<usize>) -> Self {
        let rows = (0..x.rows()).collect();
        Self::new(Arc::new(x), rows, targets, None)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.source.cols()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Row indices into the shared source matrix.
    pub fn source_rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn permutation(&self) -> Option<&[usize]> {
        self.permutation.as_deref().map(Vec::as_slice)
    }

    /// Inputs at the given positions of this set, in order.
    pub fn gather(&self, positions: &[usize]) -> Matrix<T> {
        let dim = self.dim();
        let mut out = Matrix::zeros(positions.len(), dim);
        for (r, &p) in positions.iter().enumerate() {
            let src = self.source.row(self.rows[p]);
            let dst = out.row_mut(r);
            match &self.permutation {
                Some(perm) => dst
                    .iter_mut()
                    .zip(perm.iter())
                    .for_each(|(d, &j)| *d = src[j]),
                None => dst.copy_from_slice(src),
            }
        }
        out
    }

    pub fn gather_targets(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.targets[p]).collect()
    }

    pub fn inputs(&self) -> Matrix<T> {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, positions: &[usize]) -> Self {
        Self {
            source: Arc::clone(&self.source),
            rows: positions.iter().map(|&p| self.rows[p]).collect(),
            targets: self.gather_targets(positions),
            permutation: self.permutation.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskDataset<T> {
    pub spec: TaskSpec,
    pub n_classes: usize,
    pub train: ExampleSet<T>,
    pub test: ExampleSet<T>,
}

impl<T: Scalar> TaskDataset<T> {
    /// Training-set size, `N_t`.
    pub fn n_train(&self) -> usize {
        self.train.len()
    }
}

fn split_view<T: Scalar>(
    source: &Arc<Matrix<T>>,
    labels: &[u8],
    (lo, hi): (u8, u8),
) -> ExampleSet<T> {
    let (rows, targets): (Vec<usize>, Vec<usize>) = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == lo || l == hi)
        .map(|(i, &l)| (i, usize::from(l == hi)))
        .unzip();
    ExampleSet::new(Arc::clone(source), rows, targets, None)
}

/// The five binary split tasks. The smaller digit of each pair is class 0;
/// task `t` uses head `t - 1`.
pub fn build_split_tasks<T: Scalar>(
    raw_train: &RawDataset<T>,
    raw_test: &RawDataset<T>,
) -> Vec<TaskDataset<T>> {
    let train_src = Arc::clone(&raw_train.images);
    let test_src = Arc::clone(&raw_test.images);
    SPLIT_DIGITS
        .iter()
        .enumerate()
        .map(|(i, &digits)| TaskDataset {
            spec: TaskSpec {
                benchmark: Benchmark::Split,
                task_index: i + 1,
                digits: Some(digits),
                permutation: None,
                head_id: i,
            },
            n_classes: 2,
            train: split_view(&train_src, &raw_train.labels, digits),
            test: split_view(&test_src, &raw_test.labels, digits),
        })
        .collect()
}

/// `n_tasks` ten-way tasks, each with its own seeded pixel permutation and
/// the single shared head 0. With `identity_first`, task 1 keeps the
/// original pixel order.
pub fn build_permuted_tasks<T: Scalar>(
    raw_train: &RawDataset<T>,
    raw_test: &RawDataset<T>,
    n_tasks: usize,
    rng: &mut SeededRng,
    identity_first: bool,
) -> Vec<TaskDataset<T>> {
    let train_src = Arc::clone(&raw_train.images);
    let test_src = Arc::clone(&raw_test.images);
    let all = |labels: &[u8]| -> (Vec<usize>, Vec<usize>) {
        (
            (0..labels.len()).collect(),
            labels.iter().map(|&l| l as usize).collect(),
        )
    };
    let (train_rows, train_targets) = all(&raw_train.labels);
    let (test_rows, test_targets) = all(&raw_test.labels);
    (0..n_tasks)
        .map(|t| {
            let perm = if t == 0 && identity_first {
                (0..PIXELS).collect()
            } else {
                rng.permutation(PIXELS)
            };
            let perm = Arc::new(perm);
            TaskDataset {
                spec: TaskSpec {
                    benchmark: Benchmark::Permuted,
                    task_index: t + 1,
                    digits: None,
                    permutation: Some(Arc::clone(&perm)),
                    head_id: 0,
                },
                n_classes: 10,
                train: ExampleSet::new(
                    Arc::clone(&train_src),
                    train_rows.clone(),
                    train_targets.clone(),
                    Some(Arc::clone(&perm)),
                ),
                test: ExampleSet::new(
                    Arc::clone(&test_src),
                    test_rows.clone(),
                    test_targets.clone(),
                    Some(perm),
                ),
            }
        })
        .collect()
}

/// Held-out examples of one task, routed through `head_id`.
#[derive(Clone, Debug)]
pub struct CoresetTask<T> {
    pub task_index: usize,
    pub head_id: usize,
    pub examples: ExampleSet<T>,
}

#[derive(Clone, Debug)]
pub struct CoresetStore<T> {
    pub k: usize,
    pub tasks: Vec<CoresetTask<T>>,
}

impl<T: Scalar> CoresetStore<T> {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            tasks: Vec::new(),
        }
    }

    pub fn total_examples(&self) -> usize {
        self.tasks.iter().map(|c| c.examples.len()).sum()
    }

    pub fn push(&mut self, coreset: CoresetTask<T>) {
        self.tasks.push(coreset);
    }
}

/// Removes `k` uniformly chosen training examples from `task` and returns
/// them as a coreset alongside the reduced task. Test data is untouched.
pub fn draw_random_coreset<T: Scalar>(
    task: &TaskDataset<T>,
    k: usize,
    rng: &mut SeededRng,
) -> Result<(CoresetTask<T>, TaskDataset<T>)> {
    let n = task.n_train();
    if k > n {
        return Err(Error::Config(format!(
            "coreset size {k} exceeds task {} training size {n}",
            task.spec.task_index
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first k positions are a uniform sample.
    for i in 0..k {
        let j = i + rng.below(n - i);
        order.swap(i, j);
    }
    let (chosen, rest) = order.split_at(k);
    let mut chosen = chosen.to_vec();
    let mut rest = rest.to_vec();
    chosen.sort_unstable();
    rest.sort_unstable();
    let coreset = CoresetTask {
        task_index: task.spec.task_index,
        head_id: task.spec.head_id,
        examples: task.train.subset(&chosen),
    };
    let reduced = TaskDataset {
        spec: task.spec.clone(),
        n_classes: task.n_classes,
        train: task.train.subset(&rest),
        test: task.test.clone(),
    };
    Ok((coreset, reduced))
}
