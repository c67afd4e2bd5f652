//! Frozen-feature evaluation: weighted k-NN, linear probe, collapse
//! diagnostics and embedding export.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::data::ImageDataset;
use crate::model::{global_feature, EncoderState, GlobalFeature, ModelError};
use crate::numerics::{matmul_nt, rowwise_l2_normalize, topk_row, Matrix, NumericsError, Scalar};

/// Default k-NN temperature.
pub const TAU_KNN: f64 = 0.07;
/// Neighbourhood sizes of the standard sweep.
pub const DEFAULT_KS: [usize; 4] = [10, 20, 100, 200];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature table is empty")]
    EmptyTable,
    #[error("k={k} is not in 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error("no k in {ks:?} fits a train split of {n} points")]
    NoValidK { ks: Vec<usize>, n: usize },
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("{labels} labels for {rows} feature rows")]
    LabelMismatch { rows: usize, labels: usize },
    #[error("malformed embedding file at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Unit-norm features with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub features: Matrix<f64>,
    pub labels: Vec<u32>,
}

impl FeatureTable {
    /// Normalizes the rows of `features`.
    pub fn new<T: Scalar>(features: &Matrix<T>, labels: Vec<u32>) -> Result<Self, EvalError> {
        if features.rows() != labels.len() {
            return Err(EvalError::LabelMismatch {
                rows: features.rows(),
                labels: labels.len(),
            });
        }
        Ok(Self {
            features: rowwise_l2_normalize(&features.cast::<f64>())?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

fn check_pair(train: &FeatureTable, test: &FeatureTable) -> Result<(), EvalError> {
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::EmptyTable);
    }
    if train.dim() != test.dim() {
        return Err(EvalError::DimMismatch(train.dim(), test.dim()));
    }
    Ok(())
}

const KNN_CHUNK: usize = 256;

/// Top-1 accuracy of similarity-weighted k-NN voting.
///
/// Each of the `k` nearest train points votes `exp(cos / tau)` for its
/// class; ties between classes go to the lower class index.
pub fn knn_eval(
    train: &FeatureTable,
    test: &FeatureTable,
    k: usize,
    tau: f64,
) -> Result<f64, EvalError> {
    check_pair(train, test)?;
    if k == 0 || k > train.len() {
        return Err(EvalError::InvalidK { k, n: train.len() });
    }
    let classes = train.num_classes().max(test.num_classes());
    let mut correct = 0usize;
    let mut start = 0;
    while start < test.len() {
        let end = (start + KNN_CHUNK).min(test.len());
        let rows: Vec<usize> = (start..end).collect();
        let sims = matmul_nt(&test.features.select_rows(&rows), &train.features)?;
        for (i, row) in sims.row_iter().enumerate() {
            let mut scores = vec![0.0f64; classes];
            for j in topk_row(row, k) {
                scores[train.labels[j] as usize] += (row[j] / tau).exp();
            }
            let pred = argmax(&scores);
            correct += usize::from(pred == test.labels[start + i] as usize);
        }
        start = end;
    }
    Ok(correct as f64 / test.len() as f64)
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Best accuracy over the neighbourhood sizes that fit the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub best_accuracy: f64,
    pub best_k: usize,
    /// `(k, accuracy)` for every evaluated k.
    pub per_k: Vec<(usize, f64)>,
}

pub fn knn_sweep(
    train: &FeatureTable,
    test: &FeatureTable,
    ks: &[usize],
    tau: f64,
) -> Result<SweepResult, EvalError> {
    check_pair(train, test)?;
    let mut per_k = Vec::new();
    for &k in ks {
        if k == 0 || k > train.len() {
            log::warn!("skipping k={k}: train split has {} points", train.len());
            continue;
        }
        per_k.push((k, knn_eval(train, test, k, tau)?));
    }
    let best = per_k
        .iter()
        .copied()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })
        .ok_or_else(|| EvalError::NoValidK {
            ks: ks.to_vec(),
            n: train.len(),
        })?;
    Ok(SweepResult {
        best_accuracy: best.1,
        best_k: best.0,
        per_k,
    })
}

/// Multinomial logistic regression trained by full-batch gradient descent
/// on frozen features; returns test accuracy.
pub fn linear_probe(
    train: &FeatureTable,
    test: &FeatureTable,
    epochs: usize,
    lr: f64,
) -> Result<f64, EvalError> {
    check_pair(train, test)?;
    let (n, d) = train.features.shape();
    let c = train.num_classes().max(test.num_classes());
    let mut w = Matrix::<f64>::zeros(d, c);
    let mut b = vec![0.0f64; c];
    let x = &train.features;
    let xt = x.transpose();
    for _ in 0..epochs {
        let mut logits = crate::numerics::matmul(x, &w)?;
        for r in 0..n {
            let row = logits.row_mut(r);
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        // softmax minus one-hot, averaged
        let mut g = crate::numerics::softmax_rows(&logits, 1.0)?;
        for r in 0..n {
            let v = g.get(r, train.labels[r] as usize);
            g.set(r, train.labels[r] as usize, v - 1.0);
        }
        g.scale_assign(1.0 / n as f64);
        let gw = crate::numerics::matmul(&xt, &g)?;
        for (wv, gv) in w.data_mut().iter_mut().zip(gw.data()) {
            *wv -= lr * gv;
        }
        for col in 0..c {
            let s: f64 = (0..n).map(|r| g.get(r, col)).sum();
            b[col] -= lr * s;
        }
    }
    let logits = crate::numerics::matmul(&test.features, &w)?;
    let correct = logits
        .row_iter()
        .zip(&test.labels)
        .filter(|(row, &l)| {
            let scored: Vec<f64> = row.iter().zip(&b).map(|(v, bb)| v + bb).collect();
            argmax(&scored) == l as usize
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Diversity statistics of a set of embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseMetrics {
    /// Mean cosine over distinct row pairs.
    pub mean_pairwise_cos: f64,
    /// Mean over dimensions of the per-dimension standard deviation.
    pub per_dim_std_mean: f64,
    /// `exp` of the entropy of the normalized singular values.
    pub effective_rank: f64,
}

pub fn collapse_metrics<T: Scalar>(features: &Matrix<T>) -> Result<CollapseMetrics, EvalError> {
    let (n, d) = features.shape();
    if n < 2 || d == 0 {
        return Err(EvalError::EmptyTable);
    }
    let x = features.cast::<f64>();

    let unit = rowwise_l2_normalize(&x)?;
    let mut total = vec![0.0f64; d];
    for r in unit.row_iter() {
        for (t, &v) in total.iter_mut().zip(r) {
            *t += v;
        }
    }
    let sum_sq: f64 = total.iter().map(|v| v * v).sum();
    let mean_pairwise_cos = (sum_sq - n as f64) / (n * (n - 1)) as f64;

    let mut std_sum = 0.0;
    for c in 0..d {
        let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        std_sum += var.sqrt();
    }

    let m = DMatrix::from_row_slice(n, d, x.data());
    let sv = m.singular_values();
    Ok(CollapseMetrics {
        mean_pairwise_cos,
        per_dim_std_mean: std_sum / d as f64,
        effective_rank: effective_rank_from(sv.as_slice()),
    })
}

/// `exp(-sum p ln p)` with `p = sigma / sum(sigma)`.
pub fn effective_rank_from(singular_values: &[f64]) -> f64 {
    let total: f64 = singular_values.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let h: f64 = singular_values
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

/// Evaluation features of a labelled dataset.
pub fn extract_features<T: Scalar>(
    state: &EncoderState<T>,
    ds: &ImageDataset,
    mode: GlobalFeature,
) -> Result<FeatureTable, EvalError> {
    const CHUNK: usize = 256;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < ds.n {
        let end = (start + CHUNK).min(ds.n);
        let idx: Vec<usize> = (start..end).collect();
        parts.push(global_feature(state, &ds.to_images::<T>(&idx), mode)?);
        start = end;
    }
    let refs: Vec<&Matrix<T>> = parts.iter().collect();
    let features = if refs.is_empty() {
        Matrix::zeros(0, state.config.proj_out)
    } else {
        Matrix::vstack(&refs)?
    };
    FeatureTable::new(&features, ds.labels.clone())
}

/// Writes `n d`, then one tab-separated line per row: `d` reals and the label.
pub fn write_embeddings(table: &FeatureTable, path: &Path) -> Result<(), EvalError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{} {}", table.len(), table.dim())?;
    for (row, label) in table.features.row_iter().zip(&table.labels) {
        for v in row {
            write!(w, "{v:.8e}\t")?;
        }
        writeln!(w, "{label}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<FeatureTable, EvalError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let perr = |line: usize, msg: String| EvalError::Parse { line, msg };
    let header = lines
        .next()
        .ok_or_else(|| perr(1, "missing header".into()))??;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| perr(1, format!("{e}")))?;
    let [n, d] = dims[..] else {
        return Err(perr(1, "expected `n d`".into()));
    };
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| perr(i + 2, "missing row".into()))??;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != d + 1 {
            return Err(perr(
                i + 2,
                format!("{} fields, expected {}", fields.len(), d + 1),
            ));
        }
        for f in &fields[..d] {
            data.push(f.parse::<f64>().map_err(|e| perr(i + 2, format!("{e}")))?);
        }
        labels.push(fields[d].parse().map_err(|e| perr(i + 2, format!("{e}")))?);
    }
    Ok(FeatureTable {
        features: Matrix::new(n, d, data)?,
        labels,
    })
}

/// Encodes `ds` and writes the embedding file.
pub fn export_embeddings<T: Scalar>(
    state: &EncoderState<T>,
    ds: &ImageDataset,
    mode: GlobalFeature,
    path: &Path,
) -> Result<FeatureTable, EvalError> {
    let table = extract_features(state, ds, mode)?;
    write_embeddings(&table, path)?;
    Ok(table)
}

/// Appends `tag,k,accuracy`, writing the header for a new file.
pub fn append_result(path: &Path, tag: &str, k: usize, accuracy: f64) -> Result<(), EvalError> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(f, "tag,k,accuracy")?;
    }
    writeln!(f, "{tag},{k},{accuracy:.6}")?;
    Ok(())
}
