//! Cost reports, image metrics and the Fréchet distance.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use ugc_core::{count_macs, ArchCode, CostReport, SearchSpaceSpec};

use crate::autograd::Tape;
use crate::error::{Result, UgcError};
use crate::losses::{fitting_window, ssim_loss_with};
use crate::nn::{run_generator, FeatureExtractor};
use crate::params::TensorMap;
use crate::tensor::Tensor;

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 10;

fn moments(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mu = DVector::zeros(d);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn sym_eigenvalues(m: DMatrix<f64>) -> DVector<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let root = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are samples).
///
/// `Tr((Σr Σf)^½)` is computed as `Tr((Σr^½ Σf Σr^½)^½)`, which is symmetric;
/// negative eigenvalues from rounding are clipped to zero.
pub fn fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(UgcError::Degenerate(format!(
            "fid needs at least 2 samples per set, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let d = real[0].len();
    if d == 0 || real.iter().chain(fake).any(|r| r.len() != d) {
        return Err(UgcError::Degenerate("feature rows must share a positive dimension".into()));
    }
    let (mu_r, cov_r) = moments(real);
    let (mu_f, cov_f) = moments(fake);
    let root_r = sym_sqrt(&cov_r);
    let inner = &root_r * &cov_f * &root_r;
    let tr_sqrt: f64 = sym_eigenvalues(inner).iter().map(|v| v.max(0.0).sqrt()).sum();
    let dist = (&mu_r - &mu_f).norm_squared() + cov_r.trace() + cov_f.trace() - 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}

/// Mean absolute error between two image batches.
pub fn l1(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(UgcError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64)
}

/// Mean SSIM between two `[-1, 1]` image batches.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let s = a.shape();
    let tape = Tape::new();
    let loss = ssim_loss_with(tape.constant(a.clone()), tape.constant(b.clone()), fitting_window(s[2], s[3]))?;
    Ok(1.0 - loss.item())
}

/// Labels attached to an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTags {
    /// What was evaluated (e.g. `student`, `baseline`).
    pub label: String,
    /// Labeled fraction of the training run.
    pub fraction: f64,
    /// Global seed of the training run.
    pub seed: u64,
}

/// Evaluation of one generator on a fixed split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Run labels.
    pub tags: EvalTags,
    /// Evaluated architecture.
    pub code: ArchCode,
    /// MACs for one image.
    pub macs: u64,
    /// Parameter count.
    pub params: u64,
    /// Reference MACs over evaluated MACs.
    pub compression_ratio_macs: f64,
    /// Reference parameters over evaluated parameters.
    pub compression_ratio_params: f64,
    /// Mean absolute error to the targets in `[-1, 1]` units.
    pub l1: f64,
    /// Mean SSIM to the targets.
    pub ssim: f64,
    /// Fréchet distance in the proxy feature space (not Inception FID).
    pub fid_proxy: Option<f64>,
    /// Number of evaluated images.
    pub n_eval_images: usize,
}

/// Runs the standalone generator `weights` on an evaluation split and scores it.
///
/// `reference` is the cost the compression ratios are measured against.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    spec: &SearchSpaceSpec,
    code: &ArchCode,
    weights: &TensorMap<f32>,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    reference: &CostReport,
    fid_extractor: Option<&FeatureExtractor<f32>>,
    tags: EvalTags,
) -> Result<EvalReport> {
    let n = x.shape()[0];
    if n == 0 {
        return Err(UgcError::Empty("evaluation split".into()));
    }
    let cost = count_macs(code, spec, spec.image_size)?;
    let out = run_generator(spec, code, weights, x, EVAL_CHUNK);
    let fid_proxy = match fid_extractor {
        Some(ex) if n >= 2 => Some(fid(&embed_chunked(ex, y), &embed_chunked(ex, &out))?),
        _ => None,
    };
    let (ratio_macs, ratio_params) = cost.ratio_to(reference);
    Ok(EvalReport {
        tags,
        code: code.clone(),
        macs: cost.macs,
        params: cost.params,
        compression_ratio_macs: ratio_macs,
        compression_ratio_params: ratio_params,
        l1: l1(&out, y)?,
        ssim: ssim(&out, y)?,
        fid_proxy,
        n_eval_images: n,
    })
}

/// Pooled features of a batch, computed `EVAL_CHUNK` images at a time.
pub fn embed_chunked(ex: &FeatureExtractor<f32>, x: &Tensor<f32>) -> Vec<Vec<f64>> {
    let n = x.shape()[0];
    (0..n).step_by(EVAL_CHUNK).flat_map(|s| ex.embed(&x.narrow_batch(s, EVAL_CHUNK.min(n - s)))).collect()
}

/// Writes `report` as pretty JSON.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| UgcError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    fs::write(path, text).map_err(|e| UgcError::io(path, e))
}

/// Appends `report` as one JSON line to the run index.
pub fn append_index(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| UgcError::io(dir, e))?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| UgcError::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(report).expect("report serializes")).map_err(|e| UgcError::io(path, e))
}

/// Reads every report of a run index.
pub fn read_index(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path).map_err(|e| UgcError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| UgcError::format(path, e.to_string())))
        .collect()
}
