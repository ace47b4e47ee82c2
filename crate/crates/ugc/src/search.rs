//! Student and teacher search over a trained supernet.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use ugc_core::{
    count_macs, evolve, search_teachers, substream, ArchCode, Budget, DatasetPartition, EvoParams, GenerationStats,
    Objective,
};

use crate::autograd::Tape;
use crate::config::{FitnessKind, RunConfig};
use crate::data::Dataset;
use crate::error::{Result, UgcError};
use crate::losses::{od_loss, LossWeights};
use crate::metrics::{embed_chunked, fid, l1, EVAL_CHUNK};
use crate::nn::FeatureExtractor;
use crate::stage1::SuperNetState;
use crate::tensor::Tensor;

/// Scores sub-networks of a frozen supernet through inherited (sliced) weights.
pub struct Fitness<'a> {
    net: &'a SuperNetState,
    kind: FitnessKind,
    weights: LossWeights,
    x: Tensor<f32>,
    target: Tensor<f32>,
    perceptual: FeatureExtractor<f32>,
    target_embed: Option<Vec<Vec<f64>>>,
    fid_extractor: FeatureExtractor<f32>,
}

impl<'a> Fitness<'a> {
    /// Fitness over a fixed validation slice of the training data.
    ///
    /// `Od` uses the first `val_count` unlabeled ids (labeled ids if there are
    /// none) with the largest network's outputs as targets; `L1` and `Fid`
    /// use the first `val_count` labeled ids and their ground truth.
    pub fn new(cfg: &RunConfig, net: &'a SuperNetState, data: &Dataset, part: &DatasetPartition) -> Result<Self> {
        let take = |ids: &[String]| ids.iter().take(cfg.search.val_count.max(1)).cloned().collect::<Vec<_>>();
        let (x, target) = match cfg.search.fitness {
            FitnessKind::Od => {
                let ids = if part.unlabeled_ids.is_empty() { take(&part.labeled_ids) } else { take(&part.unlabeled_ids) };
                if ids.is_empty() {
                    return Err(UgcError::Empty("search validation slice".into()));
                }
                let (x, _) = data.batch(&ids, false)?;
                let t = generate_chunked(net, &net.spec.sample_largest(), &x)?;
                (x, t)
            }
            FitnessKind::L1 | FitnessKind::Fid => {
                let ids = take(&part.labeled_ids);
                if ids.is_empty() {
                    return Err(UgcError::Empty("search validation slice".into()));
                }
                let (x, y) = data.batch(&ids, true)?;
                (x, y.expect("labeled batch has targets"))
            }
        };
        let fid_extractor = cfg.extractor.fid(cfg.space.in_channels);
        let target_embed = (cfg.search.fitness == FitnessKind::Fid).then(|| embed_chunked(&fid_extractor, &target));
        Ok(Self {
            net,
            kind: cfg.search.fitness,
            weights: cfg.losses.clone(),
            x,
            target,
            perceptual: cfg.extractor.perceptual(cfg.space.in_channels),
            target_embed,
            fid_extractor,
        })
    }

    /// Larger is better.
    pub fn score(&self, code: &ArchCode) -> Result<f64> {
        let out = generate_chunked(self.net, code, &self.x)?;
        self.score_output(&out)
    }

    /// Scores a generator output computed on the validation sources.
    pub fn score_output(&self, out: &Tensor<f32>) -> Result<f64> {
        Ok(match self.kind {
            FitnessKind::Od => {
                let tape = Tape::new();
                let od = od_loss(&self.weights, &self.perceptual, &tape, tape.constant(self.target.clone()), tape.constant(out.clone()))?;
                -od.total.item()
            }
            FitnessKind::L1 => -l1(out, &self.target)?,
            FitnessKind::Fid => {
                let real = self.target_embed.as_ref().expect("embedded for fid fitness");
                -fid(real, &embed_chunked(&self.fid_extractor, out))?
            }
        })
    }

    /// Validation sources.
    pub fn sources(&self) -> &Tensor<f32> {
        &self.x
    }
}

fn generate_chunked(net: &SuperNetState, code: &ArchCode, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    let parts = (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| net.generate(code, &x.narrow_batch(s, EVAL_CHUNK.min(n - s))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_batch(&parts.iter().collect::<Vec<_>>()))
}

/// A code with its cost and fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSummary {
    /// Architecture.
    pub code: ArchCode,
    /// MACs for one image.
    pub macs: u64,
    /// Parameter count.
    pub params: u64,
    /// Search fitness through inherited weights.
    pub fitness: f64,
}

/// Per-generation traces of the three searches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHistory {
    /// Student search.
    pub student: Vec<GenerationStats>,
    /// Deeper-teacher search (empty when degraded).
    pub deeper: Vec<GenerationStats>,
    /// Wider-teacher search (empty when degraded).
    pub wider: Vec<GenerationStats>,
}

/// Result of the architecture search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    /// Fitness used.
    pub fitness: FitnessKind,
    /// Evolution parameters, with the derived seed.
    pub evo: EvoParams,
    /// Largest network of the space.
    pub largest: CodeSummary,
    /// MACs budget of the student.
    pub student_budget: u64,
    /// Selected student.
    pub student: CodeSummary,
    /// Teacher favouring depth.
    pub deeper: CodeSummary,
    /// Teacher favouring width.
    pub wider: CodeSummary,
    /// Inclusive MACs window of the teachers.
    pub teacher_window: (u64, u64),
    /// Set when the teacher window was unreachable.
    pub teachers_degraded: bool,
    /// Evolution traces.
    pub history: SearchHistory,
}

impl SearchReport {
    /// Reads a report written by [`run_search`].
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(UgcError::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| UgcError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| UgcError::format(path, e.to_string()))
    }
}

/// Location of the search report under `out_dir`.
pub fn search_report_path(out_dir: &Path) -> PathBuf {
    out_dir.join("search").join("search.json")
}

/// Student MACs budget implied by the configuration.
pub fn student_budget(cfg: &RunConfig) -> Result<u64> {
    if cfg.search.student_max_macs > 0 {
        return Ok(cfg.search.student_max_macs);
    }
    if !(cfg.search.student_compression > 0.0) {
        return Err(UgcError::Config("search.student_compression must be positive".into()));
    }
    let largest = count_macs(&cfg.space.sample_largest(), &cfg.space, cfg.space.image_size)?.macs;
    Ok((largest as f64 / cfg.search.student_compression).floor() as u64)
}

/// Evolution parameters with the seed drawn from the global `evolution` stream.
pub fn evo_params(cfg: &RunConfig) -> EvoParams {
    let mut p = cfg.search.evo.clone();
    p.seed = substream(cfg.seed, "evolution", cfg.search.evo.seed).random();
    p
}

/// Searches the student under its budget and the two teachers around it.
pub fn search(cfg: &RunConfig, net: &SuperNetState, fitness: &Fitness<'_>) -> Result<SearchReport> {
    let spec = &net.spec;
    let budget = student_budget(cfg)?;
    let params = evo_params(cfg);
    let mut err = None;
    let mut score = |c: &ArchCode| match fitness.score(c) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            f64::NEG_INFINITY
        }
    };
    let student = evolve(spec, &Budget::student(budget), &params, Objective::Fitness, &[], &mut score)?;
    let teachers = search_teachers(
        spec,
        &student.best,
        &params,
        cfg.search.teacher_ratio,
        cfg.search.teacher_tolerance,
        &mut score,
    )?;
    if teachers.degraded {
        log::warn!("teacher MACs window unreachable in this space; using the feasible extreme");
    }
    let mut summary = |code: &ArchCode| -> Result<CodeSummary> {
        let cost = count_macs(code, spec, spec.image_size)?;
        Ok(CodeSummary { code: code.clone(), macs: cost.macs, params: cost.params, fitness: score(code) })
    };
    let report = SearchReport {
        fitness: cfg.search.fitness,
        evo: params.clone(),
        largest: summary(&spec.sample_largest())?,
        student_budget: budget,
        student: summary(&student.best)?,
        deeper: summary(&teachers.deeper)?,
        wider: summary(&teachers.wider)?,
        teacher_window: (teachers.window.min_macs, teachers.window.max_macs),
        teachers_degraded: teachers.degraded,
        history: SearchHistory {
            student: student.history,
            deeper: teachers.outcomes.as_ref().map(|o| o.0.history.clone()).unwrap_or_default(),
            wider: teachers.outcomes.as_ref().map(|o| o.1.history.clone()).unwrap_or_default(),
        },
    };
    drop(summary);
    match err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Runs the search and writes `search/search.json` plus the resolved config.
pub fn run_search(
    cfg: &RunConfig,
    net: &SuperNetState,
    data: &Dataset,
    part: &DatasetPartition,
    out_dir: &Path,
) -> Result<SearchReport> {
    let path = search_report_path(out_dir);
    let dir = path.parent().expect("report has a parent directory");
    fs::create_dir_all(dir).map_err(|e| UgcError::io(dir, e))?;
    cfg.write_resolved(dir)?;
    let fitness = Fitness::new(cfg, net, data, part)?;
    let report = search(cfg, net, &fitness)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(&path, text).map_err(|e| UgcError::io(&path, e))?;
    Ok(report)
}
