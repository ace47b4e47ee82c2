//! Orchestration of the full two-stage run.

use std::path::Path;

use ugc_core::DatasetPartition;

use crate::config::RunConfig;
use crate::data::{ensure_partition, train_eval_split, Dataset};
use crate::error::Result;
use crate::metrics::EvalReport;
use crate::search::{run_search, SearchReport};
use crate::stage1::run_stage1;
use crate::stage2::{run_baseline, run_stage2, Codes};

/// Loaded corpus with its partition and held-out ids.
pub struct Workspace {
    /// All images.
    pub data: Dataset,
    /// Labeled/unlabeled split of the training ids.
    pub part: DatasetPartition,
    /// Held-out evaluation ids.
    pub eval_ids: Vec<String>,
}

/// Loads the corpus named by `cfg.data` and its (cached) partition manifest.
pub fn prepare(cfg: &RunConfig) -> Result<Workspace> {
    let data = Dataset::load(&cfg.data.root)?;
    let (train, eval_ids) = train_eval_split(&data.ids(), cfg.data.eval_count)?;
    let part = ensure_partition(&cfg.data.root, &train, cfg.data.fraction, cfg.data.partition_seed)?;
    Ok(Workspace { data, part, eval_ids })
}

/// Student codes of a search report.
pub fn codes_of(report: &SearchReport) -> Codes {
    Codes { student: report.student.code.clone(), deeper: report.deeper.code.clone(), wider: report.wider.code.clone() }
}

/// Evaluations produced by [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    /// Search result.
    pub search: SearchReport,
    /// Distilled student.
    pub student: EvalReport,
    /// Supervised-only baseline of the student architecture, when requested.
    pub baseline: Option<EvalReport>,
}

/// Stage 1, search, stage 2 and optionally the baseline, all under `out_dir`.
pub fn run_pipeline(cfg: &RunConfig, ws: &Workspace, out_dir: &Path, with_baseline: bool) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let net = run_stage1(cfg, &ws.data, &ws.part, out_dir, true, None)?;
    let search = run_search(cfg, &net, &ws.data, &ws.part, out_dir)?;
    let codes = codes_of(&search);
    let (_, student) = run_stage2(cfg, &net, &codes, &ws.data, &ws.part, &ws.eval_ids, out_dir, true, None)?;
    let student = student.expect("stage 2 ran to completion");
    let baseline = if with_baseline {
        Some(run_baseline(cfg, &codes.student, &ws.data, &ws.part, &ws.eval_ids, out_dir)?.1)
    } else {
        None
    };
    Ok(PipelineOutcome { search, student, baseline })
}
