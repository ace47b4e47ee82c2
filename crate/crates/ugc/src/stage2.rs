//! Online semi-supervised distillation from two teachers into the student,
//! and the supervised-only baseline.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ugc_core::{adaptive_filter, count_macs, lr_schedule, substream, ArchCode, DatasetPartition, EmaTracker, SearchSpaceSpec};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Checkpoint, GeneratorFile};
use crate::config::{RunConfig, Stage2Config};
use crate::data::{load_batch, stack, Dataset, Split};
use crate::error::{Result, UgcError};
use crate::losses::{od_loss, supervised_objective, GanMode, LossWeights};
use crate::metrics::{append_index, evaluate, write_report, EvalReport, EvalTags, EVAL_CHUNK};
use crate::nn::{generator_forward, init_generator, run_generator, slice_subnet, FeatureExtractor, PatchDiscriminator};
use crate::params::{Adam, Bound, TensorMap};
use crate::stage1::{discriminator_for, discriminator_step, open_log, SuperNetState};
use crate::tensor::Tensor;

/// Architectures of the second stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codes {
    /// Compressed student.
    pub student: ArchCode,
    /// Teacher favouring depth.
    pub deeper: ArchCode,
    /// Teacher favouring width.
    pub wider: ArchCode,
}

/// Weights, optimizers and trackers of the second stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2State {
    /// Search space.
    pub spec: SearchSpaceSpec,
    /// Architectures.
    pub codes: Codes,
    /// Student weights.
    pub student: TensorMap<f32>,
    /// Deeper-teacher weights.
    pub deeper: TensorMap<f32>,
    /// Wider-teacher weights.
    pub wider: TensorMap<f32>,
    /// Shared discriminator architecture.
    pub disc: PatchDiscriminator,
    /// Shared discriminator weights.
    pub discriminator: TensorMap<f32>,
    /// Student optimizer.
    pub opt_student: Adam<f32>,
    /// Deeper-teacher optimizer.
    pub opt_deeper: Adam<f32>,
    /// Wider-teacher optimizer.
    pub opt_wider: Adam<f32>,
    /// Discriminator optimizer.
    pub opt_d: Adam<f32>,
    /// Score average for the deeper teacher's unlabeled outputs.
    pub ema_deeper: EmaTracker,
    /// Score average for the wider teacher's unlabeled outputs.
    pub ema_wider: EmaTracker,
    /// Completed steps.
    pub step: u64,
}

impl Stage2State {
    /// Initializes all three generators and the discriminator from the first stage.
    pub fn inherit(net: &SuperNetState, codes: Codes, cfg: &Stage2Config) -> Result<Self> {
        for c in [&codes.student, &codes.deeper, &codes.wider] {
            net.spec.validate_arch(c)?;
        }
        Ok(Self {
            spec: net.spec.clone(),
            student: slice_subnet(&net.generator, &net.spec, &codes.student),
            deeper: slice_subnet(&net.generator, &net.spec, &codes.deeper),
            wider: slice_subnet(&net.generator, &net.spec, &codes.wider),
            codes,
            disc: net.disc,
            discriminator: net.discriminator.clone(),
            opt_student: Adam::new(cfg.adam),
            opt_deeper: Adam::new(cfg.adam),
            opt_wider: Adam::new(cfg.adam),
            opt_d: Adam::new(cfg.adam),
            ema_deeper: EmaTracker::new(cfg.ema_decay)?,
            ema_wider: EmaTracker::new(cfg.ema_decay)?,
            step: 0,
        })
    }

    /// Serializes the full state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "stage2",
            "spec": self.spec,
            "codes": self.codes,
            "discriminator": { "in_channels": self.disc.in_channels, "ndf": self.disc.ndf, "n_layers": self.disc.n_layers },
            "ema_deeper": self.ema_deeper,
            "ema_wider": self.ema_wider,
            "step": self.step,
        }));
        for (name, map) in [
            ("student", &self.student),
            ("deeper", &self.deeper),
            ("wider", &self.wider),
            ("discriminator", &self.discriminator),
        ] {
            c.groups.insert(name.into(), map.clone());
        }
        c.put_adam("adam_student", &self.opt_student);
        c.put_adam("adam_deeper", &self.opt_deeper);
        c.put_adam("adam_wider", &self.opt_wider);
        c.put_adam("adam_d", &self.opt_d);
        c
    }

    /// Restores a state written by [`Stage2State::to_checkpoint`].
    pub fn from_checkpoint(mut c: Checkpoint, origin: &Path) -> Result<Self> {
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some("stage2") {
            return Err(UgcError::format(origin, "not a stage-2 checkpoint"));
        }
        fn field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, k: &str, origin: &Path) -> Result<T> {
            serde_json::from_value(meta.get(k).cloned().unwrap_or_default())
                .map_err(|e| UgcError::format(origin, format!("{k}: {e}")))
        }
        let d: serde_json::Value = field(&c.meta, "discriminator", origin)?;
        let get = |k: &str| {
            d.get(k).and_then(|v| v.as_u64()).map(|v| v as usize).ok_or_else(|| UgcError::format(origin, "discriminator shape"))
        };
        let disc = PatchDiscriminator { in_channels: get("in_channels")?, ndf: get("ndf")?, n_layers: get("n_layers")? };
        Ok(Self {
            spec: field(&c.meta, "spec", origin)?,
            codes: field(&c.meta, "codes", origin)?,
            ema_deeper: field(&c.meta, "ema_deeper", origin)?,
            ema_wider: field(&c.meta, "ema_wider", origin)?,
            step: field(&c.meta, "step", origin)?,
            student: c.take_group("student", origin)?,
            deeper: c.take_group("deeper", origin)?,
            wider: c.take_group("wider", origin)?,
            disc,
            discriminator: c.take_group("discriminator", origin)?,
            opt_student: c.take_adam("adam_student", origin)?,
            opt_deeper: c.take_adam("adam_deeper", origin)?,
            opt_wider: c.take_adam("adam_wider", origin)?,
            opt_d: c.take_adam("adam_d", origin)?,
        })
    }
}

/// Supervised losses of one generator update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupValues {
    /// Generator objective.
    pub loss: f64,
    /// Adversarial part.
    pub gan: f64,
    /// Unweighted L1 part.
    pub recon: f64,
}

/// Outcome of [`teacher_step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    /// Mean discriminator objective over both teachers' fakes.
    pub loss_d: f64,
    /// Deeper teacher.
    pub deeper: SupValues,
    /// Wider teacher.
    pub wider: SupValues,
}

/// One supervised generator update against a constant discriminator.
#[allow(clippy::too_many_arguments)]
pub fn supervised_update(
    spec: &SearchSpaceSpec,
    code: &ArchCode,
    weights: &mut TensorMap<f32>,
    opt: &mut Adam<f32>,
    disc: &PatchDiscriminator,
    d_weights: &TensorMap<f32>,
    losses: &LossWeights,
    mode: GanMode,
    (xa, ya): (&Tensor<f32>, &Tensor<f32>),
    lr: f64,
) -> Result<SupValues> {
    let tape = Tape::new();
    let (grads, values) = {
        let mut gw = Bound::exact(&tape, weights, true);
        let mut dw = Bound::exact(&tape, d_weights, false);
        let x = tape.constant(xa.clone());
        let out = generator_forward(spec, code, &mut gw, x);
        let mut d = |a, b| disc.forward(&mut dw, a, b);
        let terms = supervised_objective(out, tape.constant(ya.clone()), x, &mut d, losses, mode)?;
        let values = SupValues { loss: terms.loss_g.item(), gan: terms.gan, recon: terms.recon };
        let mut g = tape.backward(terms.loss_g);
        (gw.grads(&mut g), values)
    };
    opt.step(weights, &grads, lr);
    Ok(values)
}

/// Updates the shared discriminator and then both teachers on a labeled batch.
pub fn teacher_step(
    state: &mut Stage2State,
    cfg: &Stage2Config,
    losses: &LossWeights,
    (xa, ya): (&Tensor<f32>, &Tensor<f32>),
    lr: f64,
) -> Result<TeacherReport> {
    let fake_d = run_generator(&state.spec, &state.codes.deeper, &state.deeper, xa, EVAL_CHUNK);
    let fake_w = run_generator(&state.spec, &state.codes.wider, &state.wider, xa, EVAL_CHUNK);
    let loss_d =
        discriminator_step(&state.disc, &mut state.discriminator, &mut state.opt_d, xa, ya, &[&fake_d, &fake_w], lr);
    let deeper = supervised_update(
        &state.spec,
        &state.codes.deeper,
        &mut state.deeper,
        &mut state.opt_deeper,
        &state.disc,
        &state.discriminator,
        losses,
        cfg.gan_mode,
        (xa, ya),
        lr,
    )?;
    let wider = supervised_update(
        &state.spec,
        &state.codes.wider,
        &mut state.wider,
        &mut state.opt_wider,
        &state.disc,
        &state.discriminator,
        losses,
        cfg.gan_mode,
        (xa, ya),
        lr,
    )?;
    Ok(TeacherReport { loss_d, deeper, wider })
}

/// Mean patch score of the discriminator for every sample of `(x, fake)`.
pub fn d_scores(disc: &PatchDiscriminator, weights: &TensorMap<f32>, x: &Tensor<f32>, fake: &Tensor<f32>) -> Vec<f64> {
    let tape = Tape::new();
    let mut dw = Bound::exact(&tape, weights, false);
    let out = disc.forward(&mut dw, tape.constant(x.clone()), tape.constant(fake.clone()));
    let v = out.value();
    let n = v.shape()[0];
    let per = v.numel() / n;
    (0..n).map(|i| v.data()[i * per..(i + 1) * per].iter().map(|s| *s as f64).sum::<f64>() / per as f64).collect()
}

/// Unlabeled inputs of a student update with the teachers' outputs and gates.
pub struct Unlabeled<'a> {
    /// Sources.
    pub x: &'a Tensor<f32>,
    /// Deeper-teacher outputs.
    pub deeper: &'a Tensor<f32>,
    /// Wider-teacher outputs.
    pub wider: &'a Tensor<f32>,
    /// Per-sample acceptance for the deeper teacher.
    pub gates_deeper: &'a [bool],
    /// Per-sample acceptance for the wider teacher.
    pub gates_wider: &'a [bool],
}

/// Loss values of a student update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StudentValues {
    /// Labeled distillation towards the deeper teacher.
    pub od_a_deeper: f64,
    /// Labeled distillation towards the wider teacher.
    pub od_a_wider: f64,
    /// Gated unlabeled distillation towards the deeper teacher.
    pub od_u_deeper: Option<f64>,
    /// Gated unlabeled distillation towards the wider teacher.
    pub od_u_wider: Option<f64>,
}

fn select(t: &Tensor<f32>, keep: &[usize]) -> Tensor<f32> {
    let parts: Vec<Tensor<f32>> = keep.iter().map(|&i| t.narrow_batch(i, 1)).collect();
    Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())
}

/// Gradient of the student objective; teacher outputs enter as constants.
///
/// A gated term weighs every accepted sample's distillation loss equally
/// with the rest of the batch, so it equals `(k / n) * od(accepted subset)`.
#[allow(clippy::too_many_arguments)]
pub fn student_objective(
    spec: &SearchSpaceSpec,
    code: &ArchCode,
    weights: &TensorMap<f32>,
    extractor: &FeatureExtractor<f32>,
    losses: &LossWeights,
    xa: &Tensor<f32>,
    (ta_deeper, ta_wider): (&Tensor<f32>, &Tensor<f32>),
    unlabeled: Option<&Unlabeled<'_>>,
) -> Result<(TensorMap<f32>, StudentValues)> {
    let tape = Tape::new();
    let mut sw = Bound::exact(&tape, weights, true);
    let out_a = generator_forward(spec, code, &mut sw, tape.constant(xa.clone()));
    let od_d = od_loss(losses, extractor, &tape, tape.constant(ta_deeper.clone()), out_a)?;
    let od_w = od_loss(losses, extractor, &tape, tape.constant(ta_wider.clone()), out_a)?;
    let mut values = StudentValues { od_a_deeper: od_d.total.item(), od_a_wider: od_w.total.item(), ..Default::default() };
    let mut total = od_d.total.add(&od_w.total);
    if let Some(u) = unlabeled {
        let mut full: Option<Var<'_, f32>> = None;
        let mut gated = |teacher: &Tensor<f32>, gates: &[bool]| {
            gated_term(&tape, &mut sw, &mut full, (spec, code), (extractor, losses), u.x, teacher, gates)
        };
        let (gd, gw) = (gated(u.deeper, u.gates_deeper)?, gated(u.wider, u.gates_wider)?);
        values.od_u_deeper = Some(gd.map_or(0.0, |v| v.item()));
        values.od_u_wider = Some(gw.map_or(0.0, |v| v.item()));
        for v in [gd, gw].into_iter().flatten() {
            total = total.add(&v);
        }
    }
    let mut g = tape.backward(total);
    Ok((sw.grads(&mut g), values))
}

#[allow(clippy::too_many_arguments)]
fn gated_term<'t>(
    tape: &'t Tape<f32>,
    sw: &mut Bound<'t, '_, f32>,
    full: &mut Option<Var<'t, f32>>,
    (spec, code): (&SearchSpaceSpec, &ArchCode),
    (extractor, losses): (&FeatureExtractor<f32>, &LossWeights),
    x: &Tensor<f32>,
    teacher: &Tensor<f32>,
    gates: &[bool],
) -> Result<Option<Var<'t, f32>>> {
    let n = x.shape()[0];
    let keep: Vec<usize> = (0..n).filter(|&i| gates[i]).collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let (student, target) = if keep.len() == n {
        let s = *full.get_or_insert_with(|| generator_forward(spec, code, sw, tape.constant(x.clone())));
        (s, teacher.clone())
    } else {
        (generator_forward(spec, code, sw, tape.constant(select(x, &keep))), select(teacher, &keep))
    };
    let od = od_loss(losses, extractor, tape, tape.constant(target), student)?;
    Ok(Some(od.total.scale(keep.len() as f64 / n as f64)))
}

/// Per-step record of the second stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    /// Step index (0-based).
    pub step: u64,
    /// Learning rate used.
    pub lr: f64,
    /// Teacher update, on steps divisible by the interval.
    pub teacher: Option<TeacherReport>,
    /// Labeled distillation of the student (both teachers).
    pub loss_dist_a: f64,
    /// Gated unlabeled distillation of the student.
    pub loss_dist_u: Option<f64>,
    /// Sum of the teachers' supervised losses and both distillation terms.
    pub loss_total: f64,
    /// Labeled distillation towards the deeper teacher.
    pub od_a_deeper: f64,
    /// Labeled distillation towards the wider teacher.
    pub od_a_wider: f64,
    /// Gated unlabeled distillation towards the deeper teacher.
    pub od_u_deeper: Option<f64>,
    /// Gated unlabeled distillation towards the wider teacher.
    pub od_u_wider: Option<f64>,
    /// Discriminator scores of the deeper teacher's unlabeled outputs (one per gate).
    pub d_scores_deeper: Vec<f64>,
    /// Discriminator scores of the wider teacher's unlabeled outputs (one per gate).
    pub d_scores_wider: Vec<f64>,
    /// Deeper-teacher EMA after this step's update.
    pub ema_deeper: Option<f64>,
    /// Wider-teacher EMA after this step's update.
    pub ema_wider: Option<f64>,
    /// Deeper-teacher gates (one per score).
    pub gates_deeper: Vec<u8>,
    /// Wider-teacher gates (one per score).
    pub gates_wider: Vec<u8>,
}

/// Runs one second-stage step: teachers (when due), gates, then the student.
pub fn stage2_step(
    state: &mut Stage2State,
    cfg: &Stage2Config,
    losses: &LossWeights,
    extractor: &FeatureExtractor<f32>,
    seed: u64,
    batch_a: (&Tensor<f32>, &Tensor<f32>),
    xu: Option<&Tensor<f32>>,
) -> Result<Stage2Report> {
    let step = state.step;
    let lr = lr_schedule(step, cfg.total_steps, cfg.lr0, cfg.lr_constant_fraction)?;
    let teacher = if step % cfg.teacher_update_interval == 0 {
        Some(teacher_step(state, cfg, losses, batch_a, lr)?)
    } else {
        None
    };
    let (xa, _) = batch_a;
    let spec = &state.spec;
    let ta_d = run_generator(spec, &state.codes.deeper, &state.deeper, xa, EVAL_CHUNK);
    let ta_w = run_generator(spec, &state.codes.wider, &state.wider, xa, EVAL_CHUNK);

    let mut report = Stage2Report {
        step,
        lr,
        teacher,
        loss_dist_a: 0.0,
        loss_dist_u: None,
        loss_total: 0.0,
        od_a_deeper: 0.0,
        od_a_wider: 0.0,
        od_u_deeper: None,
        od_u_wider: None,
        d_scores_deeper: vec![],
        d_scores_wider: vec![],
        ema_deeper: None,
        ema_wider: None,
        gates_deeper: vec![],
        gates_wider: vec![],
    };
    let (grads, values) = match xu {
        Some(xu) => {
            let tu_d = run_generator(spec, &state.codes.deeper, &state.deeper, xu, EVAL_CHUNK);
            let tu_w = run_generator(spec, &state.codes.wider, &state.wider, xu, EVAL_CHUNK);
            let mut rng = substream(seed, "gates", step);
            let n = xu.shape()[0];
            let mut gate = |tracker: &mut EmaTracker, teacher: &Tensor<f32>| -> Result<(Vec<f64>, Vec<u8>, Vec<bool>)> {
                let per = d_scores(&state.disc, &state.discriminator, xu, teacher);
                tracker.update(per.iter().sum::<f64>() / n as f64)?;
                let scores = if cfg.per_sample_gate { per } else { vec![mean(&per)] };
                let gates =
                    scores.iter().map(|&s| adaptive_filter(s, tracker, cfg.gate_probability, &mut rng)).collect::<ugc_core::Result<Vec<u8>>>()?;
                let mask = if cfg.per_sample_gate { gates.iter().map(|&g| g == 1).collect() } else { vec![gates[0] == 1; n] };
                Ok((scores, gates, mask))
            };
            let (sd, gd, md) = gate(&mut state.ema_deeper, &tu_d)?;
            let (sw, gw, mw) = gate(&mut state.ema_wider, &tu_w)?;
            report.d_scores_deeper = sd;
            report.d_scores_wider = sw;
            report.gates_deeper = gd;
            report.gates_wider = gw;
            report.ema_deeper = Some(state.ema_deeper.value);
            report.ema_wider = Some(state.ema_wider.value);
            let u = Unlabeled { x: xu, deeper: &tu_d, wider: &tu_w, gates_deeper: &md, gates_wider: &mw };
            student_objective(spec, &state.codes.student, &state.student, extractor, losses, xa, (&ta_d, &ta_w), Some(&u))?
        }
        None => student_objective(spec, &state.codes.student, &state.student, extractor, losses, xa, (&ta_d, &ta_w), None)?,
    };
    state.opt_student.step(&mut state.student, &grads, lr);
    state.step += 1;

    report.od_a_deeper = values.od_a_deeper;
    report.od_a_wider = values.od_a_wider;
    report.od_u_deeper = values.od_u_deeper;
    report.od_u_wider = values.od_u_wider;
    report.loss_dist_a = values.od_a_deeper + values.od_a_wider;
    report.loss_dist_u = values.od_u_deeper.zip(values.od_u_wider).map(|(a, b)| a + b);
    let sup = report.teacher.map_or(0.0, |t| t.deeper.loss + t.wider.loss);
    report.loss_total = sup + report.loss_dist_a + report.loss_dist_u.unwrap_or(0.0);
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Artifact locations of a second-stage run.
pub struct Stage2Paths {
    /// Directory.
    pub dir: PathBuf,
    /// Latest resumable checkpoint.
    pub checkpoint: PathBuf,
    /// Step log.
    pub log: PathBuf,
    /// Final student generator.
    pub student: PathBuf,
    /// Evaluation of the final student.
    pub eval: PathBuf,
}

impl Stage2Paths {
    /// Paths under `out_dir/stage2`.
    pub fn new(out_dir: &Path) -> Self {
        let dir = out_dir.join("stage2");
        Self {
            checkpoint: dir.join("checkpoint.ugc"),
            log: dir.join("log.jsonl"),
            student: dir.join("student.ugc"),
            eval: dir.join("eval.json"),
            dir,
        }
    }
}

/// Location of the run index under `out_dir`.
pub fn run_index_path(out_dir: &Path) -> PathBuf {
    out_dir.join("runs.jsonl")
}

/// Evaluates a standalone generator on the held-out ids against the largest code of its space.
pub fn evaluate_generator(cfg: &RunConfig, g: &GeneratorFile, data: &Dataset, eval_ids: &[String]) -> Result<EvalReport> {
    let (x, y) = data.batch(eval_ids, true)?;
    let reference = count_macs(&g.spec.sample_largest(), &g.spec, g.spec.image_size)?;
    let tags = EvalTags { label: g.label.clone(), fraction: cfg.data.fraction, seed: cfg.seed };
    let ex = cfg.extractor.fid(g.spec.in_channels);
    evaluate(&g.spec, &g.code, &g.weights, &x, &y.expect("evaluation ids are labeled"), &reference, Some(&ex), tags)
}

fn finish(
    cfg: &RunConfig,
    g: &GeneratorFile,
    data: &Dataset,
    eval_ids: &[String],
    (gen_path, eval_path): (&Path, &Path),
    out_dir: &Path,
) -> Result<EvalReport> {
    g.save(gen_path)?;
    let report = evaluate_generator(cfg, g, data, eval_ids)?;
    write_report(eval_path, &report)?;
    append_index(&run_index_path(out_dir), &report)?;
    Ok(report)
}

/// Runs (or resumes) the second stage; when complete, writes the student and its evaluation.
#[allow(clippy::too_many_arguments)]
pub fn run_stage2(
    cfg: &RunConfig,
    net: &SuperNetState,
    codes: &Codes,
    data: &Dataset,
    part: &DatasetPartition,
    eval_ids: &[String],
    out_dir: &Path,
    resume: bool,
    stop_after: Option<u64>,
) -> Result<(Stage2State, Option<EvalReport>)> {
    let paths = Stage2Paths::new(out_dir);
    fs::create_dir_all(&paths.dir).map_err(|e| UgcError::io(&paths.dir, e))?;
    cfg.write_resolved(&paths.dir)?;
    let s2 = &cfg.stage2;
    let mut state = if resume && paths.checkpoint.exists() {
        let st = Stage2State::from_checkpoint(Checkpoint::load(&paths.checkpoint)?, &paths.checkpoint)?;
        if &st.codes != codes {
            return Err(UgcError::format(&paths.checkpoint, "checkpoint codes differ from the search result"));
        }
        st
    } else {
        Stage2State::inherit(net, codes.clone(), s2)?
    };
    if part.labeled_ids.is_empty() {
        return Err(UgcError::Empty("labeled split".into()));
    }
    if part.unlabeled_ids.is_empty() {
        log::warn!("unlabeled split is empty; stage 2 runs supervised distillation only");
    }
    let extractor = cfg.extractor.perceptual(cfg.space.in_channels);
    let mut log_file = open_log(&paths.log, state.step)?;
    let end = stop_after.map_or(s2.total_steps, |s| s.min(s2.total_steps));
    while state.step < end {
        let k = state.step;
        let (xa, ya) = stack(&load_batch(data, part, Split::Labeled, s2.batch_labeled, cfg.seed, k)?);
        let ya = ya.expect("labeled batch has targets");
        let xu = if part.unlabeled_ids.is_empty() {
            None
        } else {
            Some(stack(&load_batch(data, part, Split::Unlabeled, s2.batch_unlabeled, cfg.seed, k)?).0)
        };
        let report = stage2_step(&mut state, s2, &cfg.losses, &extractor, cfg.seed, (&xa, &ya), xu.as_ref())?;
        writeln!(log_file, "{}", serde_json::to_string(&report).expect("report serializes"))
            .map_err(|e| UgcError::io(&paths.log, e))?;
        if state.step == end || (s2.checkpoint_every > 0 && state.step % s2.checkpoint_every == 0) {
            state.to_checkpoint().save(&paths.checkpoint)?;
        }
    }
    if state.step < s2.total_steps {
        return Ok((state, None));
    }
    let g = GeneratorFile {
        spec: state.spec.clone(),
        code: state.codes.student.clone(),
        label: "student".into(),
        weights: state.student.clone(),
    };
    let report = finish(cfg, &g, data, eval_ids, (&paths.student, &paths.eval), out_dir)?;
    Ok((state, Some(report)))
}

/// Per-step record of the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    /// Step index.
    pub step: u64,
    /// Learning rate used.
    pub lr: f64,
    /// Discriminator objective.
    pub loss_d: f64,
    /// Generator objective and its parts.
    pub generator: SupValues,
}

/// Trains `code` from scratch with the supervised objective on the labeled split only.
///
/// Writes `baseline/generator.ugc`, its step log and its evaluation.
pub fn run_baseline(
    cfg: &RunConfig,
    code: &ArchCode,
    data: &Dataset,
    part: &DatasetPartition,
    eval_ids: &[String],
    out_dir: &Path,
) -> Result<(GeneratorFile, EvalReport)> {
    let dir = out_dir.join("baseline");
    fs::create_dir_all(&dir).map_err(|e| UgcError::io(&dir, e))?;
    cfg.write_resolved(&dir)?;
    let spec = &cfg.space;
    spec.validate_arch(code)?;
    let b = &cfg.baseline;
    let disc = discriminator_for(cfg);
    let mut g = init_generator(spec, code, &mut substream(cfg.seed, "init-baseline", 0));
    let mut d = disc.init(&mut substream(cfg.seed, "init-baseline-discriminator", 0));
    let (mut opt_g, mut opt_d) = (Adam::new(cfg.stage2.adam), Adam::new(cfg.stage2.adam));
    let log_path = dir.join("log.jsonl");
    let mut log_file = open_log(&log_path, 0)?;
    for k in 0..b.total_steps {
        let lr = lr_schedule(k, b.total_steps, b.lr0, b.lr_constant_fraction)?;
        let (xa, ya) = stack(&load_batch(data, part, Split::Labeled, b.batch_labeled, cfg.seed, k)?);
        let ya = ya.expect("labeled batch has targets");
        let fake = run_generator(spec, code, &g, &xa, EVAL_CHUNK);
        let loss_d = discriminator_step(&disc, &mut d, &mut opt_d, &xa, &ya, &[&fake], lr);
        let generator = supervised_update(
            spec,
            code,
            &mut g,
            &mut opt_g,
            &disc,
            &d,
            &cfg.losses,
            cfg.stage2.gan_mode,
            (&xa, &ya),
            lr,
        )?;
        let r = BaselineReport { step: k, lr, loss_d, generator };
        writeln!(log_file, "{}", serde_json::to_string(&r).expect("report serializes"))
            .map_err(|e| UgcError::io(&log_path, e))?;
    }
    let file = GeneratorFile { spec: spec.clone(), code: code.clone(), label: "baseline".into(), weights: g };
    let report = finish(cfg, &file, data, eval_ids, (&dir.join("generator.ugc"), &dir.join("eval.json")), out_dir)?;
    Ok((file, report))
}
