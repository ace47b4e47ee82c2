//! Semi-supervised supernet training with the sandwich rule.
//!
//! Every step trains the largest sub-network adversarially on a labeled
//! batch and distills its (gradient-blocked) outputs on an unlabeled batch
//! into one random and the smallest sub-network. All three share one weight
//! store.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ugc_core::{lr_schedule, substream, ArchCode, DatasetPartition, SearchSpaceSpec};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Stage1Config};
use crate::data::{load_batch, stack, Dataset, Split};
use crate::error::{Result, UgcError};
use crate::losses::{discriminator_loss, od_loss, supervised_objective, GanMode, LossWeights};
use crate::nn::{generator_forward, init_supernet, supernet_layout, FeatureExtractor, PatchDiscriminator};
use crate::params::{Adam, Bound, Layout, TensorMap};
use crate::tensor::Tensor;

/// Shared generator store, discriminator and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperNetState {
    /// Search space the store was built for.
    pub spec: SearchSpaceSpec,
    /// Generator weights at maximum width and depth.
    pub generator: TensorMap<f32>,
    /// Discriminator architecture.
    pub disc: PatchDiscriminator,
    /// Discriminator weights.
    pub discriminator: TensorMap<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl SuperNetState {
    /// Fresh state with weights drawn from the `init` stream of `seed`.
    pub fn init(spec: &SearchSpaceSpec, disc: PatchDiscriminator, seed: u64) -> Result<Self> {
        spec.validate()?;
        let generator = init_supernet(spec, &mut substream(seed, "init-generator", 0));
        let discriminator = disc.init(&mut substream(seed, "init-discriminator", 0));
        Ok(Self { spec: spec.clone(), generator, disc, discriminator, step: 0 })
    }

    /// Runs sub-network `code` on `x` without recording gradients.
    pub fn generate(&self, code: &ArchCode, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.spec.validate_arch(code)?;
        let layout = supernet_layout(&self.spec);
        let tape = Tape::new();
        let mut src = Bound::sliced(&tape, &self.generator, &layout, false);
        let y = generator_forward(&self.spec, code, &mut src, tape.constant(x.clone()));
        let out = (*y.value()).clone();
        Ok(out)
    }
}

/// Optimizer state of a first-stage run.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1State {
    /// Weights and step counter.
    pub net: SuperNetState,
    /// Generator optimizer.
    pub opt_g: Adam<f32>,
    /// Discriminator optimizer.
    pub opt_d: Adam<f32>,
}

impl Stage1State {
    /// Fresh state for `cfg`.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let disc = discriminator_for(cfg);
        Ok(Self {
            net: SuperNetState::init(&cfg.space, disc, cfg.seed)?,
            opt_g: Adam::new(cfg.stage1.adam),
            opt_d: Adam::new(cfg.stage1.adam),
        })
    }

    /// Serializes weights, optimizers and counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "stage1",
            "spec": self.net.spec,
            "discriminator": { "in_channels": self.net.disc.in_channels, "ndf": self.net.disc.ndf, "n_layers": self.net.disc.n_layers },
            "step": self.net.step,
        }));
        c.groups.insert("generator".into(), self.net.generator.clone());
        c.groups.insert("discriminator".into(), self.net.discriminator.clone());
        c.put_adam("adam_g", &self.opt_g);
        c.put_adam("adam_d", &self.opt_d);
        c
    }

    /// Restores a state written by [`Stage1State::to_checkpoint`].
    pub fn from_checkpoint(mut c: Checkpoint, origin: &Path) -> Result<Self> {
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some("stage1") {
            return Err(UgcError::format(origin, "not a stage-1 checkpoint"));
        }
        let spec: SearchSpaceSpec =
            serde_json::from_value(c.meta["spec"].clone()).map_err(|e| UgcError::format(origin, e.to_string()))?;
        let d = &c.meta["discriminator"];
        let get = |k: &str| d.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let disc = PatchDiscriminator {
            in_channels: get("in_channels").ok_or_else(|| UgcError::format(origin, "discriminator shape"))?,
            ndf: get("ndf").ok_or_else(|| UgcError::format(origin, "discriminator shape"))?,
            n_layers: get("n_layers").ok_or_else(|| UgcError::format(origin, "discriminator shape"))?,
        };
        let step = c.meta["step"].as_u64().ok_or_else(|| UgcError::format(origin, "missing step"))?;
        let generator = c.take_group("generator", origin)?;
        let discriminator = c.take_group("discriminator", origin)?;
        let opt_g = c.take_adam("adam_g", origin)?;
        let opt_d = c.take_adam("adam_d", origin)?;
        Ok(Self { net: SuperNetState { spec, generator, disc, discriminator, step }, opt_g, opt_d })
    }
}

/// Discriminator shape implied by a run configuration.
pub fn discriminator_for(cfg: &RunConfig) -> PatchDiscriminator {
    PatchDiscriminator {
        in_channels: cfg.space.in_channels + cfg.space.out_channels,
        ndf: cfg.discriminator.ndf,
        n_layers: cfg.discriminator.n_layers,
    }
}

/// Per-step record of the first stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    /// Step index (0-based) this record describes.
    pub step: u64,
    /// Learning rate used.
    pub lr: f64,
    /// Supervised generator objective of the largest network.
    pub loss_sup: f64,
    /// Its adversarial part.
    pub loss_sup_gan: f64,
    /// Its unweighted L1 part.
    pub loss_sup_recon: f64,
    /// Discriminator objective.
    pub loss_d: f64,
    /// Distillation loss of the random sub-network.
    pub loss_dist_r: Option<f64>,
    /// Distillation loss of the smallest sub-network.
    pub loss_dist_s: Option<f64>,
    /// The random sub-network.
    pub code_r: ArchCode,
}

/// Which parts of the generator objective to include.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parts {
    /// The supervised objective of the largest network.
    pub supervised: bool,
    /// Distillation into the random sub-network.
    pub random: bool,
    /// Distillation into the smallest sub-network.
    pub smallest: bool,
}

impl Parts {
    /// Every part.
    pub const ALL: Parts = Parts { supervised: true, random: true, smallest: true };
}

/// Loss values produced by [`generator_objective`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveValues {
    /// Supervised objective.
    pub sup: Option<(f64, f64, f64)>,
    /// Distillation into the random sub-network.
    pub dist_r: Option<f64>,
    /// Distillation into the smallest sub-network.
    pub dist_s: Option<f64>,
}

/// Fixed ingredients of a generator update.
pub struct Ctx<'a> {
    /// Search space.
    pub spec: &'a SearchSpaceSpec,
    /// Input-segment layout of the store.
    pub layout: &'a Layout,
    /// Perceptual network.
    pub extractor: &'a FeatureExtractor<f32>,
    /// Loss coefficients.
    pub weights: &'a LossWeights,
    /// Adversarial form.
    pub gan_mode: GanMode,
}

/// Gradients of the first-stage generator objective with respect to the store.
///
/// The discriminator is held constant; pseudo targets come from the largest
/// network through a non-trainable binding.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    ctx: &Ctx<'_>,
    net: &SuperNetState,
    xa: &Tensor<f32>,
    ya: &Tensor<f32>,
    xu: Option<&Tensor<f32>>,
    code_r: &ArchCode,
    parts: Parts,
) -> Result<(TensorMap<f32>, ObjectiveValues)> {
    let largest = ctx.spec.sample_largest();
    let smallest = ctx.spec.sample_smallest();
    let tape = Tape::new();
    let mut gen = Bound::sliced(&tape, &net.generator, ctx.layout, true);
    let mut dw = Bound::exact(&tape, &net.discriminator, false);
    let mut values = ObjectiveValues::default();
    let mut total: Option<Var<'_, f32>> = None;
    if parts.supervised {
        let x = tape.constant(xa.clone());
        let y = tape.constant(ya.clone());
        let fake = generator_forward(ctx.spec, &largest, &mut gen, x);
        let mut d = |a, b| net.disc.forward(&mut dw, a, b);
        let terms = supervised_objective(fake, y, x, &mut d, ctx.weights, ctx.gan_mode)?;
        values.sup = Some((terms.loss_g.item(), terms.gan, terms.recon));
        push(&mut total, terms.loss_g);
    }
    if let Some(xu) = xu.filter(|_| parts.random || parts.smallest) {
        let pseudo = {
            let mut frozen = Bound::sliced(&tape, &net.generator, ctx.layout, false);
            generator_forward(ctx.spec, &largest, &mut frozen, tape.constant(xu.clone()))
        };
        let x = tape.constant(xu.clone());
        if parts.random {
            let out = generator_forward(ctx.spec, code_r, &mut gen, x);
            let od = od_loss(ctx.weights, ctx.extractor, &tape, pseudo, out)?;
            values.dist_r = Some(od.total.item());
            push(&mut total, od.total);
        }
        if parts.smallest {
            let out = generator_forward(ctx.spec, &smallest, &mut gen, x);
            let od = od_loss(ctx.weights, ctx.extractor, &tape, pseudo, out)?;
            values.dist_s = Some(od.total.item());
            push(&mut total, od.total);
        }
    }
    let grads = match total {
        Some(t) => {
            let mut g = tape.backward(t);
            gen.grads(&mut g)
        }
        None => TensorMap::new(),
    };
    Ok((grads, values))
}

fn push<'t>(total: &mut Option<Var<'t, f32>>, v: Var<'t, f32>) {
    *total = Some(match total.take() {
        Some(t) => t.add(&v),
        None => v,
    });
}

/// One discriminator update against `fakes`; returns the mean loss.
pub fn discriminator_step(
    disc: &PatchDiscriminator,
    weights: &mut TensorMap<f32>,
    opt: &mut Adam<f32>,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    fakes: &[&Tensor<f32>],
    lr: f64,
) -> f64 {
    let tape = Tape::new();
    let (grads, value) = {
        let mut dw = Bound::exact(&tape, weights, true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let mut total: Option<Var<'_, f32>> = None;
        for f in fakes {
            let d_real = disc.forward(&mut dw, xv, yv);
            let d_fake = disc.forward(&mut dw, xv, tape.constant((*f).clone()));
            let l = discriminator_loss(d_real, d_fake);
            total = Some(total.map_or(l, |t| t.add(&l)));
        }
        let loss = total.expect("at least one fake batch").scale(1.0 / fakes.len() as f64);
        let mut g = tape.backward(loss);
        (dw.grads(&mut g), loss.item())
    };
    opt.step(weights, &grads, lr);
    value
}

/// Runs one first-stage step on the given batches and advances the counter.
pub fn stage1_step(
    state: &mut Stage1State,
    cfg: &Stage1Config,
    weights: &LossWeights,
    extractor: &FeatureExtractor<f32>,
    seed: u64,
    batch_a: (&Tensor<f32>, &Tensor<f32>),
    batch_u: Option<&Tensor<f32>>,
) -> Result<Stage1Report> {
    let spec = state.net.spec.clone();
    let layout = supernet_layout(&spec);
    let step = state.net.step;
    let lr = lr_schedule(step, cfg.total_steps, cfg.lr0, cfg.lr_constant_fraction)?;
    let code_r = spec.sample_random(&mut substream(seed, "sandwich", step));
    let (xa, ya) = batch_a;

    let fake = state.net.generate(&spec.sample_largest(), xa)?;
    let loss_d = discriminator_step(
        &state.net.disc,
        &mut state.net.discriminator,
        &mut state.opt_d,
        xa,
        ya,
        &[&fake],
        lr,
    );

    let ctx = Ctx { spec: &spec, layout: &layout, extractor, weights, gan_mode: cfg.gan_mode };
    let values = if cfg.alternating {
        let mut values = ObjectiveValues::default();
        for parts in [
            Parts { supervised: true, random: false, smallest: false },
            Parts { supervised: false, random: true, smallest: false },
            Parts { supervised: false, random: false, smallest: true },
        ] {
            if !parts.supervised && batch_u.is_none() {
                continue;
            }
            let (g, v) = generator_objective(&ctx, &state.net, xa, ya, batch_u, &code_r, parts)?;
            state.opt_g.step(&mut state.net.generator, &g, lr);
            values.sup = values.sup.or(v.sup);
            values.dist_r = values.dist_r.or(v.dist_r);
            values.dist_s = values.dist_s.or(v.dist_s);
        }
        values
    } else {
        let (g, v) = generator_objective(&ctx, &state.net, xa, ya, batch_u, &code_r, Parts::ALL)?;
        state.opt_g.step(&mut state.net.generator, &g, lr);
        v
    };
    state.net.step += 1;
    let (loss_sup, loss_sup_gan, loss_sup_recon) = values.sup.expect("supervised part always runs");
    Ok(Stage1Report {
        step,
        lr,
        loss_sup,
        loss_sup_gan,
        loss_sup_recon,
        loss_d,
        loss_dist_r: values.dist_r,
        loss_dist_s: values.dist_s,
        code_r,
    })
}

/// Artifact locations of a first-stage run.
pub struct Stage1Paths {
    /// Directory.
    pub dir: PathBuf,
    /// Latest checkpoint.
    pub checkpoint: PathBuf,
    /// Line-delimited step log.
    pub log: PathBuf,
}

impl Stage1Paths {
    /// Paths under `out_dir/stage1`.
    pub fn new(out_dir: &Path) -> Self {
        let dir = out_dir.join("stage1");
        Self { checkpoint: dir.join("checkpoint.ugc"), log: dir.join("log.jsonl"), dir }
    }
}

/// Keeps the log lines whose `step` is below `keep_below` and reopens for appending.
pub(crate) fn open_log(path: &Path, keep_below: u64) -> Result<fs::File> {
    let kept = if keep_below > 0 && path.exists() {
        let text = fs::read_to_string(path).map_err(|e| UgcError::io(path, e))?;
        text.lines()
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                    .is_some_and(|s| s < keep_below)
            })
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    } else {
        String::new()
    };
    fs::write(path, kept).map_err(|e| UgcError::io(path, e))?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| UgcError::io(path, e))
}

/// Runs (or resumes) the first stage, writing checkpoints and the step log under `out_dir/stage1`.
///
/// With `stop_after`, the run halts once that many total steps are done,
/// leaving a resumable checkpoint.
pub fn run_stage1(
    cfg: &RunConfig,
    data: &Dataset,
    part: &DatasetPartition,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<u64>,
) -> Result<SuperNetState> {
    let paths = Stage1Paths::new(out_dir);
    fs::create_dir_all(&paths.dir).map_err(|e| UgcError::io(&paths.dir, e))?;
    cfg.write_resolved(&paths.dir)?;
    let mut state = if resume && paths.checkpoint.exists() {
        Stage1State::from_checkpoint(Checkpoint::load(&paths.checkpoint)?, &paths.checkpoint)?
    } else {
        Stage1State::init(cfg)?
    };
    if part.labeled_ids.is_empty() {
        return Err(UgcError::Empty("labeled split".into()));
    }
    if part.unlabeled_ids.is_empty() {
        log::warn!("unlabeled split is empty; stage 1 runs supervised-only");
    }
    let extractor = cfg.extractor.perceptual(cfg.space.in_channels);
    let mut log_file = open_log(&paths.log, state.net.step)?;
    let s1 = &cfg.stage1;
    let end = stop_after.map_or(s1.total_steps, |s| s.min(s1.total_steps));
    while state.net.step < end {
        let k = state.net.step;
        let a = load_batch(data, part, Split::Labeled, s1.batch_labeled, cfg.seed, k)?;
        let (xa, ya) = stack(&a);
        let ya = ya.expect("labeled batch has targets");
        let xu = if part.unlabeled_ids.is_empty() {
            None
        } else {
            Some(stack(&load_batch(data, part, Split::Unlabeled, s1.batch_unlabeled, cfg.seed, k)?).0)
        };
        let report = stage1_step(&mut state, s1, &cfg.losses, &extractor, cfg.seed, (&xa, &ya), xu.as_ref())?;
        let line = serde_json::to_string(&report).expect("report serializes");
        writeln!(log_file, "{line}").map_err(|e| UgcError::io(&paths.log, e))?;
        let done = state.net.step;
        if done == end || (s1.checkpoint_every > 0 && done % s1.checkpoint_every == 0) {
            state.to_checkpoint().save(&paths.checkpoint)?;
        }
    }
    Ok(state.net)
}

/// Loads the first-stage weights from `path`.
pub fn load_supernet(path: &Path) -> Result<SuperNetState> {
    Ok(Stage1State::from_checkpoint(Checkpoint::load(path)?, path)?.net)
}
