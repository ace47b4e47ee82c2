//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines reach stdout. Pass criterion
//! numbers as arguments to run a subset, e.g. `cargo test --test acceptance -- 1 9`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::hash::{DefaultHasher, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ugc::autograd::Tape;
use ugc::config::RunConfig;
use ugc::data::synth_generate;
use ugc::gradcheck::{loss_fn, relative_error};
use ugc::losses::*;
use ugc::metrics::fid;
use ugc::nn::{generator_forward, init_generator, init_supernet, run_generator, slice_subnet, supernet_layout};
use ugc::nn::{FeatureExtractor, PatchDiscriminator};
use ugc::params::{Bound, TensorMap};
use ugc::pipeline::{codes_of, prepare, run_pipeline};
use ugc::search::run_search;
use ugc::stage1::run_stage1;
use ugc::stage2::{run_baseline, run_stage2};
use ugc::tensor::Tensor;
use ugc_core::cost::pix2pix_resnet_reference;
use ugc_core::{
    adaptive_filter, count_macs, evolve, search_teachers, ArchCode, Budget, CostReport, EmaTracker, EvoParams,
    Objective, SearchSpaceSpec, Topology,
};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 1

/// Output size of a strided convolution, by counting window placements.
fn conv_out(res: usize, k: usize, s: usize, p: usize) -> usize {
    let mut n = 0;
    while n * s + k <= res + 2 * p {
        n += 1;
    }
    n
}

/// Output size of a transposed convolution, by scattering every input
/// position and cropping `p` from both ends.
fn conv_t_out(res: usize, k: usize, s: usize, p: usize, op: usize) -> usize {
    let mut hi = 0;
    for i in 0..res {
        for kk in 0..k {
            hi = hi.max(i * s + kk);
        }
    }
    hi + 1 - 2 * p + op
}

#[derive(Default)]
struct Walk {
    res: usize,
    macs: u64,
    params: u64,
    shapes: Vec<Vec<usize>>,
}

impl Walk {
    fn conv(&mut self, cin: usize, cout: usize, k: usize, s: usize, p: usize) {
        self.res = conv_out(self.res, k, s, p);
        self.add(cin, cout, k, vec![cout, cin, k, k]);
    }

    fn conv_t(&mut self, cin: usize, cout: usize, k: usize, p: usize, op: usize) {
        self.res = conv_t_out(self.res, k, 2, p, op);
        self.add(cin, cout, k, vec![cin, cout, k, k]);
    }

    fn add(&mut self, cin: usize, cout: usize, k: usize, shape: Vec<usize>) {
        self.macs += (cin * cout * k * k * self.res * self.res) as u64;
        self.params += (cin * cout * k * k + cout) as u64;
        self.shapes.push(shape);
        self.shapes.push(vec![cout]);
    }

    fn block(&mut self, c: usize, hidden: usize) {
        self.conv(c, hidden, 3, 1, 1);
        self.conv(hidden, c, 3, 1, 1);
    }
}

/// Layer walk straight from the raw genes.
fn oracle(spec: &SearchSpaceSpec, code: &ArchCode, res: usize) -> Walk {
    let n = spec.n_stages;
    let bps = spec.blocks_per_site;
    let g = &code.widths;
    let mut w = Walk { res, ..Walk::default() };
    match spec.topology {
        Topology::ResnetStyle => {
            let blocks = |w: &mut Walk, site: usize, c: usize| {
                for b in 0..code.depths[site] {
                    w.block(c, g[1 + 2 * n + site * bps + b]);
                }
            };
            w.conv(spec.in_channels, g[0], 7, 1, 3);
            let mut c = g[0];
            for i in 0..n {
                w.conv(c, g[1 + i], 3, 2, 1);
                c = g[1 + i];
                blocks(&mut w, i, c);
            }
            for _ in 0..spec.trunk_blocks {
                w.block(c, c);
            }
            for j in 0..n {
                w.conv_t(c, g[1 + n + j], 3, 1, 1);
                c = g[1 + n + j];
                blocks(&mut w, n + j, c);
            }
            w.conv(c, spec.out_channels, 7, 1, 3);
        }
        Topology::UnetStyle => {
            let blocks = |w: &mut Walk, site: usize, c: usize| {
                for b in 0..code.depths[site] {
                    w.block(c, g[2 * n - 1 + site * bps + b]);
                }
            };
            let mut c = spec.in_channels;
            for i in 0..n {
                w.conv(c, g[i], 4, 2, 1);
                c = g[i];
                blocks(&mut w, i, c);
            }
            for j in 0..n {
                let cin = if j == 0 { c } else { c + g[n - 1 - j] };
                let out = if j + 1 < n { g[n + j] } else { spec.out_channels };
                w.conv_t(cin, out, 4, 1, 0);
                c = out;
                if j + 1 < n {
                    blocks(&mut w, n + j, c);
                }
            }
        }
    }
    w
}

fn criterion_1() -> Outcome {
    let specs = [
        SearchSpaceSpec::default(),
        SearchSpaceSpec { topology: Topology::UnetStyle, n_stages: 3, ..SearchSpaceSpec::default() },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for spec in &specs {
        let store = init_supernet::<f32, _>(spec, &mut rng);
        let layout = supernet_layout(spec);
        for _ in 0..10 {
            let code = spec.sample_random(&mut rng);
            for res in [spec.image_size, 256] {
                let walk = oracle(spec, &code, res);
                let got = count_macs(&code, spec, res).map_err(|e| e.to_string())?;
                if got != (CostReport { macs: walk.macs, params: walk.params }) || walk.res != res {
                    return Err(format!("{code:?} at {res}: accounting {got:?}, walk {} / {}", walk.macs, walk.params));
                }
            }
            // The walk's weight shapes are the ones the network instantiates.
            let mut want: Vec<Vec<usize>> = oracle(spec, &code, 32).shapes;
            let weights: TensorMap<f32> = init_generator(spec, &code, &mut rng);
            let mut have: Vec<Vec<usize>> = weights.values().map(|t| t.shape().to_vec()).collect();
            want.sort();
            have.sort();
            if want != have {
                return Err(format!("{code:?}: walk shapes differ from the instantiated generator"));
            }
            // Executed convolutions, counted by the tape, agree at a small resolution.
            let tape = Tape::new();
            let mut src = Bound::sliced(&tape, &store, &layout, false);
            let x = tape.constant(Tensor::from_vec(&[1, 3, 32, 32], vec![0.1f32; 3 * 32 * 32]));
            generator_forward(spec, &code, &mut src, x);
            if tape.macs() != oracle(spec, &code, 32).macs {
                return Err(format!("{code:?}: executed MACs {} vs walk", tape.macs()));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} codes, 2 topologies, exact at 64/256 px; executed MACs agree at 32 px"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for topology in [Topology::ResnetStyle, Topology::UnetStyle] {
        let spec = SearchSpaceSpec { topology, ..SearchSpaceSpec::default() };
        let store = init_supernet::<f64, _>(&spec, &mut rng);
        let layout = supernet_layout(&spec);
        let n = 3 * 64 * 64;
        let x = Tensor::from_vec(&[1, 3, 64, 64], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        for _ in 0..5 {
            let code = spec.sample_random(&mut rng);
            let tape = Tape::new();
            let mut src = Bound::sliced(&tape, &store, &layout, false);
            let sliced = (*generator_forward(&spec, &code, &mut src, tape.constant(x.clone())).value()).clone();
            let standalone = run_generator(&spec, &code, &slice_subnet(&store, &spec, &code), &x, 1);
            worst = worst.max(sliced.max_abs_diff(&standalone));
        }
    }
    check(worst <= 1e-6, format!("10 codes, max |diff| {worst:.2e} (limit 1e-6)"))
}

// ---------------------------------------------------------------- 3

fn rand_image(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[1, 3, 8, 8], (0..192).map(|_| rng.random_range(-0.9..0.9)).collect())
}

/// Step of the central differences. The feature, style and reconstruction
/// terms are piecewise smooth (|.| and ReLU); a larger step lets kinks fall
/// inside the stencil on some inputs, which measures the stencil, not the
/// gradient.
const FD_STEP: f64 = 1e-5;
const FD_INPUTS: u64 = 10;

fn criterion_3() -> Outcome {
    let d = PatchDiscriminator { in_channels: 6, ndf: 4, n_layers: 1 };
    let dw: TensorMap<f64> = d.init(&mut ChaCha8Rng::seed_from_u64(3));
    let ex = FeatureExtractor::<f64>::default_for(3, 17);
    let weights = LossWeights::default();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for k in 0..FD_INPUTS {
        let (x, y, at) = (rand_image(100 + k), rand_image(200 + k), rand_image(300 + k));
        let mut errs: Vec<(&str, f64)> = vec![
            (
                "gan(G)",
                relative_error(&at, FD_STEP, loss_fn(|t, v| {
                    let mut b = Bound::exact(t, &dw, false);
                    let mut df = |a, c| d.forward(&mut b, a, c);
                    gan_loss(&mut df, t.constant(x.clone()), t.constant(y.clone()), v, GanMode::NonSaturating).unwrap().1
                })),
            ),
            (
                "gan(D)",
                relative_error(&at, FD_STEP, loss_fn(|t, v| {
                    let mut b = Bound::exact(t, &dw, false);
                    let mut df = |a, c| d.forward(&mut b, a, c);
                    gan_loss(&mut df, t.constant(x.clone()), v, t.constant(y.clone()), GanMode::Minimax).unwrap().0
                })),
            ),
            ("recon", relative_error(&at, FD_STEP, |t, v| recon_loss(v, t.constant(y.clone())).unwrap())),
            ("ssim", relative_error(&at, FD_STEP, |t, v| ssim_loss_with(v, t.constant(y.clone()), 7).unwrap())),
            ("tv", relative_error(&at, FD_STEP, |_, v| tv_loss(v))),
            (
                "feature",
                relative_error(&at, FD_STEP, |t, v| perceptual_loss(&ex, t, v, t.constant(y.clone())).unwrap().0),
            ),
            (
                "style",
                relative_error(&at, FD_STEP, |t, v| perceptual_loss(&ex, t, v, t.constant(y.clone())).unwrap().1),
            ),
            (
                "od",
                relative_error(&at, FD_STEP, |t, v| {
                    od_loss(&weights, &ex, t, t.constant(y.clone()), v).unwrap().total
                }),
            ),
        ];
        errs.push((
            "supervised",
            relative_error(&at, FD_STEP, |t, v| {
                let mut b = Bound::exact(t, &dw, false);
                let mut df = |a, c| d.forward(&mut b, a, c);
                supervised_objective(v, t.constant(y.clone()), t.constant(x.clone()), &mut df, &weights, GanMode::NonSaturating)
                    .unwrap()
                    .loss_g
            }),
        ));
        for (name, e) in errs {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    let (name, err) = worst.iter().fold(("", 0.0), |a, (n, e)| if *e > a.1 { (n, *e) } else { a });
    let bad: Vec<_> = worst.iter().filter(|(_, e)| !(**e < 1e-3)).collect();
    check(
        bad.is_empty(),
        format!(
            "{} losses x {FD_INPUTS} inputs, step {FD_STEP:e}: worst {name} rel err {err:.2e} (limit 1e-3); failing {bad:?}",
            worst.len()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let spec = SearchSpaceSpec {
        n_stages: 1,
        trunk_blocks: 1,
        width_choices: vec![8, 16, 24, 32],
        depth_choices: vec![0, 1],
        blocks_per_site: 1,
        image_size: 16,
        ..SearchSpaceSpec::default()
    };
    let all = spec.enumerate(4096).ok_or("space is not enumerable")?;
    // Injective: a distance to a hidden target plus a mixed-radix tie-breaker.
    let target = [2usize, 0, 3, 1, 2];
    let fit = |c: &ArchCode| {
        let idx: Vec<usize> = c.widths.iter().map(|w| w / 8 - 1).collect();
        let dist: usize = idx.iter().zip(target).map(|(a, b)| a.abs_diff(b).pow(2)).sum();
        let rank = idx.iter().chain(&c.depths).fold(0usize, |acc, v| acc * 4 + v);
        -(dist as f64) * 1e4 + (c.depths.iter().sum::<usize>() as f64) * 1e3 - rank as f64 * 1e-3
    };
    let best = all.iter().max_by(|a, b| fit(a).total_cmp(&fit(b))).unwrap();
    let mut values: Vec<f64> = all.iter().map(fit).collect();
    values.sort_by(f64::total_cmp);
    if values.windows(2).any(|w| w[0] == w[1]) {
        return Err("fitness is not injective".into());
    }
    let mut hits = 0;
    for seed in 0..5 {
        let params = EvoParams { seed, ..EvoParams::default() };
        let out = evolve(&spec, &Budget::student(u64::MAX), &params, Objective::Fitness, &[], fit)
            .map_err(|e| e.to_string())?;
        hits += usize::from(&out.best == best);
    }
    check(hits == 5, format!("{} codes, argmax found on {hits}/5 seeds", all.len()))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let spec = SearchSpaceSpec::default();
    let cfg = RunConfig::default();
    let (ratio, tol) = (cfg.search.teacher_ratio, cfg.search.teacher_tolerance);
    let largest = count_macs(&spec.sample_largest(), &spec, 64).unwrap().macs;
    let macs = |c: &ArchCode| count_macs(c, &spec, 64).unwrap().macs;
    let mut feasible = 0;
    let mut ratios = Vec::new();
    let smallest = count_macs(&spec.sample_smallest(), &spec, 64).unwrap().macs;
    for (i, compression) in [16.0, 20.0, 24.0, 32.0, 48.0, 64.0].into_iter().enumerate() {
        if (largest as f64 / compression) < smallest as f64 {
            continue;
        }
        let params = EvoParams { seed: i as u64, ..EvoParams::default() };
        let fitness = |c: &ArchCode| c.widths.iter().sum::<usize>() as f64;
        let student = evolve(
            &spec,
            &Budget::student((largest as f64 / compression) as u64),
            &params,
            Objective::Fitness,
            &[],
            fitness,
        )
        .map_err(|e| e.to_string())?
        .best;
        let pair = search_teachers(&spec, &student, &params, ratio, tol, fitness).map_err(|e| e.to_string())?;
        if pair.degraded {
            continue;
        }
        feasible += 1;
        for t in [&pair.deeper, &pair.wider] {
            let r = macs(t) as f64 / macs(&student) as f64;
            ratios.push(r);
            if !(15.0..=25.0).contains(&r) {
                return Err(format!("teacher ratio {r:.2} outside [15, 25]"));
            }
        }
    }
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(0.0, f64::max);
    check(feasible >= 3, format!("{feasible} feasible students, teacher ratios in [{lo:.2}, {hi:.2}]"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut ema = EmaTracker::new(0.99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        ema.update(rng.random_range(0.3..0.7)).unwrap();
    }
    let level = ema.value;
    let p = RunConfig::default().stage2.gate_probability;
    let below = (0..10_000)
        .filter(|_| adaptive_filter(rng.random_range(0.0..=level), &ema, p, &mut rng).unwrap() == 1)
        .count();
    let above: usize = (0..10_000)
        .map(|_| {
            let s = level + rng.random_range(1e-9..1.0);
            adaptive_filter(s, &ema, p, &mut rng).unwrap() as usize
        })
        .sum();
    let rate = above as f64 / 10_000.0;
    check(
        below == 10_000 && (rate - 0.5).abs() <= 0.05,
        format!("below-EMA gate rate {}/10000, above-EMA gate rate {rate:.4} (0.5 +- 0.05)", below),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let spec = SearchSpaceSpec { image_size: 256, ..SearchSpaceSpec::default() };
    // stem 16, down 16/24, up 16/16, block hidden width 32, two blocks after
    // the first down-sampling and one after the second and after the first up.
    let mut widths = vec![16, 16, 24, 16, 16];
    widths.extend([32; 12]);
    let student = ArchCode { widths, depths: vec![2, 1, 1, 0] };
    let s = count_macs(&student, &spec, 256).map_err(|e| e.to_string())?;
    let full = CostReport::from_layers(&pix2pix_resnet_reference(3, 3, 64, 9, 256));
    let (rm, rp) = s.ratio_to(&full);
    check(
        (rm / 39.0 - 1.0).abs() <= 0.1 && (rp / 75.0 - 1.0).abs() <= 0.1,
        format!("MACs {rm:.1}x (39x +- 10%), params {rp:.1}x (75x +- 10%)"),
    )
}

// ---------------------------------------------------------------- 8

fn toy_config(root: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.root = root.to_path_buf();
    cfg.space.width_choices = vec![8, 16, 24, 32];
    cfg.space.trunk_blocks = 3;
    cfg.discriminator.ndf = 16;
    cfg.stage1.total_steps = TOY_STAGE1;
    cfg.stage2.total_steps = TOY_STAGE2;
    cfg.baseline.total_steps = TOY_STAGE1 + TOY_STAGE2;
    cfg.search.evo.population_size = 12;
    cfg.search.evo.generations = 4;
    cfg.search.val_count = 8;
    cfg
}

const TOY_STAGE1: u64 = 300;
const TOY_STAGE2: u64 = 300;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("toy");
    synth_generate(&root, 500, 64, 7).map_err(|e| e.to_string())?;
    let (mut ugc, mut base, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3 {
        let cfg = toy_config(&root, seed);
        let ws = prepare(&cfg).map_err(|e| e.to_string())?;
        if ws.part.labeled_ids.len() != 100 || ws.eval_ids.len() != 100 {
            return Err("toy corpus split is not 100 labeled / 300 unlabeled / 100 held out".into());
        }
        let out = tmp.path().join(format!("run{seed}"));
        let o = run_pipeline(&cfg, &ws, &out, true).map_err(|e| e.to_string())?;
        let b = o.baseline.expect("baseline requested");
        println!(
            "  seed {seed}: student {:.1}x MACs, UGC L1 {:.4}, supervised-only L1 {:.4}",
            o.student.compression_ratio_macs, o.student.l1, b.l1
        );
        if b.code != o.student.code {
            return Err("baseline architecture differs from the student".into());
        }
        ratios.push(o.student.compression_ratio_macs);
        ugc.push(o.student.l1);
        base.push(b.l1);
    }
    let (mu, mb) = (median(ugc), median(base));
    let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    check(
        mu <= mb && min_ratio >= 16.0,
        format!("median held-out L1: UGC {mu:.4} vs supervised-only {mb:.4}; smallest compression {min_ratio:.1}x"),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 8;
    let (mu_a, sd_a): (Vec<f64>, Vec<f64>) = (0..d).map(|i| (0.1 * i as f64, 0.5 + 0.1 * i as f64)).unzip();
    let (mu_b, sd_b): (Vec<f64>, Vec<f64>) = (0..d).map(|i| (0.4 - 0.05 * i as f64, 1.2 - 0.08 * i as f64)).unzip();
    let mut draw = |mu: &[f64], sd: &[f64]| -> Vec<Vec<f64>> {
        (0..50_000)
            .map(|_| (0..d).map(|j| Normal::new(mu[j], sd[j]).unwrap().sample(&mut rng)).collect())
            .collect()
    };
    let a = draw(&mu_a, &sd_a);
    let b = draw(&mu_b, &sd_b);
    let closed: f64 = (0..d)
        .map(|j| (mu_a[j] - mu_b[j]).powi(2) + sd_a[j].powi(2) + sd_b[j].powi(2) - 2.0 * sd_a[j] * sd_b[j])
        .sum();
    let got = fid(&a, &b).map_err(|e| e.to_string())?;
    let same = fid(&a, &a).map_err(|e| e.to_string())?;
    let rel = (got / closed - 1.0).abs();
    check(
        rel <= 0.02 && same.abs() <= 1e-6,
        format!("FID {got:.5} vs closed form {closed:.5} (rel {rel:.4}, limit 0.02); identical inputs {same:.1e}"),
    )
}

// ---------------------------------------------------------------- 10

fn checksums(root: &Path) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let mut h = DefaultHasher::new();
                h.write(&fs::read(&p).unwrap());
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), h.finish());
            }
        }
    }
    out
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("data");
    synth_generate(&root, 40, 16, 7).map_err(|e| e.to_string())?;
    let mut cfg = common::tiny_config();
    cfg.data.root = root;
    cfg.data.eval_count = 8;
    cfg.stage1.total_steps = 6;
    cfg.stage1.checkpoint_every = 4;
    cfg.stage2.total_steps = 6;
    cfg.baseline.total_steps = 6;
    cfg.search.evo.population_size = 6;
    cfg.search.evo.generations = 2;
    cfg.search.val_count = 4;
    cfg.search.student_compression = 2.0;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cfg.out_dir = a.clone();
    let ws = prepare(&cfg).map_err(|e| e.to_string())?;
    run_pipeline(&cfg, &ws, &a, true).map_err(|e| e.to_string())?;

    // Every stage again, each from the configuration it wrote.
    let load = |stage: &str| RunConfig::load(&a.join(stage).join("config.toml"), Vec::new()).map_err(|e| e.to_string());
    let c1 = load("stage1")?;
    let ws = prepare(&c1).map_err(|e| e.to_string())?;
    let net = run_stage1(&c1, &ws.data, &ws.part, &b, false, None).map_err(|e| e.to_string())?;
    let report = run_search(&load("search")?, &net, &ws.data, &ws.part, &b).map_err(|e| e.to_string())?;
    let codes = codes_of(&report);
    let c2 = load("stage2")?;
    run_stage2(&c2, &net, &codes, &ws.data, &ws.part, &ws.eval_ids, &b, false, None).map_err(|e| e.to_string())?;
    run_baseline(&load("baseline")?, &codes.student, &ws.data, &ws.part, &ws.eval_ids, &b)
        .map_err(|e| e.to_string())?;

    let (ha, hb) = (checksums(&a), checksums(&b));
    let differing: Vec<_> = ha.keys().filter(|k| ha.get(*k) != hb.get(*k)).collect();
    check(
        !ha.is_empty() && ha.len() == hb.len() && differing.is_empty(),
        format!("{} artifacts, {} differ {differing:?}", ha.len(), differing.len()),
    )
}

// ----------------------------------------------------------------

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 10] = [
        (1, "MACs oracle", Duration::from_secs(10), criterion_1),
        (2, "weight-sharing consistency", Duration::from_secs(60), criterion_2),
        (3, "gradient correctness", Duration::from_secs(120), criterion_3),
        (4, "evolutionary optimality", Duration::from_secs(300), criterion_4),
        (5, "teacher sizing", Duration::from_secs(60), criterion_5),
        (6, "adaptive filter semantics", Duration::from_secs(10), criterion_6),
        (7, "static ratio reproduction", Duration::from_secs(10), criterion_7),
        (8, "toy end-to-end directional gain", Duration::from_secs(3 * 3600), criterion_8),
        (9, "FID oracle", Duration::from_secs(60), criterion_9),
        (10, "determinism", Duration::from_secs(600), criterion_10),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, limit, run) in criteria {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = t.elapsed();
        let outcome = match outcome {
            Ok(m) if elapsed > limit => Err(format!("{m}; took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs())),
            o => o,
        };
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("criterion {n:>2} {tag} {name}: {msg} [{:.1}s]", elapsed.as_secs_f64());
        failed += usize::from(outcome.is_err());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

