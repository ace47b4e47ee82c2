mod common;

use std::fs;

use common::{tiny_config, tiny_data};
use ugc::autograd::Tape;
use ugc::checkpoint::Checkpoint;
use ugc::data::{load_batch, stack, train_eval_split, Dataset, Split};
use ugc::losses::{od_loss, supervised_objective};
use ugc::nn::{generator_forward, slice_subnet, write_back, FeatureExtractor};
use ugc::params::{Adam, Bound, TensorMap};
use ugc::stage1::*;
use ugc::tensor::Tensor;
use ugc_core::{lr_schedule, partition, substream, DatasetPartition};

fn batches(data: &Dataset, part: &DatasetPartition, k: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let (xa, ya) = stack(&load_batch(data, part, Split::Labeled, 4, 0, k).unwrap());
    let (xu, _) = stack(&load_batch(data, part, Split::Unlabeled, 4, 0, k).unwrap());
    (xa, ya.unwrap(), xu)
}

fn max_diff(a: &TensorMap<f32>, b: &TensorMap<f32>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter().map(|(k, t)| t.max_abs_diff(&b[k])).fold(0.0, f64::max)
}

#[test]
fn empty_unlabeled_split_is_a_plain_pix2pix_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (data, part) = tiny_data(dir.path(), 8, 0.5);
    let (xa, ya, _) = batches(&data, &part, 0);
    let ext = cfg.extractor.perceptual(3);
    let start = Stage1State::init(&cfg).unwrap();

    let mut ugc = start.clone();
    let report = stage1_step(&mut ugc, &cfg.stage1, &cfg.losses, &ext, cfg.seed, (&xa, &ya), None).unwrap();
    assert_eq!(report.loss_dist_r, None);
    assert_eq!(report.loss_dist_s, None);

    // Reference: a standalone largest generator and its discriminator.
    let spec = &cfg.space;
    let largest = spec.sample_largest();
    let lr = lr_schedule(0, cfg.stage1.total_steps, cfg.stage1.lr0, cfg.stage1.lr_constant_fraction).unwrap();
    let mut d = start.net.discriminator.clone();
    let fake = start.net.generate(&largest, &xa).unwrap();
    discriminator_step(&start.net.disc, &mut d, &mut Adam::new(cfg.stage1.adam), &xa, &ya, &[&fake], lr);
    let mut g = slice_subnet(&start.net.generator, spec, &largest);
    let grads = {
        let tape = Tape::new();
        let mut gw = Bound::exact(&tape, &g, true);
        let mut dw = Bound::exact(&tape, &d, false);
        let x = tape.constant(xa.clone());
        let out = generator_forward(spec, &largest, &mut gw, x);
        let mut disc = |a, b| start.net.disc.forward(&mut dw, a, b);
        let terms =
            supervised_objective(out, tape.constant(ya.clone()), x, &mut disc, &cfg.losses, cfg.stage1.gan_mode).unwrap();
        assert!((terms.loss_g.item() - report.loss_sup).abs() < 1e-4);
        let mut gr = tape.backward(terms.loss_g);
        gw.grads(&mut gr)
    };
    Adam::new(cfg.stage1.adam).step(&mut g, &grads, lr);
    let mut expect = start.net.generator.clone();
    write_back(&mut expect, spec, &largest, &g);

    assert!(max_diff(&ugc.net.discriminator, &d) <= 1e-6);
    assert!(max_diff(&ugc.net.generator, &expect) <= 1e-6);
}

#[test]
fn distillation_gradients_stay_inside_the_sampled_slices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (data, part) = tiny_data(dir.path(), 8, 0.5);
    let (xa, ya, xu) = batches(&data, &part, 0);
    let ext = cfg.extractor.perceptual(3);
    let state = Stage1State::init(&cfg).unwrap();
    let spec = &cfg.space;
    let layout = ugc::nn::supernet_layout(spec);
    let ctx = Ctx { spec, layout: &layout, extractor: &ext, weights: &cfg.losses, gan_mode: cfg.stage1.gan_mode };

    for seed in 0..4 {
        let code_r = spec.sample_random(&mut substream(seed, "test", 0));
        let parts = Parts { supervised: false, random: true, smallest: true };
        let (grads, values) = generator_objective(&ctx, &state.net, &xa, &ya, Some(&xu), &code_r, parts).unwrap();
        assert!(values.sup.is_none() && values.dist_r.is_some() && values.dist_s.is_some());

        let zeros: TensorMap<f32> =
            state.net.generator.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        let ones: TensorMap<f32> =
            state.net.generator.iter().map(|(k, t)| (k.clone(), Tensor::full(t.shape(), 1.0))).collect();
        let mut mask = zeros;
        for code in [&code_r, &spec.sample_smallest()] {
            write_back(&mut mask, spec, code, &slice_subnet(&ones, spec, code));
        }
        let mut inside = 0usize;
        for (k, g) in &grads {
            for (v, m) in g.data().iter().zip(mask[k].data()) {
                if *m == 0.0 {
                    assert_eq!(*v, 0.0, "gradient leaked outside the slices in {k}");
                } else if *v != 0.0 {
                    inside += 1;
                }
            }
        }
        assert!(inside > 0);
    }
}

#[test]
fn smallest_network_update_moves_the_largest_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (data, part) = tiny_data(dir.path(), 8, 0.5);
    let (xa, ya, xu) = batches(&data, &part, 0);
    let ext = cfg.extractor.perceptual(3);
    let mut state = Stage1State::init(&cfg).unwrap();
    let spec = &cfg.space;
    let layout = ugc::nn::supernet_layout(spec);
    let ctx = Ctx { spec, layout: &layout, extractor: &ext, weights: &cfg.losses, gan_mode: cfg.stage1.gan_mode };
    let before = state.net.generate(&spec.sample_largest(), &xu).unwrap();
    let parts = Parts { supervised: false, random: false, smallest: true };
    let code_r = spec.sample_smallest();
    let (grads, _) = generator_objective(&ctx, &state.net, &xa, &ya, Some(&xu), &code_r, parts).unwrap();
    state.opt_g.step(&mut state.net.generator, &grads, 2e-4);
    let after = state.net.generate(&spec.sample_largest(), &xu).unwrap();
    assert!(after.max_abs_diff(&before) > 0.0);
}

#[test]
fn distillation_sends_no_gradient_to_the_discriminator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (data, part) = tiny_data(dir.path(), 8, 0.5);
    let (xa, ya, xu) = batches(&data, &part, 0);
    let ext = cfg.extractor.perceptual(3);
    let start = Stage1State::init(&cfg).unwrap();
    let spec = &cfg.space;
    let layout = ugc::nn::supernet_layout(spec);
    let ctx = Ctx { spec, layout: &layout, extractor: &ext, weights: &cfg.losses, gan_mode: cfg.stage1.gan_mode };
    let code_r = spec.sample_largest();
    let (grads, _) = generator_objective(&ctx, &start.net, &xa, &ya, Some(&xu), &code_r, Parts::ALL).unwrap();
    assert!(grads.keys().all(|k| start.net.generator.contains_key(k)));
    assert!(grads.keys().all(|k| !start.net.discriminator.contains_key(k)));

    // The discriminator moves exactly as its own update dictates.
    let mut full = start.clone();
    stage1_step(&mut full, &cfg.stage1, &cfg.losses, &ext, cfg.seed, (&xa, &ya), Some(&xu)).unwrap();
    let mut d = start.net.discriminator.clone();
    let fake = start.net.generate(&spec.sample_largest(), &xa).unwrap();
    let lr = lr_schedule(0, cfg.stage1.total_steps, cfg.stage1.lr0, cfg.stage1.lr_constant_fraction).unwrap();
    discriminator_step(&start.net.disc, &mut d, &mut Adam::new(cfg.stage1.adam), &xa, &ya, &[&fake], lr);
    assert_eq!(max_diff(&full.net.discriminator, &d), 0.0);
}

fn smallest_gap(net: &SuperNetState, ext: &FeatureExtractor<f32>, cfg: &ugc::config::RunConfig, x: &Tensor<f32>) -> f64 {
    let teacher = net.generate(&net.spec.sample_largest(), x).unwrap();
    let student = net.generate(&net.spec.sample_smallest(), x).unwrap();
    let tape = Tape::new();
    od_loss(&cfg.losses, ext, &tape, tape.constant(teacher), tape.constant(student)).unwrap().total.item()
}

#[test]
fn training_fits_the_labeled_batch_and_closes_the_smallest_network_gap() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.stage1.batch_labeled = 8;
    let data = {
        ugc::data::synth_generate(dir.path(), 24, 16, 7).unwrap();
        Dataset::load(dir.path()).unwrap()
    };
    let (train, eval) = train_eval_split(&data.ids(), 8).unwrap();
    let part = partition(&train, 0.5, 0).unwrap();
    let (x_eval, _) = data.batch(&eval, false).unwrap();
    let ext = cfg.extractor.perceptual(3);
    let mut state = Stage1State::init(&cfg).unwrap();
    let gap_before = smallest_gap(&state.net, &ext, &cfg, &x_eval);
    let mut recon = Vec::new();
    for k in 0..cfg.stage1.total_steps {
        let (xa, ya) = stack(&load_batch(&data, &part, Split::Labeled, 8, 0, k).unwrap());
        let (xu, _) = stack(&load_batch(&data, &part, Split::Unlabeled, 4, 0, k).unwrap());
        let r = stage1_step(&mut state, &cfg.stage1, &cfg.losses, &ext, cfg.seed, (&xa, &ya.unwrap()), Some(&xu)).unwrap();
        recon.push(r.loss_sup_recon);
    }
    let gap_after = smallest_gap(&state.net, &ext, &cfg, &x_eval);
    let (first, last) = (recon[0], *recon.last().unwrap());
    println!("recon {first:.4} -> {last:.4}, smallest gap {gap_before:.2} -> {gap_after:.2}");
    assert!(last <= 0.5 * first, "recon {first} -> {last}");
    assert!(gap_after < gap_before, "gap {gap_before} -> {gap_after}");
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let data_dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.stage1.total_steps = 6;
    cfg.stage1.checkpoint_every = 4;
    let (data, part) = tiny_data(data_dir.path(), 8, 0.5);

    let whole = tempfile::tempdir().unwrap();
    let a = run_stage1(&cfg, &data, &part, whole.path(), false, None).unwrap();

    let split = tempfile::tempdir().unwrap();
    run_stage1(&cfg, &data, &part, split.path(), false, Some(3)).unwrap();
    let paths = Stage1Paths::new(split.path());
    // A line logged after the last checkpoint, as if the process died.
    let mut log = fs::read_to_string(&paths.log).unwrap();
    log.push_str("{\"step\":3}\n");
    fs::write(&paths.log, log).unwrap();
    let b = run_stage1(&cfg, &data, &part, split.path(), true, None).unwrap();

    assert_eq!(a, b);
    let whole_paths = Stage1Paths::new(whole.path());
    assert_eq!(fs::read(&whole_paths.checkpoint).unwrap(), fs::read(&paths.checkpoint).unwrap());
    assert_eq!(fs::read_to_string(&whole_paths.log).unwrap(), fs::read_to_string(&paths.log).unwrap());

    // The logged learning rate follows the schedule at every step.
    let lines: Vec<Stage1Report> =
        fs::read_to_string(&paths.log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    for (i, r) in lines.iter().enumerate() {
        assert_eq!(r.step, i as u64);
        let lr = lr_schedule(r.step, 6, cfg.stage1.lr0, cfg.stage1.lr_constant_fraction).unwrap();
        assert_eq!(r.lr, lr);
    }
    let ck = Checkpoint::load(&paths.checkpoint).unwrap();
    assert_eq!(ck.meta["step"], 6);
    assert!(fs::read_to_string(paths.dir.join("config.toml")).unwrap().contains("total_steps = 6"));
}
