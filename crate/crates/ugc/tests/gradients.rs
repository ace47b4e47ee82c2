use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ugc::gradcheck::{loss_fn, relative_error};
use ugc::losses::*;
use ugc::nn::{FeatureExtractor, PatchDiscriminator};
use ugc::params::{Bound, TensorMap};
use ugc::tensor::Tensor;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-0.9..0.9)).collect())
}

fn image(seed: u64) -> Tensor<f64> {
    rand_tensor(&[1, 3, 8, 8], seed)
}

fn assert_close(name: &str, err: f64) {
    assert!(err < TOL, "{name}: relative error {err}");
}

fn discriminator() -> (PatchDiscriminator, TensorMap<f64>) {
    let d = PatchDiscriminator { in_channels: 6, ndf: 4, n_layers: 1 };
    let w = d.init(&mut ChaCha8Rng::seed_from_u64(3));
    (d, w)
}

#[test]
fn gan_losses() {
    let (d, w) = discriminator();
    let (x, y) = (image(1), image(2));
    let generator = loss_fn(|t, v| {
        let mut b = Bound::exact(t, &w, false);
        let mut df = |a, c| d.forward(&mut b, a, c);
        gan_loss(&mut df, t.constant(x.clone()), t.constant(y.clone()), v, GanMode::NonSaturating).unwrap().1
    });
    let discriminator = loss_fn(|t, v| {
        let mut b = Bound::exact(t, &w, false);
        let mut df = |a, c| d.forward(&mut b, a, c);
        gan_loss(&mut df, t.constant(x.clone()), v, t.constant(y.clone()), GanMode::Minimax).unwrap().0
    });
    assert_close("generator gan term", relative_error(&image(4), STEP, generator));
    assert_close("discriminator gan term", relative_error(&image(5), STEP, discriminator));
}

#[test]
fn reconstruction_ssim_tv() {
    let y = image(6);
    assert_close("recon", relative_error(&image(7), STEP, |t, v| recon_loss(v, t.constant(y.clone())).unwrap()));
    assert_close("ssim", relative_error(&image(8), STEP, |t, v| ssim_loss_with(v, t.constant(y.clone()), 7).unwrap()));
    assert_close("tv", relative_error(&image(9), STEP, |_, v| tv_loss(v)));
}

#[test]
fn perceptual_terms() {
    let ex = FeatureExtractor::<f64>::default_for(3, 17);
    let y = image(10);
    let feature = loss_fn(|t, v| perceptual_loss(&ex, t, v, t.constant(y.clone())).unwrap().0);
    let style = loss_fn(|t, v| perceptual_loss(&ex, t, v, t.constant(y.clone())).unwrap().1);
    assert_close("feature", relative_error(&image(11), STEP, feature));
    assert_close("style", relative_error(&image(12), STEP, style));
}

#[test]
fn distillation_and_supervised() {
    let ex = FeatureExtractor::<f64>::default_for(3, 17);
    let teacher = image(13);
    let w = LossWeights::default();
    let od = loss_fn(|t, v| od_loss(&w, &ex, t, t.constant(teacher.clone()), v).unwrap().total);
    assert_close("od", relative_error(&image(14), STEP, od));

    let (d, dw) = discriminator();
    let (x, y) = (image(15), image(16));
    let sup = loss_fn(|t, v| {
        let mut b = Bound::exact(t, &dw, false);
        let mut df = |a, c| d.forward(&mut b, a, c);
        supervised_objective(v, t.constant(y.clone()), t.constant(x.clone()), &mut df, &w, GanMode::NonSaturating)
            .unwrap()
            .loss_g
    });
    assert_close("supervised", relative_error(&image(18), STEP, sup));
}
