//! Adversarial, reconstruction and distillation objectives.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Result, UgcError};
use crate::nn::FeatureExtractor;
use crate::tensor::{gaussian_window, Real};

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian standard deviation.
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of images in `[-1, 1]`.
pub const DYNAMIC_RANGE: f64 = 2.0;
const C1: f64 = (0.01 * DYNAMIC_RANGE) * (0.01 * DYNAMIC_RANGE);
const C2: f64 = (0.03 * DYNAMIC_RANGE) * (0.03 * DYNAMIC_RANGE);

/// Coefficients of the supervised and distillation objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the L1 reconstruction term.
    pub lambda_recon: f64,
    /// Weight of the SSIM term.
    pub lambda_ssim: f64,
    /// Weight of the perceptual feature term.
    pub lambda_feature: f64,
    /// Weight of the Gram style term.
    pub lambda_style: f64,
    /// Weight of the total-variation regularizer.
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_recon: 100.0, lambda_ssim: 1e1, lambda_feature: 1e4, lambda_style: 1e1, lambda_tv: 1e-5 }
    }
}

impl LossWeights {
    /// Checks that every coefficient is finite and non-negative.
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_recon, self.lambda_ssim, self.lambda_feature, self.lambda_style, self.lambda_tv];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(UgcError::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Form of the generator's adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// `-log D(x, G(x))`.
    #[default]
    NonSaturating,
    /// `log(1 - D(x, G(x)))`, the literal minimax form.
    Minimax,
}

/// Anything that maps an image batch to a list of feature maps.
pub trait Features<T: Real> {
    /// Feature maps for `x`, shallowest first.
    fn features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Vec<Var<'t, T>>;
}

impl<T: Real> Features<T> for FeatureExtractor<T> {
    fn features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        FeatureExtractor::features(self, tape, x)
    }
}

fn same_shape<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(UgcError::Shape(sa, sb));
    }
    Ok(())
}

/// Discriminator loss from its outputs on real and fake pairs.
pub fn discriminator_loss<'t, T: Real>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Var<'t, T> {
    let real = d_real.log().mean();
    let fake = d_fake.scale(-1.0).add_scalar(1.0).log().mean();
    real.add(&fake).scale(-1.0)
}

/// Generator adversarial term from the discriminator's output on fake pairs.
pub fn generator_gan_loss<'t, T: Real>(d_fake: Var<'t, T>, mode: GanMode) -> Var<'t, T> {
    match mode {
        GanMode::NonSaturating => d_fake.log().mean().scale(-1.0),
        GanMode::Minimax => d_fake.scale(-1.0).add_scalar(1.0).log().mean(),
    }
}

/// Both adversarial losses for one batch.
///
/// `d` maps a (source, image) pair to clamped patch probabilities. The
/// discriminator term sees the fake batch detached; the generator term
/// backpropagates into `y_fake`.
pub fn gan_loss<'t, T: Real>(
    d: &mut impl FnMut(Var<'t, T>, Var<'t, T>) -> Var<'t, T>,
    x: Var<'t, T>,
    y_real: Var<'t, T>,
    y_fake: Var<'t, T>,
    mode: GanMode,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    same_shape(&y_real, &y_fake)?;
    let d_real = d(x, y_real);
    let d_fake_detached = d(x, y_fake.detach());
    let loss_d = discriminator_loss(d_real, d_fake_detached);
    let loss_g = generator_gan_loss(d(x, y_fake), mode);
    Ok((loss_d, loss_g))
}

/// Mean absolute error.
pub fn recon_loss<'t, T: Real>(y_hat: Var<'t, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(&y_hat, &y)?;
    Ok(y_hat.sub(&y).abs().mean())
}

/// `1 - mean SSIM` with the default 11-pixel window.
pub fn ssim_loss<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    ssim_loss_with(a, b, SSIM_WINDOW)
}

/// `1 - mean SSIM` with a Gaussian window of side `window`.
pub fn ssim_loss_with<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>, window: usize) -> Result<Var<'t, T>> {
    Ok(ssim_map(a, b, window)?.mean().scale(-1.0).add_scalar(1.0))
}

/// Local SSIM over every fully contained window position.
pub fn ssim_map<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>, window: usize) -> Result<Var<'t, T>> {
    same_shape(&a, &b)?;
    let s = a.shape();
    if s.len() != 4 {
        return Err(UgcError::Shape(s, vec![0, 0, 0, 0]));
    }
    if window > s[2] || window > s[3] || window == 0 {
        return Err(UgcError::WindowTooLarge { window, height: s[2], width: s[3] });
    }
    let k: Rc<Vec<T>> = Rc::new(gaussian_window(window, SSIM_SIGMA));
    let blur = |v: Var<'t, T>| v.blur(2, k.clone()).blur(3, k.clone());
    let mu_a = blur(a);
    let mu_b = blur(b);
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(&mu_b);
    let var_a = blur(a.square()).sub(&mu_aa);
    let var_b = blur(b.square()).sub(&mu_bb);
    let cov = blur(a.mul(&b)).sub(&mu_ab);
    let num = mu_ab.scale(2.0).add_scalar(C1).mul(&cov.scale(2.0).add_scalar(C2));
    let den = mu_aa.add(&mu_bb).add_scalar(C1).mul(&var_a.add(&var_b).add_scalar(C2));
    Ok(num.div(&den))
}

/// Largest odd window no larger than the default that fits `h x w`.
pub fn fitting_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Feature and style distances between `a` and `b` under `extractor`.
pub fn perceptual_loss<'t, T: Real>(
    extractor: &impl Features<T>,
    tape: &'t Tape<T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    same_shape(&a, &b)?;
    let fa = extractor.features(tape, a);
    let fb = extractor.features(tape, b);
    let mut feature = None::<Var<'t, T>>;
    let mut style = None::<Var<'t, T>>;
    for (x, y) in fa.into_iter().zip(fb) {
        let f = x.sub(&y).abs().mean();
        let s = x.gram().sub(&y.gram()).abs().mean();
        feature = Some(feature.map_or(f, |acc| acc.add(&f)));
        style = Some(style.map_or(s, |acc| acc.add(&s)));
    }
    let zero = || tape.constant(crate::tensor::Tensor::scalar(T::zero()));
    Ok((feature.unwrap_or_else(zero), style.unwrap_or_else(zero)))
}

/// Total variation of `a`.
pub fn tv_loss<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    a.total_variation()
}

/// The weighted parts of an online-distillation loss.
#[derive(Clone, Copy)]
pub struct OdTerms<'t, T: Real> {
    /// Weighted sum of the four terms.
    pub total: Var<'t, T>,
    /// Unweighted `1 - SSIM`.
    pub ssim: f64,
    /// Unweighted feature distance.
    pub feature: f64,
    /// Unweighted style distance.
    pub style: f64,
    /// Unweighted total variation of the student output.
    pub tv: f64,
}

/// Online-distillation loss of `student_out` towards `teacher_out`.
///
/// The teacher output is detached. The SSIM window shrinks to the largest
/// odd size that fits small images.
pub fn od_loss<'t, T: Real>(
    weights: &LossWeights,
    extractor: &impl Features<T>,
    tape: &'t Tape<T>,
    teacher_out: Var<'t, T>,
    student_out: Var<'t, T>,
) -> Result<OdTerms<'t, T>> {
    same_shape(&teacher_out, &student_out)?;
    let teacher = if teacher_out.requires_grad() { teacher_out.detach() } else { teacher_out };
    let s = student_out.shape();
    let ssim = ssim_loss_with(teacher, student_out, fitting_window(s[2], s[3]))?;
    let (feature, style) = perceptual_loss(extractor, tape, teacher, student_out)?;
    let tv = tv_loss(student_out);
    let total = ssim
        .scale(weights.lambda_ssim)
        .add(&feature.scale(weights.lambda_feature))
        .add(&style.scale(weights.lambda_style))
        .add(&tv.scale(weights.lambda_tv));
    Ok(OdTerms { total, ssim: ssim.item(), feature: feature.item(), style: style.item(), tv: tv.item() })
}

/// Supervised generator and discriminator losses on a labeled batch.
///
/// `d` maps a (source, image) pair to clamped patch probabilities. Returns
/// `(loss_g, loss_d, gan_term, recon_term)`.
pub fn supervised_objective<'t, T: Real>(
    g_out: Var<'t, T>,
    y: Var<'t, T>,
    x: Var<'t, T>,
    d: &mut impl FnMut(Var<'t, T>, Var<'t, T>) -> Var<'t, T>,
    weights: &LossWeights,
    mode: GanMode,
) -> Result<SupervisedTerms<'t, T>> {
    let (loss_d, gan) = gan_loss(d, x, y, g_out, mode)?;
    let recon = recon_loss(g_out, y)?;
    let loss_g = gan.add(&recon.scale(weights.lambda_recon));
    Ok(SupervisedTerms { loss_g, loss_d, gan: gan.item(), recon: recon.item() })
}

/// Output of [`supervised_objective`].
#[derive(Clone, Copy)]
pub struct SupervisedTerms<'t, T: Real> {
    /// Generator objective.
    pub loss_g: Var<'t, T>,
    /// Discriminator objective.
    pub loss_d: Var<'t, T>,
    /// Generator adversarial term.
    pub gan: f64,
    /// Unweighted L1 term.
    pub recon: f64,
}
