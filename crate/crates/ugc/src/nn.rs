//! Generator, discriminator and feature-extractor networks.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use ugc_core::cost::{conv_layers, ConvKind};
use ugc_core::{ArchCode, SearchSpaceSpec, Topology};

use crate::autograd::{Tape, Var};
use crate::params::{Bound, Layout, TensorMap, WeightSource};
use crate::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

fn conv<'t, T: Real>(
    src: &mut impl WeightSource<'t, T>,
    x: Var<'t, T>,
    layer: &str,
    out: usize,
    (stride, pad): (usize, usize),
) -> Var<'t, T> {
    let in_ch = x.shape()[1];
    let w = src.weight(layer, out, &[in_ch], false);
    let b = src.bias(layer, out);
    x.conv2d(&w, Some(&b), stride, pad)
}

fn norm<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let s = x.shape();
    if s[2] * s[3] > 1 {
        x.instance_norm(NORM_EPS)
    } else {
        x
    }
}

fn residual<'t, T: Real>(src: &mut impl WeightSource<'t, T>, x: Var<'t, T>, name: &str, hidden: usize) -> Var<'t, T> {
    let c = x.shape()[1];
    let h = conv(src, x, &format!("{name}.conv1"), hidden, (1, 1));
    let h = norm(h).relu();
    let h = conv(src, h, &format!("{name}.conv2"), c, (1, 1));
    x.add(&norm(h))
}

fn site<'t, T: Real>(
    src: &mut impl WeightSource<'t, T>,
    mut x: Var<'t, T>,
    spec: &SearchSpaceSpec,
    code: &ArchCode,
    site: usize,
) -> Var<'t, T> {
    for k in 0..code.depths[site] {
        x = residual(src, x, &format!("site{site}.block{k}"), code.block_width(spec, site, k));
    }
    x
}

/// Runs the generator selected by `code` on `x` (`N x in_channels x H x W`).
///
/// Output has `out_channels` channels, the input's spatial size, and lies in `[-1, 1]`.
pub fn generator_forward<'t, T: Real>(
    spec: &SearchSpaceSpec,
    code: &ArchCode,
    src: &mut impl WeightSource<'t, T>,
    x: Var<'t, T>,
) -> Var<'t, T> {
    let shape = x.shape();
    assert_eq!(shape.len(), 4, "generator input must be NCHW");
    assert_eq!(shape[1], spec.in_channels, "generator expects {} input channels", spec.in_channels);
    let n = spec.n_stages;
    match spec.topology {
        Topology::ResnetStyle => {
            let stem = code.widths[0];
            let mut h = norm(conv(src, x, "stem", stem, (1, 3))).relu();
            for i in 0..n {
                let w = code.down_width(spec, i);
                h = conv_strided(src, h, &format!("down{i}"), w, 3, 2, 1);
                h = norm(h).relu();
                h = site(src, h, spec, code, spec.site_after_down(i));
            }
            let c = h.shape()[1];
            for t in 0..spec.trunk_blocks {
                h = residual(src, h, &format!("trunk{t}"), c);
            }
            for j in 0..n {
                let w = code.up_width(spec, j);
                let in_ch = h.shape()[1];
                let wt = src.weight(&format!("up{j}"), w, &[in_ch], true);
                let b = src.bias(&format!("up{j}"), w);
                h = norm(h.conv_transpose2d(&wt, Some(&b), 2, 1, 1)).relu();
                if let Some(s) = spec.site_after_up(j) {
                    h = site(src, h, spec, code, s);
                }
            }
            conv(src, h, "head", spec.out_channels, (1, 3)).tanh()
        }
        Topology::UnetStyle => {
            let mut skips = Vec::with_capacity(n);
            let mut h = x;
            for i in 0..n {
                let w = code.down_width(spec, i);
                h = conv_strided(src, h, &format!("down{i}"), w, 4, 2, 1);
                if i > 0 {
                    h = norm(h);
                }
                h = h.leaky_relu(0.2);
                h = site(src, h, spec, code, spec.site_after_down(i));
                skips.push(h);
            }
            for j in 0..n {
                let w = code.up_width(spec, j);
                let input = if j == 0 { h } else { Var::concat(&[h, skips[n - 1 - j]]) };
                let segs: Vec<usize> = if j == 0 {
                    vec![h.shape()[1]]
                } else {
                    vec![h.shape()[1], skips[n - 1 - j].shape()[1]]
                };
                let wt = src.weight(&format!("up{j}"), w, &segs, true);
                let b = src.bias(&format!("up{j}"), w);
                h = input.relu().conv_transpose2d(&wt, Some(&b), 2, 1, 0);
                if j + 1 < n {
                    h = norm(h);
                    if let Some(s) = spec.site_after_up(j) {
                        h = site(src, h, spec, code, s);
                    }
                } else {
                    h = h.tanh();
                }
            }
            h
        }
    }
}

fn conv_strided<'t, T: Real>(
    src: &mut impl WeightSource<'t, T>,
    x: Var<'t, T>,
    layer: &str,
    out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Var<'t, T> {
    let in_ch = x.shape()[1];
    let w = src.weight(layer, out, &[in_ch], false);
    debug_assert_eq!(w.shape()[2], k);
    let b = src.bias(layer, out);
    x.conv2d(&w, Some(&b), stride, pad)
}

/// Runs a standalone generator (weights shaped for `code`) on `x`, `chunk` images at a time, without gradients.
pub fn run_generator<T: Real>(
    spec: &SearchSpaceSpec,
    code: &ArchCode,
    weights: &TensorMap<T>,
    x: &Tensor<T>,
    chunk: usize,
) -> Tensor<T> {
    let n = x.shape()[0];
    let parts: Vec<Tensor<T>> = (0..n)
        .step_by(chunk.max(1))
        .map(|start| {
            let tape = Tape::new();
            let mut src = Bound::exact(&tape, weights, false);
            let xb = tape.constant(x.narrow_batch(start, chunk.max(1).min(n - start)));
            let y = generator_forward(spec, code, &mut src, xb);
            let out = (*y.value()).clone();
            out
        })
        .collect();
    Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())
}

/// Input-segment layout of the shared generator store for `spec`.
pub fn supernet_layout(spec: &SearchSpaceSpec) -> Layout {
    conv_layers(spec, &spec.sample_largest(), spec.image_size, true)
        .into_iter()
        .map(|l| (l.name, l.in_segments))
        .collect()
}

/// Weight shapes of `code`, keyed like the shared store.
///
/// With `include_inactive`, every pooled block is listed.
pub fn generator_shapes(spec: &SearchSpaceSpec, code: &ArchCode, include_inactive: bool) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in conv_layers(spec, code, spec.image_size, include_inactive) {
        let (i, o, k) = (l.in_ch(), l.out_ch, l.kernel);
        let shape = match l.kind {
            ConvKind::Conv => vec![o, i, k, k],
            ConvKind::ConvTranspose => vec![i, o, k, k],
        };
        out.push((format!("{}.weight", l.name), shape));
        out.push((format!("{}.bias", l.name), vec![o]));
    }
    out
}

fn init_map<T: Real, R: Rng + ?Sized>(shapes: &[(String, Vec<usize>)], std: f64, rng: &mut R) -> TensorMap<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    shapes
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                (0..n).map(|_| T::of(normal.sample(rng))).collect()
            };
            (name.clone(), Tensor::from_vec(shape, data))
        })
        .collect()
}

/// Freshly initialized shared generator store at maximum width and depth.
pub fn init_supernet<T: Real, R: Rng + ?Sized>(spec: &SearchSpaceSpec, rng: &mut R) -> TensorMap<T> {
    init_map(&generator_shapes(spec, &spec.sample_largest(), true), INIT_STD, rng)
}

/// Freshly initialized standalone generator for `code`.
pub fn init_generator<T: Real, R: Rng + ?Sized>(spec: &SearchSpaceSpec, code: &ArchCode, rng: &mut R) -> TensorMap<T> {
    init_map(&generator_shapes(spec, code, false), INIT_STD, rng)
}

/// Store input-channel indices used by a layer whose segments are sliced to `want`.
fn input_indices(full: &[usize], want: &[usize]) -> Vec<usize> {
    let mut idx = Vec::new();
    let mut offset = 0;
    for (&f, &w) in full.iter().zip(want) {
        idx.extend(offset..offset + w);
        offset += f;
    }
    idx
}

/// Copies the weights `code` uses out of a shared store, at their sliced shapes.
///
/// The result drives [`generator_forward`] through [`Bound::exact`] and
/// computes the same function as the store sliced on the fly.
pub fn slice_subnet<T: Real>(store: &TensorMap<T>, spec: &SearchSpaceSpec, code: &ArchCode) -> TensorMap<T> {
    let layout = supernet_layout(spec);
    let mut out = TensorMap::new();
    for l in conv_layers(spec, code, spec.image_size, false) {
        let w = &store[&format!("{}.weight", l.name)];
        let in_idx = input_indices(&layout[&l.name], &l.in_segments);
        let k2 = l.kernel * l.kernel;
        let ws = w.shape();
        let transposed = l.kind == ConvKind::ConvTranspose;
        let mut data = Vec::with_capacity(l.out_ch * in_idx.len() * k2);
        if transposed {
            for &i in &in_idx {
                let row = &w.data()[i * ws[1] * k2..];
                data.extend_from_slice(&row[..l.out_ch * k2]);
            }
            out.insert(format!("{}.weight", l.name), Tensor::from_vec(&[in_idx.len(), l.out_ch, l.kernel, l.kernel], data));
        } else {
            for o in 0..l.out_ch {
                for &i in &in_idx {
                    let start = (o * ws[1] + i) * k2;
                    data.extend_from_slice(&w.data()[start..start + k2]);
                }
            }
            out.insert(format!("{}.weight", l.name), Tensor::from_vec(&[l.out_ch, in_idx.len(), l.kernel, l.kernel], data));
        }
        let b = &store[&format!("{}.bias", l.name)];
        out.insert(format!("{}.bias", l.name), Tensor::from_vec(&[l.out_ch], b.data()[..l.out_ch].to_vec()));
    }
    out
}

/// Writes a standalone generator's weights back into the matching prefix of a shared store.
pub fn write_back<T: Real>(store: &mut TensorMap<T>, spec: &SearchSpaceSpec, code: &ArchCode, sub: &TensorMap<T>) {
    let layout = supernet_layout(spec);
    for l in conv_layers(spec, code, spec.image_size, false) {
        let key = format!("{}.weight", l.name);
        let src = &sub[&key];
        let dst = store.get_mut(&key).expect("layer present in store");
        let ws = dst.shape().to_vec();
        let k2 = l.kernel * l.kernel;
        let in_idx = input_indices(&layout[&l.name], &l.in_segments);
        let mut s = 0;
        if l.kind == ConvKind::ConvTranspose {
            for &i in &in_idx {
                let start = i * ws[1] * k2;
                dst.data_mut()[start..start + l.out_ch * k2].copy_from_slice(&src.data()[s..s + l.out_ch * k2]);
                s += l.out_ch * k2;
            }
        } else {
            for o in 0..l.out_ch {
                for &i in &in_idx {
                    let start = (o * ws[1] + i) * k2;
                    dst.data_mut()[start..start + k2].copy_from_slice(&src.data()[s..s + k2]);
                    s += k2;
                }
            }
        }
        let key = format!("{}.bias", l.name);
        store.get_mut(&key).expect("bias present").data_mut()[..l.out_ch].copy_from_slice(sub[&key].data());
    }
}

/// Fixed-architecture patch discriminator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchDiscriminator {
    /// Channels of the conditioning input plus the judged image.
    pub in_channels: usize,
    /// Base filter count.
    pub ndf: usize,
    /// Number of stride-2 layers.
    pub n_layers: usize,
}

impl PatchDiscriminator {
    /// Layer names and weight shapes.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c = self.in_channels;
        for (i, (o, _)) in self.plan().into_iter().enumerate() {
            out.push((format!("d{i}.weight"), vec![o, c, 4, 4]));
            out.push((format!("d{i}.bias"), vec![o]));
            c = o;
        }
        out
    }

    fn plan(&self) -> Vec<(usize, usize)> {
        let mut plan = vec![(self.ndf, 2)];
        let mut mult = 1;
        for _ in 1..self.n_layers {
            mult = (mult * 2).min(8);
            plan.push((self.ndf * mult, 2));
        }
        mult = (mult * 2).min(8);
        plan.push((self.ndf * mult, 1));
        plan.push((1, 1));
        plan
    }

    /// Random initialization.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> TensorMap<T> {
        init_map(&self.shapes(), INIT_STD, rng)
    }

    /// Patch probabilities for the channel concatenation of `x` and `y`,
    /// clamped to `[1e-7, 1 - 1e-7]`.
    pub fn forward<'t, T: Real>(&self, weights: &mut Bound<'t, '_, T>, x: Var<'t, T>, y: Var<'t, T>) -> Var<'t, T> {
        let mut h = Var::concat(&[x, y]);
        let plan = self.plan();
        let last = plan.len() - 1;
        for (i, (o, stride)) in plan.into_iter().enumerate() {
            let layer = format!("d{i}");
            h = conv_strided(weights, h, &layer, o, 4, stride, 1);
            if i == last {
                break;
            }
            if i > 0 {
                h = norm(h);
            }
            h = h.leaky_relu(0.2);
        }
        h.sigmoid().clamp(1e-7, 1.0 - 1e-7)
    }
}

/// A fixed convolutional network used as the perceptual and FID feature space.
///
/// Weights are a deterministic function of the seed.
#[derive(Clone)]
pub struct FeatureExtractor<T: Real> {
    weights: TensorMap<T>,
    channels: Vec<usize>,
    seed: u64,
    scale: f64,
}

impl<T: Real> FeatureExtractor<T> {
    /// Extractor with stages of the given widths (stride 1, then stride 2).
    pub fn new(in_channels: usize, channels: &[usize], seed: u64) -> Self {
        let mut rng = ugc_core::substream(seed, "feature-extractor", 0);
        let mut weights = TensorMap::new();
        let mut c = in_channels;
        for (i, &o) in channels.iter().enumerate() {
            let fan_in = (c * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w = (0..o * c * 9).map(|_| T::of(normal.sample(&mut rng))).collect();
            weights.insert(format!("f{i}.weight"), Tensor::from_vec(&[o, c, 3, 3], w));
            weights.insert(format!("f{i}.bias"), Tensor::zeros(&[o]));
            c = o;
        }
        Self { weights, channels: channels.to_vec(), seed, scale: 1.0 }
    }

    /// Default desk-scale extractor for 3-channel images.
    pub fn default_for(in_channels: usize, seed: u64) -> Self {
        Self::new(in_channels, &[16, 32, 32], seed)
    }

    /// Multiplies every returned feature map by `scale`.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Seed the weights were drawn from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Feature maps after every stage, multiplied by the configured scale.
    pub fn features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let raw = self.raw_features(tape, x);
        if self.scale == 1.0 {
            return raw;
        }
        raw.into_iter().map(|f| f.scale(self.scale)).collect()
    }

    fn raw_features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let mut src = Bound::exact(tape, &self.weights, false);
        let mut h = x;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &o) in self.channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            h = conv_strided(&mut src, h, &format!("f{i}"), o, 3, stride, 1).relu();
            out.push(h);
        }
        out
    }

    /// Spatially pooled last-stage features, one row per image (unscaled).
    pub fn embed(&self, x: &Tensor<T>) -> Vec<Vec<f64>> {
        let tape = Tape::new();
        let feats = self.raw_features(&tape, tape.constant(x.clone()));
        let last = feats.last().expect("at least one stage").value();
        let (n, c, h, w) = last.dims4();
        let hw = h * w;
        (0..n)
            .map(|b| {
                (0..c)
                    .map(|ch| {
                        let start = (b * c + ch) * hw;
                        last.data()[start..start + hw].iter().map(|v| v.f64()).sum::<f64>() / hw as f64
                    })
                    .collect()
            })
            .collect()
    }
}

/// Shares a Gaussian kernel between the two blur passes of SSIM.
pub fn shared_kernel<T: Real>(size: usize, sigma: f64) -> Rc<Vec<T>> {
    Rc::new(crate::tensor::gaussian_window(size, sigma))
}
