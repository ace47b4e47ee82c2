//! Named weight maps, their binding onto a tape, and the Adam optimizer.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Weights keyed by `"<layer>.weight"` / `"<layer>.bias"`.
pub type TensorMap<T> = BTreeMap<String, Tensor<T>>;

/// Full input-segment sizes of every layer of a shared store.
///
/// A layer whose input is a channel concatenation stores each part at its
/// maximum width, one after the other; sub-networks slice a prefix of each.
pub type Layout = BTreeMap<String, Vec<usize>>;

/// Source of convolution weights for a network forward pass.
pub trait WeightSource<'t, T: Real> {
    /// Weight of `layer` with `out` output channels and the given input
    /// segments, laid out `(out, in, k, k)` or `(in, out, k, k)` when `transposed`.
    fn weight(&mut self, layer: &str, out: usize, in_segments: &[usize], transposed: bool) -> Var<'t, T>;

    /// Bias of `layer` restricted to `out` channels.
    fn bias(&mut self, layer: &str, out: usize) -> Var<'t, T>;
}

/// A [`TensorMap`] placed on a tape.
///
/// With a [`Layout`] the map is treated as a shared store and every request
/// takes the leading channels of each segment; without one, requested shapes
/// must match the stored shapes exactly.
pub struct Bound<'t, 'm, T: Real> {
    tape: &'t Tape<T>,
    map: &'m TensorMap<T>,
    layout: Option<&'m Layout>,
    trainable: bool,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, 'm, T: Real> Bound<'t, 'm, T> {
    /// Binds `map` with exact-shape semantics.
    pub fn exact(tape: &'t Tape<T>, map: &'m TensorMap<T>, trainable: bool) -> Self {
        Self { tape, map, layout: None, trainable, vars: BTreeMap::new() }
    }

    /// Binds `map` as a shared store sliced according to `layout`.
    pub fn sliced(tape: &'t Tape<T>, map: &'m TensorMap<T>, layout: &'m Layout, trainable: bool) -> Self {
        Self { tape, map, layout: Some(layout), trainable, vars: BTreeMap::new() }
    }

    fn full(&mut self, key: &str) -> Var<'t, T> {
        if let Some(v) = self.vars.get(key) {
            return *v;
        }
        let t = self.map.get(key).unwrap_or_else(|| panic!("missing weight {key}")).clone();
        let v = if self.trainable { self.tape.param(t) } else { self.tape.constant(t) };
        self.vars.insert(key.to_string(), v);
        v
    }

    /// Gradients of every bound weight, at the stored (full) shapes.
    pub fn grads(&self, grads: &mut Grads<T>) -> TensorMap<T> {
        let mut out = TensorMap::new();
        for (k, v) in &self.vars {
            let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
            out.insert(k.clone(), g);
        }
        out
    }

    /// Names of the weights touched so far.
    pub fn touched(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }
}

impl<'t, T: Real> WeightSource<'t, T> for Bound<'t, '_, T> {
    fn weight(&mut self, layer: &str, out: usize, in_segments: &[usize], transposed: bool) -> Var<'t, T> {
        let key = format!("{layer}.weight");
        let full = self.full(&key);
        let shape = full.shape();
        let (out_dim, in_dim) = if transposed { (1, 0) } else { (0, 1) };
        let in_total: usize = in_segments.iter().sum();
        match self.layout {
            None => {
                assert!(
                    shape[out_dim] == out && shape[in_dim] == in_total,
                    "{key}: stored {shape:?}, requested out {out} in {in_total}"
                );
                full
            }
            Some(layout) => {
                let segs = layout.get(layer).unwrap_or_else(|| panic!("{layer} missing from layout"));
                assert_eq!(segs.len(), in_segments.len(), "{layer}: segment count");
                let mut in_ranges = Vec::with_capacity(segs.len());
                let mut offset = 0;
                for (&full_len, &want) in segs.iter().zip(in_segments) {
                    assert!(want <= full_len, "{layer}: segment {want} exceeds stored {full_len}");
                    in_ranges.push(offset..offset + want);
                    offset += full_len;
                }
                assert!(out <= shape[out_dim], "{layer}: {out} outputs exceed stored {}", shape[out_dim]);
                if out == shape[out_dim] && in_total == shape[in_dim] {
                    return full;
                }
                let out_ranges = [0..out];
                let (d0, d1): (&[Range<usize>], &[Range<usize>]) =
                    if transposed { (&in_ranges, &out_ranges) } else { (&out_ranges, &in_ranges) };
                full.gather(d0, Some(d1))
            }
        }
    }

    fn bias(&mut self, layer: &str, out: usize) -> Var<'t, T> {
        let key = format!("{layer}.bias");
        let full = self.full(&key);
        let n = full.shape()[0];
        if n == out {
            return full;
        }
        assert!(self.layout.is_some() && out < n, "{key}: stored {n}, requested {out}");
        full.gather(&[0..out], None)
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator guard.
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment estimates for one weight map.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real> {
    /// Hyper-parameters.
    pub config: AdamConfig,
    /// Number of updates applied.
    pub t: u64,
    /// First moments.
    pub m: TensorMap<T>,
    /// Second moments.
    pub v: TensorMap<T>,
}

impl<T: Real> Adam<T> {
    /// Fresh optimizer state.
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: TensorMap::new(), v: TensorMap::new() }
    }

    /// Applies one update with learning rate `lr` to every weight that has a gradient.
    ///
    /// Weights without a gradient entry keep their value and moments.
    pub fn step(&mut self, params: &mut TensorMap<T>, grads: &TensorMap<T>, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let step = T::of(lr * bc2.sqrt() / bc1);
        let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps * bc2.sqrt()));
        for (k, g) in grads {
            let p = params.get_mut(k).unwrap_or_else(|| panic!("gradient for unknown weight {k}"));
            let m = self.m.entry(k.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(k.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + e);
            }
        }
    }
}

/// Adds `src` into `dst`, inserting missing entries.
pub fn accumulate<T: Real>(dst: &mut TensorMap<T>, src: TensorMap<T>) {
    for (k, g) in src {
        match dst.get_mut(&k) {
            Some(d) => d.add_assign(&g),
            None => {
                dst.insert(k, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = TensorMap::new();
        p.insert("w".to_string(), Tensor::from_vec(&[2], vec![1.0f64, -1.0]));
        let mut g = TensorMap::new();
        g.insert("w".to_string(), Tensor::from_vec(&[2], vec![0.3, -5.0]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &g, 0.1);
        let w = p["w"].data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = TensorMap::new();
        p.insert("w".to_string(), Tensor::from_vec(&[1], vec![3.0f64]));
        let mut opt = Adam::new(AdamConfig { beta1: 0.9, ..AdamConfig::default() });
        for _ in 0..2000 {
            let mut g = TensorMap::new();
            g.insert("w".to_string(), p["w"].map(|x| 2.0 * (x - 1.0)));
            opt.step(&mut p, &g, 0.01);
        }
        assert!((p["w"].data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn sliced_binding_takes_segment_prefixes() {
        let tape = Tape::<f64>::new();
        let mut map = TensorMap::new();
        map.insert("l.weight".into(), Tensor::from_vec(&[2, 4, 1, 1], (0..8).map(f64::from).collect()));
        map.insert("l.bias".into(), Tensor::from_vec(&[2], vec![5.0, 6.0]));
        let mut layout = Layout::new();
        layout.insert("l".into(), vec![2, 2]);
        let mut b = Bound::sliced(&tape, &map, &layout, true);
        let w = b.weight("l", 1, &[1, 1], false);
        assert_eq!(w.value().data(), &[0.0, 2.0]);
        assert_eq!(b.bias("l", 1).value().data(), &[5.0]);
        let loss = w.sum();
        let mut grads = tape.backward(loss);
        let g = b.grads(&mut grads);
        assert_eq!(g["l.weight"].data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
