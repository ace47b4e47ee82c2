//! Analytic MACs and parameter accounting.
//!
//! Only convolutions are counted. Normalization, activations and residual
//! additions contribute zero MACs and (instance norm being affine-free) zero
//! parameters. A convolution costs `in * out * k * k * out_h * out_w` MACs;
//! transposed convolutions use the same formula with their output size,
//! which matches the usual profiler convention for Pix2Pix generators.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::space::{ArchCode, SearchSpaceSpec, Topology};

/// Convolution flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ConvKind {
    /// Regular strided convolution.
    Conv,
    /// Transposed (fractionally strided) convolution.
    ConvTranspose,
}

/// One convolution of a concrete generator.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvLayer {
    /// Stable weight name, shared with the supernet tensor store.
    pub name: String,
    /// Convolution flavour.
    pub kind: ConvKind,
    /// Widths of the concatenated inputs (a single entry unless a UNet skip
    /// is concatenated in front of the layer).
    pub in_segments: Vec<usize>,
    /// Output channels.
    pub out_ch: usize,
    /// Square kernel size.
    pub kernel: usize,
    /// Stride.
    pub stride: usize,
    /// Zero padding.
    pub padding: usize,
    /// Extra rows/columns added on one side by transposed convolutions.
    pub output_padding: usize,
    /// Square input resolution.
    pub in_res: usize,
    /// Square output resolution.
    pub out_res: usize,
    /// Whether the layer carries a bias vector.
    pub bias: bool,
}

impl ConvLayer {
    /// Total input channels.
    pub fn in_ch(&self) -> usize {
        self.in_segments.iter().sum()
    }

    /// Multiply-accumulates of one forward pass for one image.
    pub fn macs(&self) -> u64 {
        (self.in_ch() * self.out_ch * self.kernel * self.kernel) as u64
            * (self.out_res * self.out_res) as u64
    }

    /// Weight elements including the bias.
    pub fn params(&self) -> u64 {
        (self.in_ch() * self.out_ch * self.kernel * self.kernel) as u64
            + if self.bias { self.out_ch as u64 } else { 0 }
    }
}

/// Cost of a generator at a given resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostReport {
    /// Multiply-accumulate count for one image.
    pub macs: u64,
    /// Parameter count.
    pub params: u64,
}

impl CostReport {
    /// Sums the cost of a layer list.
    pub fn from_layers(layers: &[ConvLayer]) -> Self {
        layers.iter().fold(Self::default(), |acc, l| Self {
            macs: acc.macs + l.macs(),
            params: acc.params + l.params(),
        })
    }

    /// `reference / self` for MACs and parameters.
    pub fn ratio_to(&self, reference: &CostReport) -> (f64, f64) {
        (
            reference.macs as f64 / self.macs as f64,
            reference.params as f64 / self.params as f64,
        )
    }
}

/// Exact MACs and parameter count of `code` at `resolution`.
pub fn count_macs(code: &ArchCode, spec: &SearchSpaceSpec, resolution: usize) -> Result<CostReport> {
    spec.validate_arch(code)?;
    spec.check_resolution(resolution)?;
    Ok(CostReport::from_layers(&conv_layers(spec, code, resolution, false)))
}

/// Layers of `code` at `resolution`.
///
/// With `include_inactive` every pooled block is listed (the layout of the
/// shared weight store); otherwise only blocks selected by the depth genes
/// appear. The code is assumed valid.
pub fn conv_layers(
    spec: &SearchSpaceSpec,
    code: &ArchCode,
    resolution: usize,
    include_inactive: bool,
) -> Vec<ConvLayer> {
    let mut b = PlanBuilder { layers: Vec::new(), res: resolution };
    let n = spec.n_stages;
    let site_blocks = |b: &mut PlanBuilder, site: usize, width: usize| {
        let count = if include_inactive { spec.blocks_per_site } else { code.depths[site] };
        for k in 0..count {
            let hidden = code.block_width(spec, site, k);
            b.residual(&format!("site{site}.block{k}"), width, hidden);
        }
    };
    match spec.topology {
        Topology::ResnetStyle => {
            let stem = code.widths[0];
            b.conv("stem", vec![spec.in_channels], stem, 7, 1, 3);
            let mut c = stem;
            for i in 0..n {
                let w = code.down_width(spec, i);
                b.conv(&format!("down{i}"), vec![c], w, 3, 2, 1);
                c = w;
                site_blocks(&mut b, spec.site_after_down(i), c);
            }
            for t in 0..spec.trunk_blocks {
                b.residual(&format!("trunk{t}"), c, c);
            }
            for j in 0..n {
                let w = code.up_width(spec, j);
                b.conv_t(&format!("up{j}"), vec![c], w, 3, 1, 1);
                c = w;
                if let Some(site) = spec.site_after_up(j) {
                    site_blocks(&mut b, site, c);
                }
            }
            b.conv("head", vec![c], spec.out_channels, 7, 1, 3);
        }
        Topology::UnetStyle => {
            let mut c = spec.in_channels;
            for i in 0..n {
                let w = code.down_width(spec, i);
                b.conv(&format!("down{i}"), vec![c], w, 4, 2, 1);
                c = w;
                site_blocks(&mut b, spec.site_after_down(i), c);
            }
            for j in 0..n {
                let segments = if j == 0 {
                    vec![c]
                } else {
                    vec![c, code.down_width(spec, n - 1 - j)]
                };
                let w = code.up_width(spec, j);
                b.conv_t(&format!("up{j}"), segments, w, 4, 1, 0);
                c = w;
                if let Some(site) = spec.site_after_up(j) {
                    site_blocks(&mut b, site, c);
                }
            }
        }
    }
    b.layers
}

/// Layers of the full-size Pix2Pix ResNet generator (`ngf` base filters,
/// two down-samplings, `n_blocks` residual blocks) at `resolution`.
pub fn pix2pix_resnet_reference(
    in_channels: usize,
    out_channels: usize,
    ngf: usize,
    n_blocks: usize,
    resolution: usize,
) -> Vec<ConvLayer> {
    let mut b = PlanBuilder { layers: Vec::new(), res: resolution };
    b.conv("stem", vec![in_channels], ngf, 7, 1, 3);
    b.conv("down0", vec![ngf], ngf * 2, 3, 2, 1);
    b.conv("down1", vec![ngf * 2], ngf * 4, 3, 2, 1);
    for t in 0..n_blocks {
        b.residual(&format!("trunk{t}"), ngf * 4, ngf * 4);
    }
    b.conv_t("up0", vec![ngf * 4], ngf * 2, 3, 1, 1);
    b.conv_t("up1", vec![ngf * 2], ngf, 3, 1, 1);
    b.conv("head", vec![ngf], out_channels, 7, 1, 3);
    b.layers
}

struct PlanBuilder {
    layers: Vec<ConvLayer>,
    res: usize,
}

impl PlanBuilder {
    fn conv(&mut self, name: &str, in_segments: Vec<usize>, out: usize, k: usize, s: usize, p: usize) {
        let out_res = (self.res + 2 * p - k) / s + 1;
        self.layers.push(ConvLayer {
            name: name.into(),
            kind: ConvKind::Conv,
            in_segments,
            out_ch: out,
            kernel: k,
            stride: s,
            padding: p,
            output_padding: 0,
            in_res: self.res,
            out_res,
            bias: true,
        });
        self.res = out_res;
    }

    fn conv_t(&mut self, name: &str, in_segments: Vec<usize>, out: usize, k: usize, p: usize, op: usize) {
        let out_res = (self.res - 1) * 2 + k + op - 2 * p;
        self.layers.push(ConvLayer {
            name: name.into(),
            kind: ConvKind::ConvTranspose,
            in_segments,
            out_ch: out,
            kernel: k,
            stride: 2,
            padding: p,
            output_padding: op,
            in_res: self.res,
            out_res,
            bias: true,
        });
        self.res = out_res;
    }

    fn residual(&mut self, prefix: &str, width: usize, hidden: usize) {
        self.conv(&format!("{prefix}.conv1"), vec![width], hidden, 3, 1, 1);
        self.conv(&format!("{prefix}.conv2"), vec![hidden], width, 3, 1, 1);
    }
}
