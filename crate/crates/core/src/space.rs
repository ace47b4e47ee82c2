//! The depth/width-dynamic generator search space.
//!
//! A search space starts from a base Pix2Pix-style generator (ResNet-style or
//! UNet-style) and inserts a pool of residual blocks after every up/down
//! sampling layer. An [`ArchCode`] picks one output width for every
//! configurable convolution, one hidden width for every pooled block and the
//! number of active blocks at every insertion site.
//!
//! Gene layout of `ArchCode::widths`:
//!
//! * ResNet-style: `[stem, down_1..down_n, up_1..up_n, blocks...]`
//! * UNet-style: `[down_1..down_n, up_1..up_{n-1}, blocks...]` (the last
//!   up-sampling layer always emits the output channels)
//!
//! `blocks` holds `blocks_per_site` hidden widths per site, sites ordered as
//! "after down_1..down_n" followed by "after up_1..". Trunk blocks of the
//! ResNet-style base inherit the width of the last down-sampling layer.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{CoreError, Result};

/// Base generator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Topology {
    /// Encoder, residual trunk, decoder.
    ResnetStyle,
    /// Encoder/decoder with skip concatenation.
    UnetStyle,
}

/// Description of the searchable generator family.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SearchSpaceSpec {
    /// Base generator family.
    pub topology: Topology,
    /// Channels of the source images.
    pub in_channels: usize,
    /// Channels of the generated images.
    pub out_channels: usize,
    /// Square training resolution.
    pub image_size: usize,
    /// Number of down-sampling (and matching up-sampling) layers.
    pub n_stages: usize,
    /// Residual blocks of the ResNet-style trunk. Ignored for UNet-style.
    pub trunk_blocks: usize,
    /// Allowed channel counts, strictly increasing.
    pub width_choices: Vec<usize>,
    /// Allowed active-block counts per site, strictly increasing.
    pub depth_choices: Vec<usize>,
    /// Blocks inserted at every site; at most this many can be active.
    pub blocks_per_site: usize,
}

impl Default for SearchSpaceSpec {
    fn default() -> Self {
        Self {
            topology: Topology::ResnetStyle,
            in_channels: 3,
            out_channels: 3,
            image_size: 64,
            n_stages: 2,
            trunk_blocks: 9,
            width_choices: (1..=8).map(|i| i * 8).collect(),
            depth_choices: vec![0, 1, 2],
            blocks_per_site: 3,
        }
    }
}

impl SearchSpaceSpec {
    /// Checks every structural invariant of the space.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CoreError::InvalidSpec(msg.into()));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.n_stages == 0 {
            return bad("n_stages must be at least 1");
        }
        if self.width_choices.is_empty() || self.width_choices[0] == 0 {
            return bad("width choices must be non-empty and positive");
        }
        if self.width_choices.windows(2).any(|w| w[0] >= w[1]) {
            return bad("width choices must be strictly increasing");
        }
        if self.depth_choices.is_empty() || self.depth_choices.windows(2).any(|w| w[0] >= w[1]) {
            return bad("depth choices must be non-empty and strictly increasing");
        }
        if *self.depth_choices.last().unwrap() > self.blocks_per_site {
            return bad("a depth choice exceeds the block pool size");
        }
        self.check_resolution(self.image_size)
    }

    /// Checks that `resolution` survives `n_stages` halvings exactly.
    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        let factor = 1usize << self.n_stages;
        if resolution == 0 || resolution % factor != 0 {
            return Err(CoreError::BadResolution { resolution, stages: self.n_stages });
        }
        Ok(())
    }

    /// Number of configurable up/down-sampling (and stem) widths.
    pub fn n_layer_widths(&self) -> usize {
        match self.topology {
            Topology::ResnetStyle => 1 + 2 * self.n_stages,
            Topology::UnetStyle => 2 * self.n_stages - 1,
        }
    }

    /// Number of block insertion sites.
    pub fn n_sites(&self) -> usize {
        match self.topology {
            Topology::ResnetStyle => 2 * self.n_stages,
            Topology::UnetStyle => 2 * self.n_stages - 1,
        }
    }

    /// Length of `ArchCode::widths`.
    pub fn n_width_genes(&self) -> usize {
        self.n_layer_widths() + self.n_sites() * self.blocks_per_site
    }

    /// Index of the width gene for down-sampling layer `i` (0-based).
    pub fn down_gene(&self, i: usize) -> usize {
        match self.topology {
            Topology::ResnetStyle => 1 + i,
            Topology::UnetStyle => i,
        }
    }

    /// Index of the width gene for up-sampling layer `j` (0-based).
    ///
    /// For UNet-style spaces the last up-sampling layer has no gene.
    pub fn up_gene(&self, j: usize) -> Option<usize> {
        match self.topology {
            Topology::ResnetStyle => Some(1 + self.n_stages + j),
            Topology::UnetStyle if j + 1 < self.n_stages => Some(self.n_stages + j),
            Topology::UnetStyle => None,
        }
    }

    /// Index of the hidden-width gene of pooled block `block` at `site`.
    pub fn block_gene(&self, site: usize, block: usize) -> usize {
        self.n_layer_widths() + site * self.blocks_per_site + block
    }

    /// Site index following down-sampling layer `i`.
    pub fn site_after_down(&self, i: usize) -> usize {
        i
    }

    /// Site index following up-sampling layer `j`, if that layer has one.
    pub fn site_after_up(&self, j: usize) -> Option<usize> {
        let site = self.n_stages + j;
        (site < self.n_sites()).then_some(site)
    }

    /// Resolution of the feature map at `site` for an input of `resolution`.
    pub fn site_resolution(&self, site: usize, resolution: usize) -> usize {
        let n = self.n_stages;
        if site < n {
            resolution >> (site + 1)
        } else {
            resolution >> (2 * n - site - 1)
        }
    }

    /// Number of distinct codes, saturating at `u128::MAX`.
    pub fn code_count(&self) -> u128 {
        let w = self.width_choices.len() as u128;
        let d = self.depth_choices.len() as u128;
        let mut n: u128 = 1;
        for _ in 0..self.n_width_genes() {
            n = n.saturating_mul(w);
        }
        for _ in 0..self.n_sites() {
            n = n.saturating_mul(d);
        }
        n
    }

    /// Every code of the space, or `None` when there are more than `limit`.
    pub fn enumerate(&self, limit: usize) -> Option<Vec<ArchCode>> {
        if self.code_count() > limit as u128 {
            return None;
        }
        let nw = self.n_width_genes();
        let nd = self.n_sites();
        let radix: Vec<usize> = core::iter::repeat(self.width_choices.len())
            .take(nw)
            .chain(core::iter::repeat(self.depth_choices.len()).take(nd))
            .collect();
        let mut digits = vec![0usize; nw + nd];
        let mut out = Vec::new();
        loop {
            out.push(ArchCode {
                widths: digits[..nw].iter().map(|&i| self.width_choices[i]).collect(),
                depths: digits[nw..].iter().map(|&i| self.depth_choices[i]).collect(),
            });
            let mut pos = 0;
            loop {
                if pos == digits.len() {
                    return Some(out);
                }
                digits[pos] += 1;
                if digits[pos] < radix[pos] {
                    break;
                }
                digits[pos] = 0;
                pos += 1;
            }
        }
    }

    /// Code taking the maximum choice for every gene.
    pub fn sample_largest(&self) -> ArchCode {
        ArchCode {
            widths: vec![*self.width_choices.last().unwrap(); self.n_width_genes()],
            depths: vec![*self.depth_choices.last().unwrap(); self.n_sites()],
        }
    }

    /// Code taking the minimum choice for every gene.
    pub fn sample_smallest(&self) -> ArchCode {
        ArchCode {
            widths: vec![self.width_choices[0]; self.n_width_genes()],
            depths: vec![self.depth_choices[0]; self.n_sites()],
        }
    }

    /// Code with every gene drawn independently and uniformly.
    pub fn sample_random<R: Rng + ?Sized>(&self, rng: &mut R) -> ArchCode {
        let widths = (0..self.n_width_genes())
            .map(|_| self.width_choices[rng.random_range(0..self.width_choices.len())])
            .collect();
        let depths = (0..self.n_sites())
            .map(|_| self.depth_choices[rng.random_range(0..self.depth_choices.len())])
            .collect();
        ArchCode { widths, depths }
    }

    /// Checks that `code` belongs to this space.
    pub fn validate_arch(&self, code: &ArchCode) -> Result<()> {
        if code.widths.len() != self.n_width_genes() {
            return Err(CoreError::DimensionMismatch {
                field: "widths",
                expected: self.n_width_genes(),
                got: code.widths.len(),
            });
        }
        if code.depths.len() != self.n_sites() {
            return Err(CoreError::DimensionMismatch {
                field: "depths",
                expected: self.n_sites(),
                got: code.depths.len(),
            });
        }
        if let Some((index, &value)) =
            code.widths.iter().enumerate().find(|(_, w)| !self.width_choices.contains(w))
        {
            return Err(CoreError::OutOfChoice { field: "widths", index, value });
        }
        if let Some((index, &value)) =
            code.depths.iter().enumerate().find(|(_, d)| !self.depth_choices.contains(d))
        {
            return Err(CoreError::OutOfChoice { field: "depths", index, value });
        }
        Ok(())
    }

    /// Maximum width stored for any configurable layer.
    pub fn max_width(&self) -> usize {
        *self.width_choices.last().unwrap()
    }
}

/// A concrete sub-network of a [`SearchSpaceSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArchCode {
    /// Channel counts, one per configurable layer and pooled block.
    pub widths: Vec<usize>,
    /// Active-block counts, one per insertion site.
    pub depths: Vec<usize>,
}

impl ArchCode {
    /// Output width of the ResNet-style stem, or `None` for UNet-style.
    pub fn stem_width(&self, spec: &SearchSpaceSpec) -> Option<usize> {
        (spec.topology == Topology::ResnetStyle).then(|| self.widths[0])
    }

    /// Output width of down-sampling layer `i`.
    pub fn down_width(&self, spec: &SearchSpaceSpec, i: usize) -> usize {
        self.widths[spec.down_gene(i)]
    }

    /// Output width of up-sampling layer `j`; the last UNet layer emits the
    /// output channels.
    pub fn up_width(&self, spec: &SearchSpaceSpec, j: usize) -> usize {
        spec.up_gene(j).map_or(spec.out_channels, |g| self.widths[g])
    }

    /// Width of the feature map that blocks at `site` operate on.
    pub fn site_width(&self, spec: &SearchSpaceSpec, site: usize) -> usize {
        if site < spec.n_stages {
            self.down_width(spec, site)
        } else {
            self.up_width(spec, site - spec.n_stages)
        }
    }

    /// Hidden width of pooled block `block` at `site`.
    pub fn block_width(&self, spec: &SearchSpaceSpec, site: usize, block: usize) -> usize {
        self.widths[spec.block_gene(site, block)]
    }

    /// Sum of the depth genes.
    pub fn depth_sum(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Smallest width among layers that take part in the forward pass.
    ///
    /// Hidden widths of inactive blocks are ignored.
    pub fn active_min_width(&self, spec: &SearchSpaceSpec) -> usize {
        let layers = self.widths[..spec.n_layer_widths()].iter().copied();
        let blocks = (0..spec.n_sites())
            .flat_map(|s| (0..self.depths[s]).map(move |b| (s, b)))
            .map(|(s, b)| self.block_width(spec, s, b));
        layers.chain(blocks).min().unwrap_or(0)
    }
}
