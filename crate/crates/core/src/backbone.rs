//! Residual backbone with grouped convolution over the face, eyes and mouth
//! channel groups. Every block's output is exported as a tap.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Input channels per frame: face RGB, eyes RGB, mouth RGB.
pub const INPUT_CHANNELS: usize = 9;
pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub channels_per_block: Vec<usize>,
    pub input_side: usize,
    pub groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            channels_per_block: vec![24, 48, 96, 192],
            input_side: 32,
            groups: 3,
        }
    }
}

impl BackboneConfig {
    pub fn new(channels_per_block: Vec<usize>, input_side: usize) -> Self {
        Self {
            num_blocks: channels_per_block.len(),
            channels_per_block,
            input_side,
            groups: 3,
        }
    }

    /// Two blocks of 12 and 24 channels on 8×8 frames.
    pub fn desk() -> Self {
        Self::new(vec![12, 24], 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups != 3 {
            return Err(Error::Config(format!(
                "backbone groups must be 3 (one per region), got {}",
                self.groups
            )));
        }
        if self.num_blocks == 0 || self.channels_per_block.len() != self.num_blocks {
            return Err(Error::Config(format!(
                "num_blocks {} does not match {} channel counts",
                self.num_blocks,
                self.channels_per_block.len()
            )));
        }
        if let Some(c) = self
            .channels_per_block
            .iter()
            .find(|&&c| c == 0 || c % self.groups != 0)
        {
            return Err(Error::Config(format!(
                "block channel count {c} not a positive multiple of {}",
                self.groups
            )));
        }
        if self.input_side == 0 {
            return Err(Error::Config("input_side must be positive".into()));
        }
        Ok(())
    }

    pub fn stride(block: usize) -> usize {
        if block == 0 {
            1
        } else {
            2
        }
    }

    pub fn in_channels(&self, block: usize) -> usize {
        if block == 0 {
            INPUT_CHANNELS
        } else {
            self.channels_per_block[block - 1]
        }
    }

    /// Whether block `b` needs a projection shortcut.
    pub fn has_projection(&self, block: usize) -> bool {
        Self::stride(block) != 1 || self.in_channels(block) != self.channels_per_block[block]
    }

    /// Per-region depth `D` of each block's tap.
    pub fn region_depths(&self) -> Vec<usize> {
        self.channels_per_block
            .iter()
            .map(|c| c / self.groups)
            .collect()
    }

    /// Spatial side of each block's tap.
    pub fn tap_sides(&self) -> Vec<usize> {
        let mut side = self.input_side;
        (0..self.num_blocks)
            .map(|b| {
                let s = Self::stride(b);
                // 3×3, padding 1
                side = (side + 2 - KERNEL) / s + 1;
                side
            })
            .collect()
    }

    /// `(name, shape)` of every backbone parameter, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let g = self.groups;
        let mut out = Vec::new();
        for b in 0..self.num_blocks {
            let (cin, cout) = (self.in_channels(b), self.channels_per_block[b]);
            out.push((
                format!("block{b}.conv1.weight"),
                vec![cout, cin / g, KERNEL, KERNEL],
            ));
            out.push((format!("block{b}.conv1.scale"), vec![cout]));
            out.push((format!("block{b}.conv1.shift"), vec![cout]));
            out.push((
                format!("block{b}.conv2.weight"),
                vec![cout, cout / g, KERNEL, KERNEL],
            ));
            out.push((format!("block{b}.conv2.scale"), vec![cout]));
            out.push((format!("block{b}.conv2.shift"), vec![cout]));
            if self.has_projection(b) {
                out.push((
                    format!("block{b}.shortcut.weight"),
                    vec![cout, cin / g, 1, 1],
                ));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// True when `other` has at least this config's depth and width.
    pub fn fits_within(&self, other: &BackboneConfig) -> bool {
        other.num_blocks >= self.num_blocks
            && self
                .channels_per_block
                .iter()
                .zip(&other.channels_per_block)
                .all(|(a, b)| b >= a)
    }
}

/// Graph handles for one residual block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub conv1_weight: Var,
    pub conv1_scale: Var,
    pub conv1_shift: Var,
    pub conv2_weight: Var,
    pub conv2_scale: Var,
    pub conv2_shift: Var,
    pub shortcut_weight: Option<Var>,
}

/// One block's output with its three region groups split out.
#[derive(Clone, Copy, Debug)]
pub struct ResidualFeatureMap {
    pub block_index: usize,
    pub output: Var,
    /// `D × H × W` slices for face, eyes and mouth.
    pub regions: [Var; 3],
}

/// `relu(shortcut(x) + affine(conv(relu(affine(conv(x))))))`.
pub fn residual_block(
    g: &mut Graph,
    x: Var,
    p: &BlockVars,
    stride: usize,
    groups: usize,
) -> Result<Var> {
    let h = g.grouped_conv2d(x, p.conv1_weight, groups, stride, 1)?;
    let h = g.channel_affine(h, p.conv1_scale, p.conv1_shift)?;
    let h = g.relu(h)?;
    let h = g.grouped_conv2d(h, p.conv2_weight, groups, 1, 1)?;
    let h = g.channel_affine(h, p.conv2_scale, p.conv2_shift)?;
    let shortcut = match p.shortcut_weight {
        Some(w) => g.grouped_conv2d(x, w, groups, stride, 0)?,
        None => x,
    };
    if g.shape(shortcut) != g.shape(h) {
        return Err(Error::Config(format!(
            "residual branches disagree: shortcut {:?} vs conv path {:?}",
            g.shape(shortcut),
            g.shape(h)
        )));
    }
    let sum = g.add(shortcut, h)?;
    g.relu(sum)
}

/// Runs all blocks over one `9 × S × S` frame and returns one tap per block.
pub fn forward_frame(
    g: &mut Graph,
    frame: Var,
    blocks: &[BlockVars],
    config: &BackboneConfig,
) -> Result<Vec<ResidualFeatureMap>> {
    let shape = g.shape(frame);
    if shape.len() != 3 || shape[0] != INPUT_CHANNELS {
        return Err(Error::Input(format!(
            "frame must be {INPUT_CHANNELS} × S × S (face, eyes, mouth RGB), got {shape:?}"
        )));
    }
    if blocks.len() != config.num_blocks {
        return Err(Error::Config(format!(
            "{} block parameter sets for {} blocks",
            blocks.len(),
            config.num_blocks
        )));
    }
    let mut x = frame;
    let mut taps = Vec::with_capacity(blocks.len());
    for (b, p) in blocks.iter().enumerate() {
        x = residual_block(g, x, p, BackboneConfig::stride(b), config.groups)?;
        let d = config.channels_per_block[b] / config.groups;
        let regions = [
            g.slice_leading(x, 0, d)?,
            g.slice_leading(x, d, d)?,
            g.slice_leading(x, 2 * d, d)?,
        ];
        taps.push(ResidualFeatureMap {
            block_index: b,
            output: x,
            regions,
        });
    }
    Ok(taps)
}
