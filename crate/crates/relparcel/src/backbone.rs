//! Configurable convolutional backbone producing the shared feature map.
//!
//! Each block is a 3x3 convolution (stride 1, padding equal to its
//! dilation, so spatial size is preserved) followed by relu and an
//! optional 2x2 max pool. Two knobs trade spatial resolution for receptive
//! field: `drop_last_pool` skips the final pooling stage, and
//! `dilation_last_block` widens the last block's filters without shrinking
//! the map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackboneConfig {
    /// Input images are `input_size` x `input_size` pixels.
    pub input_size: usize,
    /// Output channel width of each block.
    pub block_channels: Vec<usize>,
    /// Whether a 2x2 max pool follows the block.
    pub pool_after_block: Vec<bool>,
    /// Dilation of the final block's filters.
    pub dilation_last_block: usize,
    /// Ignore the pool flag of the final block.
    pub drop_last_pool: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 32,
            block_channels: vec![16, 32],
            pool_after_block: vec![true, false],
            dilation_last_block: 1,
            drop_last_pool: false,
        }
    }
}

impl BackboneConfig {
    /// Pool flags actually applied.
    pub fn effective_pools(&self) -> Vec<bool> {
        let mut pools = self.pool_after_block.clone();
        if self.drop_last_pool {
            if let Some(last) = pools.last_mut() {
                *last = false;
            }
        }
        pools
    }

    /// Side length of the feature map, `input_size / 2^pools`.
    pub fn feature_side(&self) -> Result<usize> {
        self.validate()?;
        let mut side = self.input_size;
        for _ in self.effective_pools().iter().filter(|p| **p) {
            side /= 2;
        }
        Ok(side)
    }

    pub fn feature_channels(&self) -> usize {
        *self.block_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() {
            return Err(Error::config("backbone needs at least one block"));
        }
        if self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("backbone channel widths must be positive"));
        }
        if self.pool_after_block.len() != self.block_channels.len() {
            return Err(Error::config(format!(
                "pool_after_block has {} entries for {} blocks",
                self.pool_after_block.len(),
                self.block_channels.len()
            )));
        }
        if self.dilation_last_block == 0 {
            return Err(Error::config("dilation_last_block must be positive"));
        }
        let mut side = self.input_size;
        for (i, pool) in self.effective_pools().iter().enumerate() {
            if *pool {
                if side % 2 != 0 {
                    return Err(Error::config(format!(
                        "pool after block {i} sees an odd side {side}"
                    )));
                }
                side /= 2;
            }
        }
        if side < 2 {
            return Err(Error::config(format!(
                "feature map side {side} is degenerate; enlarge the input or drop pools"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: Param,
    pub bias: Param,
    pub dilation: usize,
    pub pool: bool,
}

/// The backbone with materialized parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock>,
}

/// Build a backbone with Glorot-uniform filters and zero biases,
/// bit-reproducible for a given seed.
pub fn build_backbone(config: &BackboneConfig, in_channels: usize, seed: u64) -> Result<Backbone> {
    config.validate()?;
    if in_channels == 0 {
        return Err(Error::config("backbone input needs at least one channel"));
    }
    let pools = config.effective_pools();
    let last = config.block_channels.len() - 1;
    let mut blocks = Vec::with_capacity(config.block_channels.len());
    let mut prev = in_channels;
    for (i, (&ch, &pool)) in config.block_channels.iter().zip(&pools).enumerate() {
        let rng = &mut substream(seed, &format!("backbone/block{i}"));
        let dilation = if i == last { config.dilation_last_block } else { 1 };
        blocks.push(ConvBlock {
            weight: Param::glorot_conv(format!("backbone.block{i}.weight"), ch, prev, 3, 3, rng),
            bias: Param::zeros(format!("backbone.block{i}.bias"), &[ch]),
            dilation,
            pool,
        });
        prev = ch;
    }
    Ok(Backbone { config: config.clone(), in_channels, blocks })
}

impl Backbone {
    pub fn params(&self) -> Vec<&Param> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.weight, &b.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Backbone parameters bound onto one tape.
pub struct BoundBackbone {
    input_size: usize,
    blocks: Vec<(Tensor, Tensor, usize, bool)>,
}

impl BoundBackbone {
    pub fn new(backbone: &Backbone, leaves: &[Tensor]) -> Self {
        assert_eq!(leaves.len(), backbone.blocks.len() * 2);
        let blocks = backbone
            .blocks
            .iter()
            .zip(leaves.chunks(2))
            .map(|(blk, pair)| (pair[0].clone(), pair[1].clone(), blk.dilation, blk.pool))
            .collect();
        BoundBackbone { input_size: backbone.config.input_size, blocks }
    }

    /// Feature map for one `[C, H, W]` image.
    pub fn forward(&self, tape: &Tape, image: &Tensor) -> Result<Tensor> {
        match image.shape() {
            [_, h, w] if *h == self.input_size && *w == self.input_size => {}
            other => {
                return Err(Error::shape(format!(
                    "backbone expects {0}x{0} input, got {other:?}",
                    self.input_size
                )))
            }
        }
        let mut x = image.clone();
        for (w, b, dilation, pool) in &self.blocks {
            let conv = tape.conv2d(&x, w, b, 1, *dilation, *dilation)?;
            x = tape.relu(&conv);
            if *pool {
                x = tape.maxpool2d(&x, 2, 2)?;
            }
        }
        Ok(x)
    }
}
