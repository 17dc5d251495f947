//! DRNet: a shallow backbone that does almost all of its work at 1/4 and
//! 1/8 resolution and comes back to 1/2 through two nearest upsamples.
//!
//! Layout (11 weighted layers before the heads):
//!
//! ```text
//! stem     3x3/2  3 -> 32            ─────────────────────────┐ (1/2)
//! maxpool  2x2/2                                              │
//! trans    3x3    32 -> 64                        (1/4)       │
//! res ×2   3x3    64 -> 64   + identity           ─────┐      │
//! down     3x3/2  64 -> 200  + 1x1/2 projection   (1/8)│      │
//! res ×2   3x3    200 -> 200 + identity                │      │
//! lateral  1x1    200 -> 64, upsample ×2, sum     ◄────┘      │
//! res      3x3    64 -> 64   + identity                       │
//! upsample ×2, concat with stem output            ◄───────────┘
//! fuse     3x3    96 -> 32
//! heads    3x3    32 -> S,  32 -> K
//! ```

use super::registry::Backbone;
use super::{GraphBuilder, LayerGraph, ModelConfig};
use crate::error::Result;

const STEM: usize = 32;
const MID: usize = 64;
const DEEP: usize = 200;
const FUSE: usize = 32;

#[derive(Debug, Default)]
pub struct DrNet;

impl Backbone for DrNet {
    fn name(&self) -> &'static str {
        "drnet"
    }

    fn summary(&self) -> &'static str {
        "11-layer residual net, stride 2, one concat skip (~1.04M params)"
    }

    fn build(&self, cfg: &ModelConfig) -> Result<LayerGraph> {
        build_drnet(cfg)
    }
}

pub fn build_drnet(cfg: &ModelConfig) -> Result<LayerGraph> {
    cfg.validate()?;
    let (mut b, input) = GraphBuilder::new();

    let stem = b.conv_bn_relu("stem", input, STEM, 3, 2);
    let pooled = b.maxpool(stem, 2, 2);
    let mut x = b.conv_bn_relu("quarter.trans", pooled, MID, 3, 1);
    for i in 0..2 {
        x = residual(&mut b, &format!("quarter.res{i}"), x);
    }
    let quarter = x;

    let main = b.conv("eighth.down", quarter, DEEP, 3, 2, true, false);
    let proj = b.conv("eighth.proj", quarter, DEEP, 1, 2, true, false);
    let sum = b.add(main, proj);
    x = b.relu(sum);
    for i in 0..2 {
        x = residual(&mut b, &format!("eighth.res{i}"), x);
    }

    let lateral = b.conv("up.lateral", x, MID, 1, 1, true, false);
    let up = b.upsample2(lateral);
    let merged = b.add(up, quarter);
    x = b.relu(merged);
    x = residual(&mut b, "up.res", x);

    let up = b.upsample2(x);
    let cat = b.concat(up, stem);
    let fused = b.conv_bn_relu("fuse", cat, FUSE, 3, 1);
    Ok(b.finish("drnet", *cfg, fused))
}

/// `relu(bn(conv3x3(x)) + x)`
fn residual(b: &mut GraphBuilder, name: &str, x: usize) -> usize {
    let c = b.channels(x);
    let y = b.conv(name, x, c, 3, 1, true, false);
    let s = b.add(y, x);
    b.relu(s)
}
