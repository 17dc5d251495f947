//! Single-stack hourglass at 64 channels.
//!
//! The stem is a stride-2 3×3 conv followed directly by a stride-1 3×3 conv
//! (no normalization or activation between them), then max pooling to 1/4.
//! The hourglass recurses four levels below that with one basic residual
//! block per branch, and a final nearest ×2 upsample brings the features
//! back to 1/2 for the heads.

use super::registry::Backbone;
use super::{GraphBuilder, LayerGraph, ModelConfig};
use crate::error::Result;

const WIDTH: usize = 64;
const DEPTH: usize = 4;

#[derive(Debug, Default)]
pub struct HourglassLight;

impl Backbone for HourglassLight {
    fn name(&self) -> &'static str {
        "hourglass"
    }

    fn summary(&self) -> &'static str {
        "one 64-channel hourglass, 4 levels, stride 2 (~1.04M params)"
    }

    fn build(&self, cfg: &ModelConfig) -> Result<LayerGraph> {
        build_hourglass_light(cfg)
    }
}

pub fn build_hourglass_light(cfg: &ModelConfig) -> Result<LayerGraph> {
    cfg.validate()?;
    let (mut b, input) = GraphBuilder::new();
    let s1 = b.conv("stem.conv1", input, WIDTH, 3, 2, false, true);
    let s2 = b.conv_bn_relu("stem.conv2", s1, WIDTH, 3, 1);
    let pooled = b.maxpool(s2, 2, 2);
    let hg = level(&mut b, "hg", DEPTH, pooled);
    let up = b.upsample2(hg);
    Ok(b.finish("hourglass", *cfg, up))
}

fn level(b: &mut GraphBuilder, name: &str, depth: usize, x: usize) -> usize {
    let up1 = basic_block(b, &format!("{name}.up1"), x);
    let low = b.maxpool(x, 2, 2);
    let low1 = basic_block(b, &format!("{name}.low1"), low);
    let low2 = if depth > 1 {
        level(b, &format!("{name}.inner"), depth - 1, low1)
    } else {
        basic_block(b, &format!("{name}.low2"), low1)
    };
    let low3 = basic_block(b, &format!("{name}.low3"), low2);
    let up2 = b.upsample_like(low3, up1);
    b.add(up1, up2)
}

/// `relu(bn(conv(relu(bn(conv(x))))) + x)`
fn basic_block(b: &mut GraphBuilder, name: &str, x: usize) -> usize {
    let y = b.conv_bn_relu(&format!("{name}.a"), x, WIDTH, 3, 1);
    let y = b.conv(&format!("{name}.b"), y, WIDTH, 3, 1, true, false);
    let s = b.add(y, x);
    b.relu(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_params, forward, Op};
    use crate::tensor::{self, Tensor};

    #[test]
    fn budget_and_structure() {
        let g = build_hourglass_light(&ModelConfig::default()).unwrap();
        let n = count_params(&g);
        assert!((940_000..=1_140_000).contains(&n), "{n}");
        assert_eq!(g.total_stride(), 2);
        // stem.conv1 feeds stem.conv2 with nothing in between
        let find = |want: &str| {
            g.nodes()
                .iter()
                .find(|n| matches!(&n.op, Op::Conv { name, .. } if name == want))
                .unwrap()
        };
        assert_eq!(find("stem.conv2").inputs, vec![find("stem.conv1").id]);
    }

    #[test]
    fn stem_output_shape() {
        let g = build_hourglass_light(&ModelConfig::default()).unwrap().randomized(4);
        let mut convs = g.convs();
        let (_, c1) = convs.next().unwrap();
        let (_, c2) = convs.next().unwrap();
        let x = Tensor::zeros(3, 256, 256);
        let y = tensor::conv2d(&tensor::conv2d(&x, c1).unwrap(), c2).unwrap();
        assert_eq!(y.dims(), (64, 128, 128));
    }

    #[test]
    fn odd_intermediate_sizes() {
        // 72 / 4 = 18 -> 9 -> 4 -> 2 -> 1 inside the hourglass
        let g = build_hourglass_light(&ModelConfig::default()).unwrap().randomized(2);
        let (s, l) = forward(&g, &Tensor::full(3, 72, 200, 0.5)).unwrap();
        assert_eq!(s.dims(), (60, 36, 100));
        assert_eq!(l.dims(), (5, 36, 100));
        assert!(s.is_finite());
    }
}
