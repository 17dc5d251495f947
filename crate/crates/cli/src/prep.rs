//! Resizing images to the network input and mapping results back.

use facekp::geometry::Rect;
use facekp::keypoint::Detection;
use facekp::model::INPUT_ALIGN;
use facekp::tensor::Tensor;

/// Bilinear resize with half-pixel centres (`align_corners = false`).
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = src.dims();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    Tensor::from_fn(c, out_h, out_w, |ch, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src.at(ch, y0, x0) * (1.0 - fx) + src.at(ch, y0, x1) * fx;
        let bottom = src.at(ch, y1, x0) * (1.0 - fx) + src.at(ch, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// A network-ready image and the per-axis factors that produced it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub tensor: Tensor,
    pub scale_x: f64,
    pub scale_y: f64,
    /// Size after resizing, before padding.
    pub resized: (usize, usize),
}

impl Prepared {
    pub fn to_image(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (x / self.scale_x, y / self.scale_y)
    }

    pub fn rect_to_image(&self, r: &Rect) -> Rect {
        Rect::new(
            r.x1 / self.scale_x,
            r.y1 / self.scale_y,
            r.x2 / self.scale_x,
            r.y2 / self.scale_y,
        )
    }

    pub fn detection_to_image(&self, d: &Detection) -> Detection {
        Detection {
            rect: self.rect_to_image(&d.rect),
            keypoints: d.keypoints.iter().map(|&p| self.to_image(p)).collect(),
            score: d.score,
        }
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(INPUT_ALIGN) * INPUT_ALIGN
}

/// Resizes so the longer side equals `long_side`, then zero-pads the bottom
/// and right edges up to a multiple of the input alignment.
pub fn prepare(image: &Tensor, long_side: usize) -> Prepared {
    let (c, h, w) = image.dims();
    let f = long_side as f64 / h.max(w) as f64;
    let rh = ((h as f64 * f).round() as usize).max(1);
    let rw = ((w as f64 * f).round() as usize).max(1);
    let resized = if (rh, rw) == (h, w) {
        image.clone()
    } else {
        resize_bilinear(image, rh, rw)
    };
    let (ph, pw) = (align_up(rh), align_up(rw));
    let tensor = if (ph, pw) == (rh, rw) {
        resized
    } else {
        Tensor::from_fn(c, ph, pw, |ch, y, x| {
            if y < rh && x < rw {
                resized.at(ch, y, x)
            } else {
                0.0
            }
        })
    };
    Prepared {
        tensor,
        scale_x: rw as f64 / w as f64,
        scale_y: rh as f64 / h as f64,
        resized: (rh, rw),
    }
}
