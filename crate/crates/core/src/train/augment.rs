//! Training-time augmentation: scale jittering with zero-padding to the
//! fixed canvas, and per-edge box jittering of the training proposals.
//! Evaluation inputs are never augmented.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoxAnnotation, VideoClip};
use crate::error::{Error, Result};
use crate::rng::uniform;
use crate::scalar::Float;

/// Augmentation hyper-parameters. The canvas is the fixed model input size:
/// scaled frames are placed at the canvas origin and zero-padded (or cropped
/// when the scale exceeds 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_low: f64,
    pub scale_high: f64,
    pub box_jitter_ratio: f64,
    pub canvas_h: usize,
    pub canvas_w: usize,
}

impl AugmentConfig {
    pub fn with_canvas(canvas_h: usize, canvas_w: usize) -> Self {
        AugmentConfig {
            scale_low: 0.65,
            scale_high: 1.1,
            box_jitter_ratio: 0.15,
            canvas_h,
            canvas_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_low > 0.0 && self.scale_low <= self.scale_high) {
            return Err(Error::Config("need 0 < scale_low <= scale_high".into()));
        }
        if self.box_jitter_ratio < 0.0 {
            return Err(Error::Config("box_jitter_ratio must be >= 0".into()));
        }
        if self.canvas_h == 0 || self.canvas_w == 0 {
            return Err(Error::Config("canvas dims must be positive".into()));
        }
        Ok(())
    }
}

/// Bilinear resize of every frame by `scale`, pasted at the canvas origin
/// with zero padding; identical canvas size in and out.
fn rescale_frames<F: Float>(frames: &Array4<F>, scale: f64) -> Array4<F> {
    let (t, h, w, c) = {
        let s = frames.shape();
        (s[0], s[1], s[2], s[3])
    };
    let new_h = ((h as f64 * scale).round() as usize).clamp(1, h);
    let new_w = ((w as f64 * scale).round() as usize).clamp(1, w);
    let mut out = Array4::zeros((t, h, w, c));
    for tau in 0..t {
        for y in 0..new_h {
            // Map output pixel centers back into source coordinates.
            let sy = ((y as f64 + 0.5) / scale - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = sy - y0 as f64;
            for x in 0..new_w {
                let sx = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = sx - x0 as f64;
                for ch in 0..c {
                    let v00 = frames[[tau, y0, x0, ch]].to_f64();
                    let v01 = frames[[tau, y0, x1, ch]].to_f64();
                    let v10 = frames[[tau, y1, x0, ch]].to_f64();
                    let v11 = frames[[tau, y1, x1, ch]].to_f64();
                    let v = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                    out[[tau, y, x, ch]] = F::from_f64(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    out
}

/// Scale jitter plus per-edge box jitter. Boxes that degenerate after
/// clipping are dropped with a logged warning.
pub fn augment<F: Float>(
    clip: &VideoClip<F>,
    boxes: &[BoxAnnotation],
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(VideoClip<F>, Vec<BoxAnnotation>)> {
    config.validate()?;
    let (_, h, w, _) = clip.shape();
    if h != config.canvas_h || w != config.canvas_w {
        return Err(Error::Shape(format!(
            "clip {} is {h}x{w}, canvas is {}x{}",
            clip.id, config.canvas_h, config.canvas_w
        )));
    }
    let scale = uniform(rng, config.scale_low, config.scale_high);
    let frames = if scale == 1.0 {
        clip.frames.clone()
    } else {
        rescale_frames(&clip.frames, scale)
    };
    let out_clip = VideoClip {
        id: clip.id.clone(),
        frames,
        frame_stride: clip.frame_stride,
    };

    let ratio = config.box_jitter_ratio;
    let mut out_boxes = Vec::with_capacity(boxes.len());
    for b in boxes {
        // Coordinates scale with the frames (the canvas stays fixed).
        let mut x1 = b.coords.x1 * scale;
        let mut y1 = b.coords.y1 * scale;
        let mut x2 = b.coords.x2 * scale;
        let mut y2 = b.coords.y2 * scale;
        if ratio > 0.0 {
            let bw = x2 - x1;
            let bh = y2 - y1;
            x1 += uniform(rng, -ratio, ratio) * bw;
            y1 += uniform(rng, -ratio, ratio) * bh;
            x2 += uniform(rng, -ratio, ratio) * bw;
            y2 += uniform(rng, -ratio, ratio) * bh;
        }
        x1 = x1.clamp(0.0, 1.0);
        y1 = y1.clamp(0.0, 1.0);
        x2 = x2.clamp(0.0, 1.0);
        y2 = y2.clamp(0.0, 1.0);
        if x1 >= x2 || y1 >= y2 {
            log::warn!(
                "dropping box {:?} of clip {}: degenerate after jitter/clipping",
                b.coords.as_array(),
                clip.id
            );
            continue;
        }
        let mut nb = b.clone();
        nb.coords = crate::data::BoxCoords { x1, y1, x2, y2 };
        out_boxes.push(nb);
    }
    Ok((out_clip, out_boxes))
}
