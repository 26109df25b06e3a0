//! Feature up-tiling: run a patch model on sub-patch shifts of its input and
//! interleave the outputs into a finer map.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]` with half-pixel
/// centres (`align_corners = false`); source coordinates are clamped at the border.
pub fn resize_bilinear(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let sh = img.shape();
    if sh.len() != 4 || sh[2] == 0 || sh[3] == 0 {
        return shape_err("resize_bilinear", sh, &[oh, ow]);
    }
    let (planes, h, w) = (sh[0] * sh[1], sh[2], sh[3]);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(oh, h), taps(ow, w));
    let src = img.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Tensor::new([sh[0], sh[1], oh, ow], out)
}

/// Spatial crop `[.., top..top+h, left..left+w]` of a `[B, C, H, W]` tensor.
pub fn crop(img: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let sh = img.shape();
    if sh.len() != 4 || top + h > sh[2] || left + w > sh[3] {
        return shape_err("crop", sh, &[top, left, h, w]);
    }
    let (planes, ih, iw) = (sh[0] * sh[1], sh[2], sh[3]);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for r in top..top + h {
            let row = (p * ih + r) * iw;
            out.extend_from_slice(&img.data()[row + left..row + left + w]);
        }
    }
    Tensor::new([sh[0], sh[1], h, w], out)
}

/// The `s²` inputs: the image resized by `P − P/s` pixels per axis, cropped
/// back to `H×W` at offsets `(a·P/s, b·P/s)` in row-major `(a, b)` order.
pub fn shifted_inputs(img: &Tensor, patch: usize, s: usize) -> Result<Vec<Tensor>> {
    if s == 0 || patch == 0 || !patch.is_multiple_of(s) {
        return Err(Error::Param(format!("scale {s} must divide the patch size {patch}")));
    }
    let sh = img.shape();
    if sh.len() != 4 {
        return shape_err("up_tile", sh, &[]);
    }
    let (h, w) = (sh[2], sh[3]);
    let stride = patch / s;
    let big = resize_bilinear(img, h + patch - stride, w + patch - stride)?;
    let mut out = Vec::with_capacity(s * s);
    for a in 0..s {
        for b in 0..s {
            out.push(crop(&big, a * stride, b * stride, h, w)?);
        }
    }
    Ok(out)
}

/// Up-tile `model` (`[B, C, H, W] → [B, K, H/P, W/P]`) by a factor `s`.
///
/// Output cell `(i·s + a, j·s + b)` is cell `(i, j)` of the model applied to
/// shift `(a, b)`.
pub fn up_tile<F>(mut model: F, img: &Tensor, patch: usize, s: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let outs = shifted_inputs(img, patch, s)?
        .iter()
        .map(&mut model)
        .collect::<Result<Vec<_>>>()?;
    let osh = outs[0].shape().to_vec();
    if osh.len() != 4 || outs.iter().any(|o| o.shape() != osh.as_slice()) {
        return shape_err("up_tile model output", &osh, &[]);
    }
    let (planes, oh, ow) = (osh[0] * osh[1], osh[2], osh[3]);
    let (fh, fw) = (oh * s, ow * s);
    let mut out = vec![0.0; planes * fh * fw];
    for a in 0..s {
        for b in 0..s {
            let src = outs[a * s + b].data();
            for p in 0..planes {
                for i in 0..oh {
                    for j in 0..ow {
                        out[(p * fh + i * s + a) * fw + j * s + b] = src[(p * oh + i) * ow + j];
                    }
                }
            }
        }
    }
    Tensor::new([osh[0], osh[1], fh, fw], out)
}

/// Non-overlapping `P×P` average pooling, the reference patch model.
pub fn patch_average(img: &Tensor, patch: usize) -> Result<Tensor> {
    let sh = img.shape();
    if sh.len() != 4 || patch == 0 || !sh[2].is_multiple_of(patch) || !sh[3].is_multiple_of(patch) {
        return shape_err("patch_average", sh, &[patch]);
    }
    let (planes, h, w) = (sh[0] * sh[1], sh[2], sh[3]);
    let (oh, ow) = (h / patch, w / patch);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for r in 0..h {
            for c in 0..w {
                out[(p * oh + r / patch) * ow + c / patch] += img.data()[(p * h + r) * w + c];
            }
        }
    }
    let inv = 1.0 / (patch * patch) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new([sh[0], sh[1], oh, ow], out)
}
