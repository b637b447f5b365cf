//! Two-view digits: a randomly rotated image as the observed view and a
//! noisy image of the same class as the missing view.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoViewOptions {
    /// Pad each image by 2 pixels per side before rotating, then crop back.
    pub pad_crop: bool,
    /// Largest absolute rotation angle in radians.
    pub max_angle: f64,
}

impl Default for TwoViewOptions {
    fn default() -> Self {
        Self {
            pad_crop: false,
            max_angle: FRAC_PI_4,
        }
    }
}

fn bilinear(img: &[f64], side: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let px = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= side as f64 || yi >= side as f64 {
            0.0
        } else {
            img[yi as usize * side + xi as usize]
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1.0, y0) * fx;
    let bottom = px(x0, y0 + 1.0) * (1.0 - fx) + px(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn rotate_square(img: &[f64], side: usize, angle: f64) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let (s, co) = angle.sin_cos();
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for col in 0..side {
            // Inverse map: sample the source at the point that lands here.
            let (dx, dy) = (col as f64 - c, r as f64 - c);
            let sx = co * dx + s * dy + c;
            let sy = -s * dx + co * dy + c;
            out[r * side + col] = bilinear(img, side, sx, sy);
        }
    }
    out
}

/// Rotates a square row-major image about its centre with bilinear
/// interpolation and zero padding.
pub fn rotate_image(img: &[f64], side: usize, angle: f64, pad_crop: bool) -> Vec<f64> {
    if !pad_crop {
        return rotate_square(img, side, angle);
    }
    let big = side + 4;
    let mut padded = vec![0.0; big * big];
    for r in 0..side {
        padded[(r + 2) * big + 2..(r + 2) * big + 2 + side].copy_from_slice(&img[r * side..(r + 1) * side]);
    }
    let rotated = rotate_square(&padded, big, angle);
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        out.extend_from_slice(&rotated[(r + 2) * big + 2..(r + 2) * big + 2 + side]);
    }
    out
}

/// Builds `(x_O, x_M)` from `n × (side·side)` images with values in `[0, 1]`.
///
/// `x_O` rotates each image by an angle uniform in `[−max_angle, max_angle]`.
/// `x_M` takes a uniformly chosen image of the same class, adds `U[0, 1]`
/// noise per pixel and clamps to `[0, 1]`. Peers are drawn only from the
/// images passed in, so calling this per split keeps splits separate.
pub fn make_two_view_digits<R: Rng + ?Sized>(
    images: &Tensor,
    labels: &[usize],
    opts: TwoViewOptions,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let n = images.rows();
    let pixels = images.numel() / n.max(1);
    let side = (pixels as f64).sqrt().round() as usize;
    if side * side != pixels {
        return Err(Error::invalid(format!("images of {pixels} pixels are not square")));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!("{n} images but {} labels", labels.len())));
    }
    if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("image values must lie in [0, 1]"));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let img = |i: usize| &images.data()[i * pixels..(i + 1) * pixels];
    let mut x_o = Vec::with_capacity(n * pixels);
    let mut x_m = Vec::with_capacity(n * pixels);
    for i in 0..n {
        let angle = if opts.max_angle > 0.0 {
            rng.random_range(-opts.max_angle..=opts.max_angle)
        } else {
            0.0
        };
        x_o.extend(rotate_image(img(i), side, angle, opts.pad_crop));
        let peers = &by_class[&labels[i]];
        let j = peers[rng.random_range(0..peers.len())];
        x_m.extend(img(j).iter().map(|&p| (p + rng.random::<f64>()).clamp(0.0, 1.0)));
    }
    Ok((Tensor::matrix(n, pixels, x_o)?, Tensor::matrix(n, pixels, x_m)?))
}
