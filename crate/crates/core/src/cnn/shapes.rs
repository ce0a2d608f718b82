//! Synthetic silhouettes and their proxy drag/lift labels.
//!
//! Flow runs along +x. Labels are closed-form functions of the polygon:
//! `C_D = K_D * frontal width / diameter` and
//! `C_L = K_L * 2 I_xy / (I_xx + I_yy)` with central second moments of the
//! filled area. Any shape mirror-symmetric about the flow axis has
//! `I_xy = 0` and hence no lift.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GeometryImage;
use crate::error::{Error, Result};

pub const K_D: f64 = 1.5;
pub const K_L: f64 = 1.0;
/// Number of images in the default corpus.
pub const CORPUS_SIZE: usize = 179;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    HalfCircle,
    Rhombus,
    Rectangle,
    Square,
    Triangle,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Ellipse,
        ShapeFamily::HalfCircle,
        ShapeFamily::Rhombus,
        ShapeFamily::Rectangle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub family: ShapeFamily,
    /// Diameter as a fraction of the image side, in (0, 1].
    pub scale: f64,
    /// Length over thickness, at least 1. Ignored by squares and half-circles.
    pub aspect: f64,
    /// Counter-clockwise rotation from the flow axis, radians.
    pub angle: f64,
}

/// Body-frame outline with the long axis on x, counter-clockwise.
fn outline(family: ShapeFamily, aspect: f64) -> Vec<[f64; 2]> {
    let t = 1.0 / aspect;
    match family {
        ShapeFamily::Ellipse => {
            (0..96).map(|i| 2.0 * PI * i as f64 / 96.0).map(|a| [a.cos(), t * a.sin()]).collect()
        }
        ShapeFamily::HalfCircle => {
            (0..=48).map(|i| -FRAC_PI_2 + PI * i as f64 / 48.0).map(|a| [a.cos(), a.sin()]).collect()
        }
        ShapeFamily::Rhombus => vec![[1.0, 0.0], [0.0, t], [-1.0, 0.0], [0.0, -t]],
        ShapeFamily::Rectangle => vec![[1.0, t], [-1.0, t], [-1.0, -t], [1.0, -t]],
        ShapeFamily::Square => vec![[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]],
        ShapeFamily::Triangle => vec![[1.0, 0.0], [-1.0, t], [-1.0, -t]],
    }
}

fn diameter(poly: &[[f64; 2]]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in poly.iter().enumerate() {
        for b in &poly[i + 1..] {
            d = d.max((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    d
}

/// Rotated, scaled to `scale` diameter and centred on its bounding box.
pub fn polygon(p: &ShapeParams) -> Result<Vec<[f64; 2]>> {
    if !(p.scale > 0.0 && p.scale <= 1.0) {
        return Err(Error::invalid(format!("shape scale {} outside (0, 1]", p.scale)));
    }
    if !(p.aspect >= 1.0 && p.aspect.is_finite()) || !p.angle.is_finite() {
        return Err(Error::invalid(format!("bad aspect {} or angle {}", p.aspect, p.angle)));
    }
    let (s, c) = p.angle.sin_cos();
    let rotated: Vec<[f64; 2]> =
        outline(p.family, p.aspect).iter().map(|v| [c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect();
    let k = p.scale / diameter(&rotated);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in &rotated {
        for j in 0..2 {
            lo[j] = lo[j].min(v[j]);
            hi[j] = hi[j].max(v[j]);
        }
    }
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    Ok(rotated.iter().map(|v| [k * (v[0] - mid[0]), k * (v[1] - mid[1])]).collect())
}

/// Area, centroid and central moments `(I_xx, I_yy, I_xy)` where
/// `I_xx = ∫(y-ȳ)²`, `I_yy = ∫(x-x̄)²`, `I_xy = ∫(x-x̄)(y-ȳ)`.
pub fn moments(poly: &[[f64; 2]]) -> (f64, [f64; 2], [f64; 3]) {
    let (mut a, mut cx, mut cy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        let cr = x0 * y1 - x1 * y0;
        a += cr;
        cx += (x0 + x1) * cr;
        cy += (y0 + y1) * cr;
        syy += (x0 * x0 + x0 * x1 + x1 * x1) * cr;
        sxx += (y0 * y0 + y0 * y1 + y1 * y1) * cr;
        sxy += (x0 * y1 + 2.0 * x0 * y0 + 2.0 * x1 * y1 + x1 * y0) * cr;
    }
    a /= 2.0;
    let (cx, cy) = (cx / (6.0 * a), cy / (6.0 * a));
    let ixx = sxx / 12.0 - a * cy * cy;
    let iyy = syy / 12.0 - a * cx * cx;
    let ixy = sxy / 24.0 - a * cx * cy;
    (a, [cx, cy], [ixx, iyy, ixy])
}

/// Proxy `(C_D, C_L)` of a silhouette outline.
pub fn proxy_label(poly: &[[f64; 2]]) -> [f64; 2] {
    let (lo, hi) = poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[1]), hi.max(v[1])));
    let cd = K_D * (hi - lo) / diameter(poly);
    let (_, _, [ixx, iyy, ixy]) = moments(poly);
    [cd, K_L * 2.0 * ixy / (ixx + iyy)]
}

fn inside(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut hit = false;
    let n = poly.len();
    for i in 0..n {
        let [xi, yi] = poly[i];
        let [xj, yj] = poly[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
    }
    hit
}

/// Filled silhouette (1) on a dark background (0), anti-aliased by
/// supersampling and quantized to 8 bits like a stored image.
pub fn rasterize(p: &ShapeParams, size: usize) -> Result<GeometryImage> {
    if size < 2 {
        return Err(Error::invalid(format!("image size {size} too small")));
    }
    let poly: Vec<[f64; 2]> = polygon(p)?.iter().map(|v| [v[0] * size as f64, v[1] * size as f64]).collect();
    let half = size as f64 / 2.0;
    let mut pixels = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let mut hits = 0;
            for sr in 0..SUPERSAMPLE {
                for sc in 0..SUPERSAMPLE {
                    let x = c as f64 + (sc as f64 + 0.5) / SUPERSAMPLE as f64 - half;
                    let y = half - (r as f64 + (sr as f64 + 0.5) / SUPERSAMPLE as f64);
                    hits += inside(&poly, x, y) as usize;
                }
            }
            let level = (255.0 * hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64).round();
            pixels.push(level / 255.0);
        }
    }
    GeometryImage::new(size, size, pixels, Some(proxy_label(&poly)))
}

/// Random shape parameters; families cycle so every family is represented.
pub fn random_params(index: usize, rng: &mut impl Rng) -> ShapeParams {
    let family = ShapeFamily::ALL[index % ShapeFamily::ALL.len()];
    ShapeParams {
        family,
        scale: rng.random_range(0.5..0.9),
        aspect: rng.random_range(1.2..3.0),
        angle: rng.random_range(0.0..FRAC_PI_2),
    }
}

/// `n` labelled images of `size x size` pixels.
pub fn synth_corpus(n: usize, size: usize, seed: u64) -> Result<Vec<(ShapeParams, GeometryImage)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = random_params(i, &mut rng);
            Ok((p, rasterize(&p, size)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(family: ShapeFamily, aspect: f64, angle: f64) -> ShapeParams {
        ShapeParams { family, scale: 0.8, aspect, angle }
    }

    #[test]
    fn unit_square_moments() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let (a, c, [ixx, iyy, ixy]) = moments(&sq);
        assert!((a - 1.0).abs() < 1e-15);
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);
        assert!((ixx - 1.0 / 12.0).abs() < 1e-15 && (iyy - 1.0 / 12.0).abs() < 1e-15);
        assert!(ixy.abs() < 1e-15);
    }

    #[test]
    fn aligned_symmetric_shapes_have_no_lift() {
        for f in ShapeFamily::ALL {
            let l = proxy_label(&polygon(&params(f, 2.0, 0.0)).unwrap());
            assert!(l[1].abs() < 1e-12, "{f:?} {l:?}");
        }
    }

    #[test]
    fn lift_grows_with_small_angles() {
        let lift = |a: f64| proxy_label(&polygon(&params(ShapeFamily::Rectangle, 3.0, a)).unwrap())[1];
        assert!(lift(0.1) > 0.0 && lift(0.3) > lift(0.1) && lift(0.6) > lift(0.3));
    }

    #[test]
    fn degenerate_scale_rejected() {
        for s in [0.0, -0.5, 1.5, f64::NAN] {
            let p = ShapeParams { scale: s, ..params(ShapeFamily::Square, 1.0, 0.0) };
            assert!(polygon(&p).is_err());
        }
    }

    #[test]
    fn raster_covers_the_area() {
        let p = params(ShapeFamily::Rectangle, 2.0, 0.0);
        let img = rasterize(&p, 64).unwrap();
        let poly = polygon(&p).unwrap();
        let (a, _, _) = moments(&poly);
        let covered: f64 = img.pixels.iter().sum::<f64>() / (64.0 * 64.0);
        assert!((covered - a).abs() < 0.01, "{covered} vs {a}");
    }
}
