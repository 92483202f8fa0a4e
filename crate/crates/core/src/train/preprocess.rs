use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::train::data::Sample;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Rasters are resized to `S + RESIZE_MARGIN` per side before the center crop.
pub const RESIZE_MARGIN: usize = 32;
pub const MAX_ROTATION_DEG: f64 = 15.0;

/// Resize to `(S+32)×(S+32)` (bilinear), center-crop `S×S`, scale to `[0,1]`
/// and normalize per channel. Returns `[3,S,S]`.
pub fn preprocess<T: Element>(raw: &Sample, size: usize) -> Result<Tensor<T>> {
    if raw.channels != 3 {
        return Err(Error::InvalidArgument { op: "preprocess", detail: format!("expected 3 channels, got {}", raw.channels) });
    }
    if size == 0 {
        return Err(Error::InvalidArgument { op: "preprocess", detail: "crop size must be positive".into() });
    }
    let resized = size + RESIZE_MARGIN;
    let off = RESIZE_MARGIN / 2;
    let sy = raw.height as f64 / resized as f64;
    let sx = raw.width as f64 / resized as f64;
    let mut out = vec![T::zero(); 3 * size * size];
    for y in 0..size {
        let (y0, y1, fy) = bilinear_taps((y + off) as f64, sy, raw.height);
        for x in 0..size {
            let (x0, x1, fx) = bilinear_taps((x + off) as f64, sx, raw.width);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| raw.pixel(yy, xx, c) as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = (top * (1.0 - fy) + bottom * fy) / 255.0;
                out[(c * size + y) * size + x] = T::from_f64((v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
            }
        }
    }
    Tensor::from_vec([3, size, size], out)
}

/// Source taps for output coordinate `o` under half-pixel-center scaling.
fn bilinear_taps(o: f64, scale: f64, extent: usize) -> (usize, usize, f64) {
    let src = ((o + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, src - i0 as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip_prob: 0.5, vflip_prob: 0.5, max_rotation_deg: MAX_ROTATION_DEG }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { hflip_prob: 0.0, vflip_prob: 0.0, max_rotation_deg: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(Error::Config(format!("max_rotation_deg must be finite and >= 0, got {}", self.max_rotation_deg)));
        }
        Ok(())
    }
}

/// The random draws behind one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
}

impl AugmentDraw {
    /// Always consumes exactly three values, so the stream position does not
    /// depend on the configuration.
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let h: f64 = rng.random();
        let v: f64 = rng.random();
        let a: f64 = rng.random();
        Self { hflip: h < cfg.hflip_prob, vflip: v < cfg.vflip_prob, angle_deg: (2.0 * a - 1.0) * cfg.max_rotation_deg }
    }
}

/// Random flips then a rotation, on a `[C,H,W]` image.
pub fn augment<T: Element>(img: &Tensor<T>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor<T>> {
    apply_augment(img, AugmentDraw::sample(cfg, rng))
}

pub fn apply_augment<T: Element>(img: &Tensor<T>, draw: AugmentDraw) -> Result<Tensor<T>> {
    let mut out = img.clone();
    if draw.hflip {
        out = hflip(&out)?;
    }
    if draw.vflip {
        out = vflip(&out)?;
    }
    if draw.angle_deg != 0.0 {
        out = rotate(&out, draw.angle_deg)?;
    }
    Ok(out)
}

fn chw(img: &Tensor<impl Element>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape { op, detail: format!("expected [C,H,W], got {:?}", img.shape()) }),
    }
}

pub fn hflip<T: Element>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, w) = chw(img, "hflip")?;
    let mut data = img.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::from_vec(img.shape().to_vec(), data)
}

pub fn vflip<T: Element>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(img, "vflip")?;
    let src = img.data();
    let mut data = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in (0..h).rev() {
            let at = (ch * h + y) * w;
            data.extend_from_slice(&src[at..at + w]);
        }
    }
    Tensor::from_vec(img.shape().to_vec(), data)
}

/// Counter-clockwise rotation about the image center with bilinear sampling;
/// samples falling outside take the nearest edge pixel.
pub fn rotate<T: Element>(img: &Tensor<T>, angle_deg: f64) -> Result<Tensor<T>> {
    let (c, h, w) = chw(img, "rotate")?;
    if angle_deg == 0.0 {
        return Ok(img.clone());
    }
    let (s, co) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = img.data();
    let mut out = vec![T::zero(); src.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = (co * dx - s * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (s * dx + co * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx].to_f64();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(ch * h + y) * w + x] = T::from_f64(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_vec(img.shape().to_vec(), out)
}
