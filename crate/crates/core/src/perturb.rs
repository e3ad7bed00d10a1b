//! JPEG recompression and Gaussian blur, for training augmentation and the
//! robustness sweep.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{decode_image, encode_jpeg, RgbImage};

pub const AUGMENT_QF_RANGE: (u8, u8) = (30, 100);
pub const AUGMENT_SIGMA_RANGE: (f64, f64) = (0.1, 3.0);
pub const SWEEP_QFS: [u8; 4] = [95, 90, 75, 50];
pub const SWEEP_SIGMAS: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// Identity control.
    None,
    Jpeg { qf: u8 },
    Blur { sigma: f64 },
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::None => Ok(()),
            Perturbation::Jpeg { qf } if (1..=100).contains(&qf) => Ok(()),
            Perturbation::Jpeg { qf } => Err(Error::arg(format!("JPEG quality must be in 1..=100, got {qf}"))),
            Perturbation::Blur { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            Perturbation::Blur { sigma } => Err(Error::arg(format!("blur sigma must be positive, got {sigma}"))),
        }
    }

    pub fn apply(&self, img: &RgbImage) -> Result<RgbImage> {
        match *self {
            Perturbation::None => Ok(img.clone()),
            Perturbation::Jpeg { qf } => jpeg_recompress(img, qf),
            Perturbation::Blur { sigma } => gaussian_blur(img, sigma),
        }
    }

    /// The eight robustness cells: four JPEG qualities, then four blur sigmas.
    pub fn sweep() -> Vec<Perturbation> {
        SWEEP_QFS
            .iter()
            .map(|&qf| Perturbation::Jpeg { qf })
            .chain(SWEEP_SIGMAS.iter().map(|&sigma| Perturbation::Blur { sigma }))
            .collect()
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => write!(f, "baseline"),
            Perturbation::Jpeg { qf } => write!(f, "jpeg_qf{qf}"),
            Perturbation::Blur { sigma } => write!(f, "blur_sigma{sigma:.1}"),
        }
    }
}

/// Baseline JPEG encode at `qf` followed by a decode.
pub fn jpeg_recompress(img: &RgbImage, qf: u8) -> Result<RgbImage> {
    let bytes = encode_jpeg(img, qf)?;
    decode_image(&bytes)
}

/// Sampled Gaussian taps at offsets `-r..=r`, `r = ceil(3 sigma)`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    Ok(k)
}

/// Separable blur with clamp-to-edge borders, per channel. Returns the
/// unrounded planar result `[3, H, W]`.
pub fn gaussian_blur_planar(img: &RgbImage, sigma: f64) -> Result<Vec<f64>> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let src = img.to_planar(1.0);
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for c in 0..3 {
        let plane = &src[c * w * h..(c + 1) * w * h];
        let t = &mut tmp[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + sx];
                }
                t[y * w + x] = acc;
            }
        }
        let o = &mut out[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * t[sy * w + x];
                }
                o[y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> Result<RgbImage> {
    let planar = gaussian_blur_planar(img, sigma)?;
    let (w, h) = (img.width(), img.height());
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let px = |c: usize| planar[(c * h + y) * w + x].round().clamp(0.0, 255.0) as u8;
        [px(0), px(1), px(2)]
    }))
}

/// Which augmentations one draw applied.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentDraw {
    pub jpeg_qf: Option<u8>,
    pub blur_sigma: Option<f64>,
}

/// Draws the augmentation decision. The four draws happen in a fixed order
/// (JPEG decision, QF, blur decision, sigma) whether or not they are used.
pub fn draw_augment(rng: &mut impl Rng, p: f64) -> AugmentDraw {
    let p = p.clamp(0.0, 1.0);
    let jpeg = rng.random::<f64>() < p;
    let qf = rng.random_range(AUGMENT_QF_RANGE.0..=AUGMENT_QF_RANGE.1);
    let blur = rng.random::<f64>() < p;
    let sigma = rng.random_range(AUGMENT_SIGMA_RANGE.0..=AUGMENT_SIGMA_RANGE.1);
    AugmentDraw {
        jpeg_qf: jpeg.then_some(qf),
        blur_sigma: blur.then_some(sigma),
    }
}

pub fn apply_augment(img: &RgbImage, draw: &AugmentDraw) -> Result<RgbImage> {
    let mut out = match draw.jpeg_qf {
        Some(qf) => jpeg_recompress(img, qf)?,
        None => img.clone(),
    };
    if let Some(sigma) = draw.blur_sigma {
        out = gaussian_blur(&out, sigma)?;
    }
    Ok(out)
}

/// Independently applies JPEG (probability `p`) then blur (probability `p`).
pub fn random_augment(img: &RgbImage, rng: &mut impl Rng, p: f64) -> Result<RgbImage> {
    let draw = draw_augment(rng, p);
    apply_augment(img, &draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn mse(a: &RgbImage, b: &RgbImage) -> f64 {
        let n = a.pixels().len() as f64;
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum::<f64>()
            / n
    }

    #[test]
    fn jpeg_quality_ordering() {
        let img = noise(48, 40, 3);
        let hi = jpeg_recompress(&img, 100).unwrap();
        let lo = jpeg_recompress(&img, 30).unwrap();
        assert_eq!((hi.width(), hi.height()), (48, 40));
        assert!(mse(&img, &hi) < mse(&img, &lo));
        let again = jpeg_recompress(&lo, 30).unwrap();
        assert!(mse(&lo, &again) <= mse(&img, &lo));
        assert!(jpeg_recompress(&img, 0).is_err());
        assert!(jpeg_recompress(&img, 101).is_err());
    }

    #[test]
    fn blur_kernel_and_impulse() {
        for s in [0.1, 0.5, 1.0, 2.7, 4.0] {
            let k = gaussian_kernel(s).unwrap();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let k = gaussian_kernel(1.0).unwrap();
        assert_eq!(k.len(), 7);
        let mut img = RgbImage::filled(15, 15, [0; 3]);
        img.set(7, 7, [255; 3]);
        let out = gaussian_blur(&img, 1.0).unwrap();
        let expect = (255.0 * k[3] * k[3]).round() as u8;
        assert_eq!(out.get(7, 7), [expect; 3]);
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn blur_keeps_constant() {
        let img = RgbImage::filled(9, 6, [10, 200, 77]);
        assert_eq!(gaussian_blur(&img, 2.0).unwrap(), img);
    }

    #[test]
    fn augment_extremes() {
        let img = noise(16, 16, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_augment(&img, &mut rng, 0.0).unwrap(), img);
        for _ in 0..20 {
            let d = draw_augment(&mut rng, 1.0);
            assert!(d.jpeg_qf.is_some() && d.blur_sigma.is_some());
        }
    }

    #[test]
    fn augment_stream_reproducible() {
        let img = noise(16, 16, 9);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..20).map(|_| random_augment(&img, &mut rng, 0.5).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sweep_cells() {
        let s = Perturbation::sweep();
        assert_eq!(s.len(), 8);
        assert_eq!(s[0], Perturbation::Jpeg { qf: 95 });
        assert_eq!(s[7], Perturbation::Blur { sigma: 4.0 });
        assert_eq!(s[5].to_string(), "blur_sigma2.0");
        let img = noise(8, 8, 1);
        assert_eq!(Perturbation::None.apply(&img).unwrap(), img);
    }

    fn variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn blur_reduces_variance(seed: u64, sigma in 0.3f64..4.0) {
            let img = noise(12, 10, seed);
            let before = img.to_planar(1.0);
            let after = gaussian_blur_planar(&img, sigma).unwrap();
            let n = 12 * 10;
            for c in 0..3 {
                let vb = variance(&before[c * n..(c + 1) * n]);
                if vb > 0.0 {
                    prop_assert!(variance(&after[c * n..(c + 1) * n]) < vb);
                }
            }
        }

        #[test]
        fn jpeg_decodable(seed: u64, qf in 1u8..=100, w in 1usize..40, h in 1usize..40) {
            let img = noise(w, h, seed);
            let out = jpeg_recompress(&img, qf).unwrap();
            prop_assert_eq!((out.width(), out.height()), (w, h));
        }
    }
}
