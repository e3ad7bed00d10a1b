//! Fixed high-pass residual filters exposing the noise pattern of a raster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::RgbImage;

pub const KERNEL_SIZE: usize = 5;
pub const DEFAULT_CLAMP: f64 = 2.0;

/// One 5x5 kernel stored as integer-valued weights and a divisor, so that
/// responses to 8-bit inputs accumulate exactly before the final scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrmKernel {
    pub weights: [[f64; KERNEL_SIZE]; KERNEL_SIZE],
    pub normalizer: f64,
}

impl SrmKernel {
    fn sum(&self) -> f64 {
        self.weights.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrmKernelSet {
    kernels: Vec<SrmKernel>,
    clamp_t: f64,
}

impl Default for SrmKernelSet {
    fn default() -> Self {
        Self::new(default_kernels(), DEFAULT_CLAMP).expect("default kernels are zero-sum")
    }
}

impl SrmKernelSet {
    /// Fails unless there are exactly 3 zero-sum kernels and `clamp_t > 0`.
    pub fn new(kernels: Vec<SrmKernel>, clamp_t: f64) -> Result<Self> {
        if kernels.len() != 3 {
            return Err(Error::Config(format!("expected 3 SRM kernels, got {}", kernels.len())));
        }
        if !(clamp_t > 0.0 && clamp_t.is_finite()) {
            return Err(Error::Config(format!("SRM clamp threshold must be positive, got {clamp_t}")));
        }
        for (q, k) in kernels.iter().enumerate() {
            if !(k.normalizer != 0.0 && k.normalizer.is_finite()) {
                return Err(Error::Config(format!("SRM kernel {q} has normalizer {}", k.normalizer)));
            }
            if k.sum() != 0.0 {
                return Err(Error::Config(format!(
                    "SRM kernel {q} is not high-pass: entries sum to {}",
                    k.sum()
                )));
            }
        }
        Ok(Self { kernels, clamp_t })
    }

    pub fn with_clamp(clamp_t: f64) -> Result<Self> {
        Self::new(default_kernels(), clamp_t)
    }

    pub fn kernels(&self) -> &[SrmKernel] {
        &self.kernels
    }

    pub fn clamp_t(&self) -> f64 {
        self.clamp_t
    }
}

pub fn default_kernels() -> Vec<SrmKernel> {
    vec![
        SrmKernel {
            weights: [
                [0., 0., 0., 0., 0.],
                [0., -1., 2., -1., 0.],
                [0., 2., -4., 2., 0.],
                [0., -1., 2., -1., 0.],
                [0., 0., 0., 0., 0.],
            ],
            normalizer: 4.0,
        },
        SrmKernel {
            weights: [
                [-1., 2., -2., 2., -1.],
                [2., -6., 8., -6., 2.],
                [-2., 8., -12., 8., -2.],
                [2., -6., 8., -6., 2.],
                [-1., 2., -2., 2., -1.],
            ],
            normalizer: 12.0,
        },
        SrmKernel {
            weights: [
                [0., 0., 0., 0., 0.],
                [0., 0., 0., 0., 0.],
                [0., 1., -2., 1., 0.],
                [0., 0., 0., 0., 0.],
                [0., 0., 0., 0., 0.],
            ],
            normalizer: 2.0,
        },
    ]
}

/// Clamped residuals, channel-planar `[3, height, width]`; channel `q` is the
/// response of kernel `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTensor {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ResidualTensor {
    pub fn at(&self, q: usize, x: usize, y: usize) -> f64 {
        self.values[(q * self.height + y) * self.width + x]
    }
}

/// Unclamped per-kernel responses on the [0, 1] pixel scale, averaged over
/// the three input channels. Borders replicate the nearest edge pixel.
pub fn srm_response(img: &RgbImage, kernels: &SrmKernelSet) -> Result<ResidualTensor> {
    let (w, h) = (img.width(), img.height());
    if w < KERNEL_SIZE || h < KERNEL_SIZE {
        return Err(Error::arg(format!(
            "SRM needs at least {KERNEL_SIZE}x{KERNEL_SIZE} pixels, image is {w}x{h}"
        )));
    }
    // The channel average of the per-channel responses equals the response
    // of the channel sum divided by 3; integer sums keep it exact.
    let sums: Vec<f64> = img
        .pixels()
        .chunks_exact(3)
        .map(|p| f64::from(u16::from(p[0]) + u16::from(p[1]) + u16::from(p[2])))
        .collect();
    let r = (KERNEL_SIZE / 2) as isize;
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut values = vec![0.0; 3 * w * h];
    for (q, kernel) in kernels.kernels().iter().enumerate() {
        let scale = 3.0 * 255.0 * kernel.normalizer;
        let taps: Vec<(isize, isize, f64)> = (0..KERNEL_SIZE)
            .flat_map(|dy| (0..KERNEL_SIZE).map(move |dx| (dx, dy)))
            .filter_map(|(dx, dy)| {
                let wgt = kernel.weights[dy][dx];
                (wgt != 0.0).then_some((dx as isize - r, dy as isize - r, wgt))
            })
            .collect();
        let out = &mut values[q * w * h..(q + 1) * w * h];
        for y in 0..h {
            let interior_y = y as isize >= r && (y as isize) < h as isize - r;
            for x in 0..w {
                let interior = interior_y && x as isize >= r && (x as isize) < w as isize - r;
                let mut acc = 0.0;
                for &(dx, dy, wgt) in &taps {
                    let (sx, sy) = if interior {
                        ((x as isize + dx) as usize, (y as isize + dy) as usize)
                    } else {
                        (clampi(x as isize + dx, w), clampi(y as isize + dy, h))
                    };
                    acc += wgt * sums[sy * w + sx];
                }
                out[y * w + x] = acc / scale;
            }
        }
    }
    Ok(ResidualTensor {
        width: w,
        height: h,
        values,
    })
}

pub fn srm_residual(img: &RgbImage, kernels: &SrmKernelSet) -> Result<ResidualTensor> {
    let mut res = srm_response(img, kernels)?;
    let t = kernels.clamp_t();
    for v in &mut res.values {
        *v = v.clamp(-t, t);
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_maps_to_zero() {
        for v in [0u8, 1, 77, 255] {
            let img = RgbImage::filled(9, 7, [v, v / 2, 255 - v]);
            let r = srm_residual(&img, &SrmKernelSet::default()).unwrap();
            assert!(r.values.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn impulse_center_response() {
        let mut img = RgbImage::filled(9, 9, [0; 3]);
        img.set(4, 4, [255; 3]);
        let r = srm_residual(&img, &SrmKernelSet::default()).unwrap();
        assert_eq!(r.at(0, 4, 4), -1.0);
        assert_eq!(r.at(0, 3, 4), 0.5);
        assert_eq!(r.at(2, 4, 4), -1.0);
    }

    #[test]
    fn k2_response_clamped() {
        // Light the pixels under positive K2 weights: raw response 4 * 223/255.
        let k2 = &default_kernels()[1];
        let mut img = RgbImage::filled(5, 5, [0; 3]);
        for y in 0..5 {
            for x in 0..5 {
                if k2.weights[y][x] > 0.0 {
                    img.set(x, y, [223; 3]);
                }
            }
        }
        let kernels = SrmKernelSet::default();
        let raw = srm_response(&img, &kernels).unwrap().at(1, 2, 2);
        assert!((raw - 4.0 * 223.0 / 255.0).abs() < 1e-12);
        assert!(raw > 3.49);
        assert_eq!(srm_residual(&img, &kernels).unwrap().at(1, 2, 2), 2.0);
    }

    #[test]
    fn rejects_bad_sets() {
        let mut ks = default_kernels();
        ks[0].weights[0][0] = 1.0;
        assert!(SrmKernelSet::new(ks, 2.0).is_err());
        assert!(SrmKernelSet::new(default_kernels(), 0.0).is_err());
        assert!(SrmKernelSet::new(default_kernels()[..2].to_vec(), 1.0).is_err());
        let small = RgbImage::filled(4, 9, [0; 3]);
        assert!(matches!(srm_residual(&small, &SrmKernelSet::default()), Err(Error::Argument(_))));
    }

    fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng, max: u8) -> RgbImage {
        RgbImage::from_fn(w, h, |_, _| {
            [
                rng.random_range(0..=max),
                rng.random_range(0..=max),
                rng.random_range(0..=max),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn linear_below_clamp(seed: u64, a in 1u8..4) {
            // Inputs small enough that |response| stays under the clamp.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(12, 10, &mut rng, 20);
            let scaled = RgbImage::new(12, 10, img.pixels().iter().map(|&v| v * a).collect()).unwrap();
            let k = SrmKernelSet::default();
            let r1 = srm_residual(&img, &k).unwrap();
            let r2 = srm_residual(&scaled, &k).unwrap();
            for (x, y) in r1.values.iter().zip(&r2.values) {
                prop_assert!(x.abs() * f64::from(a) < 2.0);
                prop_assert!((x * f64::from(a) - y).abs() < 1e-12);
            }
        }

        #[test]
        fn translation_equivariant_interior(seed: u64, dx in 0usize..4, dy in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let big = random_image(24, 24, &mut rng, 255);
            let a = big.crop(4, 4, 16, 16).unwrap();
            let b = big.crop(4 + dx, 4 + dy, 16, 16).unwrap();
            let k = SrmKernelSet::default();
            let ra = srm_residual(&a, &k).unwrap();
            let rb = srm_residual(&b, &k).unwrap();
            for q in 0..3 {
                for y in 2..14 - dy {
                    for x in 2..14 - dx {
                        prop_assert_eq!(ra.at(q, x + dx, y + dy), rb.at(q, x, y));
                    }
                }
            }
        }
    }
}
