//! Patch spectra: orthonormal 2-D DCT-II, the anti-diagonal band filter
//! bank, band-weighted log-energy grading and extreme-patch selection.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Patch;

/// Precomputed orthonormal DCT-II basis for one transform size.
///
/// Row `u` holds `a(u) * cos(pi * (2i + 1) * u / 2n)` for `i in 0..n`.
#[derive(Debug, Clone)]
pub struct DctPlan {
    n: usize,
    basis: Vec<f64>,
}

impl DctPlan {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "DCT size must be positive");
        let mut basis = vec![0.0; n * n];
        for u in 0..n {
            let a = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                basis[u * n + i] = a * quarter_wave_cos((2 * i + 1) * u, n);
            }
        }
        Self { n, basis }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Forward 2-D transform of a row-major `n`x`n` block.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        // Rows then columns: Y = C X C^T.
        let n = self.n;
        let mut tmp = vec![0.0; n * n];
        for r in 0..n {
            let row = &x[r * n..(r + 1) * n];
            for v in 0..n {
                let b = &self.basis[v * n..(v + 1) * n];
                tmp[r * n + v] = dot(row, b);
            }
        }
        let mut out = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for v in 0..n {
            for r in 0..n {
                col[r] = tmp[r * n + v];
            }
            for u in 0..n {
                out[u * n + v] = dot(&col, &self.basis[u * n..(u + 1) * n]);
            }
        }
        Ok(out)
    }

    /// Inverse 2-D transform: X = C^T Y C.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        let n = self.n;
        let mut tmp = vec![0.0; n * n];
        for u in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for v in 0..n {
                    s += y[u * n + v] * self.basis[v * n + j];
                }
                tmp[u * n + j] = s;
            }
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for u in 0..n {
                    s += self.basis[u * n + i] * tmp[u * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Ok(out)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n * self.n {
            return Err(Error::arg(format!(
                "DCT input has {} values, expected {}x{}",
                x.len(),
                self.n,
                self.n
            )));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite DCT input value {bad}")));
        }
        Ok(())
    }
}

/// `cos(pi * m / 2n)` reduced to the first quadrant so that mirrored basis
/// entries are bitwise negations of each other and quarter-period zeros are
/// exact.
fn quarter_wave_cos(m: usize, n: usize) -> f64 {
    let period = 4 * n;
    let m = m % period;
    // cos is symmetric about 0 and 2n (the half period).
    let m = if m > 2 * n { period - m } else { m };
    match m.cmp(&n) {
        Ordering::Less => (PI * m as f64 / (2 * n) as f64).cos(),
        Ordering::Equal => 0.0,
        Ordering::Greater => -(PI * (2 * n - m) as f64 / (2 * n) as f64).cos(),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dct2(channel: &[f64], n: usize) -> Result<Vec<f64>> {
    DctPlan::new(n).forward(channel)
}

pub fn idct2(coeffs: &[f64], n: usize) -> Result<Vec<f64>> {
    DctPlan::new(n).inverse(coeffs)
}

/// Per-channel DCT of one patch on the raw [0, 255] scale.
///
/// Coefficients are channel-planar: `coeffs[c * n * n + u * n + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DctPatch {
    pub n: usize,
    pub coeffs: Vec<f64>,
}

impl DctPatch {
    pub fn from_patch(patch: &Patch, plan: &DctPlan) -> Result<Self> {
        let n = patch.size();
        if plan.size() != n {
            return Err(Error::arg(format!("DCT plan is {}x{}, patch is {n}x{n}", plan.size(), plan.size())));
        }
        let planar = patch.image.to_planar(1.0);
        let mut coeffs = Vec::with_capacity(3 * n * n);
        for c in 0..3 {
            coeffs.extend(plan.forward(&planar[c * n * n..(c + 1) * n * n])?);
        }
        Ok(Self { n, coeffs })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.coeffs[c * nn..(c + 1) * nn]
    }
}

/// `K` binary masks over the `N`x`N` coefficient grid. Cell `(i, j)` belongs
/// to band `k` iff `(2N/K) k <= i + j < (2N/K)(k + 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandFilterBank {
    n: usize,
    k_bands: usize,
    band_of: Vec<usize>,
}

impl BandFilterBank {
    pub fn new(n: usize, k_bands: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::arg("filter bank size must be positive"));
        }
        if k_bands == 0 || k_bands > 2 * n - 1 {
            return Err(Error::arg(format!(
                "band count {k_bands} outside 1..={} for n={n}",
                2 * n - 1
            )));
        }
        // (2N/K) k <= s  <=>  2N k <= s K, compared in integers.
        let band_of = (0..n * n)
            .map(|cell| {
                let s = cell / n + cell % n;
                (s * k_bands) / (2 * n)
            })
            .collect();
        Ok(Self { n, k_bands, band_of })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k_bands(&self) -> usize {
        self.k_bands
    }

    pub fn band_of(&self, i: usize, j: usize) -> usize {
        self.band_of[i * self.n + j]
    }

    /// Row-major 0/1 mask of band `k`.
    pub fn mask(&self, k: usize) -> Vec<u8> {
        self.band_of.iter().map(|&b| u8::from(b == k)).collect()
    }
}

pub fn build_band_filter_bank(n: usize, k_bands: usize) -> Result<BandFilterBank> {
    BandFilterBank::new(n, k_bands)
}

/// Band-weighted log spectral energy:
/// `G = sum_k 2^k sum_c sum_{i,j} F_k[i][j] ln(|X_c[i][j]| + 1)`.
pub fn grade_patch(dct: &DctPatch, bank: &BandFilterBank) -> Result<f64> {
    let n = bank.n();
    if dct.n != n || dct.coeffs.len() != 3 * n * n {
        return Err(Error::arg(format!(
            "patch spectrum is {}x{} with {} values, filter bank expects {n}x{n}x3",
            dct.n,
            dct.n,
            dct.coeffs.len()
        )));
    }
    let mut per_band = vec![0.0; bank.k_bands()];
    for c in 0..3 {
        for (cell, x) in dct.channel(c).iter().enumerate() {
            per_band[bank.band_of[cell]] += x.abs().ln_1p();
        }
    }
    Ok(per_band
        .iter()
        .enumerate()
        .map(|(k, e)| 2f64.powi(k as i32) * e)
        .sum())
}

/// Grades and the `k` highest/lowest graded patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSelection {
    /// Indexed by patch linear index.
    pub grades: Vec<f64>,
    /// Linear indices, descending grade.
    pub max_indices: Vec<usize>,
    /// Linear indices, ascending grade.
    pub min_indices: Vec<usize>,
    pub k: usize,
}

/// Chooses the `k` highest and `k` lowest grades. Ties go to the lower
/// index in both lists.
pub fn select_from_grades(grades: Vec<f64>, k: usize) -> Result<PatchSelection> {
    if k == 0 {
        return Err(Error::arg("selection count must be positive"));
    }
    if grades.len() < 2 * k {
        return Err(Error::InsufficientPatches {
            available: grades.len(),
            required: 2 * k,
        });
    }
    let mut order: Vec<usize> = (0..grades.len()).collect();
    order.sort_by(|&a, &b| grades[b].total_cmp(&grades[a]).then(a.cmp(&b)));
    let max_indices = order[..k].to_vec();
    order.sort_by(|&a, &b| grades[a].total_cmp(&grades[b]).then(a.cmp(&b)));
    let min_indices = order[..k].to_vec();
    Ok(PatchSelection {
        grades,
        max_indices,
        min_indices,
        k,
    })
}

pub fn grade_patches(patches: &[Patch], bank: &BandFilterBank) -> Result<Vec<f64>> {
    let plan = DctPlan::new(bank.n());
    patches
        .iter()
        .map(|p| grade_patch(&DctPatch::from_patch(p, &plan)?, bank))
        .collect()
}

pub fn select_extreme_patches(patches: &[Patch], bank: &BandFilterBank, k: usize) -> Result<PatchSelection> {
    if patches.len() < 2 * k {
        return Err(Error::InsufficientPatches {
            available: patches.len(),
            required: 2 * k,
        });
    }
    if let Some(p) = patches.iter().enumerate().find(|(i, p)| p.linear_index != *i) {
        return Err(Error::arg(format!(
            "patch at position {} has linear index {}",
            p.0, p.1.linear_index
        )));
    }
    select_from_grades(grade_patches(patches, bank)?, k)
}
