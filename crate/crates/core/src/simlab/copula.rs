//! Gaussian-copula construction of correlated Poisson vectors.
//!
//! Each margin is `Y = F⁻¹(Φ(Z))` for a latent standard normal Z. The latent
//! correlation of every pair of margins is calibrated so that the Pearson
//! correlation of the Poisson pair equals a target, using the exact pair
//! moment `E[Y_a Y_b] = Σ_i Σ_j P(Z_a > c_{a,i−1}, Z_b > c_{b,j−1})`.

use nalgebra::DMatrix;
use statrs::function::erf::erfc;

use crate::error::{Result, SorError};

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

const GL6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_5, -0.932_469_514_203_152_2),
    (0.360_761_573_048_138_4, -0.661_209_386_466_264_7),
    (0.467_913_934_572_690_4, -0.238_619_186_083_197),
];

const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, -0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, -0.904_117_256_370_475),
    (0.160_078_328_543_346_4, -0.769_902_674_194_305),
    (0.203_167_426_723_065_9, -0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, -0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, -0.125_233_408_511_469_2),
];

const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, -0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, -0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, -0.912_234_428_251_325_9),
    (0.083_276_741_576_704_75, -0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, -0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, -0.636_053_680_726_515),
    (0.131_688_638_449_176_6, -0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, -0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, -0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, -0.076_526_521_133_497_33),
];

/// P(X > h, Y > k) for a standard bivariate normal with correlation r,
/// after Genz's Drezner–Wesolowsky variant.
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let mut k = k;
    let hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        if r != 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = r.asin();
            for &(w, x) in quad {
                for is in [-1.0, 1.0] {
                    let sn = (asr * (is * x + 1.0) / 2.0).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr / (2.0 * TWO_PI);
        }
        return bvn + phi(-h) * phi(-k);
    }
    if r < 0.0 {
        k = -k;
    }
    let hk = h * k;
    if r.abs() < 1.0 {
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = a_s.sqrt();
        let b_s = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -(b_s / a_s + hk) / 2.0;
        if asr > -100.0 {
            bvn = a * asr.exp() * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        }
        if -hk < 100.0 {
            let b = b_s.sqrt();
            bvn -= (-hk / 2.0).exp()
                * TWO_PI.sqrt()
                * phi(-b / a)
                * b
                * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
        }
        a /= 2.0;
        for &(w, x) in quad {
            for is in [-1.0, 1.0] {
                let xs = (a * (is * x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -(b_s / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a * w * asr.exp() * ((-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / TWO_PI;
    }
    if r > 0.0 {
        bvn + phi(-h.max(k))
    } else {
        -bvn + (phi(-h) - phi(-k)).max(0.0)
    }
}

/// Latent thresholds of a Poisson margin: Y ≥ j exactly when Z > c[j−1].
#[derive(Debug, Clone)]
pub struct PoissonThresholds {
    pub mean: f64,
    pub cuts: Vec<f64>,
}

impl PoissonThresholds {
    pub fn new(mean: f64) -> Self {
        let mut cuts = Vec::new();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut j = 0u32;
        // Stop once the upper tail is below double precision.
        while 1.0 - cdf > 1e-15 && j < 10_000 {
            cuts.push(inverse_phi(cdf));
            j += 1;
            p *= mean / j as f64;
            cdf += p;
        }
        Self { mean, cuts }
    }

    /// The Poisson value at latent z.
    #[inline]
    pub fn draw(&self, z: f64) -> u32 {
        self.cuts.partition_point(|&c| z > c) as u32
    }
}

/// Φ⁻¹: the statrs quantile polished by one Newton step on Φ.
pub fn inverse_phi(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    thread_local! {
        static STD: Normal = Normal::new(0.0, 1.0).expect("standard normal");
    }
    let z = STD.with(|n| n.inverse_cdf(p));
    if !z.is_finite() {
        return z;
    }
    let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    z - (phi(z) - p) / density
}

/// Pearson correlation of two copula-coupled Poisson margins at latent ρ.
pub fn poisson_pair_correlation(a: &PoissonThresholds, b: &PoissonThresholds, rho: f64) -> f64 {
    let mut e_ab = 0.0;
    for &ca in &a.cuts {
        for &cb in &b.cuts {
            let p = bvn_upper(ca, cb, rho);
            e_ab += p;
            if p < 1e-17 {
                break;
            }
        }
    }
    (e_ab - a.mean * b.mean) / (a.mean * b.mean).sqrt()
}

/// Latent correlation giving Poisson pair correlation `target`, by bisection.
pub fn calibrate_pair(a: &PoissonThresholds, b: &PoissonThresholds, target: f64) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    if !(0.0..1.0).contains(&target) {
        return Err(SorError::config(format!(
            "copula calibration failure: target correlation {target} must lie in [0, 1)"
        )));
    }
    let max_rho = 0.999_999;
    if poisson_pair_correlation(a, b, max_rho) < target {
        return Err(SorError::config(format!(
            "copula calibration failure: correlation {target} is not attainable for Poisson means {} and {}",
            a.mean, b.mean
        )));
    }
    let (mut lo, mut hi) = (0.0, max_rho);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if poisson_pair_correlation(a, b, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Latent correlation matrix and its Cholesky factor for a set of margins.
#[derive(Debug, Clone)]
pub struct CopulaPlan {
    pub margins: Vec<PoissonThresholds>,
    pub latent: DMatrix<f64>,
    pub chol: DMatrix<f64>,
}

impl CopulaPlan {
    /// Margins with the given means and pairwise Poisson correlation `alpha`.
    pub fn new(means: &[f64], alpha: f64) -> Result<Self> {
        let margins: Vec<PoissonThresholds> = means.iter().map(|&m| PoissonThresholds::new(m)).collect();
        let n = means.len();
        let mut latent = DMatrix::identity(n, n);
        for j in 0..n {
            for k in 0..j {
                let rho = calibrate_pair(&margins[j], &margins[k], alpha)?;
                latent[(j, k)] = rho;
                latent[(k, j)] = rho;
            }
        }
        let chol = latent
            .clone()
            .cholesky()
            .ok_or_else(|| SorError::config("copula calibration failure: calibrated latent correlation is not positive definite"))?
            .l();
        Ok(Self { margins, latent, chol })
    }

    /// Draws the first `n` margins from `n` independent standard normals.
    ///
    /// The leading block of a Cholesky factor factors the leading block of
    /// the matrix, so shorter vectors reuse the same plan.
    pub fn draw(&self, normals: &[f64], out: &mut Vec<u32>) {
        let n = normals.len();
        out.clear();
        for j in 0..n {
            let mut z = 0.0;
            for k in 0..=j {
                z += self.chol[(j, k)] * normals[k];
            }
            out.push(self.margins[j].draw(z));
        }
    }
}
