//! Gaussian CDF and quantile, exact binomial tail bounds, and reproducible
//! random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal quantile. Acklam's rational approximation refined with two
/// Newton steps on [`norm_cdf`].
pub fn norm_icdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("norm_icdf needs p in (0, 1), got {p}")));
    }
    if p > 0.5 {
        // 1 - p is exact for p >= 0.5
        return Ok(-lower_icdf(1.0 - p));
    }
    Ok(lower_icdf(p))
}

fn lower_icdf(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let mut x = acklam(p);
    for _ in 0..2 {
        let pdf = norm_pdf(x);
        if pdf == 0.0 {
            break;
        }
        x -= (norm_cdf(x) - p) / pdf;
    }
    x
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`, accumulated in log space.
pub fn binomial_sf(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let log_term = |j: u64| ln_choose(n, j) + j as f64 * lp + (n - j) as f64 * lq;

    // Terms are unimodal in j; anchor the log-sum-exp at the largest one.
    let mode = (((n + 1) as f64 * p).floor() as u64).min(n);
    let peak = log_term(mode.max(k));
    let mut total = 0.0;
    for j in mode.max(k)..=n {
        let t = (log_term(j) - peak).exp();
        total += t;
        if t < 1e-18 * total {
            break;
        }
    }
    if mode > k {
        for j in (k..mode).rev() {
            let t = (log_term(j) - peak).exp();
            total += t;
            if t < 1e-18 * total {
                break;
            }
        }
    }
    (peak + total.ln()).exp().min(1.0)
}

/// Exact one-sided `(1 - alpha)` lower confidence bound on a binomial
/// proportion (Clopper–Pearson), found by bisection on [`binomial_sf`].
pub fn clopper_pearson_lower(successes: u64, trials: u64, alpha: f64) -> Result<f64> {
    if trials == 0 || successes > trials {
        return Err(Error::InvalidArgument(format!(
            "clopper_pearson_lower needs 0 <= k <= n, n >= 1; got k={successes}, n={trials}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    if successes == trials {
        return Ok(alpha.powf(1.0 / trials as f64));
    }
    // P(X >= k | p) increases in p; the bound is where it crosses alpha.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binomial_sf(successes, trials, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Two-sided exact binomial test of `p = 1/2`; returns the p-value for
/// observing `successes` out of `trials`.
pub fn binomial_test_half(successes: u64, trials: u64) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    let extreme = successes.max(trials - successes);
    (2.0 * binomial_sf(extreme, trials, 0.5)).min(1.0)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A random stream identified by a root seed and a path of integers.
///
/// The stream's output depends only on `(root, path)`, so work can be split
/// across threads in any order and still reproduce bit for bit.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    root: u64,
    path: Vec<u64>,
}

impl RngStream {
    pub fn new(root: u64) -> Self {
        RngStream {
            root,
            path: Vec::new(),
        }
    }

    pub fn child(&self, id: u64) -> Self {
        let mut path = self.path.clone();
        path.push(id);
        RngStream {
            root: self.root,
            path,
        }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    fn key(&self) -> u64 {
        let mut h = splitmix64(self.root);
        for (depth, &p) in self.path.iter().enumerate() {
            h = splitmix64(h ^ splitmix64(p.wrapping_add((depth as u64 + 1) << 56)));
        }
        h
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut h = self.key();
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            h = splitmix64(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }
}

/// I.i.d. `N(0, sigma^2)` entries.
pub fn sample_gaussian(stream: &RngStream, shape: &[usize], sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    if sigma == 0.0 {
        return Tensor::zeros(shape);
    }
    let mut rng = stream.rng();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // Frozen with mpmath at 40 digits.
    const PHI_1: f64 = 0.841_344_746_068_542_9;
    const ICDF_08: f64 = 0.841_621_233_572_914_2;

    /// Independent oracle: bisection on the CDF.
    fn icdf_bisect(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if norm_cdf(mid) < p {
                lo = mid
            } else {
                hi = mid
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_cdf(1.0) - PHI_1).abs() < 1e-12);
        assert!((norm_cdf(-1.0) - (1.0 - PHI_1)).abs() < 1e-12);
        for i in 0..200 {
            let x = -8.0 + 0.08 * i as f64;
            assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn icdf_reference_values() {
        assert_eq!(norm_icdf(0.5).unwrap(), 0.0);
        assert!((norm_icdf(0.8).unwrap() - ICDF_08).abs() < 1e-12);
        assert!((icdf_bisect(0.8) - ICDF_08).abs() < 1e-12);
        for &p in &[1e-300, 1e-12, 0.01, 0.3, 0.77, 0.999, 1.0 - 1e-12] {
            let x = norm_icdf(p).unwrap();
            assert!((norm_cdf(x) - p).abs() < 1e-10, "p={p}");
        }
    }

    #[test]
    fn icdf_domain_errors() {
        for &p in &[0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(norm_icdf(p).is_err());
        }
    }

    #[test]
    fn icdf_round_trip() {
        for i in 0..=1000 {
            let x = -5.0 + 0.01 * i as f64;
            let back = norm_icdf(norm_cdf(x)).unwrap();
            assert!((back - x).abs() < 1e-8, "x={x} back={back}");
        }
    }

    #[test]
    fn icdf_strictly_increasing() {
        let mut prev = f64::NEG_INFINITY;
        for i in 1..10_000 {
            let v = norm_icdf(i as f64 / 10_000.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn clopper_pearson_closed_forms() {
        assert_eq!(clopper_pearson_lower(0, 100, 0.001).unwrap(), 0.0);
        let all = clopper_pearson_lower(100, 100, 0.001).unwrap();
        assert!((all - 0.933_254_300_796_991).abs() < 1e-6);
        assert!(clopper_pearson_lower(5, 4, 0.05).is_err());
        assert!(clopper_pearson_lower(0, 0, 0.05).is_err());
        assert!(clopper_pearson_lower(1, 4, 1.0).is_err());
    }

    #[test]
    fn clopper_pearson_covers_true_proportion() {
        let stream = RngStream::new(11);
        for &alpha in &[0.05, 0.001] {
            let mut rng = stream.child((alpha * 1e6) as u64).rng();
            let trials = 10_000;
            let covered = (0..trials)
                .filter(|_| {
                    let k = (0..100).filter(|_| rng.random::<f64>() < 0.7).count() as u64;
                    clopper_pearson_lower(k, 100, alpha).unwrap() <= 0.7
                })
                .count();
            assert!(covered as f64 / trials as f64 >= 1.0 - alpha - 0.01);
        }
    }

    #[test]
    fn binomial_test_threshold() {
        assert!(binomial_test_half(11, 11) <= 0.001);
        assert!(binomial_test_half(10, 10) > 0.001);
        assert_eq!(binomial_test_half(5, 10), 1.0);
    }

    #[test]
    fn gaussian_sampling() {
        let s = RngStream::new(3).child(1);
        assert!(sample_gaussian(&s, &[4, 3], 0.0).data().iter().all(|&v| v == 0.0));
        assert_eq!(sample_gaussian(&s, &[5], 2.0), sample_gaussian(&s, &[5], 2.0));

        let sigma = 1.5;
        let t = sample_gaussian(&s, &[1_000_000], sigma);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * sigma / 1000.0);
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.01);
    }

    #[test]
    fn distinct_paths_are_uncorrelated() {
        let root = RngStream::new(99);
        let a = sample_gaussian(&root.child(0), &[100_000], 1.0);
        let b = sample_gaussian(&root.child(1), &[100_000], 1.0);
        let c = sample_gaussian(&root.child(0).child(0), &[100_000], 1.0);
        for (x, y) in [(&a, &b), (&a, &c), (&b, &c)] {
            let rho = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>()
                / x.len() as f64;
            assert!(rho.abs() < 0.01, "rho={rho}");
        }
        assert_ne!(root.child(0).rng().random::<u64>(), root.child(1).rng().random::<u64>());
    }
}
