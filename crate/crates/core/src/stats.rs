//! Special functions and the distributional expectations that appear in the
//! variational objective.
//!
//! `ln_gamma` and `digamma` shift their argument upward with the recurrence
//! until it is large enough for the asymptotic (Stirling) series. Near the
//! two roots of `ln_gamma` (x = 1 and x = 2) a Taylor series around 1 is
//! used instead so that the result keeps full relative precision.

use thiserror::Error;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

// Below this the argument is shifted with the recurrence before using the
// asymptotic expansions.
const ASYMPTOTIC_MIN: f64 = 10.0;

// zeta(k) for k = 2..=40, used by the series for ln Γ(1 + z).
const ZETA: [f64; 39] = [
    1.644_934_066_848_226_4,
    1.202_056_903_159_594_3,
    1.082_323_233_711_138_2,
    1.036_927_755_143_37,
    1.017_343_061_984_449_1,
    1.008_349_277_381_922_8,
    1.004_077_356_197_944_3,
    1.002_008_392_826_082_2,
    1.000_994_575_127_818_1,
    1.000_494_188_604_119_5,
    1.000_246_086_553_308,
    1.000_122_713_347_578_5,
    1.000_061_248_135_058_7,
    1.000_030_588_236_307,
    1.000_015_282_259_408_7,
    1.000_007_637_197_637_9,
    1.000_003_817_293_265,
    1.000_001_908_212_716_6,
    1.000_000_953_962_033_9,
    1.000_000_476_932_986_8,
    1.000_000_238_450_502_7,
    1.000_000_119_219_926,
    1.000_000_059_608_189,
    1.000_000_029_803_503_5,
    1.000_000_014_901_554_8,
    1.000_000_007_450_711_8,
    1.000_000_003_725_334,
    1.000_000_001_862_659_7,
    1.000_000_000_931_327_4,
    1.000_000_000_465_662_9,
    1.000_000_000_232_831_2,
    1.000_000_000_116_415_5,
    1.000_000_000_058_207_7,
    1.000_000_000_029_103_8,
    1.000_000_000_014_552,
    1.000_000_000_007_276,
    1.000_000_000_003_638,
    1.000_000_000_001_819,
    1.000_000_000_000_909_5,
];

// B_{2j} / (2j (2j - 1)) for j = 1..=8.
const STIRLING_LN_GAMMA: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
    -3617.0 / 122_400.0,
];

// B_{2j} / (2j) for j = 1..=8.
const STIRLING_DIGAMMA: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32_760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("{func}: argument {value} outside the domain")]
    Domain { func: &'static str, value: f64 },
    #[error("{0}: empty input")]
    Empty(&'static str),
}

fn check_positive(func: &'static str, value: f64) -> Result<(), StatsError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(StatsError::Domain { func, value })
    }
}

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> Result<f64, StatsError> {
    check_positive("ln_gamma", x)?;
    Ok(ln_gamma_unchecked(x))
}

/// Digamma (the derivative of `ln_gamma`) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64, StatsError> {
    check_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

// ln Γ(1 + z) for |z| < 1.
fn ln_gamma_one_plus(z: f64) -> f64 {
    let mut sum = 0.0;
    let mut power = -z;
    for (i, zeta) in ZETA.iter().enumerate() {
        power *= -z;
        let k = (i + 2) as f64;
        sum += zeta * power / k;
    }
    -EULER_GAMMA * z + sum
}

pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    if (x - 1.0).abs() < 0.25 {
        return ln_gamma_one_plus(x - 1.0);
    }
    if (x - 2.0).abs() < 0.25 {
        let z = x - 2.0;
        return z.ln_1p() + ln_gamma_one_plus(z);
    }
    let mut shifted = x;
    let mut product = 1.0;
    while shifted < ASYMPTOTIC_MIN {
        product *= shifted;
        shifted += 1.0;
    }
    let inv = 1.0 / shifted;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for c in STIRLING_LN_GAMMA.iter().rev() {
        series = series * inv2 + c;
    }
    let stirling = (shifted - 0.5) * shifted.ln() - shifted + HALF_LN_2PI + series * inv;
    stirling - product.ln()
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut shifted = x;
    let mut acc = 0.0;
    while shifted < ASYMPTOTIC_MIN {
        acc -= 1.0 / shifted;
        shifted += 1.0;
    }
    let inv2 = 1.0 / (shifted * shifted);
    let mut series = 0.0;
    for c in STIRLING_DIGAMMA.iter().rev() {
        series = series * inv2 + c;
    }
    acc + shifted.ln() - 0.5 / shifted - series * inv2
}

/// `E[ln θ_d]` for `θ ~ Dirichlet(gamma)`: `ψ(γ_d) − ψ(Σ γ)`.
pub fn expect_log_dirichlet(gamma: &[f64]) -> Result<Vec<f64>, StatsError> {
    for &g in gamma {
        check_positive("expect_log_dirichlet", g)?;
    }
    let mut out = vec![0.0; gamma.len()];
    expect_log_dirichlet_into(gamma, &mut out);
    Ok(out)
}

pub(crate) fn expect_log_dirichlet_into(gamma: &[f64], out: &mut [f64]) {
    let total: f64 = gamma.iter().sum();
    let psi_total = digamma_unchecked(total);
    for (o, &g) in out.iter_mut().zip(gamma) {
        *o = digamma_unchecked(g) - psi_total;
    }
}

/// Entropy of a Gamma distribution with shape `a` and scale `b`.
pub fn gamma_entropy(a: f64, b: f64) -> Result<f64, StatsError> {
    check_positive("gamma_entropy", a)?;
    check_positive("gamma_entropy", b)?;
    Ok(gamma_entropy_unchecked(a, b))
}

pub(crate) fn gamma_entropy_unchecked(a: f64, b: f64) -> f64 {
    a + b.ln() + ln_gamma_unchecked(a) + (1.0 - a) * digamma_unchecked(a)
}

/// `E[exp(−X)]` for `X ~ N(mu, var)`.
pub fn expect_neg_exp_normal(mu: f64, var: f64) -> f64 {
    (-mu + 0.5 * var).exp()
}

/// `E[exp(X)]` for `X ~ N(mu, var)`.
pub fn expect_exp_normal(mu: f64, var: f64) -> f64 {
    (mu + 0.5 * var).exp()
}

/// `ln Σ exp(v_i)`, shifted by the maximum so large magnitudes stay finite.
pub fn log_sum_exp(v: &[f64]) -> Result<f64, StatsError> {
    if v.is_empty() {
        return Err(StatsError::Empty("log_sum_exp"));
    }
    Ok(log_sum_exp_unchecked(v))
}

pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = v.iter().map(|&x| exp_flush(x - max)).sum();
    max + sum.ln()
}

/// `exp(x)`, returning the exact zero directly for arguments whose result
/// underflows. Libm's underflow path is far slower than the normal one, and
/// topics with negligible weight hit it constantly.
#[inline]
pub(crate) fn exp_flush(x: f64) -> f64 {
    if x < -746.0 {
        0.0
    } else {
        x.exp()
    }
}

/// Variational Gamma factor `Gam(shape, scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaVar {
    pub shape: f64,
    pub scale: f64,
}

impl GammaVar {
    pub fn new(shape: f64, scale: f64) -> Result<Self, StatsError> {
        check_positive("GammaVar::new", shape)?;
        check_positive("GammaVar::new", scale)?;
        Ok(Self { shape, scale })
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    /// `E[ln Z] = ψ(a) + ln b`.
    pub fn expect_ln(&self) -> f64 {
        digamma_unchecked(self.shape) + self.scale.ln()
    }

    pub fn entropy(&self) -> f64 {
        gamma_entropy_unchecked(self.shape, self.scale)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(x)` without overflow for large `|x|`.
pub fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
