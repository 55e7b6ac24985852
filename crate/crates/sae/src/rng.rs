//! Deterministic random-number streams for the simulation engine.
//!
//! Streams are derived from (seed, scenario, replicate), so any replicate can
//! be regenerated in isolation and results never depend on execution order or
//! worker count. Uniform deviates come from a SplitMix64 counter generator;
//! normal deviates are produced by the inverse-CDF method (Wichura's AS 241
//! PPND16 quantile function), which is exact to double precision and has no
//! platform-dependent branches.

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One reproducible stream of deviates.
#[derive(Debug, Clone)]
pub struct ReplicateRng {
    state: u64,
}

impl ReplicateRng {
    /// Stream for a (seed, scenario, replicate) triple.
    pub fn from_parts(seed: u64, scenario: u64, replicate: u64) -> Self {
        let s = mix(seed ^ GOLDEN)
            ^ mix(scenario.wrapping_mul(0xA24B_AED4_963E_E407).wrapping_add(1))
            ^ mix(replicate.wrapping_mul(0x9FB2_1C65_1E98_DF25).wrapping_add(2));
        Self { state: mix(s) }
    }

    /// Stream for a bare seed.
    pub fn from_seed(seed: u64) -> Self {
        Self::from_parts(seed, 0, 0)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform deviate strictly inside (0, 1).
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal deviate via the inverse CDF.
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        normal_quantile(self.next_uniform())
    }
}

/// Normal quantile function Phi^{-1}(p) for p in (0, 1); AS 241 (PPND16).
///
/// Absolute accuracy is about 1e-15 over the full open interval.
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0, "normal_quantile needs p in (0,1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&PPND_A, r) / poly(&PPND_B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&PPND_C, r) / poly(&PPND_D, r)
    } else {
        let r = r - 5.0;
        poly(&PPND_E, r) / poly(&PPND_F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[inline]
fn poly(c: &[f64; 8], x: f64) -> f64 {
    // Horner evaluation, highest coefficient last in the tables below.
    c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck)
}

#[allow(clippy::excessive_precision)]
const PPND_A: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
#[allow(clippy::excessive_precision)]
const PPND_B: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
#[allow(clippy::excessive_precision)]
const PPND_C: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
#[allow(clippy::excessive_precision)]
const PPND_D: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
#[allow(clippy::excessive_precision)]
const PPND_E: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
#[allow(clippy::excessive_precision)]
const PPND_F: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];
