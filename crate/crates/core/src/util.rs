//! Small numeric helpers shared across modules.

/// Neumaier-compensated summation.
///
/// Ensemble reductions must not depend on accumulation order beyond f64
/// rounding; compensated sums keep the error at one ulp of the total.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Sum a slice with compensation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.total()
}

/// FNV-1a over a byte stream. Used for content/provenance hashes that must be
/// stable across runs and platforms (std's `DefaultHasher` is not guaranteed
/// stable across toolchains).
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write_bytes(&v.to_le_bytes());
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write_bytes(&v.to_bits().to_le_bytes());
    }

    pub fn write_f64s(&mut self, vs: impl IntoIterator<Item = f64>) {
        for v in vs {
            self.write_f64(v);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// (1 - exp(-x)) / x with the x -> 0 limit handled; accurate for small x.
pub fn one_minus_exp_over(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        -(-x).exp_m1() / x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut acc = CompensatedSum::new();
        acc.add(1e16);
        for _ in 0..1000 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.total(), 1000.0);
    }

    #[test]
    fn fnv_is_order_sensitive_and_stable() {
        let mut h1 = Fnv1a::new();
        h1.write_f64(1.0);
        h1.write_f64(2.0);
        let mut h2 = Fnv1a::new();
        h2.write_f64(2.0);
        h2.write_f64(1.0);
        assert_ne!(h1.finish(), h2.finish());

        let mut h3 = Fnv1a::new();
        h3.write_bytes(b"abc");
        assert_eq!(h3.finish(), 0xe71fa2190541574b);
    }

    #[test]
    fn one_minus_exp_over_limits() {
        assert_eq!(one_minus_exp_over(0.0), 1.0);
        assert!((one_minus_exp_over(1e-12) - 1.0).abs() < 1e-9);
        assert!((one_minus_exp_over(1.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    }
}
