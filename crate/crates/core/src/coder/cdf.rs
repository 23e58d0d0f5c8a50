use crate::error::{Error, Result};
use crate::provider::Pmf256;

pub const DEFAULT_PRECISION: u32 = 16;
pub const MIN_PRECISION: u32 = 8;
pub const MAX_PRECISION: u32 = 24;

/// Fixed-point cumulative distribution over 256 symbols with total mass
/// `2^precision` and at least one unit of mass per symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdf {
    cdf: [u32; 257],
    precision: u32,
}

pub fn check_precision(precision: u32) -> Result<()> {
    if (MIN_PRECISION..=MAX_PRECISION).contains(&precision) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "cdf precision {precision} outside {MIN_PRECISION}..={MAX_PRECISION}"
        )))
    }
}

impl QuantizedCdf {
    pub fn uniform(precision: u32) -> Result<Self> {
        check_precision(precision)?;
        Self::from_frequencies(&[1 << (precision - 8); 256], precision)
    }

    /// Builds a CDF from per-symbol frequencies, which must all be positive
    /// and sum to `2^precision`.
    pub fn from_frequencies(freqs: &[u32; 256], precision: u32) -> Result<Self> {
        check_precision(precision)?;
        let mut cdf = [0u32; 257];
        let mut acc = 0u64;
        for (z, &f) in freqs.iter().enumerate() {
            if f == 0 {
                return Err(Error::InvalidInput(format!(
                    "symbol {z} has zero frequency"
                )));
            }
            acc += f as u64;
            cdf[z + 1] = acc.min(u32::MAX as u64) as u32;
        }
        if acc != 1u64 << precision {
            return Err(Error::InvalidInput(format!(
                "frequencies sum to {acc}, expected 2^{precision}"
            )));
        }
        Ok(Self { cdf, precision })
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn total(&self) -> u32 {
        1 << self.precision
    }

    /// Cumulative mass below `symbol`.
    #[inline]
    pub fn low(&self, symbol: u8) -> u32 {
        self.cdf[symbol as usize]
    }

    /// Cumulative mass up to and including `symbol`.
    #[inline]
    pub fn high(&self, symbol: u8) -> u32 {
        self.cdf[symbol as usize + 1]
    }

    #[inline]
    pub fn gap(&self, symbol: u8) -> u32 {
        self.high(symbol) - self.low(symbol)
    }

    pub fn cumulative(&self) -> &[u32; 257] {
        &self.cdf
    }

    /// Quantized probability of `symbol`.
    pub fn probability(&self, symbol: u8) -> f64 {
        self.gap(symbol) as f64 / self.total() as f64
    }

    /// Ideal code length of `symbol` in bits under this CDF.
    pub fn cost_bits(&self, symbol: u8) -> f64 {
        self.precision as f64 - (self.gap(symbol) as f64).log2()
    }
}

/// Largest-remainder apportionment of `2^precision` units over the PMF with a
/// floor of one unit per symbol; ties on the remainder go to the lower symbol.
pub fn quantize_cdf(pmf: &Pmf256, precision: u32) -> Result<QuantizedCdf> {
    check_precision(precision)?;
    let spare = (1u64 << precision) - 256;
    let p = pmf.probabilities();
    let sum: f64 = p.iter().sum();
    let scale = spare as f64 / sum;

    let mut freqs = [1u32; 256];
    let mut remainders = [0f64; 256];
    let mut assigned = 0u64;
    for z in 0..256 {
        let quota = p[z] * scale;
        let whole = quota.floor();
        let units = (whole as u64).min(spare);
        freqs[z] += units as u32;
        remainders[z] = quota - whole;
        assigned += units;
    }

    // float rounding can push the floors past the budget; take the excess back
    // from the largest symbols
    while assigned > spare {
        let z = (0..256)
            .max_by(|&a, &b| freqs[a].cmp(&freqs[b]).then(b.cmp(&a)))
            .unwrap();
        freqs[z] -= 1;
        assigned -= 1;
    }

    let mut leftover = (spare - assigned) as usize;
    while leftover >= 256 {
        freqs.iter_mut().for_each(|f| *f += 1);
        leftover -= 256;
    }
    if leftover > 0 {
        let mut order: [u8; 256] = std::array::from_fn(|z| z as u8);
        let by_remainder = |a: &u8, b: &u8| {
            remainders[*b as usize]
                .total_cmp(&remainders[*a as usize])
                .then(a.cmp(b))
        };
        order.select_nth_unstable_by(leftover - 1, by_remainder);
        for &z in &order[..leftover] {
            freqs[z as usize] += 1;
        }
    }

    QuantizedCdf::from_frequencies(&freqs, precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pmf(p: Vec<f64>) -> Pmf256 {
        Pmf256::new(p.try_into().unwrap()).unwrap()
    }

    #[test]
    fn uniform_gaps() {
        let cdf = quantize_cdf(&Pmf256::uniform(), 16).unwrap();
        assert!((0..=255u8).all(|z| cdf.gap(z) == 256));
        assert_eq!(cdf, QuantizedCdf::uniform(16).unwrap());
    }

    #[test]
    fn degenerate_pmf_keeps_floor() {
        let mut p = vec![0.0; 256];
        p[0] = 1.0;
        let cdf = quantize_cdf(&pmf(p), 16).unwrap();
        assert_eq!(cdf.gap(0), 65536 - 255);
        assert!((1..=255u8).all(|z| cdf.gap(z) == 1));
    }

    #[test]
    fn ties_go_to_lower_symbol() {
        let mut p = vec![0.0; 256];
        p[3] = 0.5;
        p[7] = 0.5;
        // spare mass at P=10 is 768; quotas of 384 divide exactly
        let cdf = quantize_cdf(&pmf(p.clone()), 10).unwrap();
        assert_eq!((cdf.gap(3), cdf.gap(7)), (385, 385));

        p[3] = 0.4995;
        p[7] = 0.4995;
        p[9] = 0.001;
        // quotas 383.616, 383.616, 0.768: two leftover units go to z=9 and then
        // to the lower of the tied pair
        let cdf = quantize_cdf(&pmf(p), 10).unwrap();
        assert_eq!((cdf.gap(3), cdf.gap(7), cdf.gap(9)), (385, 384, 2));
    }

    #[test]
    fn precision_range() {
        assert!(quantize_cdf(&Pmf256::uniform(), 7).is_err());
        assert!(quantize_cdf(&Pmf256::uniform(), 25).is_err());
        let eight = quantize_cdf(&Pmf256::uniform(), 8).unwrap();
        assert!((0..=255u8).all(|z| eight.gap(z) == 1));
        assert!(quantize_cdf(&Pmf256::uniform(), 24).is_ok());
    }

    #[test]
    fn from_frequencies_validates() {
        let mut f = [256u32; 256];
        assert!(QuantizedCdf::from_frequencies(&f, 16).is_ok());
        f[0] = 0;
        f[1] = 512;
        assert!(QuantizedCdf::from_frequencies(&f, 16).is_err());
        f[0] = 1;
        assert!(QuantizedCdf::from_frequencies(&f, 16).is_err());
    }

    fn arb_pmf() -> impl Strategy<Value = Pmf256> {
        prop_oneof![
            proptest::collection::vec(0.0f64..1.0, 256),
            proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..1e-6, 0.0f64..10.0], 256),
        ]
        .prop_filter("needs some mass", |w| w.iter().sum::<f64>() > 1e-3)
        .prop_map(|w| {
            let s: f64 = w.iter().sum();
            Pmf256::new(std::array::from_fn(|z| w[z] / s)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn apportionment_bounds(p in arb_pmf(), precision in 8u32..=24) {
            let cdf = quantize_cdf(&p, precision).unwrap();
            let total = (1u64 << precision) as f64;
            let mut sum = 0u64;
            for z in 0..=255u8 {
                let g = cdf.gap(z);
                prop_assert!(g >= 1);
                sum += g as u64;
                let err = (g as f64 / total - p.probabilities()[z as usize]).abs();
                prop_assert!(err <= 257.0 / total + 1e-12, "z={} err={}", z, err);
            }
            prop_assert_eq!(sum, 1u64 << precision);
            // bit-for-bit repeatable
            prop_assert_eq!(quantize_cdf(&p, precision).unwrap(), cdf);
        }
    }
}
