//! Exact rationals, decimal strings and fixed-point quantization.
//!
//! Plaintext payloads are kept as exact rationals so the same graph can be
//! evaluated exactly or with integer mantissas at a chosen scale.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Rational = BigRational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal literal {0:?}")]
pub struct DecimalError(pub String);

/// A decimal literal kept verbatim so documents round-trip byte for byte.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Decimal(String);

impl Decimal {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_rational(&self) -> Rational {
        // validated on construction
        parse_decimal(&self.0).expect("decimal validated at construction")
    }

    pub fn to_f64(&self) -> f64 {
        self.0.parse().expect("decimal validated at construction")
    }
}

impl FromStr for Decimal {
    type Err = DecimalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_decimal(s)?;
        Ok(Decimal(s.to_string()))
    }
}

impl fmt::Debug for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<f64> for Decimal {
    fn from(v: f64) -> Self {
        // `{:?}` prints the shortest representation that parses back exactly
        Decimal(format!("{v:?}"))
    }
}

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses `[-+]digits[.digits][(e|E)[-+]digits]` into an exact rational.
pub fn parse_decimal(s: &str) -> Result<Rational, DecimalError> {
    let err = || DecimalError(s.to_string());
    let t = s.trim();
    let (neg, rest) = match t.as_bytes().first() {
        Some(b'-') => (true, &t[1..]),
        Some(b'+') => (false, &t[1..]),
        _ => (false, t),
    };
    let (mantissa, exponent) = match rest.find(['e', 'E']) {
        Some(pos) => {
            let exp: i64 = rest[pos + 1..].parse().map_err(|_| err())?;
            (&rest[..pos], exp)
        }
        None => (rest, 0),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    if !int_part
        .bytes()
        .chain(frac_part.bytes())
        .all(|b| b.is_ascii_digit())
    {
        return Err(err());
    }
    if exponent.unsigned_abs() > 4096 {
        return Err(err());
    }
    let digits = format!("{int_part}{frac_part}");
    let mut numer: BigInt = if digits.is_empty() {
        BigInt::zero()
    } else {
        digits.parse().map_err(|_| err())?
    };
    if neg {
        numer = -numer;
    }
    let shift = exponent - frac_part.len() as i64;
    let ten = BigInt::from(10);
    let value = if shift >= 0 {
        Rational::from_integer(numer * num_traits::pow(ten, shift as usize))
    } else {
        Rational::new(numer, num_traits::pow(ten, (-shift) as usize))
    };
    Ok(value)
}

/// Exact conversion of a finite `f64`.
pub fn rational_from_f64(v: f64) -> Rational {
    Rational::from_float(v).unwrap_or_else(Rational::zero)
}

pub fn rational_to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

pub fn pow2(bits: u32) -> BigInt {
    BigInt::one() << bits as usize
}

/// Rounds `n / d` to the nearest integer, ties to even. `d` must be positive.
pub fn div_round_half_even(n: &BigInt, d: &BigInt) -> BigInt {
    let (q, r) = n.div_mod_floor(d);
    let twice: BigInt = &r * 2;
    match twice.cmp(d) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => {
            if q.is_even() {
                q
            } else {
                q + 1
            }
        }
    }
}

/// Integer mantissa of `value` at `scale_bits`, rounded half to even.
pub fn quantize(value: &Rational, scale_bits: u32) -> BigInt {
    let scaled = value * Rational::from_integer(pow2(scale_bits));
    div_round_half_even(scaled.numer(), scaled.denom())
}

pub fn dequantize(mantissa: &BigInt, scale_bits: u32) -> f64 {
    rational_to_f64(&Rational::new(mantissa.clone(), pow2(scale_bits)))
}

/// Serde adapter writing rationals as `"p/q"` (or `"p"`) strings.
pub mod rational_serde {
    use super::Rational;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&r.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

pub mod rational_vec_serde {
    use super::Rational;
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Rational], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for r in v {
            seq.serialize_element(&r.to_string())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Rational>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

pub fn is_negative(r: &Rational) -> bool {
    r.is_negative()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64, d: i64) -> Rational {
        Rational::new(n.into(), d.into())
    }

    #[test]
    fn decimal_literals() {
        assert_eq!(parse_decimal("0.125").unwrap(), q(1, 8));
        assert_eq!(parse_decimal("-1e-4").unwrap(), q(-1, 10_000));
        assert_eq!(parse_decimal("1.5E3").unwrap(), q(1500, 1));
        assert_eq!(parse_decimal("+.5").unwrap(), q(1, 2));
        assert_eq!(parse_decimal("7.").unwrap(), q(7, 1));
        for bad in ["", ".", "1.2.3", "abc", "1e", "--1", "0x10"] {
            assert!(parse_decimal(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn decimal_keeps_its_spelling() {
        let d: Decimal = "0.10".parse().unwrap();
        assert_eq!(d.as_str(), "0.10");
        assert_eq!(d.to_rational(), q(1, 10));
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, "\"0.10\"");
    }

    #[test]
    fn round_half_even() {
        let two = BigInt::from(2);
        assert_eq!(div_round_half_even(&BigInt::from(1), &two), BigInt::from(0));
        assert_eq!(div_round_half_even(&BigInt::from(3), &two), BigInt::from(2));
        assert_eq!(
            div_round_half_even(&BigInt::from(-1), &two),
            BigInt::from(0)
        );
        assert_eq!(
            div_round_half_even(&BigInt::from(-3), &two),
            BigInt::from(-2)
        );
        assert_eq!(
            div_round_half_even(&BigInt::from(7), &BigInt::from(4)),
            BigInt::from(2)
        );
    }

    #[test]
    fn quantize_at_scale() {
        assert_eq!(quantize(&q(1, 3), 10), BigInt::from(341));
        assert_eq!(quantize(&q(-5, 2), 1), BigInt::from(-5));
        assert_eq!(dequantize(&BigInt::from(341), 10), 341.0 / 1024.0);
    }
}
