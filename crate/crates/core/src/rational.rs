//! Exact rational arithmetic for scores and metrics.
//!
//! Judge scores, thresholds, and the benchmark's soft/hard values are kept
//! as arbitrary-precision rationals rather than floats: the hard metric is
//! defined by exact equality with 1, and keyword fractions like 1/3 must
//! compare exactly through serialization round-trips.

use std::fmt;
use std::ops::{Add, Div, Mul, Sub};
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// An exact rational number, serialized as `"n"` or `"n/d"`.
///
/// Deserialization also accepts plain integers, floats, and decimal strings
/// (`"8.5"` becomes 17/2), so scores coming from config files or model JSON
/// land here without going through binary floating point.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Rational(BigRational);

impl Rational {
    pub fn zero() -> Self {
        Rational(BigRational::zero())
    }

    pub fn one() -> Self {
        Rational(BigRational::one())
    }

    pub fn int(n: i64) -> Self {
        Rational(BigRational::from_integer(BigInt::from(n)))
    }

    /// `num/den`. Panics if `den == 0`; callers construct with literals.
    pub fn new(num: i64, den: i64) -> Self {
        assert!(den != 0, "rational denominator must be nonzero");
        Rational(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn from_usize(n: usize) -> Self {
        Rational(BigRational::from_integer(BigInt::from(n)))
    }

    /// Parses `"n"`, `"n/d"`, or a decimal string like `"8.5"` / `"-0.25"`.
    /// Decimal exponents (`"2.5e-1"`) are handled so that float round-trips
    /// through their shortest display form stay exact.
    pub fn parse(s: &str) -> Result<Self, RationalParseError> {
        let s = s.trim();
        if s.is_empty() {
            return Err(RationalParseError(s.into()));
        }
        if let Some((n, d)) = s.split_once('/') {
            let num = BigInt::from_str(n.trim()).map_err(|_| RationalParseError(s.into()))?;
            let den = BigInt::from_str(d.trim()).map_err(|_| RationalParseError(s.into()))?;
            if den.is_zero() {
                return Err(RationalParseError(s.into()));
            }
            return Ok(Rational(BigRational::new(num, den)));
        }
        Self::parse_decimal(s)
    }

    fn parse_decimal(s: &str) -> Result<Self, RationalParseError> {
        let err = || RationalParseError(s.into());
        let (mantissa, exp) = match s.split_once(['e', 'E']) {
            Some((m, e)) => (m, e.parse::<i32>().map_err(|_| err())?),
            None => (s, 0),
        };
        let (int_part, frac_part) = match mantissa.split_once('.') {
            Some((i, f)) => (i, f),
            None => (mantissa, ""),
        };
        if frac_part.contains(['+', '-']) {
            return Err(err());
        }
        let digits = format!("{int_part}{frac_part}");
        if digits.is_empty() || digits == "-" || digits == "+" {
            return Err(err());
        }
        let num = BigInt::from_str(&digits).map_err(|_| err())?;
        let scale = frac_part.len() as i32 - exp;
        let ten = BigInt::from(10);
        let value = if scale >= 0 {
            BigRational::new(num, ten.pow(scale as u32))
        } else {
            BigRational::from_integer(num * ten.pow((-scale) as u32))
        };
        Ok(Rational(value))
    }

    /// Exact value of an `f64` via its shortest round-trip decimal form.
    pub fn from_f64_lossy(v: f64) -> Result<Self, RationalParseError> {
        if !v.is_finite() {
            return Err(RationalParseError(v.to_string()));
        }
        Self::parse(&v.to_string())
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn floor_usize(&self) -> usize {
        self.0.floor().to_integer().to_usize().unwrap_or(0)
    }

    pub fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }

    pub fn clamped(self, lo: &Rational, hi: &Rational) -> Self {
        if &self < lo {
            lo.clone()
        } else if &self > hi {
            hi.clone()
        } else {
            self
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid rational literal: {0:?}")]
pub struct RationalParseError(pub String);

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl Add for Rational {
    type Output = Rational;
    fn add(self, rhs: Rational) -> Rational {
        Rational(self.0 + rhs.0)
    }
}

impl<'a> Add<&'a Rational> for Rational {
    type Output = Rational;
    fn add(self, rhs: &'a Rational) -> Rational {
        Rational(self.0 + &rhs.0)
    }
}

impl Sub for Rational {
    type Output = Rational;
    fn sub(self, rhs: Rational) -> Rational {
        Rational(self.0 - rhs.0)
    }
}

impl<'a> Sub<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn sub(self, rhs: &'a Rational) -> Rational {
        Rational(&self.0 - &rhs.0)
    }
}

impl Mul for Rational {
    type Output = Rational;
    fn mul(self, rhs: Rational) -> Rational {
        Rational(self.0 * rhs.0)
    }
}

impl<'a> Mul<&'a Rational> for &'a Rational {
    type Output = Rational;
    fn mul(self, rhs: &'a Rational) -> Rational {
        Rational(&self.0 * &rhs.0)
    }
}

impl Div for Rational {
    type Output = Rational;
    fn div(self, rhs: Rational) -> Rational {
        assert!(!rhs.0.is_zero(), "division by zero rational");
        Rational(self.0 / rhs.0)
    }
}

impl std::iter::Sum for Rational {
    fn sum<I: Iterator<Item = Rational>>(iter: I) -> Rational {
        iter.fold(Rational::zero(), |acc, x| acc + x)
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

struct RationalVisitor;

impl Visitor<'_> for RationalVisitor {
    type Value = Rational;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a rational as \"n/d\", integer, decimal string, or float")
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Rational, E> {
        Ok(Rational::int(v))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Rational, E> {
        Ok(Rational(BigRational::from_integer(BigInt::from(v))))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Rational, E> {
        Rational::from_f64_lossy(v).map_err(de::Error::custom)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Rational, E> {
        Rational::parse(v).map_err(de::Error::custom)
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Rational, D::Error> {
        deserializer.deserialize_any(RationalVisitor)
    }
}
