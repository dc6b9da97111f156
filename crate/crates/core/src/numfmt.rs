//! Fixed 9-significant-digit decimal rendering shared by every report file.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

pub const SIG_DIGITS: usize = 9;

/// Renders `x` as a plain decimal with exactly 9 significant digits,
/// e.g. `0.695800000`, `12.3456789`, `-0.0500000000`.
pub fn sig9(x: f64) -> String {
    assert!(x.is_finite(), "cannot render non-finite value {x}");
    if x == 0.0 {
        return format!("0.{}", "0".repeat(SIG_DIGITS - 1));
    }
    // `{:.8e}` rounds correctly, including carries like 9.999999999 -> 1.00000000e1
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let body = if exp < 0 {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    } else {
        let int_len = exp as usize + 1;
        if int_len >= digits.len() {
            format!("{}{}", digits, "0".repeat(int_len - digits.len()))
        } else {
            format!("{}.{}", &digits[..int_len], &digits[int_len..])
        }
    };
    format!("{sign}{body}")
}

/// An `f64` that serializes to JSON as its [`sig9`] rendering.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Sig9(pub f64);

impl Serialize for Sig9 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(sig9(self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Sig9 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        f64::deserialize(deserializer).map(Sig9)
    }
}

/// `serialize_with` adapter for plain `f64` fields.
pub fn ser_f64<S: Serializer>(x: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    Sig9(*x).serialize(serializer)
}

/// `serialize_with` adapter for maps of `f64` values.
pub fn ser_f64_map<K, S>(map: &std::collections::BTreeMap<K, f64>, serializer: S) -> Result<S::Ok, S::Error>
where
    K: Serialize,
    S: Serializer,
{
    use serde::ser::SerializeMap;
    let mut out = serializer.serialize_map(Some(map.len()))?;
    for (k, v) in map {
        out.serialize_entry(k, &Sig9(*v))?;
    }
    out.end()
}

/// `serialize_with` adapter for optional `f64` fields.
pub fn ser_opt_f64<S: Serializer>(x: &Option<f64>, serializer: S) -> Result<S::Ok, S::Error> {
    x.map(Sig9).serialize(serializer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn renders_fixed_digits() {
        assert_eq!(sig9(0.6958), "0.695800000");
        assert_eq!(sig9(1.0), "1.00000000");
        assert_eq!(sig9(0.05), "0.0500000000");
        assert_eq!(sig9(-0.566666666666), "-0.566666667");
        assert_eq!(sig9(0.0), "0.00000000");
        assert_eq!(sig9(-0.0), "0.00000000");
        assert_eq!(sig9(9.9999999999), "10.0000000");
        assert_eq!(sig9(123456789012.0), "123456789000");
        assert_eq!(sig9(1.5e-7), "0.000000150000000");
    }

    #[test]
    fn json_uses_fixed_rendering() {
        let s = serde_json::to_string(&vec![Sig9(0.5), Sig9(1.0 / 3.0)]).unwrap();
        assert_eq!(s, "[0.500000000,0.333333333]");
        let back: Vec<Sig9> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[0].0, 0.5);
    }

    proptest! {
        #[test]
        fn nine_significant_digits(x in -1e12f64..1e12) {
            let s = sig9(x);
            let parsed: f64 = s.parse().unwrap();
            let rel = if x == 0.0 { parsed.abs() } else { ((parsed - x) / x).abs() };
            prop_assert!(rel <= 5e-9, "{x} -> {s}");
            let significant = s.trim_start_matches('-').replace('.', "");
            let significant = significant.trim_start_matches('0');
            prop_assert!(significant.len() == SIG_DIGITS || x.abs() >= 1e9 || parsed == 0.0, "{s}");
        }
    }
}
