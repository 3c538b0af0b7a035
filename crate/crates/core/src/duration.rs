//! Durations in configs: plain seconds or strings such as `"6h"`, `"7d"`.

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serializer};

use crate::error::{Error, Result};
use crate::types::{DAY, HOUR};

/// Parses `"90"`, `"90s"`, `"15m"`, `"6h"`, `"7d"` or `"1.5d"` into seconds.
pub fn parse(text: &str) -> Result<f64> {
    let t = text.trim();
    let (number, unit) = match t.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => (&t[..i], c),
        _ => (t, 's'),
    };
    let scale = match unit {
        's' => 1.0,
        'm' => 60.0,
        'h' => HOUR,
        'd' => DAY,
        'w' => 7.0 * DAY,
        _ => return Err(Error::Config(format!("unknown duration unit in `{text}`"))),
    };
    let value: f64 = number
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse duration `{text}`")))?;
    if !value.is_finite() {
        return Err(Error::Config(format!("duration `{text}` is not finite")));
    }
    Ok(value * scale)
}

struct Secs;

impl Visitor<'_> for Secs {
    type Value = f64;

    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str("seconds as a number or a string like \"7d\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
        parse(v).map_err(E::custom)
    }
}

#[derive(Deserialize)]
struct Wrapped(#[serde(deserialize_with = "deserialize")] f64);

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    d.deserialize_any(Secs)
}

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(*v)
}

/// The same, for lists of durations.
pub mod list {
    use super::*;

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Wrapped>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn units() {
        assert_eq!(parse("7d").unwrap(), 7.0 * DAY);
        assert_eq!(parse("6h").unwrap(), 6.0 * HOUR);
        assert_eq!(parse("90").unwrap(), 90.0);
        assert_eq!(parse("1.5d").unwrap(), 1.5 * DAY);
        assert_eq!(parse("2w").unwrap(), 14.0 * DAY);
        assert!(parse("3y").is_err());
        assert!(parse("d").is_err());
    }

    #[test]
    fn deserializes_numbers_and_strings() {
        #[derive(Deserialize)]
        struct T {
            #[serde(with = "super")]
            a: f64,
            #[serde(with = "super::list")]
            b: Vec<f64>,
        }
        let t: T = serde_json::from_str(r#"{"a": "6h", "b": [86400, "3d"]}"#).unwrap();
        assert_eq!(t.a, 6.0 * HOUR);
        assert_eq!(t.b, [DAY, 3.0 * DAY]);
    }
}
