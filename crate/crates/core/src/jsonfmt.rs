//! Deterministic 12-significant-digit float formatting for persisted JSON
//! and CSV artifacts.
//!
//! Reports and world/LM snapshots round every float to 12 significant digits
//! before writing. The rounding is idempotent, so re-serializing a parsed
//! document is byte-identical, and 12 digits comfortably exceeds every
//! tolerance the artifacts are consumed at.

/// Round to 12 significant digits (decimal).
pub fn round12(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Round every number inside a JSON value, in place.
pub fn round_json(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.is_f64() {
                    if let Some(r) = serde_json::Number::from_f64(round12(f)) {
                        *n = r;
                    }
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_json),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Serialize with all floats rounded to 12 significant digits, pretty,
/// trailing newline. Field order follows the struct, so output is stable.
pub fn to_json_string<T: serde::Serialize>(value: &T) -> crate::Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_json(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// CSV cell for a float: 12 significant digits, scientific.
pub fn csv_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.11e}")
    } else {
        format!("{x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_idempotent() {
        for &x in &[
            std::f64::consts::PI,
            1.0 / 3.0,
            6.626e-34,
            -123456.789012345,
            1e300,
            5e-324,
        ] {
            let once = round12(x);
            assert_eq!(once, round12(once));
        }
        assert_eq!(round12(0.25), 0.25);
        assert_eq!(round12(0.0), 0.0);
    }

    #[test]
    fn roundtrip_json_stable() {
        let mut v = serde_json::json!({"a": [0.1 + 0.2, 1.0], "b": {"c": 2.0f64.sqrt()}});
        round_json(&mut v);
        let s1 = serde_json::to_string(&v).unwrap();
        let mut v2: serde_json::Value = serde_json::from_str(&s1).unwrap();
        round_json(&mut v2);
        assert_eq!(s1, serde_json::to_string(&v2).unwrap());
    }
}
