//! Deterministic number formatting and JSON emission.

use std::fs;
use std::io::Write;
use std::path::Path as FsPath;

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// Significant digits kept in every emitted number.
pub const SIGNIFICANT_DIGITS: usize = 12;

/// Formats like C's `%.12g`: shortest of fixed or scientific, trailing zeros stripped.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if exp < -4 || exp >= SIGNIFICANT_DIGITS as i32 {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to 12 significant digits; non-finite values pass through.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().unwrap_or(x)
}

/// Rounds every float in a JSON tree.
pub fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            if x.fract() == 0.0 && x.abs() < 1e15 {
                serde_json::json!(x)
            } else {
                serde_json::Number::from_f64(round_sig(x)).map(Value::Number).unwrap_or_else(|| Value::String(fmt_num(x)))
            }
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with rounded floats, sorted keys and a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = round_json(serde_json::to_value(value)?);
    let mut s = match &v {
        Value::Array(a) if a.is_empty() => "[]".to_string(),
        _ => serde_json::to_string_pretty(&v)?,
    };
    s.push('\n');
    Ok(s)
}

/// Writes `value` as JSON to `path`, creating parent directories.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &FsPath) -> Result<()> {
    let text = to_json_string(value)?;
    write_bytes(path, text.as_bytes())
}

pub(crate) fn write_bytes(path: &FsPath, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_style() {
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(-0.5), "-0.5");
        assert_eq!(fmt_num(0.1 + 0.2), "0.3");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(1e-5), "1e-05");
        assert_eq!(fmt_num(1.5e20), "1.5e+20");
        assert_eq!(fmt_num(123456789012.0), "123456789012");
        assert_eq!(fmt_num(1234567890123.0), "1.23456789012e+12");
        assert_eq!(fmt_num(0.0001), "0.0001");
        assert_eq!(fmt_num(f64::NAN), "NaN");
        assert_eq!(fmt_num(1.025315120524429), "1.02531512052");
    }

    #[test]
    fn json_rounding() {
        let s = to_json_string(&serde_json::json!({"b": 0.1 + 0.2, "a": 3})).unwrap();
        assert!(s.contains("0.3") && !s.contains("0.30000000000000004"));
        assert_eq!(to_json_string(&Vec::<f64>::new()).unwrap(), "[]\n");
        assert_eq!(to_json_string(&serde_json::json!({"x": f64::NAN})).unwrap(), "{\n  \"x\": null\n}\n");
    }
}
