//! C99-style hexadecimal float text (`0x1.8p+1`), used wherever a text file
//! must carry an `f64` without loss.

use crate::error::{PtqError, Result};

pub fn format(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && mantissa == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 {
        (0, -1022)
    } else {
        (1, exp_bits - 1023)
    };
    let mut frac = format!("{mantissa:013x}");
    while frac.ends_with('0') {
        frac.pop();
    }
    let dot = if frac.is_empty() { "" } else { "." };
    let esign = if exp >= 0 { "+" } else { "-" };
    format!("{sign}0x{lead}{dot}{frac}p{esign}{}", exp.abs())
}

pub fn parse(s: &str) -> Result<f64> {
    let bad = || PtqError::Format(format!("bad hex float {s:?}"));
    match s {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (negative, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let (mant, exp) = rest.split_once('p').ok_or_else(bad)?;
    let exp: i64 = exp.parse().map_err(|_| bad())?;
    let (lead, frac) = mant.split_once('.').unwrap_or((mant, ""));
    if lead.len() != 1 || frac.len() > 13 {
        return Err(bad());
    }
    let lead = u64::from_str_radix(lead, 16).map_err(|_| bad())?;
    let frac_bits = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(frac, 16).map_err(|_| bad())? << (4 * (13 - frac.len()))
    };
    let bits = match lead {
        0 if frac_bits == 0 => 0,
        0 if exp == -1022 => frac_bits,
        1 if (-1022..=1023).contains(&exp) => (((exp + 1023) as u64) << 52) | frac_bits,
        _ => return Err(bad()),
    };
    let v = f64::from_bits(bits);
    Ok(if negative { -v } else { v })
}
