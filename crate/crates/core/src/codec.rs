//! Bit-exact text encoding of `f64` values as lowercase hex of their
//! big-endian IEEE-754 bit patterns.

pub fn encode(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn encode_all(vs: &[f64]) -> Vec<String> {
    vs.iter().copied().map(encode).collect()
}

pub fn decode(s: &str) -> Option<f64> {
    if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

/// Decodes every entry, returning the index of the first bad one on failure.
pub fn decode_all(vs: &[String]) -> Result<Vec<f64>, usize> {
    vs.iter()
        .enumerate()
        .map(|(i, s)| decode(s).ok_or(i))
        .collect()
}
