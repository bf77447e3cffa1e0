//! Parsers for command-line size arguments.

use crate::error::{Error, Result};

/// Largest accepted side length.
pub const MAX_SIZE: usize = 1 << 16;

fn side(s: &str) -> Result<usize> {
    let t = s.trim();
    if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Config(format!("`{s}` is not a positive integer")));
    }
    let v: usize = t.parse().map_err(|_| Error::Config(format!("`{s}` is out of range")))?;
    if v == 0 || v > MAX_SIZE {
        return Err(Error::Config(format!("size {v} outside 1..={MAX_SIZE}")));
    }
    Ok(v)
}

/// `"224"` or `"256x192"` (height × width) to `(h, w)`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((side(h)?, side(w)?)),
        None => {
            let v = side(s)?;
            Ok((v, v))
        }
    }
}

/// Comma-separated square sizes, e.g. `"224,448,896"`.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    let sizes = s.split(',').map(side).collect::<Result<Vec<_>>>()?;
    if sizes.is_empty() {
        return Err(Error::Config("empty size list".into()));
    }
    Ok(sizes)
}
