//! Column-major, 1-indexed run-length encoding of binary masks.

use super::Mask;
use crate::error::{Error, Result};

/// `"start length start length ..."`, empty for an empty mask.
pub fn encode(mask: &Mask) -> String {
    let (h, w) = (mask.h, mask.w);
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for x in 0..w {
        for y in 0..h {
            let pos = x * h + y + 1;
            if mask.get(y, x) == 1 {
                current = match current {
                    Some((start, len)) => Some((start, len + 1)),
                    None => Some((pos, 1)),
                };
            } else if let Some(run) = current.take() {
                runs.push(run);
            }
        }
    }
    runs.extend(current);
    runs.iter().map(|(s, l)| format!("{s} {l}")).collect::<Vec<_>>().join(" ")
}

pub fn decode(text: &str, h: usize, w: usize) -> Result<Mask> {
    let nums = text
        .split_ascii_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("RLE token {t:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if nums.len() % 2 != 0 {
        return Err(Error::Parse("RLE needs an even number of values".into()));
    }
    let total = h * w;
    let mut mask = Mask::empty(h, w);
    let mut next_free = 1;
    for pair in nums.chunks_exact(2) {
        let (start, len) = (pair[0], pair[1]);
        if start == 0 || len == 0 {
            return Err(Error::Parse(format!("RLE run {start} {len}: starts are 1-indexed and lengths positive")));
        }
        if start < next_free {
            return Err(Error::Parse(format!("RLE run at {start} overlaps or is out of order")));
        }
        let end = start + len - 1;
        if end > total {
            return Err(Error::Parse(format!("RLE run {start} {len} exceeds {total} pixels")));
        }
        for pos in start..=end {
            let i = pos - 1;
            let (x, y) = (i / h, i % h);
            mask.data[y * w + x] = 1;
        }
        next_free = end + 1;
    }
    Ok(mask)
}
