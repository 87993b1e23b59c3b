//! Fixed-edge histograms of per-sample step counts.

use std::io::Write;

use crate::error::{invalid, Result};

pub const HIST_EDGES: [usize; 9] = [0, 2, 4, 8, 12, 16, 20, 24, 28];

/// Counts per bin `[e_i, e_{i+1})`; the last bin also takes its upper edge
/// and anything beyond.
pub fn bin_counts(values: &[usize]) -> Vec<usize> {
    let mut out = vec![0; HIST_EDGES.len() - 1];
    for &v in values {
        let b = HIST_EDGES.windows(2).position(|w| v < w[1]).unwrap_or(out.len() - 1);
        out[b] += 1;
    }
    out
}

pub fn write_histogram(w: &mut impl Write, values: &[usize]) -> Result<()> {
    if values.is_empty() {
        return invalid("histogram of nothing");
    }
    writeln!(w, "bin_lo,bin_hi,count")?;
    for (i, c) in bin_counts(values).iter().enumerate() {
        writeln!(w, "{},{},{}", HIST_EDGES[i], HIST_EDGES[i + 1], c)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges() {
        assert_eq!(bin_counts(&[0, 1, 2, 27, 28]), vec![2, 1, 0, 0, 0, 0, 0, 2]);
    }
}
