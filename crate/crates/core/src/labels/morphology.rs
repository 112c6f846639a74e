//! Binary morphology with square structuring elements.
//!
//! Both operations are separable: a row pass followed by a column pass, each
//! a sliding-window count. Pixels outside the raster never set a dilated
//! pixel and never clear an eroded one, so closing is extensive.

use crate::raster::Raster;

fn sliding_pass(mask: &Raster<bool>, size: usize, horizontal: bool, all: bool) -> Raster<bool> {
    let (w, h) = (mask.width(), mask.height());
    let r = size / 2;
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let mut out = Raster::filled(w, h, false);
    let at = |line: usize, i: usize| if horizontal { (line, i) } else { (i, line) };
    let mut prefix = vec![0usize; len + 1];
    for line in 0..lines {
        for i in 0..len {
            let (row, col) = at(line, i);
            prefix[i + 1] = prefix[i] + usize::from(*mask.get(row, col));
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            let count = prefix[hi] - prefix[lo];
            let set = if all { count == hi - lo } else { count > 0 };
            if set {
                let (row, col) = at(line, i);
                out.set(row, col, true);
            }
        }
    }
    out
}

pub fn dilate(mask: &Raster<bool>, size: usize) -> Raster<bool> {
    if size <= 1 {
        return mask.clone();
    }
    let tmp = sliding_pass(mask, size, true, false);
    sliding_pass(&tmp, size, false, false)
}

pub fn erode(mask: &Raster<bool>, size: usize) -> Raster<bool> {
    if size <= 1 {
        return mask.clone();
    }
    let tmp = sliding_pass(mask, size, true, true);
    sliding_pass(&tmp, size, false, true)
}

/// Dilation followed by erosion.
pub fn close(mask: &Raster<bool>, dilation: usize, erosion: usize) -> Raster<bool> {
    erode(&dilate(mask, dilation), erosion)
}
