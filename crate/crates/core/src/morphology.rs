//! Binary morphology with disc structuring elements.
//!
//! Out-of-bounds neighbors are ignored by both erosion and dilation, which
//! keeps the two exact duals of each other on every raster.

use crate::geometry::Mask;

/// Offsets `(du, dv)` with `du² + dv² ≤ radius²`.
pub fn disc_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dv in -r..=r {
        for du in -r..=r {
            if du * du + dv * dv <= r * r {
                out.push((du, dv));
            }
        }
    }
    out
}

pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offsets = disc_offsets(radius);
    let mut out = Mask::new(mask.width(), mask.height(), false);
    for (u, v, &set) in mask.iter_cells() {
        if !set {
            continue;
        }
        let keep = offsets.iter().all(|&(du, dv)| {
            let (x, y) = (u as i64 + du, v as i64 + dv);
            !mask.in_bounds(x, y) || *mask.get(x as usize, y as usize)
        });
        if keep {
            out.set(u, v, true);
        }
    }
    out
}

pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offsets = disc_offsets(radius);
    let mut out = Mask::new(mask.width(), mask.height(), false);
    for (u, v, &set) in mask.iter_cells() {
        if !set {
            continue;
        }
        for &(du, dv) in &offsets {
            let (x, y) = (u as i64 + du, v as i64 + dv);
            if mask.in_bounds(x, y) {
                out.set(x as usize, y as usize, true);
            }
        }
    }
    out
}

/// Erosion followed by dilation.
pub fn open(mask: &Mask, radius: usize) -> Mask {
    dilate(&erode(mask, radius), radius)
}

pub fn complement(mask: &Mask) -> Mask {
    mask.map(|b| !b)
}
