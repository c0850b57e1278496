//! Binary modality masks: 1 where a modality carries data, 0 in blackout regions.

use crate::error::{Error, Result};
use ndarray::{Array2, Array4};

/// A binary {0,1} map over image or feature pixels. The resolution is carried
/// by the array dimensions; consumers validate it against their own shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityMask {
    data: Array2<u8>,
}

impl ModalityMask {
    /// Wraps a map, rejecting any entry outside {0,1}.
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::validation("mask entries must be 0 or 1"));
        }
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::validation("mask must be non-empty"));
        }
        Ok(Self { data })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            data: Array2::ones((h, w)),
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array2::zeros((h, w)),
        }
    }

    /// Builds a mask from a predicate over (row, col).
    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            data: Array2::from_shape_fn((h, w), |(y, x)| u8::from(f(y, x))),
        }
    }

    pub fn h(&self) -> usize {
        self.data.nrows()
    }

    pub fn w(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[[y, x]]
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn is_all_one(&self) -> bool {
        self.data.iter().all(|&v| v == 1)
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }
}

/// Area-downsamples a mask to (target_h, target_w): each output cell covers the
/// source block [⌊i·h/th⌋, ⌊(i+1)·h/th⌋) × [⌊j·w/tw⌋, ⌊(j+1)·w/tw⌋) and becomes
/// 1 iff the block mean is ≥ 0.5 (ties round to 1).
pub fn downsample_mask(mask: &ModalityMask, target_h: usize, target_w: usize) -> Result<ModalityMask> {
    let (h, w) = (mask.h(), mask.w());
    if target_h == 0 || target_w == 0 {
        return Err(Error::validation("downsample target must be non-empty"));
    }
    if target_h > h || target_w > w {
        return Err(Error::validation(format!(
            "downsample target {target_h}x{target_w} exceeds source {h}x{w}"
        )));
    }
    let data = Array2::from_shape_fn((target_h, target_w), |(i, j)| {
        let y0 = i * h / target_h;
        let y1 = (i + 1) * h / target_h;
        let x0 = j * w / target_w;
        let x1 = (j + 1) * w / target_w;
        let mut sum = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += usize::from(mask.get(y, x));
            }
        }
        let area = (y1 - y0) * (x1 - x0);
        u8::from(2 * sum >= area)
    });
    ModalityMask::new(data)
}

/// Zeroes feature positions where the per-item mask is 0, broadcasting over
/// channels: out[b,c,y,x] = m_b[y,x] · f[b,c,y,x].
pub fn apply_mask(f: &Array4<f64>, masks: &[ModalityMask]) -> Result<Array4<f64>> {
    let (b, _c, h, w) = f.dim();
    if masks.len() != b {
        return Err(Error::validation(format!(
            "got {} masks for batch of {b}",
            masks.len()
        )));
    }
    for m in masks {
        if m.h() != h || m.w() != w {
            return Err(Error::validation(format!(
                "mask {}x{} does not match feature map {h}x{w}",
                m.h(),
                m.w()
            )));
        }
    }
    let mut out = f.clone();
    for (bi, m) in masks.iter().enumerate() {
        for (c, mut plane) in out
            .index_axis_mut(ndarray::Axis(0), bi)
            .outer_iter_mut()
            .enumerate()
        {
            let _ = c;
            plane.indexed_iter_mut().for_each(|((y, x), v)| {
                if m.get(y, x) == 0 {
                    *v = 0.0;
                }
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary() {
        let arr = Array2::from_shape_fn((2, 2), |_| 3u8);
        assert!(ModalityMask::new(arr).is_err());
    }

    #[test]
    fn downsample_rejects_upscale() {
        let m = ModalityMask::ones(4, 4);
        assert!(downsample_mask(&m, 8, 4).is_err());
    }
}
