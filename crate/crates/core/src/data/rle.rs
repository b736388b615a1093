//! Run-length encoded binary masks.
//!
//! Counts run over the row-major flattened mask and alternate between
//! background and foreground, always starting with a (possibly empty)
//! background run. Apart from that leading run, every run is non-empty, so
//! each dense mask has exactly one encoding.

use crate::error::{Result, WishError};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RleMask {
    width: u32,
    height: u32,
    counts: Vec<u32>,
}

impl RleMask {
    /// Builds a mask from raw counts, enforcing the canonical-form invariants.
    pub fn new(width: u32, height: u32, counts: Vec<u32>) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let area = width as u64 * height as u64;
        if total != area {
            return Err(WishError::Format(format!(
                "counts sum to {total}, expected {width}x{height} = {area}"
            )));
        }
        if counts.is_empty() {
            return Err(WishError::Format("empty counts".into()));
        }
        if counts.iter().skip(1).any(|&c| c == 0) {
            return Err(WishError::Format("zero-length run after the leading run".into()));
        }
        Ok(Self {
            width,
            height,
            counts,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            counts: vec![width * height],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.len() < 2
    }

    /// Foreground intervals `[start, end)` in flattened pixel coordinates.
    fn intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as u64;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(WishError::Shape(format!(
                "mask dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a && b)
    }

    /// Merges two run sequences under a pixelwise boolean operator.
    fn combine(&self, other: &Self, op: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check_dims(other)?;
        let area = self.width as u64 * self.height as u64;
        let mut runs = RunBuilder::default();
        let (mut ia, mut ib) = (0usize, 0usize);
        let (mut left_a, mut left_b) = (self.counts[0] as u64, other.counts[0] as u64);
        let mut pos = 0u64;
        while pos < area {
            while left_a == 0 {
                ia += 1;
                left_a = self.counts[ia] as u64;
            }
            while left_b == 0 {
                ib += 1;
                left_b = other.counts[ib] as u64;
            }
            let step = left_a.min(left_b);
            runs.push(op(ia % 2 == 1, ib % 2 == 1), step);
            left_a -= step;
            left_b -= step;
            pos += step;
        }
        Ok(runs.finish(self.width, self.height))
    }
}

#[derive(Default)]
struct RunBuilder {
    counts: Vec<u32>,
    current: bool,
}

impl RunBuilder {
    fn push(&mut self, value: bool, len: u64) {
        if len == 0 {
            return;
        }
        if self.counts.is_empty() {
            self.counts.push(0);
        }
        if value != self.current {
            self.counts.push(0);
            self.current = value;
        }
        *self.counts.last_mut().unwrap() += len as u32;
    }

    fn finish(mut self, width: u32, height: u32) -> RleMask {
        if self.counts.is_empty() {
            self.counts.push(0);
        }
        RleMask {
            width,
            height,
            counts: self.counts,
        }
    }
}

pub fn encode_rle(mask: &[bool], width: u32, height: u32) -> Result<RleMask> {
    if mask.len() as u64 != width as u64 * height as u64 {
        return Err(WishError::Shape(format!(
            "{} pixels for a {width}x{height} mask",
            mask.len()
        )));
    }
    let mut runs = RunBuilder::default();
    for &px in mask {
        runs.push(px, 1);
    }
    Ok(runs.finish(width, height))
}

pub fn decode_rle(mask: &RleMask) -> Result<Vec<bool>> {
    // Masks are only constructible in canonical form, so this cannot fail;
    // malformed counts are rejected by `RleMask::new`.
    let mut out = Vec::with_capacity(mask.width as usize * mask.height as usize);
    for (i, &c) in mask.counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    Ok(out)
}

pub fn mask_intersection_area(a: &RleMask, b: &RleMask) -> Result<u64> {
    a.check_dims(b)?;
    let mut total = 0u64;
    let mut bi = b.intervals().peekable();
    for (s, e) in a.intervals() {
        while let Some(&(bs, be)) = bi.peek() {
            if be <= s {
                bi.next();
                continue;
            }
            if bs >= e {
                break;
            }
            total += e.min(be) - s.max(bs);
            if be <= e {
                bi.next();
            } else {
                break;
            }
        }
    }
    Ok(total)
}

pub fn mask_union_area(a: &RleMask, b: &RleMask) -> Result<u64> {
    let inter = mask_intersection_area(a, b)?;
    Ok(a.area() + b.area() - inter)
}

/// IoU of two masks; two empty masks agree perfectly and score 1.
pub fn mask_iou(a: &RleMask, b: &RleMask) -> Result<f64> {
    let inter = mask_intersection_area(a, b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Axis-aligned filled rectangle `[x0, x1) × [y0, y1)`, clipped to the image.
pub fn rect_mask(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> RleMask {
    let (x1, y1) = (x1.min(width), y1.min(height));
    let mut runs = RunBuilder::default();
    for y in 0..height {
        if y < y0 || y >= y1 || x0 >= x1 {
            runs.push(false, width as u64);
        } else {
            runs.push(false, x0 as u64);
            runs.push(true, (x1 - x0) as u64);
            runs.push(false, (width - x1) as u64);
        }
    }
    runs.finish(width, height)
}
