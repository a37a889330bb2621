//! Segment layouts `[X; Z; Y]` and the bottleneck attention mask.
//!
//! Rows of the mask are query positions and columns are key positions:
//!
//! * `X` rows attend causally within `X`;
//! * `Z` rows attend to all of `X` and causally within `Z`;
//! * `Y` rows attend to all of `Z` and causally within `Y`, never to `X`.
//!
//! The last rule is the information cut-off: every path from an input token
//! to a target token has to pass through a bottleneck token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Mask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("bottleneck absent: y_len = {y_len} requires z_len >= 1")]
    BottleneckAbsent { y_len: usize },
    #[error("empty input has no representation")]
    EmptyInput,
    #[error("compression ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("layout needs {total} positions but max_seq_len is {max}")]
    TooLong { total: usize, max: usize },
}

/// Segment lengths of a packed `[X; Z; Y]` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentLayout {
    x_len: usize,
    z_len: usize,
    y_len: usize,
}

impl SegmentLayout {
    pub fn new(x_len: usize, z_len: usize, y_len: usize) -> Result<Self, LayoutError> {
        if y_len >= 1 && z_len == 0 {
            return Err(LayoutError::BottleneckAbsent { y_len });
        }
        Ok(Self {
            x_len,
            z_len,
            y_len,
        })
    }

    /// Layout check against a model's context length.
    pub fn fits(&self, max_seq_len: usize) -> Result<(), LayoutError> {
        if self.total() > max_seq_len {
            return Err(LayoutError::TooLong {
                total: self.total(),
                max: max_seq_len,
            });
        }
        Ok(())
    }

    pub fn x_len(&self) -> usize {
        self.x_len
    }

    pub fn z_len(&self) -> usize {
        self.z_len
    }

    pub fn y_len(&self) -> usize {
        self.y_len
    }

    pub fn total(&self) -> usize {
        self.x_len + self.z_len + self.y_len
    }

    pub fn x_range(&self) -> std::ops::Range<usize> {
        0..self.x_len
    }

    pub fn z_range(&self) -> std::ops::Range<usize> {
        self.x_len..self.x_len + self.z_len
    }

    pub fn y_range(&self) -> std::ops::Range<usize> {
        self.x_len + self.z_len..self.total()
    }

    /// Contiguous position ids `0..total`.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.total()).collect()
    }
}

/// Number of input tokens per bottleneck token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompressionPolicy {
    ratio: f64,
}

impl CompressionPolicy {
    pub fn new(ratio: f64) -> Result<Self, LayoutError> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(LayoutError::InvalidRatio(ratio));
        }
        Ok(Self { ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// `max(1, ceil(x_len / R))`.
    pub fn z_count(&self, x_len: usize) -> Result<usize, LayoutError> {
        if x_len == 0 {
            return Err(LayoutError::EmptyInput);
        }
        let z = (x_len as f64 / self.ratio).ceil() as usize;
        Ok(z.max(1))
    }
}

/// Attention mask built from a [`SegmentLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct IbMask {
    mask: Mask,
    layout: SegmentLayout,
}

impl IbMask {
    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn layout(&self) -> SegmentLayout {
        self.layout
    }

    pub fn into_mask(self) -> Mask {
        self.mask
    }
}

/// Builds the bottleneck mask. `block_z_to_x` additionally cuts `Z` rows off
/// from `X`; it exists for diagnostics (no information can reach `Y`).
pub fn build_ib_mask(layout: SegmentLayout, block_z_to_x: bool) -> Result<IbMask, LayoutError> {
    // re-validate in case the layout was deserialized
    let layout = SegmentLayout::new(layout.x_len, layout.z_len, layout.y_len)?;
    let (xr, zr, yr) = (layout.x_range(), layout.z_range(), layout.y_range());
    let n = layout.total();
    let mask = Mask::from_fn(n, n, |i, j| {
        if xr.contains(&i) {
            j <= i
        } else if zr.contains(&i) {
            (xr.contains(&j) && !block_z_to_x) || (zr.contains(&j) && j <= i)
        } else {
            debug_assert!(yr.contains(&i));
            zr.contains(&j) || (yr.contains(&j) && j <= i)
        }
    });
    Ok(IbMask { mask, layout })
}

/// `[X; Z]` layout used for encoding (no target segment).
pub fn build_stage2_layout(
    x_len: usize,
    policy: &CompressionPolicy,
) -> Result<SegmentLayout, LayoutError> {
    let z = policy.z_count(x_len)?;
    SegmentLayout::new(x_len, z, 0)
}

/// Index of the last bottleneck token, whose hidden state is the embedding.
pub fn embedding_position(layout: &SegmentLayout) -> Result<usize, LayoutError> {
    if layout.z_len == 0 {
        return Err(LayoutError::BottleneckAbsent {
            y_len: layout.y_len,
        });
    }
    Ok(layout.x_len + layout.z_len - 1)
}
