//! Aggregation of raw cross-attention maps into one map per label.
//!
//! For token `t`, `A_t = (1 / JK) * sum_{j,k} A'_{jkt}` after every block has
//! been resampled to a common grid. For a label spanning tokens `S`,
//! `A_l = clamp((1 / |S|) * sum_{t in S} A_t, 0, 1)`.
//!
//! Sums run in `f64`, `j` ascending then `k` ascending, so results are
//! bit-reproducible.

use crate::dataio::AttentionStack;
use crate::error::{Error, Result};
use crate::geometry::Grid;

/// Average attention of one prompt token over all timesteps and blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub token: usize,
    pub grid: Grid<f64>,
}

/// Aggregated attention map of one label, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub label: String,
    pub image_id: String,
    pub grid: Grid<f64>,
}

impl LabelMap {
    pub fn new(label: impl Into<String>, image_id: impl Into<String>, grid: Grid<f64>) -> Self {
        Self {
            label: label.into(),
            image_id: image_id.into(),
            grid,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn values(&self) -> &[f64] {
        self.grid.as_slice()
    }
}

/// A stack viewed on one common grid, the largest block height and width present.
///
/// Blocks already at the target size pass through unchanged; the others are
/// resampled on demand so a full `J x K x T` copy is never materialized.
#[derive(Debug, Clone, Copy)]
pub struct AlignedStack<'a> {
    stack: &'a AttentionStack,
    target: (usize, usize),
}

pub fn align_maps(stack: &AttentionStack) -> AlignedStack<'_> {
    let blocks = &stack.header().blocks;
    let h = blocks.iter().map(|b| b.0).max().unwrap_or(1);
    let w = blocks.iter().map(|b| b.1).max().unwrap_or(1);
    AlignedStack {
        stack,
        target: (h, w),
    }
}

impl<'a> AlignedStack<'a> {
    pub fn stack(&self) -> &'a AttentionStack {
        self.stack
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    /// Map of token `t` at timestep `j`, block `k`, on the target grid.
    pub fn map(&self, j: usize, k: usize, t: usize) -> Grid<f64> {
        let (th, tw) = self.target;
        let src = self.stack.map(j, k, t);
        let dims = self.stack.block_dims(k);
        let data = if dims == self.target {
            src.iter().map(|&v| v as f64).collect()
        } else {
            let src: Vec<f64> = src.iter().map(|&v| v as f64).collect();
            resample_bilinear(&src, dims, self.target)
        };
        Grid::from_vec(th, tw, data)
    }

    fn accumulate(&self, j: usize, k: usize, t: usize, acc: &mut [f64]) {
        let dims = self.stack.block_dims(k);
        let src = self.stack.map(j, k, t);
        if dims == self.target {
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += v as f64;
            }
        } else {
            let src: Vec<f64> = src.iter().map(|&v| v as f64).collect();
            for (a, v) in acc.iter_mut().zip(resample_bilinear(&src, dims, self.target)) {
                *a += v;
            }
        }
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
///
/// Output values stay within the range of their four source samples, so the
/// output min/max never exceed the input min/max.
pub fn resample_bilinear(src: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let (h, w) = from;
    let (th, tw) = to;
    assert_eq!(src.len(), h * w, "source length");
    if from == to {
        return src.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let rows = axis(h, th);
    let cols = axis(w, tw);
    let mut out = Vec::with_capacity(th * tw);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = lerp(src[r0 * w + c0], src[r0 * w + c1], fx);
            let bottom = lerp(src[r1 * w + c0], src[r1 * w + c1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    out
}

#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    (a + f * (b - a)).clamp(a.min(b), a.max(b))
}

/// Mean of token `t`'s maps over every timestep and block.
pub fn average_token_maps(aligned: &AlignedStack<'_>, token: usize) -> Result<TokenMap> {
    let stack = aligned.stack;
    if token >= stack.tokens() {
        return Err(Error::TokenOutOfRange {
            token,
            tokens: stack.tokens(),
        });
    }
    let (th, tw) = aligned.target;
    let mut acc = vec![0.0f64; th * tw];
    for j in 0..stack.timesteps() {
        for k in 0..stack.num_blocks() {
            aligned.accumulate(j, k, token, &mut acc);
        }
    }
    let n = (stack.timesteps() * stack.num_blocks()) as f64;
    for v in &mut acc {
        *v /= n;
    }
    Ok(TokenMap {
        token,
        grid: Grid::from_vec(th, tw, acc),
    })
}

/// Clamped mean of the token maps in the label's span.
pub fn label_map(aligned: &AlignedStack<'_>, label: &str) -> Result<LabelMap> {
    let stack = aligned.stack;
    let span = stack.span(label).ok_or_else(|| Error::MissingSpan {
        image_id: stack.image_id().to_string(),
        label: label.to_string(),
    })?;
    let (th, tw) = aligned.target;
    let mut acc = vec![0.0f64; th * tw];
    for &t in span {
        let tm = average_token_maps(aligned, t)?;
        for (a, v) in acc.iter_mut().zip(tm.grid.as_slice()) {
            *a += v;
        }
    }
    let n = span.len() as f64;
    for v in &mut acc {
        *v = (*v / n).clamp(0.0, 1.0);
    }
    Ok(LabelMap::new(
        label,
        stack.image_id(),
        Grid::from_vec(th, tw, acc),
    ))
}
