use std::cmp::Ordering;

use crate::attnagg::LabelMap;
use crate::geometry::Grid;

pub const OTSU_BINS: usize = 256;

/// Foreground mask produced by [`binarize`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: Grid<bool>,
    pub threshold: f64,
}

impl BinaryMask {
    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn count(&self) -> usize {
        self.grid.as_slice().iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.grid.as_slice().iter().any(|&b| b)
    }
}

/// Min-max rescale to `[0, 1]`. Constant maps are returned unchanged.
pub fn normalize_map(m: &LabelMap) -> LabelMap {
    let values = m.values();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() || lo >= hi {
        return m.clone();
    }
    let range = hi - lo;
    LabelMap {
        grid: m.grid.map(|&v| ((v - lo) / range).clamp(0.0, 1.0)),
        ..m.clone()
    }
}

/// Histogram bin of a value in `[0, 1]`.
///
/// Bin 0 covers `[0, 1/256]` and bin `i > 0` covers `(i/256, (i+1)/256]`, so a
/// value lands in a bin `>= k` exactly when it is `> k/256`, matching the strict
/// comparison in [`binarize`].
#[inline]
pub fn histogram_bin(v: f64) -> usize {
    let b = (v * OTSU_BINS as f64).ceil() - 1.0;
    if b <= 0.0 {
        0
    } else if b >= (OTSU_BINS - 1) as f64 {
        OTSU_BINS - 1
    } else {
        b as usize
    }
}

/// Otsu's threshold over a 256-bin histogram of `values` (expected in `[0, 1]`).
///
/// Candidates are the interior bin edges `k/256`, `k = 1..=255`; the winner
/// maximizes the between-class variance of bin indices, evaluated in exact
/// integer arithmetic, with ties going to the lower edge. If no edge splits
/// the values into two non-empty classes the maximum value is returned, so a
/// constant map yields its constant and binarizes to an empty mask.
pub fn otsu_threshold_values(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return 0.0;
    }
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[histogram_bin(v)] += 1;
    }
    let total: u64 = values.len() as u64;
    let total_sum: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    // criterion(k) = (N * S0 - N0 * S)^2 / (N0 * N1), proportional to the
    // between-class variance.
    let mut best: Option<(usize, U384, u128)> = None;
    let mut n0: u64 = 0;
    let mut s0: u128 = 0;
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as u128 - 1) * hist[k - 1] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let a = total as u128 * s0;
        let b = n0 as u128 * total_sum;
        let diff = a.abs_diff(b);
        let num = U384::square(diff);
        let den = n0 as u128 * n1 as u128;
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => num.mul(*bd).cmp(&bn.mul(den)) == Ordering::Greater,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    match best {
        Some((k, _, _)) => k as f64 / OTSU_BINS as f64,
        None => max,
    }
}

pub fn otsu_threshold(m: &LabelMap) -> f64 {
    otsu_threshold_values(m.values())
}

/// Foreground iff value `>` threshold.
pub fn binarize(m: &LabelMap, threshold: f64) -> BinaryMask {
    BinaryMask {
        grid: m.grid.map(|&v| v > threshold),
        threshold,
    }
}

/// Unsigned integer of up to 384 bits, little-endian u64 limbs; just enough
/// to compare `(a^2) * d` products exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct U384([u64; 6]);

impl U384 {
    fn from_u128(v: u128) -> [u64; 2] {
        [v as u64, (v >> 64) as u64]
    }

    fn mul_limbs(a: &[u64], b: &[u64]) -> [u64; 6] {
        let mut out = [0u64; 6];
        for (i, &x) in a.iter().enumerate() {
            let mut carry: u128 = 0;
            for (j, &y) in b.iter().enumerate() {
                if i + j >= 6 {
                    break;
                }
                let cur = out[i + j] as u128 + x as u128 * y as u128 + carry;
                out[i + j] = cur as u64;
                carry = cur >> 64;
            }
            let mut idx = i + b.len();
            while carry > 0 && idx < 6 {
                let cur = out[idx] as u128 + carry;
                out[idx] = cur as u64;
                carry = cur >> 64;
                idx += 1;
            }
        }
        out
    }

    fn square(v: u128) -> Self {
        let l = Self::from_u128(v);
        U384(Self::mul_limbs(&l, &l))
    }

    fn mul(&self, v: u128) -> Self {
        // self < 2^256 in practice (a^2 with a < 2^128), times v < 2^128
        U384(Self::mul_limbs(&self.0[..4], &Self::from_u128(v)))
    }
}

impl PartialOrd for U384 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for U384 {
    fn cmp(&self, other: &Self) -> Ordering {
        for i in (0..6).rev() {
            match self.0[i].cmp(&other.0[i]) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }
}
