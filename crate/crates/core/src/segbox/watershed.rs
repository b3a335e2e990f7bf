//! Marker-controlled watershed on the distance transform of a foreground mask.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use super::threshold::BinaryMask;
use crate::geometry::Grid;

/// Region id per pixel, 0 for background, `1..=count` for regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLabeling {
    pub grid: Grid<u32>,
    pub count: u32,
}

impl RegionLabeling {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            grid: Grid::filled(height, width, 0),
            count: 0,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    /// Pixel count of each region, indexed by `id - 1`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.count as usize];
        for &id in self.grid.as_slice() {
            if id > 0 {
                areas[id as usize - 1] += 1;
            }
        }
        areas
    }
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn neighbors(h: usize, w: usize, idx: usize) -> impl Iterator<Item = usize> {
    let r = (idx / w) as isize;
    let c = (idx % w) as isize;
    NEIGHBORS.iter().filter_map(move |&(dr, dc)| {
        let (nr, nc) = (r + dr, c + dc);
        if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
            Some(nr as usize * w + nc as usize)
        } else {
            None
        }
    })
}

/// Squared Euclidean distance from each foreground pixel to the nearest
/// background pixel; cells outside the grid count as background. Background
/// pixels get 0. Values are exact integers.
pub fn squared_distance_transform(mask: &Grid<bool>) -> Grid<f64> {
    let (h, w) = mask.dims();
    // pad by one background cell on every side
    let (ph, pw) = (h + 2, w + 2);
    let inf = ((ph * ph + pw * pw) as f64) * 4.0;
    let mut f = vec![0.0f64; ph * pw];
    for r in 0..h {
        for c in 0..w {
            if *mask.get(r, c) {
                f[(r + 1) * pw + c + 1] = inf;
            }
        }
    }
    let mut line = Vec::new();
    let mut out = Vec::new();
    for c in 0..pw {
        line.clear();
        line.extend((0..ph).map(|r| f[r * pw + c]));
        edt_1d(&line, &mut out);
        for r in 0..ph {
            f[r * pw + c] = out[r];
        }
    }
    for r in 0..ph {
        line.clear();
        line.extend_from_slice(&f[r * pw..(r + 1) * pw]);
        edt_1d(&line, &mut out);
        f[r * pw..(r + 1) * pw].copy_from_slice(&out);
    }
    let mut dt = Vec::with_capacity(h * w);
    for r in 0..h {
        dt.extend_from_slice(&f[(r + 1) * pw + 1..(r + 1) * pw + 1 + w]);
    }
    Grid::from_vec(h, w, dt)
}

/// Lower envelope of parabolas (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// 8-connected components of the foreground; 0 = background.
pub fn connected_components(mask: &Grid<bool>) -> (Grid<u32>, u32) {
    let (h, w) = mask.dims();
    let fg = mask.as_slice();
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for q in neighbors(h, w, p) {
                if fg[q] && labels[q] == 0 {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
    }
    (Grid::from_vec(h, w, labels), next)
}

/// A regional maximum of the distance transform: a connected plateau with no
/// higher foreground neighbor.
#[derive(Debug, Clone)]
struct Plateau {
    value: f64,
    pixels: Vec<usize>,
    component: u32,
}

fn regional_maxima(dt: &[f64], fg: &[bool], comps: &[u32], h: usize, w: usize) -> Vec<Plateau> {
    let mut visited = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !fg[start] || visited[start] {
            continue;
        }
        let value = dt[start];
        let mut pixels = Vec::new();
        let mut is_max = true;
        visited[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            for q in neighbors(h, w, p) {
                if !fg[q] {
                    continue;
                }
                if dt[q] > value {
                    is_max = false;
                } else if dt[q] == value && !visited[q] {
                    visited[q] = true;
                    queue.push_back(q);
                }
            }
        }
        if is_max {
            pixels.sort_unstable();
            out.push(Plateau {
                value,
                component: comps[pixels[0]],
                pixels,
            });
        }
    }
    out
}

/// Splits the foreground of `mask` into watershed regions.
///
/// Markers are regional maxima of the distance transform, taken in
/// decreasing height; a maximum closer than `min_distance` cells (Euclidean,
/// between the first pixels of the plateaus) to an accepted marker of the same
/// connected component is dropped, and each component keeps at least its
/// highest maximum. Regions grow from the markers over the negated distance
/// transform, restricted to the foreground, so every foreground pixel ends up in
/// exactly one region.
pub fn watershed_regions(mask: &BinaryMask, min_distance: f64) -> RegionLabeling {
    let (h, w) = mask.dims();
    let fg = mask.grid.as_slice();
    if !fg.iter().any(|&b| b) {
        return RegionLabeling::empty(h, w);
    }
    let dt_grid = squared_distance_transform(&mask.grid);
    let dt = dt_grid.as_slice();
    let (comps, _) = connected_components(&mask.grid);

    let mut maxima = regional_maxima(dt, fg, comps.as_slice(), h, w);
    maxima.sort_by(|a, b| {
        b.value
            .partial_cmp(&a.value)
            .expect("finite distances")
            .then(a.pixels[0].cmp(&b.pixels[0]))
    });
    let min_d2 = min_distance * min_distance;
    let mut accepted: Vec<&Plateau> = Vec::new();
    for m in &maxima {
        let rep = m.pixels[0];
        let (r, c) = ((rep / w) as f64, (rep % w) as f64);
        let crowded = accepted.iter().any(|a| {
            if a.component != m.component {
                return false;
            }
            let o = a.pixels[0];
            let (dr, dc) = ((o / w) as f64 - r, (o % w) as f64 - c);
            dr * dr + dc * dc < min_d2
        });
        if !crowded {
            accepted.push(m);
        }
    }

    let mut labels = vec![0u32; h * w];
    // max-heap on distance; FIFO among equal distances
    let mut heap: BinaryHeap<(u64, Reverse<u64>, usize)> = BinaryHeap::new();
    let mut seq = 0u64;
    for (i, m) in accepted.iter().enumerate() {
        for &p in &m.pixels {
            labels[p] = i as u32 + 1;
            heap.push((dt[p] as u64, Reverse(seq), p));
            seq += 1;
        }
    }
    while let Some((_, _, p)) = heap.pop() {
        let id = labels[p];
        for q in neighbors(h, w, p) {
            if fg[q] && labels[q] == 0 {
                labels[q] = id;
                heap.push((dt[q] as u64, Reverse(seq), q));
                seq += 1;
            }
        }
    }
    RegionLabeling {
        grid: Grid::from_vec(h, w, labels),
        count: accepted.len() as u32,
    }
}
