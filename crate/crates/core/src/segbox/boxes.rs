use super::watershed::RegionLabeling;
use crate::geometry::BBox;

/// Inclusive grid-cell rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl CellRect {
    pub fn cells(&self) -> usize {
        (self.row1 - self.row0 + 1) * (self.col1 - self.col0 + 1)
    }
}

/// One surviving region with its tight cell rectangle and pixel box.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBox {
    pub region: u32,
    pub area: usize,
    pub cells: CellRect,
    pub bbox: BBox,
}

/// Scales a cell rectangle on an `H x W` grid to image pixels; cell `(r, c)`
/// spans `[c * width / W, (c + 1) * width / W] x [r * height / H, (r + 1) * height / H]`.
pub fn cells_to_pixels(cells: CellRect, grid: (usize, usize), image: (u32, u32)) -> BBox {
    let (gh, gw) = (grid.0 as f64, grid.1 as f64);
    let (iw, ih) = (image.0 as f64, image.1 as f64);
    BBox {
        x0: cells.col0 as f64 * iw / gw,
        y0: cells.row0 as f64 * ih / gh,
        x1: (cells.col1 + 1) as f64 * iw / gw,
        y1: (cells.row1 + 1) as f64 * ih / gh,
    }
}

/// Tight box per region, dropping regions smaller than `min_area_fraction`
/// of the grid, ordered by decreasing area (ties by region id).
///
/// `image` is `(width, height)` in pixels.
pub fn regions_to_boxes(
    labeling: &RegionLabeling,
    image: (u32, u32),
    min_area_fraction: f64,
) -> Vec<RegionBox> {
    let (h, w) = labeling.dims();
    let n = labeling.count as usize;
    if n == 0 || image.0 == 0 || image.1 == 0 {
        return Vec::new();
    }
    let mut rects: Vec<Option<CellRect>> = vec![None; n];
    let mut areas = vec![0usize; n];
    for r in 0..h {
        for c in 0..w {
            let id = *labeling.grid.get(r, c) as usize;
            if id == 0 {
                continue;
            }
            areas[id - 1] += 1;
            let rect = rects[id - 1].get_or_insert(CellRect {
                row0: r,
                col0: c,
                row1: r,
                col1: c,
            });
            rect.row0 = rect.row0.min(r);
            rect.col0 = rect.col0.min(c);
            rect.row1 = rect.row1.max(r);
            rect.col1 = rect.col1.max(c);
        }
    }
    let min_area = min_area_fraction * (h * w) as f64;
    let mut out: Vec<RegionBox> = rects
        .into_iter()
        .zip(areas)
        .enumerate()
        .filter_map(|(i, (rect, area))| {
            let rect = rect?;
            if (area as f64) < min_area {
                return None;
            }
            Some(RegionBox {
                region: i as u32 + 1,
                area,
                cells: rect,
                bbox: cells_to_pixels(rect, (h, w), image),
            })
        })
        .collect();
    out.sort_by(|a, b| b.area.cmp(&a.area).then(a.region.cmp(&b.region)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;

    #[test]
    fn scaling_example() {
        // rows 2..=4, cols 3..=6 on a 64x64 grid, 640x640 image
        let mut g = Grid::filled(64, 64, 0u32);
        for r in 2..=4 {
            for c in 3..=6 {
                g.set(r, c, 1);
            }
        }
        let l = RegionLabeling { grid: g, count: 1 };
        let boxes = regions_to_boxes(&l, (640, 640), 0.0);
        assert_eq!(boxes.len(), 1);
        let b = boxes[0].bbox;
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (30.0, 20.0, 70.0, 50.0));
        assert_eq!(boxes[0].area, 12);
    }

    #[test]
    fn empty_labeling() {
        let l = RegionLabeling::empty(8, 8);
        assert!(regions_to_boxes(&l, (100, 100), 0.005).is_empty());
    }

    #[test]
    fn single_pixel_region_is_dropped() {
        let mut g = Grid::filled(64, 64, 0u32);
        g.set(10, 10, 1);
        let l = RegionLabeling { grid: g, count: 1 };
        // 1 < 0.005 * 64 * 64 = 20.48
        assert!(regions_to_boxes(&l, (512, 512), 0.005).is_empty());
        assert_eq!(regions_to_boxes(&l, (512, 512), 0.0).len(), 1);
    }

    #[test]
    fn ordered_by_area() {
        let mut g = Grid::filled(4, 8, 0u32);
        g.set(0, 0, 1);
        for c in 3..8 {
            g.set(2, c, 2);
        }
        let l = RegionLabeling { grid: g, count: 2 };
        let boxes = regions_to_boxes(&l, (8, 4), 0.0);
        assert_eq!(boxes.iter().map(|b| b.region).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn last_cell_ends_exactly_on_the_image_edge() {
        let rect = CellRect {
            row0: 0,
            col0: 0,
            row1: 6,
            col1: 6,
        };
        let b = cells_to_pixels(rect, (7, 7), (333, 101));
        assert_eq!(b.x1, 333.0);
        assert_eq!(b.y1, 101.0);
    }
}
