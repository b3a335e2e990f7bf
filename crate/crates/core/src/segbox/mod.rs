//! From a label's attention map to bounding boxes: normalize, threshold
//! (Otsu or fixed), split the foreground with a watershed, box each region.

mod boxes;
mod threshold;
mod watershed;

use serde::{Deserialize, Serialize};

pub use boxes::{cells_to_pixels, regions_to_boxes, CellRect, RegionBox};
pub use threshold::{
    binarize, histogram_bin, normalize_map, otsu_threshold, otsu_threshold_values, BinaryMask,
    OTSU_BINS,
};
pub use watershed::{
    connected_components, squared_distance_transform, watershed_regions, RegionLabeling,
};

use crate::attnagg::LabelMap;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Otsu,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub threshold: ThresholdMode,
    /// Regions smaller than this fraction of the grid are dropped.
    pub min_region_area: f64,
    /// Minimum marker separation as a fraction of `max(H, W)`.
    pub marker_min_distance: f64,
    /// Min-max normalize the map before thresholding.
    pub normalize: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdMode::Otsu,
            min_region_area: 0.005,
            marker_min_distance: 0.125,
            normalize: true,
        }
    }
}

impl ExtractionConfig {
    pub fn with_threshold(self, threshold: ThresholdMode) -> Self {
        Self { threshold, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if let ThresholdMode::Fixed(t) = self.threshold {
            if !open_unit(t) {
                return Err(Error::Config(format!("fixed threshold {t} not in (0, 1)")));
            }
        }
        if !open_unit(self.min_region_area) {
            return Err(Error::Config(format!(
                "min region area {} not in (0, 1)",
                self.min_region_area
            )));
        }
        if !open_unit(self.marker_min_distance) {
            return Err(Error::Config(format!(
                "marker distance {} not in (0, 1)",
                self.marker_min_distance
            )));
        }
        Ok(())
    }
}

/// A box extracted from a label map with the mean map value under it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub saliency: f64,
    pub area: usize,
    pub cells: CellRect,
}

/// Intermediate products of one extraction, for inspection and sweeps.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub threshold: f64,
    pub mask: BinaryMask,
    pub regions: RegionLabeling,
    pub boxes: Vec<ScoredBox>,
}

/// Runs the whole chain and keeps the intermediate mask and regions.
pub fn extract(m: &LabelMap, image: (u32, u32), config: &ExtractionConfig) -> Result<Extraction> {
    config.validate()?;
    let (h, w) = m.dims();
    let working = if config.normalize {
        normalize_map(m)
    } else {
        m.clone()
    };
    let threshold = match config.threshold {
        ThresholdMode::Otsu => otsu_threshold(&working),
        ThresholdMode::Fixed(t) => t,
    };
    let mask = binarize(&working, threshold);
    let min_distance = config.marker_min_distance * h.max(w) as f64;
    let regions = watershed_regions(&mask, min_distance);
    let boxes = regions_to_boxes(&regions, image, config.min_region_area)
        .into_iter()
        .map(|rb| ScoredBox {
            bbox: rb.bbox,
            saliency: footprint_mean(m, rb.cells),
            area: rb.area,
            cells: rb.cells,
        })
        .collect();
    Ok(Extraction {
        threshold,
        mask,
        regions,
        boxes,
    })
}

/// Boxes for one label map, `image` given as `(width, height)`.
pub fn extract_boxes(
    m: &LabelMap,
    image: (u32, u32),
    config: &ExtractionConfig,
) -> Result<Vec<ScoredBox>> {
    Ok(extract(m, image, config)?.boxes)
}

fn footprint_mean(m: &LabelMap, cells: CellRect) -> f64 {
    let mut sum = 0.0;
    for r in cells.row0..=cells.row1 {
        for c in cells.col0..=cells.col1 {
            sum += *m.grid.get(r, c);
        }
    }
    (sum / cells.cells() as f64).clamp(0.0, 1.0)
}
