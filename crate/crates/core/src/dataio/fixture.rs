//! Deterministic synthetic attention stacks with known ground-truth boxes.
//!
//! Each ground-truth object is a square box in grid cells. The maps of the
//! object's label tokens carry an isotropic Gaussian bump centered in the box
//! over a flat background; every other token carries background only. Each
//! `(j, k, t)` map gets its own small uniform noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, GtBox, ImageRecord};
use super::stack::{AttentionStack, LabelSpan, StackHeader};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Flat attention level away from any object.
pub const BACKGROUND: f64 = 0.01;
/// Bump height (relative to the background floor) at the box edge midpoints.
pub const EDGE_LEVEL: f64 = 0.33;

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub images: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// `(height, width)` of the attention grid.
    pub grid: (usize, usize),
    /// `(width, height)` of each image in pixels.
    pub image: (u32, u32),
    pub classes: Vec<String>,
    pub timesteps: usize,
    pub blocks: usize,
    /// Half-width of the uniform per-map noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            images: 50,
            min_blobs: 1,
            max_blobs: 3,
            grid: (64, 64),
            image: (512, 512),
            classes: super::ICONART_CLASSES.iter().map(|s| s.to_string()).collect(),
            timesteps: 2,
            blocks: 2,
            noise: 0.005,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes.is_empty() {
            return bad("fixture needs at least one class");
        }
        if self.images == 0 {
            return bad("fixture needs at least one image");
        }
        let (gh, gw) = self.grid;
        let (iw, ih) = self.image;
        if gh == 0 || gw == 0 {
            return bad("grid dims must be positive");
        }
        if gh > ih as usize || gw > iw as usize {
            return bad("attention grid is larger than the image");
        }
        if gh.min(gw) < 8 {
            return bad("grid must be at least 8x8");
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return bad("blob range must satisfy 1 <= min <= max");
        }
        if self.timesteps == 0 || self.blocks == 0 {
            return bad("timesteps and blocks must be positive");
        }
        if !(0.0..BACKGROUND).contains(&self.noise) {
            return bad("noise must lie in [0, background)");
        }
        Ok(())
    }
}

/// One placed object in grid coordinates.
#[derive(Debug, Clone)]
struct Blob {
    label: String,
    row: usize,
    col: usize,
    side: usize,
}

impl Blob {
    fn center(&self) -> (f64, f64) {
        let half = self.side as f64 / 2.0;
        (self.row as f64 + half, self.col as f64 + half)
    }

    /// Noise-free bump value at the center of cell `(r, c)`.
    fn value(&self, r: usize, c: usize) -> f64 {
        let (cr, cc) = self.center();
        let half = self.side as f64 / 2.0;
        let dr = r as f64 + 0.5 - cr;
        let dc = c as f64 + 0.5 - cc;
        let rho2 = (dr * dr + dc * dc) / (half * half);
        BACKGROUND + (1.0 - BACKGROUND) * (-(1.0 / EDGE_LEVEL).ln() * rho2).exp()
    }
}

/// A generated dataset: the manifest plus a lazily built stack per image.
#[derive(Debug, Clone)]
pub struct Fixture {
    spec: FixtureSpec,
    manifest: DatasetManifest,
    blobs: Vec<Vec<Blob>>,
}

pub fn synth_fixture(spec: FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (gh, gw) = spec.grid;
    let (iw, ih) = spec.image;
    let sx = iw as f64 / gw as f64;
    let sy = ih as f64 / gh as f64;
    let min_dim = gh.min(gw);
    let min_side = ((min_dim as f64 * 0.1).ceil() as usize).max(3);
    let max_side = (min_dim / 2).max(min_side);

    let mut images = Vec::with_capacity(spec.images);
    let mut all_blobs = Vec::with_capacity(spec.images);
    let width = spec.images.to_string().len().max(4);
    for i in 0..spec.images {
        let max_blobs = spec.max_blobs.min(spec.classes.len());
        let count = rng.gen_range(spec.min_blobs.min(max_blobs)..=max_blobs);
        let labels: Vec<String> = spec
            .classes
            .choose_multiple(&mut rng, count)
            .cloned()
            .collect();
        let mut blobs = Vec::with_capacity(count);
        let mut gt_boxes = Vec::with_capacity(count);
        for label in &labels {
            let side = rng.gen_range(min_side..=max_side);
            let row = rng.gen_range(0..=gh - side);
            let col = rng.gen_range(0..=gw - side);
            let bbox = BBox::new(
                col as f64 * sx,
                row as f64 * sy,
                (col + side) as f64 * sx,
                (row + side) as f64 * sy,
            )?;
            gt_boxes.push(GtBox {
                label: label.clone(),
                bbox,
            });
            blobs.push(Blob {
                label: label.clone(),
                row,
                col,
                side,
            });
        }
        images.push(ImageRecord {
            id: format!("synth_{i:0width$}"),
            width: iw,
            height: ih,
            gt_labels: labels,
            gt_boxes,
        });
        all_blobs.push(blobs);
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-seed{}", spec.seed),
        classes: spec.classes.clone(),
        images,
    };
    manifest.validate()?;
    Ok(Fixture {
        spec,
        manifest,
        blobs: all_blobs,
    })
}

impl Fixture {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn spec(&self) -> &FixtureSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    /// Grid cell `(row, col)` holding the peak of each object of image `index`, with its label.
    pub fn peaks(&self, index: usize) -> Vec<(String, f64, f64)> {
        self.blobs[index]
            .iter()
            .map(|b| {
                let (r, c) = b.center();
                (b.label.clone(), r, c)
            })
            .collect()
    }

    /// Builds the attention stack of image `index`.
    ///
    /// The prompt is `<bos> a painting of <label words>... <eos>`, one span per
    /// ground-truth label.
    pub fn stack(&self, index: usize) -> Result<AttentionStack> {
        let spec = &self.spec;
        let record = &self.manifest.images[index];
        let blobs = &self.blobs[index];
        let (gh, gw) = spec.grid;
        let cells = gh * gw;

        // token t -> index of the blob it belongs to, if any
        let mut owners: Vec<Option<usize>> = vec![None; 4];
        let mut spans = Vec::with_capacity(blobs.len());
        for (b, blob) in blobs.iter().enumerate() {
            let words = blob.label.split_whitespace().count().max(1);
            let start = owners.len();
            owners.extend(std::iter::repeat_n(Some(b), words));
            spans.push(LabelSpan {
                label: blob.label.clone(),
                tokens: (start..start + words).collect(),
            });
        }
        owners.push(None);
        let tokens = owners.len();

        let profiles: Vec<Vec<f64>> = blobs
            .iter()
            .map(|b| {
                (0..cells)
                    .map(|i| b.value(i / gw, i % gw))
                    .collect::<Vec<f64>>()
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64 + 1);
        let mut data = Vec::with_capacity(spec.timesteps * spec.blocks * tokens * cells);
        let background = vec![BACKGROUND; cells];
        for _j in 0..spec.timesteps {
            for _k in 0..spec.blocks {
                for owner in &owners {
                    let clean_map = owner.map_or(&background, |b| &profiles[b]);
                    for &clean in clean_map {
                        let jitter = if spec.noise > 0.0 {
                            rng.gen_range(-spec.noise..=spec.noise)
                        } else {
                            0.0
                        };
                        data.push((clean + jitter).max(0.0) as f32);
                    }
                }
            }
        }
        let header = StackHeader {
            image_id: record.id.clone(),
            timesteps: spec.timesteps,
            tokens,
            blocks: vec![(gh, gw); spec.blocks],
            spans,
        };
        AttentionStack::new(header, data)
    }
}
