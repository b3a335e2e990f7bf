//! Shared inputs for the pipeline benchmarks.

use nada_core::attnagg::{align_maps, label_map};
use nada_core::dataio::{synth_fixture, FixtureSpec};
use nada_core::proposer::oracle_propose;
use nada_core::{AttentionStack, DatasetManifest, LabelMap, ProposalSet};

/// A synthetic dataset held in memory: stacks and oracle proposals in manifest order.
pub struct Workload {
    pub manifest: DatasetManifest,
    pub stacks: Vec<AttentionStack>,
    pub proposals: Vec<ProposalSet>,
}

impl Workload {
    pub fn new(images: usize, grid: usize) -> Self {
        let fixture = synth_fixture(FixtureSpec {
            images,
            grid: (grid, grid),
            seed: 11,
            ..FixtureSpec::default()
        })
        .expect("valid fixture spec");
        let stacks = (0..fixture.len())
            .map(|i| fixture.stack(i).expect("fixture stack"))
            .collect();
        let manifest = fixture.manifest().clone();
        let proposals = manifest.images.iter().map(oracle_propose).collect();
        Self {
            manifest,
            stacks,
            proposals,
        }
    }

    /// The label map of the first ground-truth label of image `index`.
    pub fn first_label_map(&self, index: usize) -> LabelMap {
        let label = &self.manifest.images[index].gt_labels[0];
        label_map(&align_maps(&self.stacks[index]), label).expect("span present")
    }
}
