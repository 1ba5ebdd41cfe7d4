#![allow(dead_code)]

use midfsl::data::{
    generate_synthetic, Augment, DatasetManifest, DomainStyle, LabeledImages, Normalizer, Split, SynthSpec,
};
use midfsl::trainer::LrSchedule;
use midfsl::{BackboneConfig, LossConfig, Objective, TrainConfig};
use tempfile::TempDir;

pub struct Synth {
    pub dir: TempDir,
    pub manifest: DatasetManifest,
}

pub fn synth(
    style: DomainStyle,
    base: usize,
    novel: usize,
    per_class: usize,
    image: usize,
    seed: u64,
) -> Synth {
    synth_with_noise(
        style,
        base,
        novel,
        per_class,
        image,
        SynthSpec::default().noise,
        seed,
    )
}

pub fn synth_with_noise(
    style: DomainStyle,
    base: usize,
    novel: usize,
    per_class: usize,
    image: usize,
    noise: f64,
    seed: u64,
) -> Synth {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_base_classes: base,
        num_novel_classes: novel,
        samples_per_class: per_class,
        image_size: image,
        domain_style: style,
        noise,
        seed,
    };
    let manifest = generate_synthetic(&spec, dir.path()).unwrap();
    Synth { dir, manifest }
}

/// Base and novel splits, both standardized with the base statistics.
pub fn load_pair(s: &Synth) -> (LabeledImages, LabeledImages, Normalizer) {
    let size = s.manifest.image_size.unwrap();
    let mut base = s.manifest.load_split(Split::Base, size, 1).unwrap();
    let mut novel = s.manifest.load_split(Split::Novel, size, 1).unwrap();
    let norm = Normalizer::fit(&base);
    norm.apply(&mut base);
    norm.apply(&mut novel);
    (base, novel, norm)
}

/// Small backbone and short schedule for tests on one core.
pub fn tiny_config(image: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        backbone: BackboneConfig {
            block_widths: vec![8, 16, 16, 32],
            input_shape: (image, image, 1),
            tap_layers: vec![1, 2],
            norm_groups: 4,
        },
        loss: LossConfig {
            splits: 4,
            neighbors: 2,
            ..LossConfig::default()
        },
        objective: Objective::Full,
        epochs,
        batch_size: 32,
        lr: LrSchedule {
            initial: 0.05,
            milestones: vec![epochs * 3 / 4],
            factor: 0.1,
        },
        seed,
        augment: Augment::none(),
        ..TrainConfig::default()
    }
}
