//! Certified detection: the output is the plain model output, and a
//! backdoored segmenter that reacts to a trigger patch cannot change a pixel
//! that stays verified.

use patchcert::backend::{NearestFillDemasker, SegmentationBackend, ToyOracleSegmenter};
use patchcert::certify::certify_detection;
use patchcert::grid::{apply_patch, ImageGrid, PatchLocation, ThreatModel};
use patchcert::maskgen::build_detection_column_masks;
use patchcert::oracle::TriggerSegmenter;
use patchcert::scene::{generate_scene, SceneSpec};

pub fn run() -> patchcert::Result<()> {
    let scene = generate_scene(SceneSpec::new(24, 32), 3)?;
    let tm = ThreatModel::new(24, 32, 4, 4)?;
    let ms = build_detection_column_masks(&tm, 8)?;
    let g = NearestFillDemasker::new();
    let trigger = vec![1.0, 0.0, 1.0];
    let f = TriggerSegmenter::new(ToyOracleSegmenter::dominant_channel(3), trigger.clone());

    let clean = certify_detection(&scene.image, &ms, &g, &f, false)?;
    assert_eq!(clean.segmentation(), &f.segment(&scene.image)?);
    println!("clean: {} masks, {:.1}% verified", ms.len(), 100.0 * clean.certified_fraction());

    let patch = ImageGrid::from_fn(24, 32, 3, |_, _, c| trigger[c])?;
    let attacked = apply_patch(&scene.image, &patch, PatchLocation::new(10, 13, 4, 4))?;
    let out = certify_detection(&attacked, &ms, &g, &f, false)?;
    let changed = (0..24 * 32)
        .filter(|&px| out.segmentation().labels()[px] != clean.segmentation().labels()[px])
        .count();
    // the guarantee covers pixels verified on both inputs
    let silent = (0..24 * 32)
        .filter(|&px| {
            clean.cert_map()[px]
                && out.cert_map()[px]
                && out.segmentation().labels()[px] != clean.segmentation().labels()[px]
        })
        .count();
    assert_eq!(silent, 0);
    println!("attacked: {changed} labels changed, none of them verified on both inputs");
    Ok(())
}

#[allow(dead_code)]
fn main() -> patchcert::Result<()> {
    run()
}
