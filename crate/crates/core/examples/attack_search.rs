//! Seeded gradient-free patch search against the undefended segmenter and
//! against the recovery pipeline; certified pixels must survive the latter.

use patchcert::backend::{NearestFillDemasker, SegmentationBackend, ToyOracleSegmenter};
use patchcert::certify::RecoveryCertifier;
use patchcert::grid::{apply_patch, ThreatModel};
use patchcert::maskgen::{build_recovery, Scheme};
use patchcert::oracle::{attack_search, AttackBudget};
use patchcert::scene::{generate_scene, SceneSpec};

pub fn run() -> patchcert::Result<()> {
    let scene = generate_scene(SceneSpec::new(24, 24).with_horizontal_weight(0.3), 11)?;
    let tm = ThreatModel::new(24, 24, 4, 4)?;
    let budget = AttackBudget { trials: 60, seed: 11 };
    let (g, f) = (NearestFillDemasker::new(), ToyOracleSegmenter::dominant_channel(3));

    let plain = attack_search(&scene.image, &scene.ground_truth, &f, &tm, budget)?;
    println!("undefended: accuracy {:.3} -> {:.3} at {:?}", plain.clean_quality, plain.quality, plain.location);

    let ms = build_recovery(Scheme::Column, &tm, 5)?;
    let h = RecoveryCertifier::new(&ms, &g, &f, 1)?;
    let cert = h.certify(&scene.image)?;
    let found = attack_search(&scene.image, &scene.ground_truth, &h, &tm, budget)?;
    let attacked = h.segment(&apply_patch(&scene.image, found.content.as_ref().expect("content"), found.location)?)?;
    let broken = (0..24 * 24)
        .filter(|&px| cert.cert_map()[px] && attacked.labels()[px] != cert.segmentation().labels()[px])
        .count();
    println!(
        "recovery: accuracy {:.3} -> {:.3}, {} certified pixels, {broken} changed",
        found.clean_quality,
        found.quality,
        cert.certified_count()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> patchcert::Result<()> {
    run()
}
