//! Certified recovery on a synthetic scene: one patch with column masks
//! (K=5), then two patches with K=9.

use patchcert::backend::{NearestFillDemasker, ToyOracleSegmenter};
use patchcert::certify::certify_recovery;
use patchcert::grid::ThreatModel;
use patchcert::maskgen::{build_recovery, Scheme};
use patchcert::metrics::global_accuracy;
use patchcert::scene::{generate_scene, SceneSpec};

pub fn run() -> patchcert::Result<()> {
    let scene = generate_scene(SceneSpec::new(32, 32).with_horizontal_weight(0.25), 7)?;
    let g = NearestFillDemasker::new();
    let f = ToyOracleSegmenter::dominant_channel(3);
    for (k, n) in [(5, 1), (9, 2)] {
        let tm = ThreatModel::with_patches(32, 32, 3, 3, n)?;
        let ms = build_recovery(Scheme::Column, &tm, k)?;
        let out = certify_recovery(&scene.image, &ms, &g, &f, n)?;
        println!(
            "K={k} N={n}: accuracy {:.3}, certified {:.1}% of pixels",
            global_accuracy(out.segmentation(), &scene.ground_truth)?,
            100.0 * out.certified_fraction()
        );
    }
    // five column masks cannot outvote two patches
    let tm = ThreatModel::with_patches(32, 32, 3, 3, 2)?;
    let err = certify_recovery(&scene.image, &build_recovery(Scheme::Column, &tm, 5)?, &g, &f, 2).unwrap_err();
    println!("K=5 N=2 refused: {err}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> patchcert::Result<()> {
    run()
}
