//! Structural and end-to-end audits: masking erasure for every scheme, then
//! exhaustive single-patch recovery and detection audits on a small scene.

use patchcert::backend::{NearestFillDemasker, ToyOracleSegmenter};
use patchcert::grid::ThreatModel;
use patchcert::maskgen::{build_detection_row_masks, build_recovery, Scheme};
use patchcert::oracle::{audit_detection_soundness, audit_masking_erasure, audit_recovery_soundness, content_battery};
use patchcert::scene::{generate_scene, SceneSpec};

pub fn run() -> patchcert::Result<()> {
    let scene = generate_scene(SceneSpec::new(16, 16), 5)?;
    let tm = ThreatModel::new(16, 16, 2, 2)?;
    let (g, f) = (NearestFillDemasker::new(), ToyOracleSegmenter::dominant_channel(3));
    let battery = content_battery(16, 16, 3, 8, 5);

    let rec = build_recovery(Scheme::ThreeMask, &tm, 7)?;
    let det = build_detection_row_masks(&tm, 5)?;
    for ms in [&rec, &det] {
        let e = audit_masking_erasure(&scene.image, ms, 5)?;
        println!("erasure {}: {} checks, passed={}", ms.scheme(), e.checks, e.passed());
    }
    let r = audit_recovery_soundness(&scene.image, &rec, &g, &f, &battery)?;
    let d = audit_detection_soundness(&scene.image, &det, &g, &f, &battery)?;
    for s in [r, d] {
        println!(
            "{:?} {}: {} placements x {} contents, {} certified pixels, passed={}",
            s.kind,
            s.scheme,
            s.placements,
            s.battery_size,
            s.certified_pixels,
            s.passed()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> patchcert::Result<()> {
    run()
}
