//! Builds every built-in mask scheme for one geometry, prints its strength or
//! coverage, and round-trips it through the on-disk format.

use patchcert::grid::ThreatModel;
use patchcert::maskgen::{
    build_detection_column_masks, build_detection_row_masks, build_recovery, compute_strength, load_maskset,
    save_maskset, verify_detection_coverage, Scheme,
};

pub fn run() -> patchcert::Result<()> {
    let tm = ThreatModel::new(48, 64, 6, 6)?;
    let dir = tempfile::tempdir()?;
    for scheme in Scheme::BUILT_IN {
        let ms = match scheme {
            Scheme::DetectionColumn => build_detection_column_masks(&tm, 12)?,
            Scheme::DetectionRow => build_detection_row_masks(&tm, 12)?,
            s => build_recovery(s, &tm, s.default_k().expect("recovery scheme"))?,
        };
        let summary = if scheme.is_detection() {
            format!("coverage={}", verify_detection_coverage(&ms, &tm))
        } else {
            format!("T={}", compute_strength(&ms, &tm))
        };
        let path = dir.path().join(scheme.name());
        save_maskset(&path, &ms)?;
        assert_eq!(load_maskset(&path)?, ms);
        println!("{:<8} K={:<3} {summary}", scheme.name(), ms.len());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> patchcert::Result<()> {
    run()
}
