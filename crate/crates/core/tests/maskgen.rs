mod common;

use common::{naive_gaps, naive_strength};
use patchcert::grid::ThreatModel;
use patchcert::maskgen::{
    build_detection_column_masks, build_detection_column_masks_with_stride, build_detection_row_masks,
    build_recovery, compute_strength, load_maskset, save_maskset, verify_block_uniqueness,
    verify_detection_coverage, Scheme,
};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = ThreatModel> {
    (4usize..=24, 4usize..=24, 1usize..=5, 1usize..=5)
        .prop_filter("patch fits", |(h, w, ph, pw)| ph <= h && pw <= w)
        .prop_map(|(h, w, ph, pw)| ThreatModel::new(h, w, ph, pw).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recovery_strength_matches_oracle(tm in geometry(), scheme_idx in 0usize..4) {
        let scheme = Scheme::BUILT_IN[scheme_idx];
        let k = scheme.default_k().unwrap();
        let ms = build_recovery(scheme, &tm, k).unwrap();
        let t = compute_strength(&ms, &tm);
        prop_assert_eq!(t, naive_strength(&ms, &tm));
        prop_assert!(t <= ms.declared_strength().unwrap());
        prop_assert!(verify_block_uniqueness(&ms));
        prop_assert_eq!(ms.len(), k);
    }

    #[test]
    fn detection_bands_cover_every_placement(tm in geometry(), extra in 0usize..8) {
        let w2 = (tm.patch_width + extra).min(tm.image_width);
        let ms = build_detection_column_masks(&tm, w2).unwrap();
        prop_assert!(naive_gaps(&ms, &tm).is_empty());
        prop_assert!(verify_detection_coverage(&ms, &tm));
        let h2 = (tm.patch_height + extra).min(tm.image_height);
        let rows = build_detection_row_masks(&tm, h2).unwrap();
        prop_assert!(naive_gaps(&rows, &tm).is_empty());
    }

    #[test]
    fn oversized_stride_agrees_with_gap_oracle(tm in geometry(), extra in 0usize..8) {
        let w2 = (tm.patch_width + extra).min(tm.image_width);
        let ms = build_detection_column_masks_with_stride(&tm, w2, w2 - tm.patch_width + 2).unwrap();
        prop_assert_eq!(verify_detection_coverage(&ms, &tm), naive_gaps(&ms, &tm).is_empty());
    }

    #[test]
    fn row_masks_are_transposed_columns(tm in geometry()) {
        let rows = build_recovery(Scheme::Row, &tm, 5).unwrap();
        let cols = build_recovery(Scheme::Column, &tm.transposed(), 5).unwrap();
        for (r, c) in rows.masks().iter().zip(cols.masks()) {
            prop_assert_eq!(r, &c.transpose());
        }
    }
}

#[test]
fn saved_set_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let tm = ThreatModel::new(18, 21, 3, 4).unwrap();
    for scheme in Scheme::BUILT_IN {
        let ms = match scheme {
            Scheme::DetectionColumn => build_detection_column_masks(&tm, 6).unwrap(),
            Scheme::DetectionRow => build_detection_row_masks(&tm, 5).unwrap(),
            s => build_recovery(s, &tm, s.default_k().unwrap()).unwrap(),
        };
        let path = dir.path().join(scheme.name());
        save_maskset(&path, &ms).unwrap();
        let back = load_maskset(&path).unwrap();
        assert_eq!(back, ms, "{scheme}");
        back.verify().unwrap();
    }
}

#[test]
fn corrupted_file_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let tm = ThreatModel::new(12, 12, 3, 3).unwrap();
    let ms = build_recovery(Scheme::Column, &tm, 5).unwrap();
    save_maskset(dir.path(), &ms).unwrap();
    // reveal one pixel of block (0, 1) in mask 0, which hides that block
    let path = dir.path().join("mask_000.pgm");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 144 + 3] = 255;
    std::fs::write(&path, bytes).unwrap();
    let back = load_maskset(dir.path()).unwrap();
    assert!(back.verify().is_err());
}
