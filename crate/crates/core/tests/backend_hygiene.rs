//! Demaskers must ignore whatever sits under hidden pixels.

use patchcert::backend::{DemaskingBackend, NearestFillDemasker, SolidFillDemasker};
use patchcert::grid::{apply_mask, ImageGrid, MaskGrid, MaskedImage};
use proptest::prelude::*;

fn case() -> impl Strategy<Value = (ImageGrid, MaskGrid, ImageGrid)> {
    (1usize..12, 1usize..12, 1usize..4).prop_flat_map(|(h, w, c)| {
        (
            prop::collection::vec(0u8..=255, h * w * c),
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(0u8..=255, h * w * c),
        )
            .prop_map(move |(x, m, noise)| {
                (
                    ImageGrid::from_u8(h, w, c, &x).unwrap(),
                    MaskGrid::new(h, w, m).unwrap(),
                    ImageGrid::from_u8(h, w, c, &noise).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn hidden_fill_does_not_matter((x, m, noise) in case()) {
        let clean = apply_mask(&x, &m).unwrap();
        let dirty = ImageGrid::from_fn(x.height(), x.width(), x.channels(), |i, j, c| {
            if m.is_visible(i, j) { x.get(i, j, c) } else { noise.get(i, j, c) }
        })
        .unwrap();
        let dirty = MaskedImage::from_parts(dirty, m).unwrap();
        let backends: [&dyn DemaskingBackend; 2] = [&NearestFillDemasker::new(), &SolidFillDemasker::new(0.5)];
        for g in backends {
            prop_assert_eq!(g.demask(&clean).unwrap(), g.demask(&dirty).unwrap());
        }
    }
}
