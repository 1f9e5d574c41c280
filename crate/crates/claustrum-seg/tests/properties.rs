//! Randomized property tests for the I/O and geometry layers.

use proptest::prelude::*;

use claustrum_seg::grid::Grid2;
use claustrum_seg::nifti::{read_nifti, write_nifti, Datatype, NiftiHeader, Volume};
use claustrum_seg::preprocess::{
    crop_roi, restore_from_roi, RoiWindow, SliceSample, FRAME_COLS, FRAME_ROWS, ROI_COLS, ROI_ROWS,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Float32 volumes survive write/read bit-exactly, gzipped or not.
    #[test]
    fn nifti_roundtrip_float32(
        nx in 1usize..8,
        ny in 1usize..8,
        nz in 1usize..6,
        seed in any::<u32>(),
        gz in any::<bool>(),
    ) {
        let n = nx * ny * nz;
        let data: Vec<f32> = (0..n)
            .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) as f32) / 1e9 - 2.0)
            .collect();
        let dims = [nx, ny, nz];
        let vol = Volume::new(data.clone(), dims, NiftiHeader::canonical(dims, Datatype::Float32));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "v.nii.gz" } else { "v.nii" });
        write_nifti(&vol, &path, Datatype::Float32).unwrap();
        let back = read_nifti(&path).unwrap();
        prop_assert_eq!(back.dims, dims);
        prop_assert!(data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    /// crop(restore(m)) == m for any window, and restore places foreground
    /// only inside the window.
    #[test]
    fn crop_restore_partial_inverse(
        row0 in 0usize..=(FRAME_ROWS - ROI_ROWS),
        col0 in 0usize..=(FRAME_COLS - ROI_COLS),
        bits in proptest::collection::vec(any::<bool>(), ROI_ROWS * ROI_COLS / 64),
    ) {
        let window = RoiWindow::new(row0, col0).unwrap();
        let mut mask = Grid2::zeros(ROI_ROWS, ROI_COLS);
        for (i, &b) in bits.iter().enumerate() {
            if b {
                mask.set((i * 17) % ROI_ROWS, (i * 41) % ROI_COLS, 1.0);
            }
        }
        let restored = restore_from_roi(&mask, window).unwrap();
        prop_assert_eq!(restored.count_nonzero(), mask.count_nonzero());
        prop_assert!(window.contains_all(&restored));
        let sample = SliceSample::new("s", 0, restored.clone()).with_label(restored);
        let back = crop_roi(&sample, window).unwrap();
        prop_assert_eq!(&back.label.unwrap().data, &mask.data);
    }

    /// Integer datatypes survive the round trip value-exactly.
    #[test]
    fn nifti_roundtrip_integers(
        seed in any::<u16>(),
        dt_pick in 0usize..3,
        gz in any::<bool>(),
    ) {
        let dt = [Datatype::Uint8, Datatype::Int16, Datatype::Int32][dt_pick];
        let dims = [5usize, 4, 3];
        let n = 60;
        let data: Vec<f32> = (0..n).map(|i| ((i * 7 + seed as usize) % 100) as f32).collect();
        let vol = Volume::new(data.clone(), dims, NiftiHeader::canonical(dims, dt));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "v.nii.gz" } else { "v.nii" });
        write_nifti(&vol, &path, dt).unwrap();
        let back = read_nifti(&path).unwrap();
        prop_assert_eq!(&back.data, &data);
    }
}
