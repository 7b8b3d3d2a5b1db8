use dermo_core::augment::{
    augment_case, largest_inscribed_rect, rotate_with_mask, square_crops, AugmentConfig, RotationFrame,
    DEFAULT_ROTATIONS_DEG, VIEW_SIDE,
};
use dermo_core::geometry::LesionMask;
use dermo_core::ValueGrid;
use proptest::prelude::*;

fn noise_image(h: usize, w: usize, seed: u64) -> ValueGrid {
    ValueGrid::random_uniform(&[h, w, 3], 0.0, 1.0, seed).unwrap()
}

fn disk(h: usize, w: usize, r: f64) -> LesionMask {
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    LesionMask::from_fn(h, w, |row, col| (col as f64 - cx).hypot(row as f64 - cy) <= r).unwrap()
}

#[test]
fn twenty_four_full_size_views_keep_the_lesion() {
    let (h, w) = (240, 320);
    let image = noise_image(h, w, 1);
    let mask = disk(h, w, w as f64 / 4.0);
    let set = augment_case("disk", &image, &mask, &AugmentConfig::default()).unwrap();
    assert_eq!(set.views.len(), 24);
    for view in &set.views {
        assert_eq!(view.image.shape(), &[VIEW_SIDE, VIEW_SIDE, 3]);
        assert_eq!(view.npc.rho.shape(), &[VIEW_SIDE, VIEW_SIDE]);
        assert!(view.mask.area() > 0);
        assert!(!view.spec.fallback);
    }
    let angles: Vec<f64> = set.views.iter().map(|v| v.spec.rotation_deg).collect();
    for (k, a) in DEFAULT_ROTATIONS_DEG.iter().enumerate() {
        assert!(angles[3 * k..3 * k + 3].iter().all(|x| x == a));
    }
}

#[test]
fn augmentation_is_bit_deterministic() {
    let image = noise_image(150, 190, 9);
    let mask = disk(150, 190, 40.0);
    let a = augment_case("c", &image, &mask, &AugmentConfig::default()).unwrap();
    let b = augment_case("c", &image, &mask, &AugmentConfig::default()).unwrap();
    for (va, vb) in a.views.iter().zip(&b.views) {
        assert!(va.image.data().iter().zip(vb.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(va.npc.rho.data().iter().zip(vb.npc.rho.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(va.mask, vb.mask);
        assert_eq!(va.spec, vb.spec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // Every canvas pixel inside any crop samples from within the source image.
    #[test]
    fn crops_never_touch_padding(w in 20usize..160, h in 20usize..160, angle in 0.0f64..360.0) {
        let rect = largest_inscribed_rect(w, h, angle);
        let frame = RotationFrame::new(w, h, angle);
        prop_assert!(rect.x + rect.w <= frame.out_w && rect.y + rect.h <= frame.out_h);
        for square in square_crops(rect, 3) {
            for y in square.y..square.y + square.h {
                for x in square.x..square.x + square.w {
                    let (sx, sy) = frame.source_of(x as f64, y as f64);
                    prop_assert!(frame.is_valid(sx, sy), "({}, {}) -> ({}, {})", x, y, sx, sy);
                }
            }
        }
    }

    #[test]
    fn right_angle_rotation_is_lossless(w in 2usize..40, h in 2usize..40, k in 1u32..4, seed in any::<u64>()) {
        let image = ValueGrid::random_uniform(&[h, w, 2], -1.0, 1.0, seed).unwrap();
        let mask = LesionMask::from_fn(h, w, |r, c| (r * 7 + c * 3) % 5 == 0).unwrap();
        let angle = 90.0 * k as f64;
        let turned = rotate_with_mask(&image, &mask, angle).unwrap();
        prop_assert!(turned.valid.data().iter().all(|&v| v == 1.0));
        let back = rotate_with_mask(&turned.image, &turned.mask, 360.0 - angle).unwrap();
        prop_assert_eq!(back.image, image);
        prop_assert_eq!(back.mask, mask);
    }
}
