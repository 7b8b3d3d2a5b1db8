use std::f64::consts::{PI, TAU};

use dermo_core::diagnosis::{
    fuse_views, Asymmetry, DiagnosisHead, HeadParams, Modulation, PolarPool, PolarPoolSpec, PoolMode,
};
use dermo_core::geometry::{normalized_polar_coordinates, normalizing_affine, polar_map, LesionMask, MomentEllipse};
use dermo_core::{DifferentiableOp, ValueGrid};
use proptest::prelude::*;

fn ellipse_npc(side: usize, major: f64, minor: f64, phi: f64, shift: f64) -> dermo_core::geometry::NormalizedPolarMap {
    let c = (side - 1) as f64 / 2.0;
    let e = MomentEllipse {
        center: [c + shift, c - 0.5 * shift],
        semi_axes: [major, minor],
        orientation: phi,
    };
    polar_map(side, side, normalizing_affine(&e)).unwrap()
}

/// Sums |P(a) - P(b)| over sectors mirrored about the line through the
/// center of sector `axis`, found by reflecting sector-center angles.
fn geometric_asymmetry(polar: &ValueGrid) -> Vec<f64> {
    let (rings, angles, c) = (polar.height(), polar.width(), polar.channels());
    let step = TAU / angles as f64;
    let mut out = vec![0.0; angles / 2 * c];
    for axis in 0..angles / 2 {
        let axis_angle = (axis as f64 + 0.5) * step;
        for a in 0..angles {
            let center = (a as f64 + 0.5) * step;
            let mirrored = (2.0 * axis_angle - center).rem_euclid(TAU);
            let b = ((mirrored / step).floor() as usize) % angles;
            if a < b {
                for r in 0..rings {
                    for ch in 0..c {
                        out[axis * c + ch] += (polar.at3(r, a, ch) - polar.at3(r, b, ch)).abs();
                    }
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sectors_partition_the_lesion(
        major in 5.0f64..15.0,
        ratio in 0.4f64..1.0,
        phi in 0.0f64..PI,
        shift in -2.0f64..2.0,
        rings in 1usize..5,
        half_angles in 1usize..6,
    ) {
        let npc = ellipse_npc(32, major, major * ratio, phi, shift);
        let spec = PolarPoolSpec::new(rings, 2 * half_angles, PoolMode::Average, 0.0);
        let pool = PolarPool::new(&npc, &spec).unwrap();
        let mut seen = vec![0usize; 32 * 32];
        for r in 0..rings {
            for a in 0..2 * half_angles {
                for &px in pool.members(r, a) {
                    seen[px] += 1;
                }
            }
        }
        let lesion = npc.rho.data().iter().filter(|&&v| v <= 1.0).count();
        prop_assert_eq!(seen.iter().sum::<usize>(), lesion);
        for (px, &count) in seen.iter().enumerate() {
            prop_assert_eq!(count, usize::from(npc.rho.data()[px] <= 1.0));
        }
    }

    #[test]
    fn asymmetry_matches_reflected_sector_centers(seed in any::<u64>(), half in 1usize..7, rings in 1usize..4) {
        let polar = ValueGrid::random_uniform(&[rings, 2 * half, 3], -1.0, 1.0, seed).unwrap();
        let fast = Asymmetry.forward(std::slice::from_ref(&polar)).unwrap();
        let slow = geometric_asymmetry(&polar);
        for (x, y) in fast.data().iter().zip(&slow) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!(fast.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn angular_shift_permutes_fold_axes(seed in any::<u64>(), half in 1usize..7) {
        let angles = 2 * half;
        let polar = ValueGrid::random_uniform(&[3, angles, 2], -1.0, 1.0, seed).unwrap();
        let mut shifted = polar.clone();
        for r in 0..3 {
            for a in 0..angles {
                for c in 0..2 {
                    let v = polar.at3(r, (a + angles - 1) % angles, c);
                    let idx = shifted.offset3(r, a, c);
                    shifted.data_mut()[idx] = v;
                }
            }
        }
        let base = Asymmetry.forward(&[polar]).unwrap();
        let moved = Asymmetry.forward(&[shifted]).unwrap();
        for j in 0..half {
            let from = (j + half - 1) % half;
            for c in 0..2 {
                prop_assert!((moved.data()[j * 2 + c] - base.data()[from * 2 + c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fusion_matches_direct_product(rows in prop::collection::vec(prop::array::uniform3(0.01f64..1.0), 1..30)) {
        let views: Vec<[f64; 3]> = rows
            .iter()
            .map(|r| {
                let t: f64 = r.iter().sum();
                [r[0] / t, r[1] / t, r[2] / t]
            })
            .collect();
        let fused = fuse_views(&views).unwrap();
        let mut direct = [1.0f64; 3];
        for v in &views {
            for k in 0..3 {
                direct[k] *= v[k];
            }
        }
        let t: f64 = direct.iter().sum();
        for k in 0..3 {
            prop_assert!((fused[k] - direct[k] / t).abs() <= 1e-12);
        }
        let mut reversed = views.clone();
        reversed.reverse();
        let again = fuse_views(&reversed).unwrap();
        for k in 0..3 {
            prop_assert!((fused[k] - again[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_passes_are_linear_in_the_output_gradient(seed in any::<u64>(), scale in -3.0f64..3.0) {
        let npc = ellipse_npc(8, 3.6, 3.0, 0.4, 0.2);
        let spec = PolarPoolSpec::default();
        let f = ValueGrid::random_uniform(&[8, 8, 2], -1.0, 1.0, seed).unwrap();
        let s = ValueGrid::random_uniform(&[16, 16, 8], 0.0, 1.0, seed ^ 1).unwrap();
        let m = Modulation.forward(&[f.clone(), s.clone()]).unwrap();
        let polar = PolarPool::new(&npc, &spec).unwrap().forward(std::slice::from_ref(&m)).unwrap();
        let head = DiagnosisHead::new(HeadParams::random(2, &spec, seed).unwrap(), &npc, &spec).unwrap();
        let max_pool = PolarPool::new(&npc, &PolarPoolSpec::new(3, 6, PoolMode::Max, 0.1)).unwrap();
        let cases: Vec<(Box<dyn DifferentiableOp>, Vec<ValueGrid>)> = vec![
            (Box::new(Modulation), vec![f.clone(), s.clone()]),
            (Box::new(PolarPool::new(&npc, &spec).unwrap()), vec![m.clone()]),
            (Box::new(max_pool), vec![m]),
            (Box::new(Asymmetry), vec![polar]),
            (Box::new(head), vec![f, s]),
        ];
        for (k, (op, inputs)) in cases.iter().enumerate() {
            let out = op.forward(inputs).unwrap();
            let g1 = ValueGrid::random_uniform(out.shape(), -1.0, 1.0, seed.wrapping_add(10 + k as u64)).unwrap();
            let g2 = ValueGrid::random_uniform(out.shape(), -1.0, 1.0, seed.wrapping_add(20 + k as u64)).unwrap();
            let combined = op.backward(inputs, &g1.add(&g2.scale(scale)).unwrap()).unwrap();
            let a = op.backward(inputs, &g1).unwrap();
            let b = op.backward(inputs, &g2).unwrap();
            for ((c, x), y) in combined.iter().zip(&a).zip(&b) {
                let expected = x.add(&y.scale(scale)).unwrap();
                prop_assert!(c.max_abs_diff(&expected).unwrap() <= 1e-10, "{}", op.name());
            }
        }
    }
}

#[test]
fn equal_area_rings_hold_equal_pixel_counts() {
    let side = 270;
    let c = (side - 1) as f64 / 2.0;
    let mask = LesionMask::from_fn(side, side, |r, col| (col as f64 - c).hypot(r as f64 - c) <= 128.0).unwrap();
    let npc = normalized_polar_coordinates(&mask).unwrap();
    let pool = PolarPool::new(&npc, &PolarPoolSpec::new(3, 1, PoolMode::Average, 0.0)).unwrap();
    let counts: Vec<f64> = (0..3).map(|r| pool.members(r, 0).len() as f64).collect();
    let mean = counts.iter().sum::<f64>() / 3.0;
    for n in &counts {
        assert!((n / mean - 1.0).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn single_sector_average_is_masked_mean() {
    let npc = ellipse_npc(40, 15.0, 9.0, 1.1, 0.7);
    let f = ValueGrid::random_uniform(&[40, 40, 5], -2.0, 2.0, 77).unwrap();
    let out = PolarPool::new(&npc, &PolarPoolSpec::new(1, 1, PoolMode::Average, 0.0))
        .unwrap()
        .forward(std::slice::from_ref(&f))
        .unwrap();
    for c in 0..5 {
        let vals: Vec<f64> = (0..1600).filter(|&px| npc.rho.data()[px] <= 1.0).map(|px| f.data()[px * 5 + c]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((out.data()[c] - mean).abs() <= 1e-12);
    }
}
