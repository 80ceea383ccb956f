use eraser_core::clients::{ClientError, CoarseInpainterClient, VaeClient};
use eraser_core::diffusion::*;
use eraser_core::raster::{Mask, Rgb8Image};
use eraser_core::toy::{MeanFillInpainter, ToyVae};
use image::Rgb;
use ndarray::{s, Array2, Array3};
use proptest::prelude::*;
use std::sync::atomic::{AtomicUsize, Ordering};

fn product_oracle(betas: &[f64]) -> Vec<f64> {
    betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect()
}

#[test]
fn three_step_linear_schedule() {
    let s = build_schedule(3, 0.1, 0.3, BetaKind::Linear).unwrap();
    assert!((s.alpha_bar(3) - 0.9 * 0.8 * 0.7).abs() < 1e-12);
    assert!((s.alpha_bar(3) - 0.504).abs() < 1e-12);
}

#[test]
fn default_linear_schedule_decays() {
    let s = build_schedule(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
    let oracle = product_oracle(s.betas());
    for t in 1..=1000 {
        assert!((s.alpha_bar(t) - oracle[t - 1]).abs() < 1e-12);
    }
    assert!(oracle.windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bar(1000) < 0.05);
}

#[test]
fn strength_examples() {
    assert_eq!(steps_from_strength(50, 1.0).unwrap(), 50);
    assert_eq!(steps_from_strength(50, DEFAULT_STRENGTH).unwrap(), 45);
    assert_eq!(steps_from_strength(10, 0.05).unwrap(), 1);
    for bad in [0.0, -0.2, 1.01, f64::NAN] {
        assert!(matches!(steps_from_strength(50, bad), Err(DiffusionError::InvalidStrength(_))));
    }
}

#[test]
fn noising_arithmetic_and_shape_check() {
    // single-step schedule with alpha_bar = 0.64
    let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
    let z = LatentState::clean(Array3::from_elem((1, 1, 1), 1.0));
    let out = forward_noise(&z, 1, &s, &Array3::from_elem((1, 1, 1), 0.5)).unwrap();
    assert!((out.z[[0, 0, 0]] - 1.1).abs() < 1e-12);
    assert_eq!(out.t, 1);
    assert!(matches!(forward_noise(&z, 1, &s, &Array3::zeros((1, 2, 1))), Err(DiffusionError::ShapeMismatch { .. })));
    assert!(forward_noise(&z, 2, &s, &Array3::zeros((1, 1, 1))).is_err());
}

struct Counting(AtomicUsize);

impl CoarseInpainterClient for Counting {
    fn inpaint(&self, image: &Rgb8Image, _: &Mask) -> Result<Rgb8Image, ClientError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok(image.clone())
    }
}

#[test]
fn empty_mask_skips_the_inpainter() {
    let img = Rgb8Image::from_fn(16, 16, |x, y| Rgb([(x * 9) as u8, (y * 13) as u8, 77]));
    let c = Counting(AtomicUsize::new(0));
    let z = content_initialize(&img, &Mask::zeros(16, 16), &c, &ToyVae).unwrap();
    assert_eq!(c.0.load(Ordering::SeqCst), 0);
    assert_eq!(z.z, ToyVae.encode(&img).unwrap());
    // an identity inpainter gives the same latent
    let z = content_initialize(&img, &Mask::ones(16, 16), &c, &ToyVae).unwrap();
    assert_eq!(c.0.load(Ordering::SeqCst), 1);
    assert_eq!(z.z, ToyVae.encode(&img).unwrap());
}

#[test]
fn mean_fill_prefill_on_a_checkerboard() {
    let img = Rgb8Image::from_fn(16, 16, |x, y| if (x + y) % 2 == 0 { Rgb([200, 40, 10]) } else { Rgb([20, 100, 250]) });
    let mask = Mask::from_fn(16, 16, |y, x| (4..12).contains(&y) && (4..12).contains(&x));
    let mut sums = [0u32; 3];
    let mut n = 0;
    for (x, y, p) in img.enumerate_pixels() {
        if !mask.get(y as usize, x as usize) {
            (0..3).for_each(|c| sums[c] += p[c] as u32);
            n += 1;
        }
    }
    let mean = sums.map(|s| (s as f64 / n as f64).round() as u8);
    let pre = prefill(&img, &mask, &MeanFillInpainter).unwrap();
    for (x, y, p) in pre.enumerate_pixels() {
        if mask.get(y as usize, x as usize) {
            assert_eq!(p.0, mean);
        } else {
            assert_eq!(p, img.get_pixel(x, y));
        }
    }
}

#[test]
fn input_assembly_by_index() {
    let z = Array3::from_shape_fn((4, 2, 2), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
    let zm = Array3::from_shape_fn((4, 2, 2), |(c, y, x)| -((c * 100 + y * 10 + x) as f64) - 1.0);
    let mask = Mask::from_fn(2, 2, |y, x| y == x);
    let cond = ConditioningBundle::new(zm.clone(), &mask, Array2::zeros((1, 4)));
    let input = assemble_unet_input(&LatentState { z: z.clone(), t: 3 }, &cond).unwrap();
    assert_eq!(input.dim(), (9, 2, 2));
    for c in 0..9 {
        for y in 0..2 {
            for x in 0..2 {
                let want = match c {
                    0..=3 => z[[c, y, x]],
                    4..=7 => zm[[c - 4, y, x]],
                    _ => (y == x) as u8 as f64,
                };
                assert_eq!(input[[c, y, x]], want);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_is_the_running_product(
        t in 1usize..300,
        lo in 1e-5f64..0.01,
        span in 0.0f64..0.05,
        scaled in any::<bool>(),
    ) {
        let kind = if scaled { BetaKind::ScaledLinear } else { BetaKind::Linear };
        let s = build_schedule(t, lo, lo + span, kind).unwrap();
        let oracle = product_oracle(s.betas());
        for k in 1..=t {
            prop_assert!((s.alpha_bar(k) - oracle[k - 1]).abs() < 1e-12);
            prop_assert!(s.alpha_bar(k) > 0.0 && s.alpha_bar(k) < 1.0);
        }
        prop_assert!(oracle.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn noising_is_linear(a in -5.0f64..5.0, seed in any::<u64>(), t in 1usize..=100) {
        let s = build_schedule(100, 1e-4, 0.02, BetaKind::Linear).unwrap();
        let val = |i: usize| ((seed.wrapping_add(i as u64 * 7919) % 1000) as f64 / 100.0) - 5.0;
        let z0 = Array3::from_shape_fn((4, 2, 3), |(c, y, x)| val(c * 6 + y * 3 + x));
        let eps = Array3::from_shape_fn((4, 2, 3), |(c, y, x)| val(100 + c * 6 + y * 3 + x));
        let f = forward_noise(&LatentState::clean(z0.clone()), t, &s, &eps).unwrap();
        let g = forward_noise(&LatentState::clean(&z0 * a), t, &s, &(&eps * a)).unwrap();
        for (l, r) in g.z.iter().zip(f.z.iter()) {
            prop_assert!((l - a * r).abs() < 1e-9);
        }
    }

    #[test]
    fn strength_is_monotone(total in 1usize..2000, a in 0.0001f64..=1.0, b in 0.0001f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (steps_from_strength(total, lo).unwrap(), steps_from_strength(total, hi).unwrap());
        prop_assert!(x <= y);
        prop_assert!(x >= 1 && y <= total);
    }

    #[test]
    fn assembly_slices_back(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let val = |i: usize| (seed.wrapping_mul(2654435761).wrapping_add(i as u64) % 997) as f64 / 97.0;
        let z = Array3::from_shape_fn((4, h, w), |(c, y, x)| val(c * h * w + y * w + x));
        let zm = Array3::from_shape_fn((4, h, w), |(c, y, x)| -val(500 + c * h * w + y * w + x));
        let mask = Mask::from_fn(h, w, |y, x| (seed as usize + y * w + x).is_multiple_of(3));
        let cond = ConditioningBundle::new(zm.clone(), &mask, Array2::zeros((1, 2)));
        let input = assemble_unet_input(&LatentState { z: z.clone(), t: 1 }, &cond).unwrap();
        prop_assert_eq!(input.slice(s![0..4, .., ..]).to_owned(), z);
        prop_assert_eq!(input.slice(s![4..8, .., ..]).to_owned(), zm);
        prop_assert_eq!(input.slice(s![8..9, .., ..]).to_owned(), cond.mask);
    }
}
