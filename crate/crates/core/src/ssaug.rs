//! Internal augmentor: a weak random crop of the network output, a Gaussian
//! blur of that crop, and a cosine-decayed consistency loss between the two.

use std::f64::consts::PI;

use thiserror::Error;

use crate::imgdata::{crop, Image, ImageError, Rect, CHANNELS};
use crate::nnet::{blur_image, gaussian_kernel, Float, NnError, Tape, Var};
use crate::rng::Rng;

/// Smallest crop side the weak augmentation may produce.
pub const MIN_CROP: usize = 8;

#[derive(Debug, Error)]
pub enum AugError {
    #[error("invalid augmentation policy: {0}")]
    Policy(String),
    #[error("{w}x{h} crop of a {width}x{height} image is below the {MIN_CROP}x{MIN_CROP} minimum")]
    CropTooSmall {
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("blur kernel of width {kernel} does not fit a {width}x{height} image")]
    KernelTooLarge { kernel: usize, width: usize, height: usize },
    #[error("invalid decay schedule: {0}")]
    Schedule(String),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("image dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugPolicy {
    /// Fraction of each side kept by the weak crop, in `(0, 1]`.
    pub crop_fraction: f64,
    pub blur_radius: usize,
    pub blur_sigma: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            crop_fraction: 0.75,
            blur_radius: 2,
            blur_sigma: 1.0,
        }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<(), AugError> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(AugError::Policy(format!("crop_fraction {} not in (0, 1]", self.crop_fraction)));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(AugError::Policy(format!("blur_sigma {} must be positive", self.blur_sigma)));
        }
        Ok(())
    }

    pub fn kernel_width(&self) -> usize {
        2 * self.blur_radius + 1
    }

    pub fn kernel(&self) -> Vec<f64> {
        gaussian_kernel(self.blur_radius, self.blur_sigma)
    }

    /// Crop size for a `width x height` image: each side scaled and rounded.
    pub fn crop_size(&self, width: usize, height: usize) -> Result<(usize, usize), AugError> {
        self.validate()?;
        let side = |n: usize| ((n as f64 * self.crop_fraction).round() as usize).min(n);
        let (w, h) = (side(width), side(height));
        if w < MIN_CROP || h < MIN_CROP {
            return Err(AugError::CropTooSmall { w, h, width, height });
        }
        if self.kernel_width() > w.min(h) {
            return Err(AugError::KernelTooLarge {
                kernel: self.kernel_width(),
                width: w,
                height: h,
            });
        }
        Ok((w, h))
    }

    /// Uniformly random crop rectangle for a `width x height` image.
    pub fn draw_crop(&self, rng: &mut Rng, width: usize, height: usize) -> Result<Rect, AugError> {
        let (w, h) = self.crop_size(width, height)?;
        let x = rng.below(width - w + 1);
        let y = rng.below(height - h + 1);
        Ok(Rect { x, y, w, h })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecaySchedule {
    pub alpha0: f64,
    pub total_steps: u64,
}

impl DecaySchedule {
    pub fn new(alpha0: f64, total_steps: u64) -> Result<Self, AugError> {
        if !(alpha0 >= 0.0 && alpha0.is_finite()) {
            return Err(AugError::Schedule(format!("alpha0 {alpha0} must be >= 0")));
        }
        if total_steps == 0 {
            return Err(AugError::Schedule("total_steps must be >= 1".into()));
        }
        Ok(Self { alpha0, total_steps })
    }
}

/// `alpha0 * (cos(pi * s / S) + 1) / 2`.
pub fn alpha_at(schedule: &DecaySchedule, step: u64) -> Result<f64, AugError> {
    let total = schedule.total_steps;
    if step > total {
        return Err(AugError::StepOutOfRange { step, total });
    }
    if step == total {
        return Ok(0.0);
    }
    let ratio = step as f64 / total as f64;
    Ok(schedule.alpha0 * 0.5 * ((PI * ratio).cos() + 1.0))
}

pub fn weak_aug(rng: &mut Rng, img: &Image, policy: &AugPolicy) -> Result<(Image, Rect), AugError> {
    let rect = policy.draw_crop(rng, img.width(), img.height())?;
    Ok((crop(img, rect)?, rect))
}

/// Separable Gaussian blur; borders mirror with the edge sample repeated.
pub fn strong_aug(img: &Image, policy: &AugPolicy) -> Result<Image, AugError> {
    policy.validate()?;
    let (w, h) = img.dims();
    if policy.kernel_width() > w.min(h) {
        return Err(AugError::KernelTooLarge {
            kernel: policy.kernel_width(),
            width: w,
            height: h,
        });
    }
    let x: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    let out = blur_image(&x, CHANNELS, h, w, &policy.kernel());
    Ok(Image::new(w, h, out.into_iter().map(|v| v as f32).collect())?)
}

/// `alpha * mean((weak - aggr)^2)` over every sample.
pub fn internal_loss(weak: &Image, aggr: &Image, alpha: f64) -> Result<f64, AugError> {
    if !weak.same_dims(aggr) {
        return Err(AugError::DimensionMismatch {
            a: weak.dims(),
            b: aggr.dims(),
        });
    }
    let n = weak.data().len() as f64;
    let sq: f64 = weak
        .data()
        .iter()
        .zip(aggr.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(alpha * sq / n)
}

/// Variants of the tape term kept for ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InternalOptions {
    /// Sum of squares instead of the per-element mean.
    pub sum_form: bool,
    /// Stop gradients through the blurred branch.
    pub detach_strong: bool,
}

/// Record the internal term for a crop rectangle drawn beforehand.
pub fn internal_term_at<F: Float>(
    tape: &mut Tape<F>,
    y_hat: Var,
    rect: Rect,
    policy: &AugPolicy,
    alpha: f64,
    opts: InternalOptions,
) -> Result<Var, AugError> {
    policy.validate()?;
    let weak = tape.crop(y_hat, rect.x, rect.y, rect.w, rect.h)?;
    let strong = tape.blur(weak, &policy.kernel())?;
    let strong = if opts.detach_strong { tape.detach(strong) } else { strong };
    let diff = tape.sub(weak, strong)?;
    let energy = if opts.sum_form {
        tape.sum_square(diff)
    } else {
        tape.mean_square(diff)
    };
    Ok(tape.scale(energy, F::of(alpha)))
}

/// Draw a crop for `y_hat` and record the internal term on its tape.
pub fn internal_term<F: Float>(
    tape: &mut Tape<F>,
    rng: &mut Rng,
    y_hat: Var,
    policy: &AugPolicy,
    alpha: f64,
    opts: InternalOptions,
) -> Result<Var, AugError> {
    let (h, w) = match *tape.shape(y_hat) {
        [_, h, w] => (h, w),
        ref s => return Err(NnError::Shape { op: "internal_term", detail: format!("{s:?}") }.into()),
    };
    let rect = policy.draw_crop(rng, w, h)?;
    internal_term_at(tape, y_hat, rect, policy, alpha, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgdata::gen_scene;
    use proptest::prelude::*;

    use crate::rng::Rng;

    fn sched() -> DecaySchedule {
        DecaySchedule::new(0.1, 1000).unwrap()
    }

    #[test]
    fn full_fraction_is_identity_crop() {
        let img = gen_scene(&mut Rng::new(1), 20, 12, 3);
        let p = AugPolicy {
            crop_fraction: 1.0,
            ..AugPolicy::default()
        };
        let (out, rect) = weak_aug(&mut Rng::new(2), &img, &p).unwrap();
        assert_eq!(rect, Rect { x: 0, y: 0, w: 20, h: 12 });
        assert_eq!(out, img);
    }

    #[test]
    fn same_rng_state_same_rect() {
        let img = gen_scene(&mut Rng::new(1), 32, 32, 3);
        let p = AugPolicy::default();
        let a = weak_aug(&mut Rng::new(7), &img, &p).unwrap();
        let b = weak_aug(&mut Rng::new(7), &img, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn half_crop_origins_cover_valid_range() {
        let img = gen_scene(&mut Rng::new(1), 16, 16, 3);
        let p = AugPolicy {
            crop_fraction: 0.5,
            ..AugPolicy::default()
        };
        let mut rng = Rng::new(3);
        let mut seen = [[false; 9]; 9];
        for _ in 0..1000 {
            let (_, r) = weak_aug(&mut rng, &img, &p).unwrap();
            assert_eq!((r.w, r.h), (8, 8));
            assert!(r.x <= 8 && r.y <= 8);
            seen[r.y][r.x] = true;
        }
        assert!(seen.iter().flatten().all(|&s| s), "every origin in [0,8]^2 reachable");
    }

    #[test]
    fn crop_below_minimum_is_rejected() {
        let img = gen_scene(&mut Rng::new(1), 9, 9, 3);
        let err = weak_aug(&mut Rng::new(1), &img, &AugPolicy::default()).unwrap_err();
        assert!(matches!(err, AugError::CropTooSmall { w: 7, h: 7, .. }), "{err}");
        let p = AugPolicy {
            crop_fraction: 0.0,
            ..AugPolicy::default()
        };
        assert!(matches!(p.validate(), Err(AugError::Policy(_))));
    }

    #[test]
    fn constant_image_unchanged_by_blur() {
        let img = Image::filled(12, 9, [0.3, 0.6, 0.9]);
        let out = strong_aug(&img, &AugPolicy::default()).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn impulse_gives_outer_product() {
        let (w, h) = (9, 9);
        let img = Image::from_fn(w, h, |_, y, x| if (y, x) == (4, 4) { 1.0 } else { 0.0 });
        let p = AugPolicy::default();
        let out = strong_aug(&img, &p).unwrap();
        let k = p.kernel();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as isize - 4, x as isize - 4);
                    let expect = if dy.abs() <= 2 && dx.abs() <= 2 {
                        k[(dy + 2) as usize] * k[(dx + 2) as usize]
                    } else {
                        0.0
                    };
                    assert!((f64::from(out.get(c, y, x)) - expect).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn kernel_too_large_is_rejected() {
        let img = Image::filled(4, 4, [0.5; 3]);
        assert!(matches!(strong_aug(&img, &AugPolicy::default()), Err(AugError::KernelTooLarge { .. })));
    }

    #[test]
    fn internal_loss_examples() {
        let a = gen_scene(&mut Rng::new(1), 10, 10, 3);
        assert_eq!(internal_loss(&a, &a, 0.1).unwrap(), 0.0);
        let b = a.map(|_, v| v + 0.25);
        assert_eq!(internal_loss(&a, &b, 0.0).unwrap(), 0.0);
        let x = Image::filled(10, 10, [0.5; 3]);
        let y = Image::filled(10, 10, [0.4; 3]);
        let l = internal_loss(&x, &y, 0.1).unwrap();
        assert!((l - 1e-3).abs() < 1e-9, "{l}");
        let small = Image::filled(9, 10, [0.5; 3]);
        assert!(internal_loss(&x, &small, 0.1).is_err());
    }

    #[test]
    fn alpha_schedule_endpoints() {
        let s = sched();
        assert_eq!(alpha_at(&s, 0).unwrap(), 0.1);
        assert!((alpha_at(&s, 500).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(alpha_at(&s, 1000).unwrap(), 0.0);
        assert!(matches!(alpha_at(&s, 1001), Err(AugError::StepOutOfRange { .. })));
        assert!(DecaySchedule::new(0.1, 0).is_err());
        assert!(DecaySchedule::new(-0.1, 10).is_err());
    }

    #[test]
    fn noise_raises_expected_high_frequency_energy() {
        let base = Image::filled(16, 16, [0.5; 3]);
        let p = AugPolicy::default();
        let mut rng = Rng::new(9);
        let mut last = 0.0;
        for sd in [0.0, 0.02, 0.05, 0.1] {
            let mut total = 0.0;
            for _ in 0..100 {
                let data = base.data().iter().map(|&v| v + (sd * rng.normal()) as f32).collect();
                let noisy = Image::new(16, 16, data).unwrap();
                let blurred = strong_aug(&noisy, &p).unwrap();
                total += internal_loss(&noisy, &blurred, 1.0).unwrap();
            }
            let mean = total / 100.0;
            if sd == 0.0 {
                assert!(mean < 1e-12);
            } else {
                assert!(mean > last, "sd {sd}: {mean} <= {last}");
            }
            last = mean;
        }
    }

    fn tape_term(
        y: &[f64],
        w: usize,
        h: usize,
        rect: Rect,
        alpha: f64,
        opts: InternalOptions,
    ) -> (f64, Vec<f64>) {
        let mut t = Tape::<f64>::new();
        let v = t.leaf(vec![3, h, w], y.to_vec());
        let l = internal_term_at(&mut t, v, rect, &AugPolicy::default(), alpha, opts).unwrap();
        let g = t.backward(l).unwrap();
        (t.scalar(l), g.wrt(v).map_or(vec![0.0; y.len()], <[f64]>::to_vec))
    }

    #[test]
    fn tape_value_matches_image_loss() {
        let img = gen_scene(&mut Rng::new(4), 16, 16, 4);
        let p = AugPolicy::default();
        let (weak, rect) = weak_aug(&mut Rng::new(5), &img, &p).unwrap();
        let expect = internal_loss(&weak, &strong_aug(&weak, &p).unwrap(), 0.07).unwrap();
        let y: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
        let (got, _) = tape_term(&y, 16, 16, rect, 0.07, InternalOptions::default());
        assert!((got - expect).abs() < 1e-8 * expect.max(1e-3), "{got} vs {expect}");

        let mut t = Tape::<f64>::new();
        let v = t.leaf(vec![3, 16, 16], y.clone());
        let l = internal_term(&mut t, &mut Rng::new(5), v, &p, 0.07, InternalOptions::default()).unwrap();
        assert_eq!(t.scalar(l), got);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (w, h) = (8, 8);
        let mut rng = Rng::new(12);
        let y: Vec<f64> = (0..3 * w * h).map(|_| rng.next_f64()).collect();
        let rect = Rect { x: 0, y: 0, w, h };
        for opts in [
            InternalOptions::default(),
            InternalOptions { sum_form: true, detach_strong: false },
            InternalOptions { sum_form: false, detach_strong: true },
        ] {
            let (_, g) = tape_term(&y, w, h, rect, 0.1, opts);
            // The detached variant differentiates only the weak branch, so
            // its oracle treats the blurred crop as a constant.
            let frozen = if opts.detach_strong {
                Some(blur_image(&y, 3, h, w, &AugPolicy::default().kernel()))
            } else {
                None
            };
            let f = |v: &[f64]| -> f64 {
                match &frozen {
                    Some(s) => {
                        let sq: f64 = v.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
                        0.1 * sq / if opts.sum_form { 1.0 } else { v.len() as f64 }
                    }
                    None => tape_term(v, w, h, rect, 0.1, opts).0,
                }
            };
            let eps = 1e-5;
            let scale = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            for i in 0..y.len() {
                let mut p = y.clone();
                p[i] += eps;
                let plus = f(&p);
                p[i] -= 2.0 * eps;
                let minus = f(&p);
                let num = (plus - minus) / (2.0 * eps);
                let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-4 * scale);
                assert!(rel < 1e-4, "{opts:?} [{i}] analytic {} numeric {num}", g[i]);
            }
        }
    }

    #[test]
    fn pixels_outside_crop_get_no_gradient() {
        let (w, h) = (16, 16);
        let mut rng = Rng::new(13);
        let y: Vec<f64> = (0..3 * w * h).map(|_| rng.next_f64()).collect();
        let rect = Rect { x: 3, y: 5, w: 12, h: 9 };
        let (_, g) = tape_term(&y, w, h, rect, 0.1, InternalOptions::default());
        for c in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    let inside = (3..15).contains(&xx) && (5..14).contains(&yy);
                    let v = g[c * w * h + yy * w + xx];
                    if !inside {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        let (_, g0) = tape_term(&y, w, h, rect, 0.0, InternalOptions::default());
        assert!(g0.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn blur_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = Rng::new(seed);
            let x: Vec<f64> = (0..3 * 10 * 11).map(|_| rng.next_f64()).collect();
            let y: Vec<f64> = (0..3 * 10 * 11).map(|_| rng.next_f64()).collect();
            let k = AugPolicy::default().kernel();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = blur_image(&mix, 3, 10, 11, &k);
            let bx = blur_image(&x, 3, 10, 11, &k);
            let by = blur_image(&y, 3, 10, 11, &k);
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * bx[i] + b * by[i])).abs() < 1e-6);
            }
        }

        #[test]
        fn blur_preserves_mean(seed in 0u64..10_000, w in 8usize..40, h in 8usize..40, complexity in 0usize..8) {
            let img = gen_scene(&mut Rng::new(seed), w, h, complexity);
            let out = strong_aug(&img, &AugPolicy::default()).unwrap();
            for ch in crate::imgdata::Channel::ALL {
                let a = crate::imgdata::channel_mean(&img, ch);
                let b = crate::imgdata::channel_mean(&out, ch);
                prop_assert!((a - b).abs() < 1e-3, "{} vs {}", a, b);
            }
        }

        #[test]
        fn alpha_monotone_and_bounded(alpha0 in 0.0f64..1.0, total in 1u64..5000, s1 in 0u64..5000, s2 in 0u64..5000) {
            let s = DecaySchedule::new(alpha0, total).unwrap();
            let (lo, hi) = (s1.min(s2).min(total), s1.max(s2).min(total));
            let (a, b) = (alpha_at(&s, lo).unwrap(), alpha_at(&s, hi).unwrap());
            prop_assert!(b <= a);
            prop_assert!((0.0..=alpha0).contains(&a));
        }
    }
}
