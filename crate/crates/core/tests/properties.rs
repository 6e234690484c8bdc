use proptest::prelude::*;

use cono_core::engine::{
    apply_regularization, consistency_grad, extending_shuffle, internal_shuffle,
};
use cono_core::latent::{concat_frames, Dims, FrameRange, LatentClip};
use cono_core::schedule::{add_noise, ddim_step, NoiseSchedule};
use cono_core::world::{analytic_eps, cfg_combine, SceneSpec};

fn clip_strategy(max_frames: usize) -> impl Strategy<Value = LatentClip> {
    (1..=max_frames, 1..=2usize, 1..=3usize, 1..=3usize).prop_flat_map(|(n, c, h, w)| {
        let len = n * c * h * w;
        prop::collection::vec(-4.0f32..4.0, len)
            .prop_map(move |v| LatentClip::new(Dims::new(n, c, h, w).unwrap(), v).unwrap())
    })
}

fn pair_strategy(max_frames: usize) -> impl Strategy<Value = (LatentClip, LatentClip)> {
    clip_strategy(max_frames).prop_flat_map(|a| {
        let dims = a.dims();
        prop::collection::vec(-4.0f32..4.0, dims.len())
            .prop_map(move |v| (a.clone(), LatentClip::new(dims, v).unwrap()))
    })
}

fn frame_multiset(c: &LatentClip) -> Vec<Vec<u32>> {
    let mut v: Vec<Vec<u32>> = c.frames().map(|f| f.iter().map(|x| x.to_bits()).collect()).collect();
    v.sort();
    v
}

proptest! {
    #[test]
    fn flip_is_involution(c in clip_strategy(12), a in 0usize..13, b in 0usize..13) {
        let n = c.n_frames();
        let (lo, hi) = (a.min(b).min(n), a.max(b).min(n));
        let r = FrameRange::new(lo, hi).unwrap();
        let once = c.flip_frames(r).unwrap();
        prop_assert_eq!(once.flip_frames(r).unwrap(), c.clone());
        prop_assert_eq!(frame_multiset(&once), frame_multiset(&c));
    }

    #[test]
    fn concat_then_slice_restores_parts(parts in prop::collection::vec(1usize..5, 1..5), v in -2.0f32..2.0) {
        let clips: Vec<LatentClip> = parts
            .iter()
            .enumerate()
            .map(|(i, &n)| LatentClip::filled(Dims::new(n, 1, 2, 2).unwrap(), v + i as f32))
            .collect();
        let joined = concat_frames(&clips).unwrap();
        let mut start = 0;
        for c in &clips {
            let r = FrameRange::new(start, start + c.n_frames()).unwrap();
            prop_assert_eq!(&joined.slice_frames(r).unwrap(), c);
            start += c.n_frames();
        }
        prop_assert_eq!(start, joined.n_frames());
    }

    #[test]
    fn frame_mean_is_linear((x, y) in pair_strategy(8), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let comb = LatentClip::new(
            x.dims(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| (a * p as f64 + b * q as f64) as f32).collect(),
        ).unwrap();
        let lhs = comb.frame_mean();
        let (mx, my) = (x.frame_mean(), y.frame_mean());
        for ((l, p), q) in lhs.data().iter().zip(mx.data()).zip(my.data()) {
            let rhs = a * *p as f64 + b * *q as f64;
            prop_assert!((*l as f64 - rhs).abs() < 1e-5 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn mse_is_a_symmetric_nonnegative_gap((x, y) in pair_strategy(6)) {
        let d = x.mse(&y).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, y.mse(&x).unwrap());
        prop_assert_eq!(x.mse(&x).unwrap(), 0.0);
        prop_assert_eq!(d == 0.0, x == y);
    }

    #[test]
    fn shuffles_are_permutations(c in clip_strategy(32), a in 0usize..1000, b in 0usize..1000) {
        let n = c.n_frames();
        let n1 = 1 + a % n;
        let ext = extending_shuffle(&c, n1).unwrap();
        prop_assert_eq!(frame_multiset(&ext), frame_multiset(&c));
        for i in 0..n1 {
            prop_assert_eq!(ext.frame(i), c.frame(n - n1 + i));
        }
        if n1 < n {
            let n2 = 1 + b % (n - n1);
            let int = internal_shuffle(&c, n1, n2).unwrap();
            prop_assert_eq!(frame_multiset(&int), frame_multiset(&c));
            for i in 0..n1 {
                prop_assert_eq!(int.frame(i), c.frame(i));
            }
            for i in 0..n2 {
                prop_assert_eq!(int.frame(n - n2 + i), c.frame(n1 + i));
            }
        }
    }

    #[test]
    fn regularization_strictly_contracts((r, c) in pair_strategy(8), frac in 0.01f64..0.99) {
        let dims = c.dims();
        let np = (dims.frames * dims.frame_len()) as f64;
        let out = apply_regularization(&c, &r, frac * np).unwrap();
        prop_assert!(out.eps.is_finite());
        if out.g_before > 1e-8 {
            prop_assert!(out.g_after < out.g_before);
        }
        let g = consistency_grad(&r, &c).unwrap();
        let first = g.frame(0).to_vec();
        prop_assert!(g.frames().all(|f| f == first.as_slice()));
    }

    #[test]
    fn ddim_commutes_with_frame_permutation((z, e) in pair_strategy(6), t in 1usize..1000, seed in 0u64..1000) {
        let schedule = NoiseSchedule::default();
        let n = z.n_frames();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left((seed as usize) % n);
        let a = ddim_step(&schedule, &z, &e, t, Some(t - 1)).unwrap().permute_frames(&order).unwrap();
        let b = ddim_step(
            &schedule,
            &z.permute_frames(&order).unwrap(),
            &e.permute_frames(&order).unwrap(),
            t,
            Some(t - 1),
        ).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn noising_round_trip((z0, e) in pair_strategy(4), t in 0usize..1000) {
        let schedule = NoiseSchedule::default();
        let zt = add_noise(&schedule, &z0, &e, t).unwrap();
        let back = ddim_step(&schedule, &zt, &e, t, None).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            prop_assert!((a - b).abs() as f64 <= 1e-5 * (b.abs() as f64).max(1.0));
        }
    }

    #[test]
    fn analytic_eps_is_affine((mu, z) in pair_strategy(3), t in 0usize..1000, lam in -2.0f64..2.0) {
        let schedule = NoiseSchedule::default();
        let scene = SceneSpec { mu: mu.clone(), sigma0: 0.4 };
        let zero = LatentClip::zeros(z.dims());
        let e0 = analytic_eps(&scene, &zero, t, &schedule).unwrap();
        let e1 = analytic_eps(&scene, &z, t, &schedule).unwrap();
        let zl = LatentClip::new(z.dims(), z.data().iter().map(|&v| (lam * v as f64) as f32).collect()).unwrap();
        let el = analytic_eps(&scene, &zl, t, &schedule).unwrap();
        for ((a, b), c) in e0.data().iter().zip(e1.data()).zip(el.data()) {
            let interp = *a as f64 + lam * (*b as f64 - *a as f64);
            // relative to the magnitudes combined in f32
            let scale = 1.0 + a.abs() as f64 + lam.abs() * (a.abs() + b.abs()) as f64;
            prop_assert!((*c as f64 - interp).abs() < 1e-6 * scale, "{c} vs {interp}");
        }
    }

    #[test]
    fn cfg_unit_scale_is_exact((u, c) in pair_strategy(4)) {
        prop_assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c.clone());
        prop_assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
    }
}
