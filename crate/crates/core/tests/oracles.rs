mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracle;
use trajvid_core::metrics::{ssim_frame, SsimParams};
use trajvid_core::scene::{SceneDistribution, ShapeKind, ShapeSpec, SyntheticScene, Texture};
use trajvid_core::trajectory::{densify_flow, resample_track, DensifyParams, Point, SparseFlow};
use trajvid_core::warp::{forward_splat, resize_flow};
use trajvid_core::FlowField;

#[test]
fn splat_matches_gather_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (h, w, c) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=4));
        let n = h * w;
        let values: Vec<f32> = (0..c * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let dy: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (out, valid) = forward_splat(&values, c, h, w, &dx, &dy, None);
        let (want, want_valid) = oracle::splat(&values, c, h, w, &dx, &dy);
        assert!(oracle::max_abs_diff(&out, &want) <= 1e-5);
        assert!(oracle::max_abs_diff(&valid, &want_valid) <= 1e-5);
    }
}

#[test]
fn three_by_three_half_pixel_field() {
    let mut values = vec![0.0f32; 9];
    values[4] = 1.0;
    let mut dx = vec![0.0f32; 9];
    dx[4] = 0.5;
    let dy = vec![0.0f32; 9];
    let (out, valid) = forward_splat(&values, 1, 3, 3, &dx, &dy, None);
    let (want, want_valid) = oracle::splat(&values, 1, 3, 3, &dx, &dy);
    assert!(oracle::max_abs_diff(&out, &want) <= 1e-7);
    assert!(oracle::max_abs_diff(&valid, &want_valid) <= 1e-7);
    assert_eq!(out[4], 1.0);
    assert!((out[5] - 1.0 / 3.0).abs() < 1e-7);
}

#[test]
fn flow_resize_matches_bilinear_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<f32> = (0..2 * 64).map(|_| rng.random_range(-8.0..8.0)).collect();
    let flow = FlowField::new(1, 8, 8, true, data).unwrap();
    let small = resize_flow(&flow, (5, 5)).unwrap();
    let want = oracle::resize_flow_frame(flow.frame(0), 8, 8, 5, 5);
    assert!(oracle::max_abs_diff(small.frame(0), &want) <= 1e-6);

    for _ in 0..30 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let (oh, ow) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let frames = rng.random_range(1..=3);
        let data: Vec<f32> = (0..frames * 2 * h * w)
            .map(|i| {
                let lim = if (i / (h * w)) % 2 == 0 { w } else { h } as f32;
                rng.random_range(-lim..=lim)
            })
            .collect();
        let flow = FlowField::new(frames, h, w, true, data).unwrap();
        let out = resize_flow(&flow, (oh, ow)).unwrap();
        for t in 0..frames {
            let want = oracle::resize_flow_frame(flow.frame(t), h, w, oh, ow);
            assert!(oracle::max_abs_diff(out.frame(t), &want) <= 1e-6);
        }
    }
}

fn random_sparse(rng: &mut ChaCha8Rng, h: usize, w: usize, sources: usize) -> SparseFlow {
    let n = h * w;
    let mut data = vec![0.0f32; 2 * n];
    let mut mask = vec![false; n];
    for _ in 0..sources {
        let i = rng.random_range(0..n);
        mask[i] = true;
        data[i] = rng.random_range(-5.0..5.0);
        data[n + i] = rng.random_range(-5.0..5.0);
    }
    SparseFlow::new(FlowField::new(1, h, w, true, data).unwrap(), mask).unwrap()
}

#[test]
fn densify_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..50 {
        let k = if case == 0 { 5 } else { rng.random_range(1..=8) };
        let sparse = random_sparse(&mut rng, 32, 32, k);
        let sigma = rng.random_range(1.0..6.0f32);
        let params = DensifyParams {
            sigma,
            support_radius: sigma * rng.random_range(1.0..3.0f32),
        };
        let dense = densify_flow(&sparse, params).unwrap();
        let want = oracle::densify(&sparse.sources(0), 32, 32, params.sigma as f64, params.support_radius as f64);
        assert!(oracle::max_abs_diff(dense.frame(0), &want) <= 1e-6, "case {case}");
    }
}

#[test]
fn ssim_matches_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..3 {
        let a: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f32> = a.iter().map(|v| (v + rng.random_range(-0.2..0.2f32)).clamp(0.0, 1.0)).collect();
        let got = ssim_frame(&a, &b, 3, 32, 32, &SsimParams::default()).unwrap();
        assert!((got - oracle::ssim(&a, &b, 3, 32, 32)).abs() <= 1e-6);
    }
}

#[test]
fn resample_matches_arc_length_march() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let track = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0)];
    let pts: Vec<Point> = track.iter().map(|&(x, y)| Point::new(x as f32, y as f32)).collect();
    let got = resample_track(&pts, 5);
    let want = [(0.0, 0.0), (5.0, 0.0), (10.0, 0.0), (10.0, 5.0), (10.0, 10.0)];
    for (g, w) in got.iter().zip(want) {
        assert!((g.x as f64 - w.0).abs() < 1e-5 && (g.y as f64 - w.1).abs() < 1e-5);
    }
    for _ in 0..40 {
        let k = rng.random_range(2..6);
        let track: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random_range(0..64) as f64, rng.random_range(0..64) as f64))
            .collect();
        let pts: Vec<Point> = track.iter().map(|&(x, y)| Point::new(x as f32, y as f32)).collect();
        let frames = rng.random_range(2..12);
        let got = resample_track(&pts, frames);
        assert_eq!(got.len(), frames);
        let total = oracle::arc_length(&track);
        for (i, p) in got.iter().enumerate() {
            let d = total * i as f64 / (frames - 1) as f64;
            let (x, y) = oracle::point_at_arc_length(&track, d);
            assert!((p.x as f64 - x).abs() < 1e-3 && (p.y as f64 - y).abs() < 1e-3);
        }
    }
}

fn occluding_scene() -> SyntheticScene {
    let shape = |center: [f32; 2], depth: f32, v: [f32; 2]| ShapeSpec {
        kind: ShapeKind::Ellipse { rx: 6.0, ry: 5.0 },
        center,
        velocity: v,
        depth,
        texture: Texture::flat([depth, 0.5, 0.5]),
    };
    SyntheticScene {
        seed: 0,
        width: 32,
        height: 32,
        frames: 4,
        background: Texture::flat([0.2, 0.1, 0.1]),
        background_depth: 0.1,
        background_velocity: [0.0, 0.0],
        shapes: vec![shape([12.0, 14.0], 0.5, [1.0, 0.0]), shape([18.0, 15.0], 0.9, [-1.0, 0.5])],
    }
}

#[test]
fn zbuffer_matches_brute_force_max() {
    let scene = occluding_scene();
    let clip = scene.render().unwrap();
    for t in 0..scene.frames {
        for y in 0..32 {
            for x in 0..32 {
                let mut best = scene.background_depth;
                for s in &scene.shapes {
                    let (ox, oy) = s.offset(t);
                    let lx = x as f64 - s.center[0] as f64 - ox as f64;
                    let ly = y as f64 - s.center[1] as f64 - oy as f64;
                    if s.kind.contains(lx, ly) {
                        best = best.max(s.depth);
                    }
                }
                assert_eq!(clip.depth[t].data()[y * 32 + x], best);
            }
        }
    }
}

#[test]
fn one_hot_argmax_equals_instance_ids() {
    let d = SceneDistribution {
        tissue: (1, 2),
        instruments: (1, 2),
        ..Default::default()
    };
    for seed in 0..10 {
        let clip = d.sample(seed).unwrap().render().unwrap();
        let (data, labels) = clip.one_hot(0);
        let n = 32 * 32;
        for i in 0..n {
            let hot: Vec<usize> = (0..labels.len()).filter(|&c| data[c * n + i] == 1.0).collect();
            assert_eq!(hot.len(), 1);
            assert_eq!(labels[hot[0]], clip.ids[0][i]);
        }
    }
}

#[test]
fn gt_flow_warps_frame_zero_onto_later_frames() {
    let d = SceneDistribution {
        instruments: (1, 2),
        tissue: (0, 1),
        occlusion_free: true,
        ..Default::default()
    };
    for seed in 0..20 {
        let clip = d.sample(seed).unwrap().render().unwrap();
        let (h, w) = (32, 32);
        let n = h * w;
        let f0 = clip.video.frame_data(0);
        for t in 0..clip.flow.frames() {
            let (dx, dy) = (clip.flow.dx(t), clip.flow.dy(t));
            let mask: Vec<bool> = clip.flow_valid[t * n..(t + 1) * n].to_vec();
            let (warped, validity) = forward_splat(f0, 3, h, w, dx, dy, Some(&mask));
            let next = clip.video.frame_data(t + 1);
            for i in 0..n {
                if validity[i] > 0.0 {
                    for c in 0..3 {
                        assert!((warped[c * n + i] - next[c * n + i]).abs() <= 1e-6, "seed {seed} frame {t}");
                    }
                }
            }
        }
    }
}

#[test]
fn mean_speed_matches_uniform_square() {
    // rejection on canvas exits would bias toward slow shapes
    let d = SceneDistribution {
        tissue: (0, 0),
        keep_inside: false,
        ..Default::default()
    };
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..1000 {
        for s in d.sample(seed).unwrap().shapes {
            total += ((s.velocity[0] as f64).powi(2) + (s.velocity[1] as f64).powi(2)).sqrt();
            count += 1;
        }
    }
    // E|v| for v uniform on [-a, a]^2 is a (sqrt 2 + ln(1 + sqrt 2)) / 3
    let a = 2.0f64;
    let analytic = a * (2f64.sqrt() + (1.0 + 2f64.sqrt()).ln()) / 3.0;
    let empirical = total / count as f64;
    assert!((empirical / analytic - 1.0).abs() < 0.05, "{empirical} vs {analytic}");
}
