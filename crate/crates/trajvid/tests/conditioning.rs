//! Injector and flow-mapper behavior: ablation paths, branch independence,
//! receptive fields and the warp oracle.

mod support;

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::random_tensor;
use trajvid::core::FlowField;
use trajvid::nn::dfm::{warp_pyramids, Dfm, FusionConfig, WarpPlan, WarpedPyramids};
use trajvid::nn::dsi::{Dsi, DualPyramids, InjectorConfig};
use trajvid::nn::params::{Group, ParamStore};

fn cfg(seg: bool, depth: bool) -> InjectorConfig {
    InjectorConfig {
        base_channels: 4,
        channel_schedule: vec![4, 6, 6],
        num_scales: 3,
        seg_proj_channels: 2,
        seg_channels: 3,
        use_segment_feature: seg,
        use_depth_branch: depth,
    }
}

fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap()
}

fn inputs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Tensor, Tensor, Tensor) {
    (
        random_tensor(rng, &[1, 3, h, w], DType::F32),
        random_tensor(rng, &[1, 1, h, w], DType::F32),
        random_tensor(rng, &[1, 3, h, w], DType::F32),
    )
}

#[test]
fn without_segment_feature_the_injector_ignores_seg() {
    let mut ps = ParamStore::new(1, DType::F32);
    let dsi = Dsi::new(&mut ps, &cfg(false, true)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (f, d, s) = inputs(&mut rng, 12, 12);
    let s2 = random_tensor(&mut rng, &[1, 3, 12, 12], DType::F32);
    let a = dsi.forward(&f, &d, &s).unwrap();
    let b = dsi.forward(&f, &d, &s2).unwrap();
    for (x, y) in a.rgb.iter().chain(a.depth.as_ref().unwrap()).zip(b.rgb.iter().chain(b.depth.as_ref().unwrap())) {
        assert_eq!(values(x), values(y));
    }
}

#[test]
fn zero_inputs_with_zero_biases_give_zero_injection() {
    let mut ps = ParamStore::new(2, DType::F32);
    let dsi = Dsi::new(&mut ps, &cfg(true, true)).unwrap();
    let biases: Vec<String> = ps.iter().filter(|(n, _)| n.ends_with("bias")).map(|(n, _)| n.clone()).collect();
    for n in biases {
        let shape = ps.get(&n).unwrap().var.dims().to_vec();
        ps.set(&n, &Tensor::zeros(&shape[..], DType::F32, &Device::Cpu).unwrap()).unwrap();
    }
    let z3 = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
    let out = dsi.rgb.inject(&z3, &z3).unwrap();
    assert!(values(&out).iter().all(|&v| v == 0.0));
}

#[test]
fn a_seg_pixel_only_reaches_its_receptive_field() {
    let mut ps = ParamStore::new(3, DType::F64);
    let dsi = Dsi::new(&mut ps, &cfg(true, false)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (9, 10);
    let frame = random_tensor(&mut rng, &[1, 3, h, w], DType::F64);
    let seg = random_tensor(&mut rng, &[1, 3, h, w], DType::F64);
    let (py, px) = (4usize, 6usize);
    let mut bumped: Vec<f64> = seg.flatten_all().unwrap().to_vec1().unwrap();
    bumped[h * w + py * w + px] += 0.75;
    let seg2 = Tensor::from_vec(bumped, (1, 3, h, w), &Device::Cpu).unwrap();
    let a: Vec<f64> = dsi.rgb.inject(&frame, &seg).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f64> = dsi.rgb.inject(&frame, &seg2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let mut inside_changed = 0;
    for c in 0..4 {
        for y in 0..h {
            for x in 0..w {
                let i = c * h * w + y * w + x;
                let inside = y.abs_diff(py) <= 1 && x.abs_diff(px) <= 1;
                if inside {
                    inside_changed += usize::from(a[i] != b[i]);
                } else {
                    assert_eq!(a[i], b[i], "changed outside at c{c} ({x},{y})");
                }
            }
        }
    }
    assert!(inside_changed > 0);
}

#[test]
fn pyramid_levels_halve_per_scale() {
    let mut ps = ParamStore::new(4, DType::F32);
    let c = InjectorConfig {
        channel_schedule: vec![2, 2, 2],
        base_channels: 2,
        ..cfg(true, true)
    };
    let dsi = Dsi::new(&mut ps, &c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (side, want) in [(64usize, [32usize, 16, 8]), (256, [128, 64, 32])] {
        let (f, d, s) = inputs(&mut rng, side, side);
        let pyr = dsi.forward(&f, &d, &s).unwrap();
        for (lvl, (l, &n)) in pyr.rgb.iter().zip(&want).enumerate() {
            assert_eq!(l.dims(), &[1, 2, n, n], "level {}", lvl + 1);
            assert_eq!(pyr.depth.as_ref().unwrap()[lvl].dims(), l.dims());
        }
        assert_eq!(dsi.level_sizes(side, side), want.iter().map(|&n| (n, n)).collect::<Vec<_>>());
    }
}

#[test]
fn branches_are_independent() {
    let mut ps = ParamStore::new(5, DType::F32);
    let dsi = Dsi::new(&mut ps, &cfg(true, true)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (f, _, s) = inputs(&mut rng, 12, 12);
    let gray = f.narrow(1, 0, 1).unwrap();
    let a = dsi.forward(&f, &gray, &s).unwrap();
    // same content on both branches still differs: no shared weights
    assert_ne!(values(&a.rgb[0]), values(&a.depth.as_ref().unwrap()[0]));
    let other_depth = random_tensor(&mut rng, &[1, 1, 12, 12], DType::F32);
    let b = dsi.forward(&f, &other_depth, &s).unwrap();
    for (x, y) in a.rgb.iter().zip(&b.rgb) {
        assert_eq!(values(x), values(y));
    }
    assert_ne!(values(&a.depth.as_ref().unwrap()[2]), values(&b.depth.as_ref().unwrap()[2]));

    let mut ps = ParamStore::new(5, DType::F32);
    let no_depth = Dsi::new(&mut ps, &cfg(true, false)).unwrap();
    assert!(no_depth.forward(&f, &gray, &s).unwrap().depth.is_none());
}

fn pyramids(rng: &mut ChaCha8Rng, sizes: &[(usize, usize)], c: usize) -> DualPyramids {
    let make = |rng: &mut ChaCha8Rng| sizes.iter().map(|&(h, w)| random_tensor(rng, &[1, c, h, w], DType::F32)).collect();
    DualPyramids {
        rgb: make(rng),
        depth: Some(make(rng)),
    }
}

fn random_flow(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, amp: f32) -> FlowField {
    FlowField::new(t, h, w, true, (0..t * 2 * h * w).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
}

#[test]
fn zero_flow_warp_returns_every_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sizes = [(6, 6), (3, 3)];
    let pyr = pyramids(&mut rng, &sizes, 3);
    let flow = FlowField::zeros(2, 12, 12);
    let plan = WarpPlan::new(&[flow], &sizes, DType::F32).unwrap();
    let warped = warp_pyramids(&pyr, &plan).unwrap();
    for (levels, src) in [(&warped.rgb, &pyr.rgb), (warped.depth.as_ref().unwrap(), pyr.depth.as_ref().unwrap())] {
        for (l, s) in levels.iter().zip(src) {
            for t in 0..2 {
                assert_eq!(values(&l.get(0).unwrap().get(t).unwrap()), values(&s.get(0).unwrap()));
            }
        }
    }
    for lvl in &plan.levels {
        assert!(lvl.validity.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn warp_pyramids_matches_resize_then_splat_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w, t, c) = (12usize, 10usize, 2usize, 3usize);
    let sizes = [(6, 5), (3, 3)];
    let pyr = pyramids(&mut rng, &sizes, c);
    let flow = random_flow(&mut rng, t, h, w, 3.0);
    let plan = WarpPlan::new(std::slice::from_ref(&flow), &sizes, DType::F32).unwrap();
    let warped = warp_pyramids(&pyr, &plan).unwrap();
    let mut worst = 0.0f64;
    for (levels, src) in [(&warped.rgb, &pyr.rgb), (warped.depth.as_ref().unwrap(), pyr.depth.as_ref().unwrap())] {
        for (r, &(lh, lw)) in sizes.iter().enumerate() {
            let feats = values(&src[r]);
            for f in 0..t {
                let resized = oracle::resize_flow_frame(&flow.data()[f * 2 * h * w..(f + 1) * 2 * h * w], h, w, lh, lw);
                let dx: Vec<f32> = resized[..lh * lw].iter().map(|&v| v as f32).collect();
                let dy: Vec<f32> = resized[lh * lw..].iter().map(|&v| v as f32).collect();
                let (want, weight) = oracle::splat(&feats, c, lh, lw, &dx, &dy);
                let got = values(&levels[r].get(0).unwrap().get(f).unwrap());
                worst = worst.max(oracle::max_abs_diff(&got, &want));
                let validity = &plan.levels[r].validity[f * lh * lw..(f + 1) * lh * lw];
                worst = worst.max(oracle::max_abs_diff(validity, &weight));
            }
        }
    }
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn warping_keeps_branches_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sizes = [(6, 6), (3, 3)];
    let a = pyramids(&mut rng, &sizes, 2);
    let mut b = a.clone();
    b.depth = pyramids(&mut rng, &sizes, 2).depth;
    let flow = random_flow(&mut rng, 3, 12, 12, 2.0);
    let plan = WarpPlan::new(&[flow], &sizes, DType::F32).unwrap();
    let wa = warp_pyramids(&a, &plan).unwrap();
    let wb = warp_pyramids(&b, &plan).unwrap();
    for (x, y) in wa.rgb.iter().zip(&wb.rgb) {
        assert_eq!(values(x), values(y));
    }
}

#[test]
fn zero_fusion_weights_give_zero_conditioning() {
    let mut ps = ParamStore::new(9, DType::F32);
    let dfm = Dfm::new(&mut ps, &[3, 4], true, &FusionConfig { use_msf: true }).unwrap();
    for (name, _) in ps.in_groups(&[Group::Dfm]) {
        let shape = ps.get(&name).unwrap().var.dims().to_vec();
        ps.set(&name, &Tensor::zeros(&shape[..], DType::F32, &Device::Cpu).unwrap()).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let warped = WarpedPyramids {
        rgb: vec![random_tensor(&mut rng, &[2, 3, 3, 4, 4], DType::F32), random_tensor(&mut rng, &[2, 3, 4, 2, 2], DType::F32)],
        depth: Some(vec![random_tensor(&mut rng, &[2, 3, 3, 4, 4], DType::F32), random_tensor(&mut rng, &[2, 3, 4, 2, 2], DType::F32)]),
    };
    for l in dfm.fuse(&warped).unwrap() {
        assert!(values(&l).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fusion_accepts_a_missing_depth_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rgb = vec![random_tensor(&mut rng, &[1, 5, 3, 4, 4], DType::F32)];
    for use_msf in [true, false] {
        let mut ps = ParamStore::new(10, DType::F32);
        let dfm = Dfm::new(&mut ps, &[3], false, &FusionConfig { use_msf }).unwrap();
        let out = dfm
            .fuse(&WarpedPyramids {
                rgb: rgb.clone(),
                depth: None,
            })
            .unwrap();
        assert_eq!(out[0].dims(), &[1, 5, 3, 4, 4]);
        if use_msf {
            assert_eq!(ps.get("dfm.s1.msf_a.weight").unwrap().var.dims()[1], 3);
        }
    }
    // a depth sequence the block was not built for is a shape error
    let mut ps = ParamStore::new(10, DType::F32);
    let dfm = Dfm::new(&mut ps, &[3], false, &FusionConfig { use_msf: true }).unwrap();
    let err = dfm.fuse(&WarpedPyramids {
        rgb: rgb.clone(),
        depth: Some(rgb.clone()),
    });
    assert!(err.is_err());
}
