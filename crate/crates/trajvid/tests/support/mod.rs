//! Shared fixtures: a tiny model configuration, synthetic clips and a
//! central-difference gradient checker.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajvid::core::scene::SceneDistribution;
use trajvid::dataset::{synthesize, ClipRecord};
use trajvid::model::ModelConfig;
use trajvid::nn::dsi::InjectorConfig;
use trajvid::nn::unet::BackboneConfig;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        frames: 4,
        injector: InjectorConfig {
            base_channels: 4,
            channel_schedule: vec![4, 8],
            num_scales: 2,
            seg_proj_channels: 2,
            seg_channels: 4,
            ..InjectorConfig::default()
        },
        backbone: BackboneConfig {
            channels: vec![8, 8, 8],
            embed_dim: 8,
            max_norm_groups: 4,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn tiny_scenes() -> SceneDistribution {
    SceneDistribution {
        width: 16,
        height: 16,
        frames: 4,
        instrument_velocity: (-1.0, 1.0),
        ..SceneDistribution::default()
    }
}

pub fn tiny_clips(n: usize, seed: u64) -> Vec<ClipRecord> {
    synthesize(n, &tiny_scenes(), seed).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

/// Outcome of comparing analytic and numeric partial derivatives.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-9 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Checks `per_var` randomly chosen entries of every variable against
/// central differences of `loss` with step `h`.
pub fn grad_check(
    vars: &[(String, Var)],
    loss: impl Fn() -> Tensor,
    per_var: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> GradCheck {
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        checked: 0,
        passed: 0,
        worst: 0.0,
    };
    for (name, var) in vars {
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        for _ in 0..per_var.min(base.len()) {
            let i = rng.random_range(0..base.len());
            let eval = |x: f64| {
                let mut v = base.clone();
                v[i] = x;
                var.set(&Tensor::from_vec(v, &shape[..], &Device::Cpu).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(base[i] + h) - eval(base[i] - h)) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            out.checked += 1;
            if err <= tol {
                out.passed += 1;
            } else {
                eprintln!("{name}[{i}]: analytic {} numeric {numeric} rel {err:.2e}", analytic[i]);
            }
            out.worst = out.worst.max(err);
        }
        var.set(&Tensor::from_vec(base, &shape[..], &Device::Cpu).unwrap()).unwrap();
    }
    out
}
