//! The full generator: injector, flow mapper, adapters and backbone.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use trajvid_core::schedule::NoiseSchedule;
use trajvid_core::{ColorSpace, FlowField, Frame, VideoTensor};

use crate::error::{Error, Result};
use crate::nn::completion::{Completion, CompletionConfig};
use crate::nn::dfm::{warp_pyramids, Dfm, FusionConfig, WarpPlan};
use crate::nn::dsi::{Dsi, InjectorConfig};
use crate::nn::params::{Group, ParamStore};
use crate::nn::unet::{BackboneConfig, ConditioningMode, UNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Clip length including the given first frame.
    pub frames: usize,
    pub injector: InjectorConfig,
    pub fusion: FusionConfig,
    pub backbone: BackboneConfig,
    pub completion: CompletionConfig,
    pub schedule: ScheduleConfig,
    /// Diffuse each frame's difference from frame 0 instead of the frame.
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 8,
            injector: InjectorConfig::default(),
            fusion: FusionConfig::default(),
            backbone: BackboneConfig::default(),
            completion: CompletionConfig::default(),
            schedule: ScheduleConfig::default(),
            residual: true,
        }
    }
}

/// The three on/off switches of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_segment_feature: bool,
    pub use_depth_branch: bool,
    pub use_msf: bool,
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("frames must be >= 2, got {}", self.frames)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!("resolution {}x{} is below 8x8", self.height, self.width)));
        }
        self.injector.check()?;
        self.backbone.check()?;
        if self.backbone.conditioning == ConditioningMode::Adapter
            && self.backbone.channels.len() != self.injector.num_scales + 1
        {
            return Err(Error::Config(format!(
                "backbone has {} levels; adapters at every injector scale need {}",
                self.backbone.channels.len(),
                self.injector.num_scales + 1
            )));
        }
        NoiseSchedule::linear(self.schedule.num_steps, self.schedule.beta_start, self.schedule.beta_end)?;
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            use_segment_feature: self.injector.use_segment_feature,
            use_depth_branch: self.injector.use_depth_branch,
            use_msf: self.fusion.use_msf,
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.injector.use_segment_feature = a.use_segment_feature;
        self.injector.use_depth_branch = a.use_depth_branch;
        self.fusion.use_msf = a.use_msf;
        self
    }
}

/// Everything conditioning needs for one clip, at model resolution.
#[derive(Debug, Clone)]
pub struct ConditionInputs {
    pub frame0: Frame,
    pub depth: Frame,
    /// `seg_channels x H x W`.
    pub seg: Vec<f32>,
    /// First-frame-anchored, `T-1` frames.
    pub flow: FlowField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Clamp the implied clean sample to the pixel range at every step.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            clip_x0: true,
        }
    }
}

/// One ancestral step `t -> prev` given a noise prediction, elementwise.
/// With `clip_x0`, `x0 + base` is clamped to `[-1, 1]`; `base` defaults to 0.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    schedule: &NoiseSchedule,
    x_t: &[f32],
    eps: &[f32],
    t: usize,
    prev: usize,
    noise: &[f32],
    clip_x0: bool,
    base: Option<&[f32]>,
) -> Result<Vec<f32>> {
    if base.is_some_and(|b| b.len() != x_t.len()) {
        return Err(Error::ModelShapeMismatch("clamp base does not match the sample".into()));
    }
    let post = schedule.posterior(t, prev)?;
    let sd = post.variance.sqrt();
    Ok(x_t
        .iter()
        .zip(eps)
        .zip(noise)
        .enumerate()
        .map(|(i, ((&x, &e), &z))| {
            let mut x0 = schedule.predict_x0(x as f64, e as f64, t);
            if clip_x0 {
                let b = base.map_or(0.0, |b| b[i] as f64);
                x0 = (x0 + b).clamp(-1.0, 1.0) - b;
            }
            (post.coef_x0 * x0 + post.coef_xt * x as f64 + sd * z as f64) as f32
        })
        .collect())
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub dsi: Option<Dsi>,
    pub dfm: Option<Dfm>,
    pub unet: UNet,
    pub completion: Completion,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.check()?;
        let mut store = ParamStore::new(seed, dtype);
        let conditioned = config.backbone.conditioning == ConditioningMode::Adapter;
        let (dsi, dfm) = if conditioned {
            let dsi = Dsi::new(&mut store, &config.injector)?;
            let dfm = Dfm::new(
                &mut store,
                &config.injector.channel_schedule,
                config.injector.use_depth_branch,
                &config.fusion,
            )?;
            (Some(dsi), Some(dfm))
        } else {
            (None, None)
        };
        let unet = UNet::new(&mut store, &config.backbone, &config.injector.channel_schedule)?;
        let completion = Completion::new(&mut store, &config.completion, config.height, config.width)?;
        let s = &config.schedule;
        Ok(Self {
            config: config.clone(),
            store,
            dsi,
            dfm,
            unet,
            completion,
            schedule: NoiseSchedule::linear(s.num_steps, s.beta_start, s.beta_end)?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn tensor(&self, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    fn check_inputs(&self, items: &[&ConditionInputs]) -> Result<()> {
        let c = &self.config;
        if items.is_empty() {
            return Err(Error::ModelShapeMismatch("empty batch".into()));
        }
        for it in items {
            let f = &it.frame0;
            if (f.channels(), f.height(), f.width()) != (3, c.height, c.width) {
                return Err(Error::Misaligned(format!(
                    "frame is {}x{}x{}, model expects 3x{}x{}",
                    f.channels(),
                    f.height(),
                    f.width(),
                    c.height,
                    c.width
                )));
            }
            if (it.depth.height(), it.depth.width()) != (c.height, c.width) {
                return Err(Error::Misaligned("depth does not match the frame".into()));
            }
            if it.seg.len() != c.injector.seg_channels * c.height * c.width {
                return Err(Error::ModelShapeMismatch(format!(
                    "segmentation holds {} values, expected {} channels",
                    it.seg.len(),
                    c.injector.seg_channels
                )));
            }
            if (it.flow.frames(), it.flow.height(), it.flow.width()) != (c.frames - 1, c.height, c.width) {
                return Err(Error::ModelShapeMismatch(format!(
                    "flow is {}x{}x{}, model expects {}x{}x{}",
                    it.flow.frames(),
                    it.flow.height(),
                    it.flow.width(),
                    c.frames - 1,
                    c.height,
                    c.width
                )));
            }
        }
        Ok(())
    }

    /// First frames as a `(B, 3, H, W)` tensor in `[0, 1]`.
    pub fn frame_tensor(&self, items: &[&ConditionInputs]) -> Result<Tensor> {
        let (h, w) = (self.config.height, self.config.width);
        let data: Vec<f32> = items.iter().flat_map(|i| i.frame0.data().iter().copied()).collect();
        self.tensor(data, &[items.len(), 3, h, w])
    }

    /// Conditioning stack, level `r` flattened to `(B (T-1), C_r, h_r, w_r)`.
    pub fn conditioning(&self, items: &[&ConditionInputs]) -> Result<Vec<Tensor>> {
        self.check_inputs(items)?;
        let (dsi, dfm) = match (&self.dsi, &self.dfm) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config("model was built without conditioning".into())),
        };
        let (b, h, w) = (items.len(), self.config.height, self.config.width);
        let s = self.config.injector.seg_channels;
        let frame = self.frame_tensor(items)?;
        let depth = self.tensor(items.iter().flat_map(|i| i.depth.data().iter().copied()).collect(), &[b, 1, h, w])?;
        let seg = self.tensor(items.iter().flat_map(|i| i.seg.iter().copied()).collect(), &[b, s, h, w])?;
        let pyr = dsi.forward(&frame, &depth, &seg)?;
        let flows: Vec<FlowField> = items.iter().map(|i| i.flow.clone()).collect();
        let plan = WarpPlan::new(&flows, &dsi.level_sizes(h, w), self.dtype())?;
        let fused = dfm.fuse(&warp_pyramids(&pyr, &plan)?)?;
        fused
            .into_iter()
            .map(|l| {
                let (bb, t, c, lh, lw) = l.dims5()?;
                Ok(l.reshape((bb * t, c, lh, lw))?)
            })
            .collect()
    }

    /// Noise prediction for `x_t (B, T-1, 3, H, W)`; `frame0` in `[0, 1]`,
    /// one timestep per clip.
    pub fn predict_eps(&self, x_t: &Tensor, frame0: &Tensor, timesteps: &[usize], cond: Option<&[Tensor]>) -> Result<Tensor> {
        let (b, t, c, h, w) = x_t.dims5()?;
        let f0 = ((frame0 * 2.0)? - 1.0)?
            .unsqueeze(1)?
            .broadcast_as((b, t, c, h, w))?
            .reshape((b * t, c, h, w))?;
        let ts: Vec<usize> = timesteps.iter().flat_map(|&s| std::iter::repeat_n(s, t)).collect();
        let fi: Vec<usize> = (0..b).flat_map(|_| 1..=t).collect();
        let eps = self.unet.forward(&x_t.reshape((b * t, c, h, w))?, &f0, &ts, &fi, cond)?;
        Ok(eps.reshape((b, t, c, h, w))?)
    }

    /// Frames `1..T` of each clip in `[-1, 1]`, minus frame 0 when the model
    /// is residual, shaped `(B, T-1, 3, H, W)`.
    pub fn target_tensor(&self, videos: &[&VideoTensor]) -> Result<Tensor> {
        let c = &self.config;
        let mut data = Vec::with_capacity(videos.len() * (c.frames - 1) * 3 * c.height * c.width);
        for v in videos {
            if (v.frames(), v.channels(), v.height(), v.width()) != (c.frames, 3, c.height, c.width) {
                return Err(Error::ModelShapeMismatch(format!(
                    "video is {}x{}x{}x{}, model expects {}x3x{}x{}",
                    v.frames(),
                    v.channels(),
                    v.height(),
                    v.width(),
                    c.frames,
                    c.height,
                    c.width
                )));
            }
            let (first, rest) = v.data().split_at(v.frame_len());
            if c.residual {
                data.extend(rest.chunks(first.len()).flat_map(|f| f.iter().zip(first).map(|(x, x0)| 2.0 * (x - x0))));
            } else {
                data.extend(rest.iter().map(|x| 2.0 * x - 1.0));
            }
        }
        self.tensor(data, &[videos.len(), c.frames - 1, 3, c.height, c.width])
    }

    /// Noise-prediction MSE for given timesteps and noise.
    pub fn loss(
        &self,
        items: &[&ConditionInputs],
        videos: &[&VideoTensor],
        timesteps: &[usize],
        noise: &Tensor,
        conditioned: bool,
    ) -> Result<Tensor> {
        let x0 = self.target_tensor(videos)?;
        let (b, t, c, h, w) = x0.dims5()?;
        let mut coef_a = Vec::with_capacity(b);
        let mut coef_b = Vec::with_capacity(b);
        for &s in timesteps {
            let (a, bb) = self.schedule.q_sample_coeffs(s)?;
            coef_a.push(a as f32);
            coef_b.push(bb as f32);
        }
        let ca = self.tensor(coef_a, &[b, 1, 1, 1, 1])?;
        let cb = self.tensor(coef_b, &[b, 1, 1, 1, 1])?;
        let x_t = (x0.broadcast_mul(&ca)? + noise.broadcast_mul(&cb)?)?;
        let cond = if conditioned { Some(self.conditioning(items)?) } else { None };
        let frame0 = self.frame_tensor(items)?;
        let eps = self.predict_eps(&x_t, &frame0, timesteps, cond.as_deref())?;
        debug_assert_eq!(eps.dims(), &[b, t, c, h, w]);
        Ok((eps - noise)?.sqr()?.mean_all()?)
    }

    /// Samples `T-1` frames per item and prepends the given first frame.
    /// Each item draws its noise from its own seed.
    pub fn generate(
        &self,
        items: &[&ConditionInputs],
        seeds: &[u64],
        sampler: &SamplerConfig,
        conditioned: bool,
    ) -> Result<Vec<VideoTensor>> {
        self.generate_with(items, seeds, sampler, conditioned, |_, _| {})
    }

    /// [`Model::generate`] with a progress callback `(done, total)` per step.
    pub fn generate_with(
        &self,
        items: &[&ConditionInputs],
        seeds: &[u64],
        sampler: &SamplerConfig,
        conditioned: bool,
        mut progress: impl FnMut(usize, usize),
    ) -> Result<Vec<VideoTensor>> {
        self.check_inputs(items)?;
        if seeds.len() != items.len() {
            return Err(Error::Usage(format!("{} seeds for {} items", seeds.len(), items.len())));
        }
        let c = &self.config;
        let (b, t, h, w) = (items.len(), c.frames - 1, c.height, c.width);
        let per = t * 3 * h * w;
        let cond = if conditioned {
            Some(
                self.conditioning(items)?
                    .into_iter()
                    .map(|l| l.detach())
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        let frame0 = self.frame_tensor(items)?;
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut x: Vec<Vec<f32>> = rngs.iter_mut().map(|r| standard_normal(r, per)).collect();
        let ts = self.schedule.sampling_timesteps(sampler.steps)?;
        let bases: Vec<Vec<f32>> = items
            .iter()
            .map(|it| {
                let f: Vec<f32> = it.frame0.data().iter().map(|v| 2.0 * v - 1.0).collect();
                f.repeat(t)
            })
            .collect();
        for (k, &step) in ts.iter().enumerate() {
            let prev = ts.get(k + 1).copied().unwrap_or(0);
            let x_t = self.tensor(x.concat(), &[b, t, 3, h, w])?;
            let eps = self
                .predict_eps(&x_t, &frame0, &vec![step; b], cond.as_deref())?
                .flatten_all()?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?;
            for (i, xi) in x.iter_mut().enumerate() {
                let noise = if prev > 0 { standard_normal(&mut rngs[i], per) } else { vec![0.0; per] };
                let base = c.residual.then_some(bases[i].as_slice());
                *xi = denoise_step(&self.schedule, xi, &eps[i * per..(i + 1) * per], step, prev, &noise, sampler.clip_x0, base)?;
            }
            progress(k + 1, ts.len());
        }
        let mut out = Vec::with_capacity(b);
        for (i, xi) in x.into_iter().enumerate() {
            let mut data = items[i].frame0.data().to_vec();
            if c.residual {
                data.extend(xi.into_iter().zip(&bases[i]).map(|(v, b)| ((v + b + 1.0) * 0.5).clamp(0.0, 1.0)));
            } else {
                data.extend(xi.into_iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)));
            }
            out.push(VideoTensor::new(c.frames, 3, h, w, 8.0, ColorSpace::Rgb, data)?);
        }
        Ok(out)
    }

    /// Parameter groups updated in a training phase.
    pub fn trainable_groups(conditioned: bool, freeze_core: bool) -> Vec<Group> {
        let mut g = Vec::new();
        if !conditioned || !freeze_core {
            g.push(Group::Core);
        }
        if conditioned {
            g.extend([Group::Adapter, Group::Dsi, Group::Dfm]);
        }
        g
    }
}
