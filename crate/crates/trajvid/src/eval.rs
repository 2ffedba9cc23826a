//! Evaluation: metric reports over generated clips, the trajectory-adherence
//! experiment and the ablation sweep.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajvid_core::flow_estimate::FlowEstimator;
use trajvid_core::image_ops::resize_bilinear;
use trajvid_core::metrics::{
    flow_error, frame_consistency, frechet_distance, psnr_slices, ssim_frame, Embedder, EmbedderSpec, GaussianStats,
    MetricReport, Pix16, SsimParams,
};
use trajvid_core::scene::{mix64, SceneDistribution, ShapeKind};
use trajvid_core::{CoreError, Frame, VideoTensor};

use crate::config::TrainConfig;
use crate::dataset::{ClipRecord, ClipSource};
use crate::error::{Error, Result};
use crate::model::{Ablation, ConditionInputs, Model, ModelConfig, SamplerConfig};
use crate::train::{LogRecord, Trainer};

/// 4x4 bilinear thumbnail, flattened and L2-normalized. Used for Fréchet
/// statistics, where a 768-dimensional covariance would be rank-deficient
/// at desk-scale sample counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pix4;

impl Embedder for Pix4 {
    fn spec(&self) -> EmbedderSpec {
        EmbedderSpec {
            id: "pix4".into(),
            dimension: 4 * 4 * 3,
            deterministic: true,
            description: "4x4 bilinear downsample, flatten, L2-normalize".into(),
        }
    }

    fn embed(&self, frame: &Frame) -> std::result::Result<Vec<f32>, CoreError> {
        let mut v = resize_bilinear(frame.data(), frame.channels(), frame.height(), frame.width(), 4, 4);
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
        }
        Ok(v)
    }
}

/// Per-item seed for generation under a run seed.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    mix64(seed ^ mix64(index as u64 ^ 0x6765_6e00))
}

/// Generates every clip from its own first frame, depth, segmentation and
/// ground-truth flow, `batch` clips at a time.
pub fn generate_for_clips(
    model: &Model,
    clips: &[&ClipRecord],
    sampler: &SamplerConfig,
    seed: u64,
    batch: usize,
) -> Result<Vec<VideoTensor>> {
    let s = model.config.injector.seg_channels;
    let inputs: Vec<ConditionInputs> = clips.iter().map(|c| c.condition_inputs(s)).collect();
    let conditioned = model.dsi.is_some();
    let mut out = Vec::with_capacity(clips.len());
    for (k, chunk) in inputs.chunks(batch.max(1)).enumerate() {
        let items: Vec<&ConditionInputs> = chunk.iter().collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| item_seed(seed, k * batch.max(1) + i)).collect();
        out.extend(model.generate(&items, &seeds, sampler, conditioned)?);
    }
    Ok(out)
}

fn frames_from(video: &VideoTensor, start: usize) -> &[f32] {
    &video.data()[start * video.frame_len()..]
}

fn check_pair(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    let da = (a.frames(), a.channels(), a.height(), a.width());
    let db = (b.frames(), b.channels(), b.height(), b.width());
    if da != db {
        return Err(Error::Core(CoreError::ShapeMismatch(format!("{da:?} vs {db:?}"))));
    }
    Ok(())
}

fn stats(rows: &[Vec<f32>]) -> Result<GaussianStats> {
    Ok(GaussianStats::from_samples(rows)?)
}

/// Metrics of generated clips against their references. PSNR and SSIM skip
/// the given first frame; flow errors compare the estimator's flow of the
/// generated clip with the conditioning flow on valid pixels.
pub fn metric_report(
    generated: &[VideoTensor],
    references: &[&ClipRecord],
    estimator: &dyn FlowEstimator,
) -> Result<MetricReport> {
    if generated.len() != references.len() || generated.is_empty() {
        return Err(Error::Usage(format!(
            "{} generated clips for {} references",
            generated.len(),
            references.len()
        )));
    }
    let ssim_p = SsimParams::default();
    let (mut psnr, mut ssim, mut consistency, mut epe, mut outliers) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut gen_frames, mut ref_frames, mut gen_videos, mut ref_videos) = (vec![], vec![], vec![], vec![]);
    for (g, r) in generated.iter().zip(references) {
        let reference = &r.video;
        check_pair(g, reference)?;
        let fl = g.frame_len();
        psnr.push(psnr_slices(frames_from(g, 1), frames_from(reference, 1), fl, 1.0)?.mean);
        let s: Vec<f64> = (1..g.frames())
            .map(|t| ssim_frame(g.frame_data(t), reference.frame_data(t), 3, g.height(), g.width(), &ssim_p))
            .collect::<std::result::Result<_, CoreError>>()?;
        ssim.push(s.iter().sum::<f64>() / s.len() as f64);
        consistency.push(frame_consistency(g, &Pix16)?.mean);
        let est = estimator.estimate(g)?;
        let e = flow_error(&est, &r.flow, r.flow_valid.as_deref())?;
        epe.push(e.epe);
        outliers.push(e.outlier_fraction);

        let embed = |v: &VideoTensor| -> Result<Vec<Vec<f32>>> {
            (0..v.frames()).map(|t| Ok(Pix4.embed(&v.frame(t))?)).collect()
        };
        let (eg, er) = (embed(g)?, embed(reference)?);
        gen_videos.push(eg.concat());
        ref_videos.push(er.concat());
        gen_frames.extend(eg.into_iter().skip(1));
        ref_frames.extend(er.into_iter().skip(1));
    }
    let mut report = MetricReport {
        embedders: vec![Pix16.spec().id, Pix4.spec().id],
        ..Default::default()
    };
    report.push_mean("psnr_db", psnr);
    report.push_mean("ssim", ssim);
    report.push_mean("frame_consistency_pix16", consistency);
    report.push_mean("flow_epe", epe);
    report.push_mean("flow_outlier_fraction", outliers);
    let fid = frechet_distance(&stats(&gen_frames)?, &stats(&ref_frames)?)?;
    report.push_scalar("frechet_frames_pix4", fid, gen_frames.len());
    let fvd = frechet_distance(&stats(&gen_videos)?, &stats(&ref_videos)?)?;
    report.push_scalar("frechet_videos_pix4", fvd, gen_videos.len());
    Ok(report)
}

/// Follows one object by color: pixels within `threshold` of the object's
/// mean first-frame color form its mask in every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTracker {
    pub color: [f32; 3],
    pub threshold: f32,
}

fn mean_color(frame: &Frame, pixels: &[usize]) -> [f32; 3] {
    let n = frame.height() * frame.width();
    let d = frame.data();
    let mut c = [0.0f64; 3];
    for &p in pixels {
        for (k, ck) in c.iter_mut().enumerate() {
            *ck += d[k * n + p] as f64;
        }
    }
    c.map(|v| (v / pixels.len().max(1) as f64) as f32)
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt()
}

impl CentroidTracker {
    /// Tracker for instance `id` of a first frame with instance raster `ids`.
    /// The threshold is half the color distance to the closest other region.
    pub fn from_reference(frame: &Frame, ids: &[u32], id: u32) -> Option<Self> {
        let obj: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == id).collect();
        if obj.is_empty() {
            return None;
        }
        let color = mean_color(frame, &obj);
        let mut others: Vec<u32> = ids.iter().copied().filter(|&i| i != id).collect();
        others.sort_unstable();
        others.dedup();
        let nearest = others
            .iter()
            .map(|&o| {
                let px: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == o).collect();
                color_distance(color, mean_color(frame, &px))
            })
            .fold(f32::INFINITY, f32::min);
        let threshold = if nearest.is_finite() { 0.5 * nearest } else { 0.25 };
        Some(Self { color, threshold })
    }

    /// Mean `(x, y)` of the object's pixels, `None` when none match.
    pub fn centroid(&self, frame: &Frame) -> Option<[f64; 2]> {
        let (h, w) = (frame.height(), frame.width());
        let n = h * w;
        let d = frame.data();
        let (mut sx, mut sy, mut k) = (0.0, 0.0, 0usize);
        for p in 0..n {
            let c = [d[p], d[n + p], d[2 * n + p]];
            if color_distance(c, self.color) < self.threshold {
                sx += (p % w) as f64;
                sy += (p / w) as f64;
                k += 1;
            }
        }
        (k > 0).then(|| [sx / k as f64, sy / k as f64])
    }

    /// Centroid displacement of every frame relative to frame 0. A frame
    /// where the object is lost repeats the previous displacement.
    pub fn displacements(&self, video: &VideoTensor) -> Vec<[f64; 2]> {
        let c0 = self.centroid(&video.frame(0));
        let mut out = vec![[0.0, 0.0]];
        for t in 1..video.frames() {
            let prev = *out.last().expect("non-empty");
            let d = match (c0, self.centroid(&video.frame(t))) {
                (Some(a), Some(b)) => [b[0] - a[0], b[1] - a[1]],
                _ => prev,
            };
            out.push(d);
        }
        out
    }
}

/// A held-out scene whose instrument is commanded to move horizontally.
#[derive(Debug, Clone)]
pub struct Trial {
    pub scene_seed: u64,
    /// Rendered with the commanded motion; its flow is the commanded flow.
    pub clip: ClipRecord,
    pub instrument: u32,
    /// `+1` right, `-1` left.
    pub direction: i32,
    /// Commanded displacement of frame `t` relative to frame 0.
    pub commanded: Vec<[f64; 2]>,
}

/// Scene for `seed` with everything static except the instrument, which
/// moves `speed` pixels per frame to the right (or left when
/// `prefer_right` is false). Falls back to the other direction when the
/// preferred one leaves the canvas; `None` when both do.
pub fn commanded_trial(dist: &SceneDistribution, seed: u64, speed: f32, prefer_right: bool) -> Result<Option<Trial>> {
    let mut scene = dist.sample(seed)?;
    let Some(k) = scene.shapes.iter().position(|s| !matches!(s.kind, ShapeKind::Blob { .. })) else {
        return Ok(None);
    };
    scene.background_velocity = [0.0, 0.0];
    for s in &mut scene.shapes {
        s.velocity = [0.0, 0.0];
    }
    let first = if prefer_right { 1 } else { -1 };
    for direction in [first, -first] {
        scene.shapes[k].velocity = [direction as f32 * speed, 0.0];
        let s = &scene.shapes[k];
        if !(0..scene.frames).all(|t| scene.inside_at(s, t)) {
            continue;
        }
        let commanded = (0..scene.frames)
            .map(|t| {
                let (ox, oy) = s.offset(t);
                [ox as f64, oy as f64]
            })
            .collect();
        let clip = ClipRecord::from_rendered(
            scene.render()?,
            ClipSource::Synthetic {
                dataset_seed: seed,
                index: 0,
                scene_seed: seed,
            },
        );
        return Ok(Some(Trial {
            scene_seed: seed,
            clip,
            instrument: k as u32 + 1,
            direction,
            commanded,
        }));
    }
    Ok(None)
}

/// `n` trials alternating right and left commands, from seeds derived from
/// `seed`; scenes that cannot host the motion are skipped.
pub fn adherence_trials(dist: &SceneDistribution, seed: u64, n: usize, speed: f32) -> Result<Vec<Trial>> {
    let mut trials = Vec::with_capacity(n);
    let mut i = 0u64;
    while trials.len() < n {
        if i > 100 * n as u64 + 100 {
            return Err(Error::Usage(format!("only {} of {n} scenes can host the commanded motion", trials.len())));
        }
        let s = mix64(seed ^ mix64(i ^ 0x7472_6961_6c00));
        i += 1;
        if let Some(t) = commanded_trial(dist, s, speed, trials.len() % 2 == 0)? {
            trials.push(t);
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub scene_seed: u64,
    pub direction: i32,
    pub commanded: Vec<[f64; 2]>,
    pub observed: Vec<[f64; 2]>,
    pub observed_control: Vec<[f64; 2]>,
    pub epe: f64,
    pub epe_control: f64,
    pub direction_matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceReport {
    pub trials: Vec<TrialOutcome>,
    pub median_epe: f64,
    pub median_epe_control: f64,
    /// `1 - median_epe / median_epe_control`.
    pub epe_reduction: f64,
    pub direction_match_rate: f64,
}

impl AdherenceReport {
    pub fn passes(&self, min_reduction: f64, min_direction_rate: f64) -> bool {
        self.epe_reduction >= min_reduction && self.direction_match_rate >= min_direction_rate
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Mean endpoint distance between observed and commanded displacements over
/// frames `1..T`.
pub fn displacement_epe(observed: &[[f64; 2]], commanded: &[[f64; 2]]) -> f64 {
    let pairs: Vec<f64> = observed
        .iter()
        .zip(commanded)
        .skip(1)
        .map(|(o, c)| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt())
        .collect();
    pairs.iter().sum::<f64>() / pairs.len().max(1) as f64
}

/// Generates every trial twice: once with its own commanded flow and once
/// with the flow of the next trial (a shuffled control), and tracks the
/// instrument in both.
pub fn evaluate_adherence(model: &Model, trials: &[Trial], sampler: &SamplerConfig, seed: u64) -> Result<AdherenceReport> {
    if trials.len() < 2 {
        return Err(Error::Usage("adherence needs at least two trials".into()));
    }
    let s = model.config.injector.seg_channels;
    let own: Vec<ConditionInputs> = trials.iter().map(|t| t.clip.condition_inputs(s)).collect();
    let shuffled: Vec<ConditionInputs> = (0..trials.len())
        .map(|i| {
            let mut c = own[i].clone();
            c.flow = own[(i + 1) % trials.len()].flow.clone();
            c
        })
        .collect();
    let mut outcomes = Vec::with_capacity(trials.len());
    for (i, trial) in trials.iter().enumerate() {
        let tracker = CentroidTracker::from_reference(&trial.clip.frame0(), &trial.clip.ids0, trial.instrument)
            .ok_or_else(|| Error::Usage(format!("instrument not visible in scene {}", trial.scene_seed)))?;
        let gen_seed = item_seed(seed, i);
        let videos = model.generate(&[&own[i], &shuffled[i]], &[gen_seed, gen_seed], sampler, true)?;
        let observed = tracker.displacements(&videos[0]);
        let observed_control = tracker.displacements(&videos[1]);
        let last = observed.last().expect("T >= 2")[0];
        outcomes.push(TrialOutcome {
            scene_seed: trial.scene_seed,
            direction: trial.direction,
            epe: displacement_epe(&observed, &trial.commanded),
            epe_control: displacement_epe(&observed_control, &trial.commanded),
            direction_matches: last * trial.direction as f64 > 0.0,
            commanded: trial.commanded.clone(),
            observed,
            observed_control,
        });
    }
    let epe: Vec<f64> = outcomes.iter().map(|o| o.epe).collect();
    let control: Vec<f64> = outcomes.iter().map(|o| o.epe_control).collect();
    let (m, mc) = (median(&epe), median(&control));
    let matches = outcomes.iter().filter(|o| o.direction_matches).count();
    Ok(AdherenceReport {
        median_epe: m,
        median_epe_control: mc,
        epe_reduction: if mc > 0.0 { 1.0 - m / mc } else { 0.0 },
        direction_match_rate: matches as f64 / outcomes.len() as f64,
        trials: outcomes,
    })
}

/// The five rows of the ablation table: (segment feature, depth branch, MSF).
pub const ABLATION_ROWS: [Ablation; 5] = [
    Ablation {
        use_segment_feature: true,
        use_depth_branch: false,
        use_msf: true,
    },
    Ablation {
        use_segment_feature: false,
        use_depth_branch: true,
        use_msf: false,
    },
    Ablation {
        use_segment_feature: false,
        use_depth_branch: true,
        use_msf: true,
    },
    Ablation {
        use_segment_feature: true,
        use_depth_branch: true,
        use_msf: false,
    },
    Ablation {
        use_segment_feature: true,
        use_depth_branch: true,
        use_msf: true,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub row: usize,
    pub ablation: Ablation,
    pub checkpoint: PathBuf,
    /// Flags read back from the checkpoint manifest.
    pub recorded: Ablation,
    pub final_loss: f32,
    /// Frames generated from the reloaded checkpoint.
    pub generated_frames: usize,
}

/// Trains every ablation row for `steps` conditioned steps, reloads the
/// final checkpoint and generates one clip from it.
pub fn run_ablations(
    base: &ModelConfig,
    train: &TrainConfig,
    clips: &[ClipRecord],
    pool: &[usize],
    out_dir: &Path,
    seed: u64,
    sampler: &SamplerConfig,
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    for (row, &ablation) in ABLATION_ROWS.iter().enumerate() {
        let cfg = base.clone().with_ablation(ablation);
        cfg.check()?;
        let model = Model::new(&cfg, seed, candle_core::DType::F32)?;
        let tc = TrainConfig {
            core_steps: 0,
            checkpoint_every: train.cond_steps.max(1),
            resume: None,
            ..train.clone()
        };
        let mut trainer = Trainer::new(model, &tc, seed);
        let dir = out_dir.join(format!("row{}", row + 1));
        let mut last = f32::NAN;
        let written = trainer.fit(clips, pool, Some(&dir), |r: &LogRecord| last = r.loss)?;
        let checkpoint = written
            .last()
            .cloned()
            .ok_or_else(|| Error::Usage("ablation run wrote no checkpoint".into()))?;
        let (model, info) = crate::train::load_model(&checkpoint)?;
        let first = clips[pool[0]].condition_inputs(cfg.injector.seg_channels);
        let video = model.generate(&[&first], &[seed], sampler, true)?;
        runs.push(AblationRun {
            row: row + 1,
            ablation,
            checkpoint,
            recorded: info.ablation,
            final_loss: last,
            generated_frames: video[0].frames(),
        });
    }
    Ok(runs)
}

/// Settings of the trajectory-adherence experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdherenceConfig {
    pub trials: usize,
    /// Commanded instrument speed, pixels per frame.
    pub speed: f32,
    pub seed: u64,
}

impl Default for AdherenceConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            speed: 1.5,
            seed: 0x6164_6865,
        }
    }
}

/// The full adherence experiment: training set size, schedule and trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndToEndConfig {
    pub seed: u64,
    pub clips: usize,
    pub scenes: SceneDistribution,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub adherence: AdherenceConfig,
    pub min_reduction: f64,
    pub min_direction_rate: f64,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            clips: 500,
            scenes: SceneDistribution::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                core_steps: 2000,
                cond_steps: 3000,
                lr: 5e-4,
                core_lr: 5e-4,
                checkpoint_every: 1000,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            adherence: AdherenceConfig::default(),
            min_reduction: 0.3,
            min_direction_rate: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndOutcome {
    pub report: AdherenceReport,
    pub final_loss: f32,
    pub passed: bool,
}

/// Trains a model from scratch on synthetic clips (or resumes the newest
/// checkpoint in `out_dir`) and returns it with the last logged loss.
pub fn train_pipeline(
    cfg: &EndToEndConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<(Model, f32)> {
    let clips = crate::dataset::synthesize(cfg.clips, &cfg.scenes, cfg.seed)?;
    let pool: Vec<usize> = (0..clips.len()).collect();
    let model = Model::new(&cfg.model, cfg.seed, candle_core::DType::F32)?;
    let mut trainer = Trainer::new(model, &cfg.train, cfg.seed);
    if let Some(dir) = out_dir {
        let total = trainer.total_steps();
        if let Some(latest) = (1..=total).rev().map(|s| dir.join(crate::train::checkpoint_name(s))).find(|p| p.exists()) {
            trainer.resume(&latest)?;
        }
    }
    let mut last = f32::NAN;
    trainer.fit(&clips, &pool, out_dir, |r| {
        last = r.loss;
        on_step(r)
    })?;
    if last.is_nan() {
        // resumed at the final step: report the logged loss
        if let Some(dir) = out_dir {
            let log = std::fs::read_to_string(dir.join(crate::train::LOG_FILE)).unwrap_or_default();
            if let Some(v) = log.lines().last().and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok()) {
                last = v["loss"].as_f64().map_or(f32::NAN, |x| x as f32);
            }
        }
    }
    Ok((trainer.model, last))
}

/// Trains, builds held-out commanded trials and scores adherence.
pub fn run_end_to_end(cfg: &EndToEndConfig, out_dir: Option<&Path>, on_step: impl FnMut(&LogRecord)) -> Result<EndToEndOutcome> {
    let (model, final_loss) = train_pipeline(cfg, out_dir, on_step)?;
    let a = &cfg.adherence;
    let trials = adherence_trials(&cfg.scenes, a.seed, a.trials, a.speed)?;
    let report = evaluate_adherence(&model, &trials, &cfg.sampler, cfg.seed)?;
    Ok(EndToEndOutcome {
        passed: report.passes(cfg.min_reduction, cfg.min_direction_rate),
        report,
        final_loss,
    })
}
