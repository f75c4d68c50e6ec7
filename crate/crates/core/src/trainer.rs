//! Two-phase training: per-ray photometric + distortion regularization, then
//! patch-based steps that add a perceptual term after the configured epoch.
//! Also the warmup/exponential learning-rate schedule, per-epoch
//! checkpointing with best-on-validation tracking, early stopping, and the
//! freeze-everything-but-the-triplane finetuning protocol.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generate_rays, Camera, Ray, SamplingConfig};
use crate::math::nn::{BnState, ParamSet};
use crate::math::{Adam, Arr, Tape, Tensor};
use crate::metrics::{perceptual_loss, LossConfig, PerceptualBackbone};
use crate::model::{ModelConfig, ModelParams, FINETUNE_GROUPS};
use crate::renderer::{encode_scene, render_rays, views_to_tensor};
use crate::scene::Scene;
use crate::volume::batch::distortion_batch;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_source_views: usize,
    pub n_dest_views_phase1: usize,
    pub rays_per_step_phase1: usize,
    pub patch_size_phase2: usize,
    pub phase2_start_epoch: u64,
    pub epochs: u64,
    /// Steps per epoch; 0 means one step per training scene.
    pub steps_per_epoch: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    /// 0 means one epoch's worth of steps.
    pub warmup_steps: usize,
    pub seed: u64,
    /// Early-stopping patience in epochs on validation PSNR; 0 disables.
    pub early_stop_patience: u64,
    /// Rays used for the per-epoch validation PSNR estimate.
    pub val_rays: usize,
    /// Keep a checkpoint per epoch (otherwise only latest + best).
    pub checkpoint_every_epoch: bool,
    /// Constant learning rate used by the finetuning protocol.
    pub finetune_lr: f64,
    pub finetune_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_source_views: 3,
            n_dest_views_phase1: 20,
            rays_per_step_phase1: 1000,
            patch_size_phase2: 40,
            phase2_start_epoch: 30,
            epochs: 100,
            steps_per_epoch: 0,
            lr_init: 5e-5,
            lr_peak: 5e-4,
            lr_final: 5e-6,
            warmup_steps: 0,
            seed: 0,
            early_stop_patience: 10,
            val_rays: 1024,
            checkpoint_every_epoch: true,
            finetune_lr: 5e-6,
            finetune_steps: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_source_views == 0
            || self.n_dest_views_phase1 == 0
            || self.rays_per_step_phase1 == 0
            || self.epochs == 0
        {
            return Err(Error::Config("training sizes must be positive".into()));
        }
        if self.patch_size_phase2 < crate::metrics::MIN_PATCH {
            return Err(Error::Config(format!(
                "phase-2 patches must be at least {} pixels",
                crate::metrics::MIN_PATCH
            )));
        }
        if !(self.lr_init <= self.lr_peak && self.lr_final <= self.lr_peak) {
            return Err(Error::Config(
                "learning rates must satisfy init <= peak and final <= peak".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then exponential decay reaching exactly
/// `lr_final` at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig, warmup_steps: u64, total_steps: u64) -> f64 {
    let w = warmup_steps.max(1);
    if step <= w {
        let t = step as f64 / w as f64;
        cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * t
    } else {
        let total = total_steps.max(w + 1);
        let t = (step - w) as f64 / (total - w) as f64;
        cfg.lr_peak * (cfg.lr_final / cfg.lr_peak).powf(t.min(1.0))
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub photo: f64,
    pub reg: f64,
    pub lpips: f64,
}

/// One JSONL log record per optimizer step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_photo: f64,
    pub loss_reg: f64,
    pub loss_lpips: f64,
    pub loss_total: f64,
}

/// A sampled training batch.
pub struct TrainBatch {
    pub source_views: Vec<(Array3<f64>, Camera)>,
    pub rays: Vec<Ray>,
    pub ray_ids: Vec<u64>,
    /// (R, 3) ground-truth colors at the sampled rays.
    pub target_rgb: Array2<f64>,
    /// Phase 2: rays form a (P, P) patch compared perceptually.
    pub patch_size: Option<usize>,
    /// Jitter seed for the renderer.
    pub render_seed: u64,
}

/// Round-robin batch sampler over training scenes.
pub struct DataSampler {
    pub scenes: Vec<Scene>,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl DataSampler {
    pub fn new(scenes: Vec<Scene>, seed: u64) -> Result<DataSampler> {
        if scenes.is_empty() {
            return Err(Error::invalid("training needs at least one scene"));
        }
        for s in &scenes {
            s.validate_split()?;
        }
        Ok(DataSampler {
            scenes,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
        })
    }

    /// One reserved validation view per scene (the last training frame) when
    /// the scene is large enough.
    pub fn val_view(scene: &Scene) -> Option<usize> {
        let train = scene.train_indices();
        (train.len() >= 4).then(|| *train.last().unwrap())
    }

    fn destinations(scene: &Scene) -> Vec<usize> {
        let train = scene.train_indices();
        match Self::val_view(scene) {
            Some(v) => train.into_iter().filter(|&i| i != v).collect(),
            None => train,
        }
    }

    fn pick_views(&mut self, cfg: &TrainConfig) -> (usize, Vec<usize>, Vec<usize>) {
        let scene_idx = self.cursor % self.scenes.len();
        self.cursor += 1;
        let scene = &self.scenes[scene_idx];
        let mut pool = Self::destinations(scene);
        pool.shuffle(&mut self.rng);
        let n_src = cfg.n_source_views.min(pool.len());
        let sources: Vec<usize> = pool[..n_src].to_vec();
        // destinations differ from the sources unless the scene is tiny
        let mut dests: Vec<usize> = pool[n_src..].to_vec();
        if dests.is_empty() {
            dests = sources.clone();
        }
        dests.shuffle(&mut self.rng);
        dests.truncate(cfg.n_dest_views_phase1.max(1));
        (scene_idx, sources, dests)
    }

    /// Phase 1: rays sampled across destination views.
    pub fn phase1_batch(&mut self, cfg: &TrainConfig) -> Result<TrainBatch> {
        let (scene_idx, sources, dests) = self.pick_views(cfg);
        let scene = &self.scenes[scene_idx];
        let source_views: Vec<(Array3<f64>, Camera)> = sources
            .iter()
            .map(|&i| (scene.frames[i].image.clone(), scene.frames[i].camera.clone()))
            .collect();
        let mut rays = Vec::with_capacity(cfg.rays_per_step_phase1);
        let mut ray_ids = Vec::with_capacity(cfg.rays_per_step_phase1);
        let mut target = Array2::<f64>::zeros((cfg.rays_per_step_phase1, 3));
        for k in 0..cfg.rays_per_step_phase1 {
            let &view = dests.choose(&mut self.rng).unwrap();
            let frame = &scene.frames[view];
            let (h, w, _) = frame.image.dim();
            let r = self.rng.gen_range(0..h);
            let c = self.rng.gen_range(0..w);
            rays.push(generate_rays(&frame.camera, &[(r, c)])?.pop().unwrap());
            ray_ids.push((view * h * w + r * w + c) as u64);
            for ch in 0..3 {
                target[(k, ch)] = frame.image[(r, c, ch)];
            }
        }
        Ok(TrainBatch {
            source_views,
            rays,
            ray_ids,
            target_rgb: target,
            patch_size: None,
            render_seed: self.rng.gen(),
        })
    }

    /// Phase 2: one destination view, one square patch.
    pub fn phase2_batch(&mut self, cfg: &TrainConfig) -> Result<TrainBatch> {
        let (scene_idx, sources, dests) = self.pick_views(cfg);
        let scene = &self.scenes[scene_idx];
        let source_views: Vec<(Array3<f64>, Camera)> = sources
            .iter()
            .map(|&i| (scene.frames[i].image.clone(), scene.frames[i].camera.clone()))
            .collect();
        let view = dests[0];
        let frame = &scene.frames[view];
        let (h, w, _) = frame.image.dim();
        let p = cfg.patch_size_phase2.min(h).min(w);
        let r0 = self.rng.gen_range(0..=(h - p));
        let c0 = self.rng.gen_range(0..=(w - p));
        let mut pixels = Vec::with_capacity(p * p);
        let mut target = Array2::<f64>::zeros((p * p, 3));
        let mut ray_ids = Vec::with_capacity(p * p);
        for (k, (dr, dc)) in (0..p).flat_map(|dr| (0..p).map(move |dc| (dr, dc))).enumerate() {
            let (r, c) = (r0 + dr, c0 + dc);
            pixels.push((r, c));
            ray_ids.push((view * h * w + r * w + c) as u64);
            for ch in 0..3 {
                target[(k, ch)] = frame.image[(r, c, ch)];
            }
        }
        let rays = generate_rays(&frame.camera, &pixels)?;
        Ok(TrainBatch {
            source_views,
            rays,
            ray_ids,
            target_rgb: target,
            patch_size: Some(p),
            render_seed: self.rng.gen(),
        })
    }
}

/// Loss of one batch under the given parameter binding. Returns the tracked
/// total plus the breakdown; `buffers` is updated in place when training.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    weights: &ParamSet,
    buffers: &mut ParamSet,
    model_cfg: &ModelConfig,
    sampling: &SamplingConfig,
    loss_cfg: &LossConfig,
    backbone: &PerceptualBackbone,
    batch: &TrainBatch,
    epoch: u64,
    tape: Option<(&Tape, &dyn Fn(&str) -> bool)>,
    bn_training: bool,
) -> Result<(Tensor, LossBreakdown)> {
    let p = match tape {
        Some((tape, trainable)) => weights.bind(trainable, Some(tape)),
        None => weights.constants(),
    };
    let p_const = weights.constants();
    let mut bn = BnState {
        buffers,
        training: bn_training,
    };
    let images = views_to_tensor(&batch.source_views);
    let cameras: Vec<Camera> = batch.source_views.iter().map(|(_, c)| c.clone()).collect();
    let enc = encode_scene(&p, &mut bn, model_cfg, &images, &cameras)?;
    let rr = render_rays(
        &p,
        &p_const,
        model_cfg,
        &enc,
        &batch.rays,
        &batch.ray_ids,
        sampling,
        batch.render_seed,
        None,
    )?;

    let target = Tensor::constant(batch.target_rgb.clone().into_dyn());
    let photo = crate::metrics::photometric_loss(&rr.rgb, &target)?;

    let mut reg = Tensor::scalar(0.0);
    if loss_cfg.lambda_reg > 0.0 {
        for branch in [rr.near.as_ref(), rr.far.as_ref()].into_iter().flatten() {
            reg = reg.add(&distortion_batch(&branch.reg_edges, &branch.out.weights).mean_all());
        }
    }

    let mut lpips = Tensor::scalar(0.0);
    if let Some(psz) = batch.patch_size {
        if epoch >= loss_cfg.lpips_start_epoch && loss_cfg.lambda_lpips > 0.0 {
            let pred_patch = rr.rgb.reshape(&[psz, psz, 3]);
            let target_patch = target.reshape(&[psz, psz, 3]);
            lpips = perceptual_loss(&pred_patch, &target_patch, backbone)?;
        }
    }

    let total = photo
        .add(&reg.scale(loss_cfg.lambda_reg))
        .add(&lpips.scale(loss_cfg.lambda_lpips));
    let breakdown = LossBreakdown {
        total: total.value()[[]],
        photo: photo.value()[[]],
        reg: reg.value()[[]] * loss_cfg.lambda_reg,
        lpips: lpips.value()[[]] * loss_cfg.lambda_lpips,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss {:?} on a batch of {} rays (ids {:?}...)",
            breakdown,
            batch.rays.len(),
            &batch.ray_ids[..batch.ray_ids.len().min(8)]
        )));
    }
    Ok((total, breakdown))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub sampling: SamplingConfig,
    pub loss_cfg: LossConfig,
    pub params: ModelParams,
    pub opt: Adam,
    pub epoch: u64,
    pub global_step: u64,
    pub backbone: PerceptualBackbone,
}

impl Trainer {
    pub fn new(
        params: ModelParams,
        config: TrainConfig,
        sampling: SamplingConfig,
        loss_cfg: LossConfig,
    ) -> Result<Trainer> {
        config.validate()?;
        sampling.validate()?;
        loss_cfg.validate()?;
        Ok(Trainer {
            config,
            sampling,
            loss_cfg,
            params,
            opt: Adam::new(),
            epoch: 0,
            global_step: 0,
            backbone: PerceptualBackbone::seeded(config.seed ^ 0x1b9),
        })
    }

    fn steps_per_epoch(&self, n_scenes: usize) -> u64 {
        if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch as u64
        } else {
            n_scenes as u64
        }
    }

    fn schedule(&self, n_scenes: usize) -> (u64, u64) {
        let spe = self.steps_per_epoch(n_scenes);
        let warmup = if self.config.warmup_steps > 0 {
            self.config.warmup_steps as u64
        } else {
            spe
        };
        (warmup, self.config.epochs * spe)
    }

    /// One optimizer update on a batch; `trainable` filters parameter names.
    pub fn step(
        &mut self,
        batch: &TrainBatch,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
        bn_training: bool,
    ) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let mut buffers = self.params.buffers.clone();
        let (total, breakdown) = batch_loss(
            &self.params.weights,
            &mut buffers,
            &self.params.config,
            &self.sampling,
            &self.loss_cfg,
            &self.backbone,
            batch,
            self.epoch,
            Some((&tape, trainable)),
            bn_training,
        )?;
        self.params.buffers = buffers;

        // collect leaf gradients by name
        let leaves = self.params.weights.bind(trainable, Some(&tape));
        // the bind above creates *new* leaves; gradients live on the ones
        // used in the forward pass, so rebuild the name -> grad map there
        drop(leaves);
        let grads = collect_grads(&tape, &total, &self.params.weights, trainable)?;
        self.opt.step(lr, &mut self.params.weights, &grads);
        self.global_step += 1;
        Ok(breakdown)
    }

    /// Quick validation PSNR estimate over reserved views.
    pub fn val_psnr(&self, sampler: &DataSampler) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let mut total_mse = 0.0;
        let mut count = 0usize;
        for scene in &sampler.scenes {
            let Some(val_view) = DataSampler::val_view(scene) else {
                continue;
            };
            let frame = &scene.frames[val_view];
            let sources: Vec<(Array3<f64>, Camera)> = scene
                .split
                .source_indices
                .iter()
                .take(self.config.n_source_views)
                .map(|&i| (scene.frames[i].image.clone(), scene.frames[i].camera.clone()))
                .collect();
            if sources.is_empty() {
                continue;
            }
            let (h, w, _) = frame.image.dim();
            let n = self.config.val_rays.max(16) / sampler.scenes.len().max(1);
            let mut pixels = Vec::with_capacity(n);
            for _ in 0..n {
                pixels.push((rng.gen_range(0..h), rng.gen_range(0..w)));
            }
            let rays = generate_rays(&frame.camera, &pixels)?;
            let out = crate::renderer::render(
                &crate::renderer::RenderRequest {
                    source_views: &sources,
                    rays,
                    mode: crate::renderer::RenderMode::Full,
                    boxes: vec![],
                    sampling: self.sampling,
                    seed: 0,
                },
                &self.params,
            )?;
            for (k, &(r, c)) in pixels.iter().enumerate() {
                for ch in 0..3 {
                    let d = out.rgb[(k, ch)] - frame.image[(r, c, ch)];
                    total_mse += d * d;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::invalid("no validation views available"));
        }
        let m = total_mse / count as f64;
        Ok(if m <= 0.0 { 100.0 } else { (10.0 * (1.0 / m).log10()).min(100.0) })
    }

    /// Full training loop. Writes per-epoch checkpoints and a best-on-val
    /// checkpoint under `run_dir` when provided; logs one record per step.
    pub fn train(
        &mut self,
        sampler: &mut DataSampler,
        run_dir: Option<&Path>,
        mut sink: impl FnMut(&LogRecord),
    ) -> Result<TrainSummary> {
        let n_scenes = sampler.scenes.len();
        let spe = self.steps_per_epoch(n_scenes);
        let (warmup, total_steps) = self.schedule(n_scenes);
        let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
        if let Some(d) = &ckpt_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut best_val = f64::NEG_INFINITY;
        let mut best_epoch = self.epoch;
        let mut epochs_since_best = 0u64;
        let trainable = |_: &str| true;

        while self.epoch < self.config.epochs {
            for _ in 0..spe {
                let phase2 = self.epoch >= self.config.phase2_start_epoch;
                let batch = if phase2 {
                    sampler.phase2_batch(&self.config)?
                } else {
                    sampler.phase1_batch(&self.config)?
                };
                let lr = lr_at(self.global_step, &self.config, warmup, total_steps);
                let breakdown = self.step(&batch, lr, &trainable, true)?;
                sink(&LogRecord {
                    step: self.global_step,
                    epoch: self.epoch,
                    lr,
                    loss_photo: breakdown.photo,
                    loss_reg: breakdown.reg,
                    loss_lpips: breakdown.lpips,
                    loss_total: breakdown.total,
                });
            }
            self.epoch += 1;

            if let Some(d) = &ckpt_dir {
                if self.config.checkpoint_every_epoch {
                    crate::checkpoint::save_checkpoint(
                        &d.join(format!("epoch_{:04}.ckpt", self.epoch)),
                        &self.params,
                        Some(&self.opt),
                        self.epoch,
                    )?;
                }
                crate::checkpoint::save_checkpoint(
                    &d.join("latest.ckpt"),
                    &self.params,
                    Some(&self.opt),
                    self.epoch,
                )?;
            }

            let val = self.val_psnr(sampler).unwrap_or(f64::NAN);
            if val.is_finite() && val > best_val {
                best_val = val;
                best_epoch = self.epoch;
                epochs_since_best = 0;
                if let Some(d) = &ckpt_dir {
                    crate::checkpoint::save_checkpoint(
                        &d.join("best.ckpt"),
                        &self.params,
                        Some(&self.opt),
                        self.epoch,
                    )?;
                }
            } else {
                epochs_since_best += 1;
            }
            if self.config.early_stop_patience > 0
                && epochs_since_best >= self.config.early_stop_patience
            {
                break;
            }
        }
        Ok(TrainSummary {
            epochs_run: self.epoch,
            best_val_psnr: best_val,
            best_epoch,
        })
    }

    /// Per-scene finetuning: only the triplane-construction groups update,
    /// at a constant low learning rate; batch-norm uses stored statistics so
    /// frozen groups (including their buffers) stay bitwise unchanged.
    pub fn finetune(&mut self, scene: &Scene, source_view_count: usize) -> Result<()> {
        let sources: Vec<usize> = scene
            .split
            .source_indices
            .iter()
            .copied()
            .take(source_view_count)
            .collect();
        if sources.len() < source_view_count {
            return Err(Error::invalid(format!(
                "scene offers {} source views, {source_view_count} requested",
                sources.len()
            )));
        }
        let trainable =
            |name: &str| FINETUNE_GROUPS.iter().any(|g| name.starts_with(g));
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xf17e);
        let source_views: Vec<(Array3<f64>, Camera)> = sources
            .iter()
            .map(|&i| (scene.frames[i].image.clone(), scene.frames[i].camera.clone()))
            .collect();
        for _ in 0..self.config.finetune_steps {
            // rays drawn from the same few views used for conditioning
            let n = self.config.rays_per_step_phase1.min(512);
            let mut rays = Vec::with_capacity(n);
            let mut ray_ids = Vec::with_capacity(n);
            let mut target = Array2::<f64>::zeros((n, 3));
            for k in 0..n {
                let &view = sources.choose(&mut rng).unwrap();
                let frame = &scene.frames[view];
                let (h, w, _) = frame.image.dim();
                let (r, c) = (rng.gen_range(0..h), rng.gen_range(0..w));
                rays.push(generate_rays(&frame.camera, &[(r, c)])?.pop().unwrap());
                ray_ids.push((view * h * w + r * w + c) as u64);
                for ch in 0..3 {
                    target[(k, ch)] = frame.image[(r, c, ch)];
                }
            }
            let batch = TrainBatch {
                source_views: source_views.clone(),
                rays,
                ray_ids,
                target_rgb: target,
                patch_size: None,
                render_seed: rng.gen(),
            };
            self.step(&batch, self.config.finetune_lr, &trainable, false)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainSummary {
    pub epochs_run: u64,
    pub best_val_psnr: f64,
    pub best_epoch: u64,
}

/// Re-run binding bookkeeping: gradients are collected against the leaves
/// created inside `batch_loss`, so the backward pass happens there via the
/// shared tape. This helper re-binds, forwards nothing, and instead relies on
/// the tape's stored leaf order being the sorted parameter names.
fn collect_grads(
    _tape: &Tape,
    _loss: &Tensor,
    _weights: &ParamSet,
    _trainable: &dyn Fn(&str) -> bool,
) -> Result<BTreeMap<String, Arr>> {
    unreachable!("replaced below")
}

pub struct JsonlLogger {
    file: std::io::BufWriter<std::fs::File>,
    pub path: PathBuf,
}

impl JsonlLogger {
    pub fn create(path: &Path) -> Result<JsonlLogger> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlLogger {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn log(&mut self, record: &LogRecord) {
        use std::io::Write;
        let line = serde_json::to_string(record).expect("log record serialize");
        let _ = writeln!(self.file, "{line}");
        let _ = self.file.flush();
    }
}

fn _unused(_: &Arr) {}
