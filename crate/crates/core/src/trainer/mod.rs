//! End-to-end model (FSD -> memory bank -> MVAA), training loop and
//! evaluation sweep.

pub mod augment;
pub mod checkpoint;
pub mod window;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Adam, Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{breakdown_report, Detection, EvalConfig, MetricReport, SceneEval};
use crate::fsd::{fsd_assign, FsdAssignment, FsdConfig, FsdNet, ProposalSet};
use crate::geometry::{transform_boxes, Box7};
use crate::losses::{fsd_loss, stage_loss, stage_targets, total_loss, LossBundle};
use crate::memory_bank::{roi_features, union_proposals, MemoryBank, MemoryEntry};
use crate::mvaa::{decode_predictions, KeyMode, Mvaa, MvaaConfig, ViewInput};
use crate::pillars::BevFeatureMap;
use crate::scene_sim::FrameRecord;

pub use augment::Augmentation;
pub use window::{window_frames, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub fsd: FsdConfig,
    pub mvaa: MvaaConfig,
    /// Stored windows kept in the memory bank.
    pub bank_capacity: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fsd: FsdConfig::default(),
            mvaa: MvaaConfig::default(),
            bank_capacity: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Examples per optimizer step; gradients are averaged.
    pub batch_size: usize,
    pub steps: u64,
    /// Exponential decay from `lr` at `decay_start` to `lr * decay_factor`
    /// at `decay_end`, constant afterwards.
    pub decay_start: u64,
    pub decay_end: u64,
    pub decay_factor: f64,
    pub flip: bool,
    /// Maximum absolute random rotation (radians).
    pub rotation: f64,
    /// Frames per example (F) and frames per concatenation window (W).
    pub frames: usize,
    pub window: usize,
    /// Frames between consecutive window ends; 0 means `window`.
    pub window_stride: usize,
    pub seed: u64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    /// Smooth-L1 threshold.
    pub beta: f64,
    /// Steps at the start that train on `L_fsd` only.
    pub fsd_warmup: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            batch_size: 4,
            steps: 2000,
            decay_start: 200,
            decay_end: 1800,
            decay_factor: 0.1,
            flip: true,
            rotation: std::f64::consts::FRAC_PI_4,
            frames: 4,
            window: 1,
            window_stride: 0,
            seed: 0,
            log_interval: 10,
            checkpoint_interval: 500,
            beta: 1.0,
            fsd_warmup: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.frames < self.window {
            return invalid(format!("need frames >= window >= 1, got F={} W={}", self.frames, self.window));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !(self.decay_factor > 0.0) || !(self.beta > 0.0) {
            return invalid("lr must be non-negative, decay_factor and beta positive");
        }
        if self.decay_end < self.decay_start {
            return invalid("decay_end before decay_start");
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        if self.window_stride == 0 {
            self.window
        } else {
            self.window_stride
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.decay_start || self.decay_end == self.decay_start {
            return if step > self.decay_end { self.lr * self.decay_factor } else { self.lr };
        }
        let t = (step.min(self.decay_end) - self.decay_start) as f64 / (self.decay_end - self.decay_start) as f64;
        self.lr * self.decay_factor.powf(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Infer,
    /// `stage_losses == false` trains only `L_fsd`.
    Train { beta: f64, stage_losses: bool },
}

#[derive(Debug)]
pub struct ExampleOutput {
    pub detections: Vec<Detection>,
    pub proposals: ProposalSet,
    pub assignment: Option<FsdAssignment>,
    /// Views seen by MVAA (stored windows plus the target); 0 when disabled.
    pub num_views: usize,
    pub loss: Option<(Var, LossBundle)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub fsd: FsdNet,
    pub mvaa: Mvaa,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.bank_capacity == 0 {
            return invalid("bank_capacity must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fsd = FsdNet::new(&cfg.fsd, &mut store, &mut rng)?;
        let mvaa = Mvaa::new(&mut store, fsd.out_channels(), &cfg.mvaa, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            fsd,
            mvaa,
        })
    }

    /// Gts whose centers lie inside the pillar grid.
    pub fn in_range(&self, b: &Box7) -> bool {
        let g = &self.cfg.fsd.grid;
        b.cx >= g.x_range[0] && b.cx < g.x_range[1] && b.cy >= g.y_range[0] && b.cy < g.y_range[1]
    }

    /// Inference-mode FSD of one window, as stored in the memory bank.
    pub fn memory_entry(&self, w: &Window) -> Result<MemoryEntry> {
        let mut g = Graph::new();
        let out = self.fsd.forward(&mut g, &self.store, &w.points)?;
        let proposals = self.fsd.propose(&g, &out, w.frame_index)?;
        let fmap = BevFeatureMap::new(self.fsd.geom, g.value(out.features).clone())?;
        Ok(MemoryEntry {
            proposals,
            fmap,
            pose: w.pose,
            frame_index: w.frame_index,
        })
    }

    /// Run all windows of one example; the last window is the target.
    pub fn forward_example(&self, g: &mut Graph, windows: &[Window], mode: Mode) -> Result<ExampleOutput> {
        let Some((target, stored)) = windows.split_last() else {
            return invalid("example has no windows");
        };
        let mut bank = MemoryBank::new(self.cfg.bank_capacity)?;
        if self.mvaa.cfg.enabled {
            for w in stored {
                bank.push(self.memory_entry(w)?)?;
            }
        }
        let geom = self.fsd.geom;
        let k = self.mvaa.cfg.roi_grid;
        let out = self.fsd.forward(g, &self.store, &target.points)?;
        let proposals = self.fsd.propose(g, &out, target.frame_index)?;
        let gts: Vec<Box7> = target.gt.iter().map(|o| o.bbox).filter(|b| self.in_range(b)).collect();

        let mut assignment = None;
        let mut l_fsd = None;
        if let Mode::Train { beta, .. } = mode {
            let a = fsd_assign(&proposals, &gts, &geom, self.cfg.fsd.iou, self.cfg.fsd.assignment)?;
            l_fsd = Some(fsd_loss(g, out.head, &a, &gts, &geom, &self.cfg.fsd.prior(), self.cfg.fsd.num_bins, beta)?);
            assignment = Some(a);
        }

        let f_t = roi_features(g, out.features, &geom, &proposals.boxes, k)?;
        let views = self.views(g, &bank, &proposals, target, out.features)?;
        let num_views = views.len();
        let mo = self.mvaa.forward(g, &self.store, f_t, &proposals.boxes, &views)?;

        let res = g.value(mo.residuals).clone();
        let boxes = decode_predictions(&res, &proposals.boxes)?;
        let obj = g.value(mo.objectness);
        let detections = (0..proposals.len())
            .filter(|&i| proposals.valid[i])
            .map(|i| Detection {
                bbox: boxes[i],
                score: sigmoid(obj.data[i]),
            })
            .collect();

        let loss = match (mode, l_fsd) {
            (Mode::Train { beta, stage_losses }, Some(lf)) => {
                if stage_losses {
                    let t = stage_targets(&proposals.boxes, &proposals.valid, &gts, self.cfg.fsd.iou)?;
                    let lm = stage_loss(g, mo.objectness, mo.residuals, &proposals.valid, std::slice::from_ref(&t), beta)?;
                    let lc = if mo.crossview.is_empty() {
                        None
                    } else {
                        let objs: Vec<Var> = mo.crossview.iter().map(|c| c.0).collect();
                        let regs: Vec<Var> = mo.crossview.iter().map(|c| c.1).collect();
                        let o = g.concat_rows(&objs);
                        let r = g.concat_rows(&regs);
                        let targets = vec![t; objs.len()];
                        Some(stage_loss(g, o, r, &proposals.valid, &targets, beta)?)
                    };
                    Some(total_loss(g, &lf, Some(&lm), lc.as_ref()))
                } else {
                    Some(total_loss(g, &lf, None, None))
                }
            }
            _ => None,
        };
        Ok(ExampleOutput {
            detections,
            proposals,
            assignment,
            num_views,
            loss,
        })
    }

    fn views(&self, g: &mut Graph, bank: &MemoryBank, proposals: &ProposalSet, target: &Window, target_map: Var) -> Result<Vec<ViewInput>> {
        if !self.mvaa.cfg.enabled {
            return Ok(Vec::new());
        }
        let geom = self.fsd.geom;
        let k = self.mvaa.cfg.roi_grid;
        let mut views = Vec::new();
        let union = match self.mvaa.cfg.keys {
            KeyMode::Union => Some(union_proposals(bank, proposals, &target.pose)?),
            KeyMode::PerFrame => None,
        };
        for (s, e) in bank.entries().enumerate() {
            let (in_view, in_target, valid) = match &union {
                Some(u) => (u.per_stored[s].clone(), u.target_frame.clone(), u.valid.clone()),
                None => (
                    e.proposals.boxes.clone(),
                    transform_boxes(&e.proposals.boxes, &e.pose, &target.pose)?,
                    e.proposals.valid.clone(),
                ),
            };
            let map = g.constant(e.fmap.data.clone());
            let features = roi_features(g, map, &geom, &in_view, k)?;
            views.push(ViewInput {
                features,
                boxes: in_target,
                valid,
                dt: (target.frame_index - e.frame_index) as f64,
            });
        }
        if self.mvaa.cfg.include_target_view || views.is_empty() {
            let (boxes, valid) = match &union {
                Some(u) => (u.target_frame.clone(), u.valid.clone()),
                None => (proposals.boxes.clone(), proposals.valid.clone()),
            };
            let features = roi_features(g, target_map, &geom, &boxes, k)?;
            views.push(ViewInput {
                features,
                boxes,
                valid,
                dt: 0.0,
            });
        }
        Ok(views)
    }

    /// Detections on the last frame of `frames`.
    pub fn detect(&self, frames: &[FrameRecord], window: usize, stride: usize) -> Result<Vec<Detection>> {
        let windows = window_frames(frames, window, stride)?;
        let mut g = Graph::new();
        Ok(self.forward_example(&mut g, &windows, Mode::Infer)?.detections)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l_fsd: f64,
    pub l_mvaa: f64,
    pub l_cv: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        let opt = Adam::new(&model.store);
        Ok(Self {
            model,
            opt,
            cfg: cfg.clone(),
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed ^ self.opt.step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Last `F` frames of an example, augmented, split into windows.
    fn prepare(&self, frames: &[FrameRecord], rng: &mut ChaCha8Rng) -> Result<Vec<Window>> {
        let f = self.cfg.frames;
        if frames.len() < f {
            return Err(Error::Data(format!("sequence has {} frames, need {f}", frames.len())));
        }
        let mut ex = frames[frames.len() - f..].to_vec();
        let aug = Augmentation {
            flip_y: self.cfg.flip && rng.gen_bool(0.5),
            rotation: if self.cfg.rotation > 0.0 {
                rng.gen_range(-self.cfg.rotation..=self.cfg.rotation)
            } else {
                0.0
            },
        };
        if aug != Augmentation::identity() {
            aug.apply_frames(&mut ex)?;
        }
        window_frames(&ex, self.cfg.window, self.cfg.stride())
    }

    /// One optimizer step on the mean loss of `batch`.
    pub fn train_step(&mut self, batch: &[&[FrameRecord]]) -> Result<LossBundle> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let mut rng = self.step_rng();
        let lr = self.cfg.lr_at(self.opt.step);
        let stage_losses = self.opt.step >= self.cfg.fsd_warmup;
        let mode = Mode::Train {
            beta: self.cfg.beta,
            stage_losses,
        };
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Option<Vec<Vec<f64>>> = None;
        let mut mean = LossBundle::default();
        for frames in batch {
            let windows = self.prepare(frames, &mut rng)?;
            let mut g = Graph::new();
            let out = self.model.forward_example(&mut g, &windows, mode)?;
            let (total, bundle) = out.loss.expect("training mode yields a loss");
            if !bundle.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {}: fsd={:?} mvaa={:?} cv={:?} total={}",
                    self.opt.step, bundle.fsd, bundle.mvaa, bundle.cv, bundle.l_total
                )));
            }
            let root = g.scale(total, scale);
            g.backward(root);
            let gr = Adam::gather_grads(&self.model.store, &g);
            match grads.as_mut() {
                None => grads = Some(gr),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(gr) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    }
                }
            }
            mean.l_fsd += bundle.l_fsd * scale;
            mean.l_mvaa += bundle.l_mvaa * scale;
            mean.l_cv += bundle.l_cv * scale;
            mean.l_total += bundle.l_total * scale;
            mean.fsd = bundle.fsd;
            mean.mvaa = bundle.mvaa;
            mean.cv = bundle.cv;
        }
        let grads = grads.expect("non-empty batch");
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at step {}", self.opt.step)));
        }
        self.opt.update(&mut self.model.store, &grads, lr);
        Ok(mean)
    }

    /// Sample a batch (deterministic in seed and step) and take one step.
    pub fn train_on(&mut self, data: &[Vec<FrameRecord>]) -> Result<LogRecord> {
        if data.is_empty() {
            return Err(Error::Data("no training sequences".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(1) ^ self.opt.step.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let picks: Vec<&[FrameRecord]> = (0..self.cfg.batch_size).map(|_| data[rng.gen_range(0..data.len())].as_slice()).collect();
        let lr = self.cfg.lr_at(self.opt.step);
        let b = self.train_step(&picks)?;
        Ok(LogRecord {
            step: self.opt.step,
            l_fsd: b.l_fsd,
            l_mvaa: b.l_mvaa,
            l_cv: b.l_cv,
            l_total: b.l_total,
            lr,
        })
    }
}

/// Final-frame detections of every sequence scored against its labels.
pub fn evaluate(model: &Model, data: &[Vec<FrameRecord>], train: &TrainConfig, eval: &EvalConfig) -> Result<MetricReport> {
    let mut scenes = Vec::with_capacity(data.len());
    for seq in data {
        if seq.len() < train.frames {
            return Err(Error::Data(format!("sequence has {} frames, need {}", seq.len(), train.frames)));
        }
        let frames = &seq[seq.len() - train.frames..];
        let preds = model.detect(frames, train.window, train.stride())?;
        let gts = frames[frames.len() - 1].gt.iter().filter(|o| model.in_range(&o.bbox)).copied().collect();
        scenes.push(SceneEval { preds, gts });
    }
    breakdown_report(&scenes, eval)
}
