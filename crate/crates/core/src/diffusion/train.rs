use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{gaussian_like, q_sample, DiffusionSchedule};
use super::{DenoiserInput, DiffusionError, InputVars, LatentGrid, NoiseModel};
use crate::autograd::{Tape, Tensor, Var};
use crate::conditioning::{EmbeddingMatrix, ProjectionLayer};
use crate::nn::Adam;

/// One `(x0, mask, masked_target, context)` item for [`training_loss`].
#[derive(Debug, Clone)]
pub struct LossSample {
    pub x0: LatentGrid,
    pub mask: LatentGrid,
    pub masked_target: LatentGrid,
    pub context: EmbeddingMatrix,
}

/// Mean over the batch of the per-element squared error between injected
/// and predicted noise, with `t ~ U{1..T}` and `eps ~ N(0, I)` drawn from `rng`.
pub fn training_loss(
    model: &dyn NoiseModel,
    batch: &[LossSample],
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<f64, DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let t = rng.random_range(1..=schedule.timesteps());
        let eps = gaussian_like(&s.x0, rng);
        let noisy = q_sample(&s.x0, t, &eps, schedule);
        let input = DenoiserInput { noisy: &noisy, mask: &s.mask, masked_target: &s.masked_target, t, context: &s.context };
        input.validate()?;
        let pred = model.predict(&input);
        let loss = mean_squared(&pred, &eps);
        if !loss.is_finite() {
            return Err(DiffusionError::NonFiniteLoss { batch_index: i });
        }
        total += loss;
    }
    Ok(total / batch.len() as f64)
}

fn mean_squared(a: &LatentGrid, b: &LatentGrid) -> f64 {
    let n = a.values().len() as f64;
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// A training pair with its conditioning split so the pose row can be
/// produced on the tape from a trainable projection.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub x0: LatentGrid,
    pub mask: LatentGrid,
    pub masked_target: LatentGrid,
    /// Image rows, followed by text rows when the variant uses text.
    pub context_prefix: EmbeddingMatrix,
    pub uncond_prefix: EmbeddingMatrix,
    /// Flattened pose fed to the projection; `None` when the variant has no pose row.
    pub pose_input: Option<Vec<f64>>,
    pub uncond_pose_input: Option<Vec<f64>>,
}

impl TrainingExample {
    /// The full context, with the pose row (if any) appended last.
    pub fn context(&self, pose_projection: Option<&ProjectionLayer>, unconditional: bool) -> EmbeddingMatrix {
        let (prefix, pose) = self.parts(unconditional);
        match (pose, pose_projection) {
            (Some(p), Some(proj)) => {
                let row = proj.forward(&Tensor::new(vec![1, p.len()], p.to_vec()));
                let row = EmbeddingMatrix::from_tensor(row).expect("pose projection emits one 768 row");
                EmbeddingMatrix::concat(&[prefix, &row])
            }
            (Some(_), None) => panic!("example carries a pose but no projection was given"),
            (None, _) => prefix.clone(),
        }
    }

    fn parts(&self, unconditional: bool) -> (&EmbeddingMatrix, Option<&[f64]>) {
        if unconditional {
            (&self.uncond_prefix, self.uncond_pose_input.as_deref())
        } else {
            (&self.context_prefix, self.pose_input.as_deref())
        }
    }

    pub fn as_loss_sample(&self, pose_projection: Option<&ProjectionLayer>) -> LossSample {
        LossSample {
            x0: self.x0.clone(),
            mask: self.mask.clone(),
            masked_target: self.masked_target.clone(),
            context: self.context(pose_projection, false),
        }
    }
}

/// Fixed randomness for one loss evaluation.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub epsilon: LatentGrid,
    pub unconditional: bool,
}

#[derive(Debug, Clone)]
pub struct LossGradients {
    pub loss: f64,
    /// In parameter-store order.
    pub model: Vec<Tensor>,
    /// `(weights, bias)` of the pose projection.
    pub pose: Option<(Tensor, Tensor)>,
}

/// Loss of one example under a fixed draw, with gradients for every model
/// parameter and, when given, the pose projection.
pub fn loss_and_gradients(
    model: &dyn NoiseModel,
    pose_projection: Option<&ProjectionLayer>,
    example: &TrainingExample,
    draw: &NoiseDraw,
    schedule: &DiffusionSchedule,
) -> LossGradients {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let pose_vars = pose_projection.map(|p| (tape.parameter(p.weights.clone()), tape.parameter(p.bias.clone())));

    let (prefix, pose) = example.parts(draw.unconditional);
    let prefix = tape.constant(prefix.to_tensor());
    let context = match (pose, pose_vars) {
        (Some(p), Some((w, b))) => {
            let input = tape.constant(Tensor::new(vec![1, p.len()], p.to_vec()));
            let row = ProjectionLayer::forward_on_tape(&mut tape, input, w, b);
            tape.concat(&[prefix, row])
        }
        (Some(_), None) => panic!("example carries a pose but no projection was given"),
        (None, _) => prefix,
    };

    let noisy = q_sample(&example.x0, draw.t, &draw.epsilon, schedule);
    let vars = InputVars {
        noisy: tape.constant(noisy.into_tensor()),
        mask: tape.constant(example.mask.tensor().clone()),
        masked_target: tape.constant(example.masked_target.tensor().clone()),
        context,
        t: draw.t,
    };
    let pred = model.predict_on_tape(&mut tape, &bound, vars);
    let target = tape.constant(draw.epsilon.tensor().clone());
    let loss = tape.mse(pred, target);
    let value = tape.value(loss).item();

    let mut grads = tape.backward(loss);
    let model_grads = bound.gradients(model.params(), &mut grads);
    let pose = pose_vars.map(|(w, b): (Var, Var)| {
        let gw = grads.take(w).unwrap_or_else(|| Tensor::zeros(tape.shape(w)));
        let gb = grads.take(b).unwrap_or_else(|| Tensor::zeros(tape.shape(b)));
        (gw, gb)
    });
    LossGradients { loss: value, model: model_grads, pose }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of training a step on the unconditional context.
    pub cond_dropout: f64,
    /// Invoke the epoch callback every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub train_pose_projection: bool,
    /// Random horizontal flips of the whole example; pose rows are left as is.
    pub augment: bool,
    /// Cosine-anneal the learning rate down to this fraction of its start;
    /// `None` keeps it constant.
    pub cosine_floor: Option<f64>,
    /// Rescale each step's gradients so their global L2 norm is at most this.
    pub grad_clip: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            learning_rate: 2e-3,
            cond_dropout: 0.1,
            checkpoint_every: 50,
            train_pose_projection: true,
            augment: false,
            cosine_floor: Some(0.05),
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub log: Vec<LossLogEntry>,
    pub epochs_completed: usize,
    /// Step whose loss was non-finite; parameters are those before that step.
    pub aborted_at: Option<usize>,
}

impl TrainOutcome {
    /// Mean logged loss over the last completed epoch.
    pub fn final_epoch_loss(&self) -> Option<f64> {
        let last = self.log.last()?.epoch;
        let losses: Vec<f64> = self.log.iter().filter(|e| e.epoch == last).map(|e| e.loss).collect();
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for e in &self.log {
            out.push_str(&format!("{},{},{}\n", e.step, e.epoch, e.loss));
        }
        out
    }
}

/// Epoch-based minibatch trainer with Adam.
pub struct Trainer {
    pub settings: TrainSettings,
    rng: ChaCha8Rng,
}

/// Called as `(epochs_done, model, pose_projection)`.
pub type EpochHook<'a, M> = dyn FnMut(usize, &M, Option<&ProjectionLayer>) -> Result<(), DiffusionError> + 'a;

impl Trainer {
    pub fn new(settings: TrainSettings, seed: u64) -> Self {
        Self { settings, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn run<M: NoiseModel>(
        &mut self,
        model: &mut M,
        mut pose_projection: Option<&mut ProjectionLayer>,
        examples: &[TrainingExample],
        schedule: &DiffusionSchedule,
        on_checkpoint: &mut EpochHook<'_, M>,
    ) -> Result<TrainOutcome, DiffusionError> {
        let mut outcome = TrainOutcome::default();
        if self.settings.epochs == 0 {
            return Ok(outcome);
        }
        if examples.is_empty() {
            return Err(DiffusionError::EmptyBatch);
        }
        let batch_size = self.settings.batch_size.max(1);
        let mut opt = Adam::new(self.settings.learning_rate);
        let mut pose_opt = Adam::new(self.settings.learning_rate);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut step = 0;
        let total_steps = self.settings.epochs * examples.len().div_ceil(batch_size);
        let base_lr = self.settings.learning_rate;

        for epoch in 1..=self.settings.epochs {
            order.shuffle(&mut self.rng);
            for batch in order.chunks(batch_size) {
                let trainable_pose = if self.settings.train_pose_projection { pose_projection.as_deref() } else { None };
                let mut sum: Option<LossGradients> = None;
                for &i in batch {
                    let flipped;
                    let mut example = &examples[i];
                    if self.settings.augment && self.rng.random_bool(0.5) {
                        flipped = flip_example(example);
                        example = &flipped;
                    }
                    let draw = NoiseDraw {
                        t: self.rng.random_range(1..=schedule.timesteps()),
                        epsilon: gaussian_like(&example.x0, &mut self.rng),
                        unconditional: self.rng.random_bool(self.settings.cond_dropout.clamp(0.0, 1.0)),
                    };
                    let fixed_pose = if trainable_pose.is_none() { pose_projection.as_deref() } else { None };
                    let g = match fixed_pose {
                        Some(p) => frozen_pose_gradients(model, p, example, &draw, schedule),
                        None => loss_and_gradients(model, trainable_pose, example, &draw, schedule),
                    };
                    sum = Some(match sum {
                        None => g,
                        Some(acc) => accumulate(acc, g),
                    });
                }
                let mut g = sum.expect("batches are non-empty");
                let scale = 1.0 / batch.len() as f64;
                g.loss *= scale;
                let finite = g.loss.is_finite()
                    && g.model.iter().all(Tensor::is_finite)
                    && g.pose.as_ref().is_none_or(|(w, b)| w.is_finite() && b.is_finite());
                if !finite {
                    log::warn!("non-finite loss at step {step}, stopping");
                    outcome.aborted_at = Some(step);
                    return Ok(outcome);
                }
                if let Some(floor) = self.settings.cosine_floor {
                    let progress = step as f64 / total_steps.max(1) as f64;
                    let lr = base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
                    opt.learning_rate = lr;
                    pose_opt.learning_rate = lr;
                }
                let mut sq: f64 = g.model.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
                if let Some((w, b)) = &g.pose {
                    sq += w.data().iter().chain(b.data()).map(|v| v * v).sum::<f64>();
                }
                let norm = sq.sqrt() * scale;
                let scale = match self.settings.grad_clip {
                    Some(c) if norm > c => scale * c / norm,
                    _ => scale,
                };
                let model_grads: Vec<Tensor> = g.model.iter().map(|t| t.map(|v| v * scale)).collect();
                opt.step(model.params_mut().tensors_mut(), &model_grads);
                if let (Some(p), Some((gw, gb))) = (pose_projection.as_deref_mut(), g.pose) {
                    pose_opt.step([&mut p.weights, &mut p.bias], &[gw.map(|v| v * scale), gb.map(|v| v * scale)]);
                }
                outcome.log.push(LossLogEntry { step, epoch, loss: g.loss });
                step += 1;
            }
            outcome.epochs_completed = epoch;
            if let Some(mean) = outcome.final_epoch_loss() {
                log::debug!("epoch {epoch}: mean loss {mean:.5}");
            }
            let k = self.settings.checkpoint_every;
            if (k > 0 && epoch % k == 0) || epoch == self.settings.epochs {
                on_checkpoint(epoch, model, pose_projection.as_deref())?;
            }
        }
        Ok(outcome)
    }
}

fn frozen_pose_gradients(
    model: &dyn NoiseModel,
    pose_projection: &ProjectionLayer,
    example: &TrainingExample,
    draw: &NoiseDraw,
    schedule: &DiffusionSchedule,
) -> LossGradients {
    let mut fixed = example.clone();
    fixed.context_prefix = example.context(Some(pose_projection), false);
    fixed.uncond_prefix = example.context(Some(pose_projection), true);
    fixed.pose_input = None;
    fixed.uncond_pose_input = None;
    loss_and_gradients(model, None, &fixed, draw, schedule)
}

fn accumulate(mut acc: LossGradients, g: LossGradients) -> LossGradients {
    acc.loss += g.loss;
    for (a, b) in acc.model.iter_mut().zip(&g.model) {
        *a = a.zip_map(b, |x, y| x + y);
    }
    if let (Some((aw, ab)), Some((gw, gb))) = (acc.pose.as_mut(), g.pose.as_ref()) {
        *aw = aw.zip_map(gw, |x, y| x + y);
        *ab = ab.zip_map(gb, |x, y| x + y);
    }
    acc
}

fn flip_example(e: &TrainingExample) -> TrainingExample {
    TrainingExample {
        x0: e.x0.flip_horizontal(),
        mask: e.mask.flip_horizontal(),
        masked_target: e.masked_target.flip_horizontal(),
        ..e.clone()
    }
}
