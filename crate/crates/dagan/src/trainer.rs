//! The optimization loop: alternating generator/critic updates under a
//! polynomial learning-rate decay, periodic validation with best-F1
//! checkpointing, and the optional self-training outer loop that grows the
//! training set with critic-approved pseudo-labels.

use crate::autodiff::Tensor;
use crate::checkpoint::{Checkpoint, RngSnapshot, Section};
use crate::config::ExperimentConfig;
use crate::data::{augment, batch_tensors, AugmentConfig, BiTemporalSample};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{load_param_values, DaNet};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::nn::{Adam, Parameterized};
use crate::objectives::{
    adversarial_discriminator_loss, generator_loss, supervised_deep_loss, LossReport,
    ObjectiveTerms,
};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashMap;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

/// Decision threshold used everywhere a probability map becomes a mask.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Polynomial decay `base_lr * (1 - iter/max_iter)^0.9`.
pub fn poly_lr(iter: u64, base_lr: f64, max_iter: u64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Config(format!(
            "iteration {iter} outside the schedule range [0, {max_iter}]"
        )));
    }
    let remaining = 1.0 - iter as f64 / max_iter as f64;
    Ok(base_lr * remaining.powf(0.9))
}

/// Mutable state of one experiment: both networks, both optimizers, the
/// RNG, and the progress counters. Checkpoints capture all of it.
pub struct TrainState {
    pub config: ExperimentConfig,
    pub generator: DaNet,
    pub discriminator: Option<Discriminator>,
    gen_params: Vec<(String, Tensor)>,
    disc_params: Vec<(String, Tensor)>,
    pub opt_g: Adam,
    pub opt_d: Option<Adam>,
    pub iteration: u64,
    pub best_f1: f64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng_from_seed(config.seed);
        let generator = DaNet::new(
            &mut rng,
            &config.model.plan.plan(),
            config.variant,
            config.model.mafm_pool,
            config.model.decoder_mode,
            config.model.normalization.stats(),
        );
        let discriminator = config
            .variant
            .adversarial()
            .then(|| Discriminator::new(&mut rng, config.model.cond_disc));

        let mut gen_params = Vec::new();
        generator.collect_params("generator", &mut gen_params);
        let mut disc_params = Vec::new();
        if let Some(d) = &discriminator {
            d.collect_params("discriminator", &mut disc_params);
        }

        let o = &config.optim;
        let opt_g = Adam::new(&gen_params, o.base_lr, o.beta1, o.beta2, o.weight_decay);
        let opt_d = discriminator
            .is_some()
            .then(|| Adam::new(&disc_params, o.base_lr, o.beta1, o.beta2, o.weight_decay));

        Ok(TrainState {
            config: config.clone(),
            generator,
            discriminator,
            gen_params,
            disc_params,
            opt_g,
            opt_d,
            iteration: 0,
            best_f1: f64::NEG_INFINITY,
            rng,
        })
    }

    /// One generator step: supervised deep loss plus (adversarial variant)
    /// the generator's adversarial term. The critic's parameters are
    /// untouched — gradients that reach them are discarded.
    pub fn generator_update(
        &mut self,
        t1: &Tensor,
        t2: &Tensor,
        target: &ArrayD<f64>,
    ) -> Result<(LossReport, Tensor)> {
        let pred = self.generator.forward(t1, t2)?;
        let (l_bce, l_dice) = supervised_deep_loss(&pred.aux_probs, target)?;
        let l_g = match &self.discriminator {
            Some(d) => {
                let scores = d.forward(&d.assemble_input(&pred.final_prob, t1, t2))?;
                Some(generator_loss(&scores))
            }
            None => None,
        };
        let terms = ObjectiveTerms { l_g, l_d_adv: None, l_bce, l_dice };
        let report = terms.report();
        if !report.is_finite() {
            return Err(self.numeric_abort("generator", &report));
        }
        terms.generator_total().backward();
        self.opt_g.step(&self.gen_params);
        if let Some(opt_d) = &self.opt_d {
            // The adversarial term backpropagated into the critic too;
            // drop those gradients so the next critic step starts clean.
            opt_d.zero_grad(&self.disc_params);
        }
        Ok((report, pred.final_prob.detach()))
    }

    /// One critic step on detached fake maps; generator parameters are
    /// untouched by construction (the fake map carries no graph).
    pub fn discriminator_update(
        &mut self,
        fake_detached: &Tensor,
        real: &Tensor,
        t1: &Tensor,
        t2: &Tensor,
    ) -> Result<f64> {
        let (Some(d), Some(opt_d)) = (&self.discriminator, &mut self.opt_d) else {
            return Err(Error::Config(
                "critic update requires the adversarial variant".into(),
            ));
        };
        let d_real = d.forward(&d.assemble_input(real, t1, t2))?;
        let d_fake = d.forward(&d.assemble_input(fake_detached, t1, t2))?;
        let loss = adversarial_discriminator_loss(&d_real, &d_fake);
        let value = *loss.value().iter().next().unwrap();
        if !value.is_finite() {
            let report = LossReport { l_g: 0.0, l_d_adv: value, l_bce: 0.0, l_dice: 0.0, total_d: value };
            return Err(self.numeric_abort("critic", &report));
        }
        loss.backward();
        opt_d.step(&self.disc_params);
        Ok(value)
    }

    /// One full iteration: `m_steps` generator updates, then (adversarial
    /// variant) `m_steps` critic updates on the freshest fake maps, all at
    /// the current schedule's learning rate.
    pub fn train_step(&mut self, batch: &[&BiTemporalSample]) -> Result<LossReport> {
        let lr = poly_lr(self.iteration, self.config.optim.base_lr, self.config.optim.max_iter)?;
        self.opt_g.lr = lr;
        if let Some(opt_d) = &mut self.opt_d {
            opt_d.lr = lr;
        }

        let (t1, t2, target) = batch_tensors(batch)?;
        let mut report = LossReport { l_g: 0.0, l_d_adv: 0.0, l_bce: 0.0, l_dice: 0.0, total_d: 0.0 };
        let mut last_fake: Option<Tensor> = None;
        for _ in 0..self.config.optim.m_steps {
            let (r, fake) = self.generator_update(&t1, &t2, &target)?;
            report = r;
            last_fake = Some(fake);
        }
        if self.discriminator.is_some() {
            let real = Tensor::new(target.clone());
            let fake = last_fake.expect("m_steps >= 1 guarantees a generator pass");
            for _ in 0..self.config.optim.m_steps {
                report.l_d_adv = self.discriminator_update(&fake, &real, &t1, &t2)?;
            }
            report.total_d = report.l_d_adv + report.l_bce + report.l_dice;
        }
        self.iteration += 1;
        Ok(report)
    }

    fn numeric_abort(&self, half_step: &str, report: &LossReport) -> Error {
        Error::Numeric(format!(
            "non-finite loss during the {half_step} update at iteration {}: \
             l_g={} l_d_adv={} l_bce={} l_dice={}",
            self.iteration, report.l_g, report.l_d_adv, report.l_bce, report.l_dice
        ))
    }

    /// Scores the critic on one `[H,W]` map without building a graph.
    fn critic_score(&self, map: &ndarray::Array2<f64>, sample: &BiTemporalSample) -> Result<f64> {
        let d = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Config("scoring requires the adversarial variant".into()))?;
        crate::autodiff::no_grad(|| {
            let (h, w) = map.dim();
            let mask = Tensor::new(
                map.clone().into_shape_with_order((1, 1, h, w)).unwrap().into_dyn(),
            );
            let img = |a: &ndarray::Array3<f64>| {
                Tensor::new(a.clone().into_shape_with_order((1, 3, h, w)).unwrap().into_dyn())
            };
            let input =
                d.assemble_input(&mask, &img(&sample.image_t1), &img(&sample.image_t2));
            let out = d.forward(&input)?;
            let score = *out.value().iter().next().unwrap();
            Ok(score)
        })
    }

    /// One self-training round. The validation confusion matrix picks the
    /// dominant error direction, which biases the pseudo-label binarization
    /// threshold (miss-heavy -> more change pixels, false-alarm-heavy ->
    /// fewer); tiles whose predicted map the critic scores above the
    /// configured threshold come back as new pseudo-labeled samples. An
    /// empty selection is a no-op.
    pub fn self_training_round(
        &mut self,
        train: &[BiTemporalSample],
        val: &[BiTemporalSample],
    ) -> Result<Vec<BiTemporalSample>> {
        if self.discriminator.is_none() {
            return Err(Error::Config(
                "self-training requires the adversarial variant".into(),
            ));
        }
        let val_cm = confusion_on(&self.generator, val)?;
        let binarize = if val_cm.fn_ > val_cm.fp {
            0.4 // misses dominate: label more pixels as changed
        } else if val_cm.fp > val_cm.fn_ {
            0.6 // false alarms dominate: demand more confidence
        } else {
            DECISION_THRESHOLD
        };

        let tau = self.config.train.pseudo_label_threshold;
        let mut added = Vec::new();
        for sample in train {
            let (prob, _) = self.generator.predict(&sample.image_t1, &sample.image_t2)?;
            let pseudo_mask = prob.mapv(|p| if p >= binarize { 1.0 } else { 0.0 });
            let score = self.critic_score(&pseudo_mask, sample)?;
            if score > tau {
                added.push(BiTemporalSample {
                    image_t1: sample.image_t1.clone(),
                    image_t2: sample.image_t2.clone(),
                    mask: pseudo_mask,
                    id: format!("{}_pseudo", sample.id),
                });
            }
        }
        Ok(added)
    }

    /// Captures the complete state for [`Checkpoint`] serialization.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let array_of = |params: &[(String, Tensor)]| -> Vec<(String, ArrayD<f64>)> {
            params.iter().map(|(n, p)| (n.clone(), p.to_array())).collect()
        };
        let moments_of = |params: &[(String, Tensor)], m: &[ArrayD<f64>]| {
            params
                .iter()
                .zip(m)
                .map(|((n, _), arr)| (n.clone(), arr.clone()))
                .collect::<Vec<_>>()
        };

        let mut params = array_of(&self.gen_params);
        params.extend(array_of(&self.disc_params));
        let (gm, gv) = self.opt_g.moments();
        let mut sections = vec![
            Section { name: "params".into(), entries: params },
            Section { name: "adam_g_m".into(), entries: moments_of(&self.gen_params, gm) },
            Section { name: "adam_g_v".into(), entries: moments_of(&self.gen_params, gv) },
        ];
        let mut counters = vec![("adam_g_steps".to_string(), self.opt_g.steps())];
        if let Some(opt_d) = &self.opt_d {
            let (dm, dv) = opt_d.moments();
            sections.push(Section {
                name: "adam_d_m".into(),
                entries: moments_of(&self.disc_params, dm),
            });
            sections.push(Section {
                name: "adam_d_v".into(),
                entries: moments_of(&self.disc_params, dv),
            });
            counters.push(("adam_d_steps".to_string(), opt_d.steps()));
        }

        Checkpoint {
            fingerprint: self.config.fingerprint(),
            iteration: self.iteration,
            best_f1: if self.best_f1.is_finite() { self.best_f1 } else { -1.0 },
            rng: RngSnapshot::capture(&self.rng),
            counters,
            sections,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuilds a state from a checkpoint, verifying the config fingerprint.
    pub fn resume(config: &ExperimentConfig, path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load_checked(path, &config.fingerprint())?;
        let mut state = TrainState::new(config)?;

        let params = ckpt.section("params")?;
        let map: HashMap<String, ArrayD<f64>> = params.entries.iter().cloned().collect();
        let mut all = state.gen_params.clone();
        all.extend(state.disc_params.iter().cloned());
        load_param_values(&all, &map)?;

        let restore_moments =
            |section: &Section, params: &[(String, Tensor)]| -> Result<Vec<ArrayD<f64>>> {
                if section.entries.len() != params.len() {
                    return Err(Error::Checkpoint(format!(
                        "section '{}' holds {} arrays, expected {}",
                        section.name,
                        section.entries.len(),
                        params.len()
                    )));
                }
                section
                    .entries
                    .iter()
                    .zip(params)
                    .map(|((saved, arr), (expected, _))| {
                        if saved != expected {
                            return Err(Error::Checkpoint(format!(
                                "moment order mismatch: '{saved}' vs '{expected}'"
                            )));
                        }
                        Ok(arr.clone())
                    })
                    .collect()
            };

        let gm = restore_moments(ckpt.section("adam_g_m")?, &state.gen_params)?;
        let gv = restore_moments(ckpt.section("adam_g_v")?, &state.gen_params)?;
        state.opt_g.restore(ckpt.counter("adam_g_steps")?, gm, gv);
        if let Some(opt_d) = &mut state.opt_d {
            let dm = restore_moments(ckpt.section("adam_d_m")?, &state.disc_params)?;
            let dv = restore_moments(ckpt.section("adam_d_v")?, &state.disc_params)?;
            opt_d.restore(ckpt.counter("adam_d_steps")?, dm, dv);
        }

        state.iteration = ckpt.iteration;
        state.best_f1 = ckpt.best_f1;
        state.rng = ckpt.rng.restore();
        Ok(state)
    }

    /// Read-only view of the named generator parameters.
    pub fn generator_params(&self) -> &[(String, Tensor)] {
        &self.gen_params
    }

    /// Read-only view of the named critic parameters (empty without one).
    pub fn discriminator_params(&self) -> &[(String, Tensor)] {
        &self.disc_params
    }
}

/// Accumulates the confusion matrix of a model over samples at the standard
/// decision threshold.
pub fn confusion_on(net: &DaNet, samples: &[BiTemporalSample]) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty sample set".into()));
    }
    let mut cm = ConfusionMatrix::new();
    for s in samples {
        let (prob, _) = net.predict(&s.image_t1, &s.image_t2)?;
        cm.accumulate_prob(
            prob.view().into_dyn(),
            s.mask.view().into_dyn(),
            DECISION_THRESHOLD,
        )?;
    }
    Ok(cm)
}

/// Full evaluation: confusion matrix plus every derived metric.
pub fn evaluate(net: &DaNet, samples: &[BiTemporalSample]) -> Result<MetricReport> {
    confusion_on(net, samples)?.compute_all()
}

#[derive(Serialize)]
struct LossLine<'a> {
    iteration: u64,
    phase: u32,
    #[serde(flatten)]
    report: &'a LossReport,
}

#[derive(Serialize)]
struct EvalLine<'a> {
    iteration: u64,
    phase: u32,
    #[serde(flatten)]
    report: &'a MetricReport,
}

/// Everything an experiment leaves behind.
pub struct ExperimentOutcome {
    pub state: TrainState,
    pub final_report: MetricReport,
    pub best_f1: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// Runs the full recipe: an initial training phase, then per self-training
/// round a dataset augmentation pass and a retraining phase (continuing from
/// the current weights, schedule restarted). Writes per-iteration losses
/// (`losses.jsonl`), per-eval metrics (`evals.jsonl`), the best-F1 and final
/// checkpoints, and the final report (`report.json`) under `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    train: &[BiTemporalSample],
    val: &[BiTemporalSample],
    out_dir: &Path,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut loss_log = std::fs::File::create(out_dir.join("losses.jsonl"))?;
    let mut eval_log = std::fs::File::create(out_dir.join("evals.jsonl"))?;
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    let mut state = TrainState::new(config)?;
    let val_set: Vec<BiTemporalSample> =
        if val.is_empty() { train.to_vec() } else { val.to_vec() };
    let mut train_set: Vec<BiTemporalSample> = train.to_vec();
    let phases = 1 + config.effective_self_train_rounds();
    let aug_cfg = AugmentConfig::default();

    for phase in 0..phases {
        if phase > 0 {
            let added = state.self_training_round(train, &val_set)?;
            if added.is_empty() {
                eprintln!("self-training round {phase}: no tile passed the critic; skipping");
            } else {
                train_set.extend(added);
            }
            state.iteration = 0; // schedule restarts; weights continue
        }

        let mut order: Vec<usize> = Vec::new();
        for _ in 0..config.optim.max_iter {
            // Epoch-style sampling without replacement.
            let mut batch_idx = Vec::with_capacity(config.optim.batch_size);
            while batch_idx.len() < config.optim.batch_size {
                if order.is_empty() {
                    order = (0..train_set.len()).collect();
                    order.shuffle(&mut state.rng);
                }
                batch_idx.push(order.pop().unwrap());
            }

            let report = if config.data.augment {
                let augmented: Vec<BiTemporalSample> = batch_idx
                    .iter()
                    .map(|&i| augment(&train_set[i], &aug_cfg, &mut state.rng).0)
                    .collect();
                let refs: Vec<&BiTemporalSample> = augmented.iter().collect();
                state.train_step(&refs)?
            } else {
                let refs: Vec<&BiTemporalSample> =
                    batch_idx.iter().map(|&i| &train_set[i]).collect();
                state.train_step(&refs)?
            };

            let iter_now = state.iteration;
            if iter_now % config.train.log_every == 0 || iter_now == config.optim.max_iter {
                let line = LossLine { iteration: iter_now, phase, report: &report };
                writeln!(loss_log, "{}", serde_json::to_string(&line).unwrap())?;
            }
            if iter_now % config.train.eval_every == 0 || iter_now == config.optim.max_iter {
                let metric = evaluate(&state.generator, &val_set)?;
                let line = EvalLine { iteration: iter_now, phase, report: &metric };
                writeln!(eval_log, "{}", serde_json::to_string(&line).unwrap())?;
                if metric.f1 > state.best_f1 {
                    state.best_f1 = metric.f1;
                    state.save(&best_path)?;
                }
            }
        }
    }

    let final_report = evaluate(&state.generator, &val_set)?;
    if final_report.f1 > state.best_f1 {
        state.best_f1 = final_report.f1;
        state.save(&best_path)?;
    }
    state.save(&last_path)?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&final_report).unwrap(),
    )?;

    Ok(ExperimentOutcome {
        best_f1: state.best_f1,
        state,
        final_report,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}
