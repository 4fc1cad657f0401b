//! Optimisation loop: P×K batches, augmentation, joint objective, Adam with
//! per-group learning rates under a per-step cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Group, ParamStore, Tape, Tensor};
use crate::checkpoint::save_checkpoint;
use crate::data::{augment, pk_sample, AugmentConfig, Dataset};
use crate::error::{invalid, Error, Result};
use crate::losses::{total_loss, LossBreakdown, DEFAULT_MARGIN};
use crate::model::{SANet, SANetConfig};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Freeze length used by `--paper-mode`.
pub const STAGED_FREEZE_EPOCHS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub base_lr: f64,
    pub stn_lr_multiplier: f64,
    pub margin: f64,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Epochs during which only the stn and head groups are updated.
    pub warmup_freeze_epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (the final one is always written).
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    /// Architecture; `num_classes` is taken from the dataset.
    pub model: SANetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            steps_per_epoch: 50,
            base_lr: 5e-4,
            stn_lr_multiplier: 0.05,
            margin: DEFAULT_MARGIN,
            p: 8,
            k: 4,
            warmup_freeze_epochs: 0,
            seed: 1,
            checkpoint_every: 5,
            augment: AugmentConfig::default(),
            model: SANetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid!("train config: base_lr must be positive"));
        }
        if !(self.stn_lr_multiplier > 0.0 && self.stn_lr_multiplier <= 1.0) {
            return Err(invalid!("train config: stn_lr_multiplier must be in (0, 1]"));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(invalid!("train config: epochs and steps_per_epoch must be positive"));
        }
        if self.k < 2 || self.p < 2 {
            return Err(invalid!("train config: batch-hard mining needs P >= 2 and K >= 2"));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(invalid!("train config: margin must be non-negative"));
        }
        Ok(())
    }
}

/// `base · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(invalid!("cosine_lr: step {step} outside [0, {total_steps}]"));
    }
    Ok(base * (1.0 + (PI * step as f64 / total_steps as f64).cos()) / 2.0)
}

/// One optimizer group: its learning-rate multiplier and member names.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub group: Group,
    pub lr_multiplier: f64,
    pub names: Vec<String>,
}

/// Partitions the parameters by group tag. Every parameter carries a tag
/// by construction, so each lands in exactly one group.
pub fn param_groups<T: crate::autodiff::Real>(params: &ParamStore<T>, stn_lr_multiplier: f64) -> Vec<ParamGroup> {
    Group::ALL
        .iter()
        .map(|&group| ParamGroup {
            group,
            lr_multiplier: if group == Group::Stn { stn_lr_multiplier } else { 1.0 },
            names: params.iter().filter(|p| p.group == group).map(|p| p.name.clone()).collect(),
        })
        .filter(|g| !g.names.is_empty())
        .collect()
}

/// Adam moments, one pair per parameter, plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f32>>,
    pub second: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| (p.name.clone(), vec![0.0; p.value.numel()]))
                .collect::<BTreeMap<_, _>>()
        };
        AdamState {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

/// One bias-corrected Adam update. `lr` maps each group to its rate;
/// parameters in groups missing from `lr` are left untouched, moments
/// included.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: &BTreeMap<Group, f64>,
) -> Result<()> {
    for p in params.iter() {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| invalid!("adam_step: no gradient for `{}`", p.name))?;
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for p in params.iter_mut() {
        let Some(&rate) = lr.get(&p.group) else {
            continue;
        };
        let rate = rate as f32;
        let g = grads[&p.name].data();
        let m = state.first.get_mut(&p.name).expect("moment per parameter");
        let v = state.second.get_mut(&p.name).expect("moment per parameter");
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub epoch: usize,
    pub lr: BTreeMap<String, f64>,
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub steps: usize,
    pub first: LossBreakdown,
    pub last: LossBreakdown,
    /// Manifest of the final checkpoint.
    pub checkpoint: PathBuf,
}

/// Learning rate per group at `step`; groups frozen at this point are absent.
pub fn group_rates(config: &TrainConfig, step: usize, frozen: bool) -> Result<BTreeMap<Group, f64>> {
    let lr = cosine_lr(step, config.total_steps(), config.base_lr)?;
    Ok(Group::ALL
        .iter()
        .filter(|&&g| !(frozen && g == Group::Trunk))
        .map(|&g| (g, if g == Group::Stn { lr * config.stn_lr_multiplier } else { lr }))
        .collect())
}

/// Trains `model` in place on `dataset.train`.
///
/// Writes `model.json`/`model.bin` into `out_dir` every `checkpoint_every`
/// epochs and at the end, one JSON line per step to `train_log.jsonl`, and
/// per-step wall-clock time to `train_timing.jsonl`. A non-finite loss
/// aborts with [`Error::NonFinite`], leaving the last checkpoint in place.
pub fn fit(model: &mut SANet, dataset: &Dataset, config: &TrainConfig, out_dir: &Path) -> Result<FitReport> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let timing_path = out_dir.join("train_timing.jsonl");
    let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
    let mut log = open(&log_path)?;
    let mut timing = open(&timing_path)?;
    let ckpt = out_dir.join("model.json");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(&model.params);
    let total = config.total_steps();
    let started = Instant::now();
    let mut first = None;
    let mut last = None;

    for step in 0..total {
        let epoch = step / config.steps_per_epoch;
        let frozen = epoch < config.warmup_freeze_epochs;
        let rates = group_rates(config, step, frozen)?;

        let batch = pk_sample(&dataset.train, config.p, config.k, &mut rng)?;
        let labels: Vec<usize> = batch.iter().map(|&i| dataset.train[i].identity).collect();
        let s = model.config.input_size;
        let mut pixels = Vec::with_capacity(batch.len() * 3 * s * s);
        for &i in &batch {
            pixels.extend_from_slice(augment(&dataset.train[i].pixels, &config.augment, &mut rng).data());
        }
        let images = Tensor::new(vec![batch.len(), 3, s, s], pixels)?;

        let tape = Tape::new();
        let x = tape.constant(images);
        let out = model.forward(&tape, &x)?;
        let objective = total_loss(&out, &labels, config.margin)?;
        let breakdown = objective.breakdown.clone();
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let grads = tape.backward(objective.total)?.by_name(&model.params);
        drop(out);
        drop(tape);
        adam_step(&mut model.params, &grads, &mut state, &rates)?;

        let line = LogLine {
            step,
            epoch,
            lr: rates.iter().map(|(g, &v)| (g.to_string(), v)).collect(),
            losses: breakdown.terms().into_iter().collect(),
            total: breakdown.total,
        };
        serde_json::to_writer(&mut log, &line).map_err(|e| Error::json(&log_path, e))?;
        writeln!(log).map_err(|e| Error::io(&log_path, e))?;
        writeln!(timing, "{{\"step\":{step},\"wall_time_s\":{:.3}}}", started.elapsed().as_secs_f64())
            .map_err(|e| Error::io(&timing_path, e))?;

        first.get_or_insert_with(|| breakdown.clone());
        last = Some(breakdown);

        let epoch_done = (step + 1) % config.steps_per_epoch == 0;
        if epoch_done && config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            save_checkpoint(model, &ckpt)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    timing.flush().map_err(|e| Error::io(&timing_path, e))?;
    save_checkpoint(model, &ckpt)?;
    Ok(FitReport {
        steps: total,
        first: first.expect("at least one step"),
        last: last.expect("at least one step"),
        checkpoint: ckpt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};
    use crate::gradcheck::tiny_model_config;

    fn tiny_setup(steps: usize) -> (Dataset, TrainConfig) {
        let ds = generate_dataset(&SyntheticSpec {
            num_identities: 8,
            test_identities: 2,
            images_per_identity: 4,
            image_size: 16,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: steps,
            base_lr: 2e-3,
            p: 4,
            k: 2,
            checkpoint_every: 0,
            augment: AugmentConfig::identity(),
            model: SANetConfig {
                num_classes: ds.num_train_classes(),
                ..tiny_model_config()
            },
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    fn read_log(path: &Path) -> Vec<LogLine> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 5e-4).unwrap(), 5e-4);
        assert!((cosine_lr(50, 100, 5e-4).unwrap() - 2.5e-4).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 5e-4).unwrap().abs() < 1e-15);
        assert!(cosine_lr(101, 100, 5e-4).is_err());
        assert!(cosine_lr(0, 0, 5e-4).is_err());
    }

    #[test]
    fn stn_group_runs_at_a_twentieth() {
        let cfg = TrainConfig::default();
        let rates = group_rates(&cfg, 0, false).unwrap();
        assert!((rates[&Group::Stn] - 2.5e-5).abs() < 1e-15);
        assert_eq!(rates[&Group::Trunk], 5e-4);
        assert_eq!(rates[&Group::Head], 5e-4);
        let frozen = group_rates(&cfg, 0, true).unwrap();
        assert!(!frozen.contains_key(&Group::Trunk));
        assert_eq!(frozen.len(), 2);
    }

    #[test]
    fn groups_partition_parameters() {
        let model = SANet::<f32>::new(SANetConfig::default(), 1).unwrap();
        let groups = param_groups(&model.params, 0.05);
        let mut names: Vec<&String> = groups.iter().flat_map(|g| &g.names).collect();
        assert_eq!(names.len(), model.params.len());
        names.sort();
        names.dedup();
        assert_eq!(names.len(), model.params.len());
        for g in &groups {
            let prefix = match g.group {
                Group::Trunk => "trunk.",
                Group::Stn => "stn.",
                Group::Head => "",
            };
            assert!(g.names.iter().all(|n| n.starts_with(prefix)));
            assert_eq!(g.lr_multiplier, if g.group == Group::Stn { 0.05 } else { 1.0 });
        }
        let baseline = SANet::<f32>::new(SANetConfig { stn_enabled: false, ..SANetConfig::default() }, 1).unwrap();
        assert!(param_groups(&baseline.params, 0.05).iter().all(|g| g.group != Group::Stn));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut params = ParamStore::new();
        params.insert("a", Group::Head, Tensor::new([3], vec![1.0f32, 2.0, 3.0]).unwrap()).unwrap();
        params.insert("b", Group::Trunk, Tensor::new([1], vec![5.0f32]).unwrap()).unwrap();
        let mut state = AdamState::new(&params);
        let grads: BTreeMap<String, Tensor<f32>> = [
            ("a".to_string(), Tensor::new([3], vec![0.5f32, -2.0, 0.0]).unwrap()),
            ("b".to_string(), Tensor::new([1], vec![0.0f32]).unwrap()),
        ]
        .into();
        let lr: BTreeMap<Group, f64> = [(Group::Head, 0.1), (Group::Trunk, 0.1)].into();
        adam_step(&mut params, &grads, &mut state, &lr).unwrap();
        let a = params.get("a").unwrap().value.data().to_vec();
        assert!((a[0] - 0.9).abs() < 1e-6);
        assert!((a[1] - 2.1).abs() < 1e-6);
        assert_eq!(a[2], 3.0);
        assert_eq!(params.get("b").unwrap().value.data(), [5.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn frozen_group_keeps_values_and_moments() {
        let mut params = ParamStore::new();
        params.insert("t", Group::Trunk, Tensor::new([2], vec![1.0f32, 1.0]).unwrap()).unwrap();
        params.insert("h", Group::Head, Tensor::new([2], vec![1.0f32, 1.0]).unwrap()).unwrap();
        let mut state = AdamState::new(&params);
        let grads: BTreeMap<String, Tensor<f32>> = [
            ("t".to_string(), Tensor::new([2], vec![1.0f32, 1.0]).unwrap()),
            ("h".to_string(), Tensor::new([2], vec![1.0f32, 1.0]).unwrap()),
        ]
        .into();
        let lr: BTreeMap<Group, f64> = [(Group::Head, 0.1)].into();
        for _ in 0..3 {
            adam_step(&mut params, &grads, &mut state, &lr).unwrap();
        }
        assert_eq!(params.get("t").unwrap().value.data(), [1.0, 1.0]);
        assert_eq!(state.first["t"], [0.0, 0.0]);
        assert!(params.get("h").unwrap().value.data()[0] < 0.8);
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let mut params = ParamStore::new();
        params.insert("a", Group::Head, Tensor::new([1], vec![1.0f32]).unwrap()).unwrap();
        let mut state = AdamState::new(&params);
        let lr: BTreeMap<Group, f64> = [(Group::Head, 0.1)].into();
        let nan: BTreeMap<String, Tensor<f32>> = [("a".to_string(), Tensor::new([1], vec![f32::NAN]).unwrap())].into();
        assert!(matches!(adam_step(&mut params, &nan, &mut state, &lr), Err(Error::NonFinite(_))));
        assert_eq!(params.get("a").unwrap().value.data(), [1.0]);
        assert!(adam_step(&mut params, &BTreeMap::new(), &mut state, &lr).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { stn_lr_multiplier: 1.5, ..TrainConfig::default() },
            TrainConfig { k: 1, ..TrainConfig::default() },
            TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
        ];
        assert!(bad.iter().all(|c| c.validate().is_err()));
        let parsed: TrainConfig = serde_json::from_str(r#"{"P": 4, "K": 2}"#).unwrap();
        assert_eq!((parsed.p, parsed.k), (4, 2));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn smoke_training_reduces_loss() {
        let (ds, cfg) = tiny_setup(200);
        let dir = tempfile::tempdir().unwrap();
        let mut model = SANet::new(cfg.model.clone(), cfg.seed).unwrap();
        let report = fit(&mut model, &ds, &cfg, dir.path()).unwrap();
        assert_eq!(report.steps, 200);
        let log = read_log(&dir.path().join("train_log.jsonl"));
        assert_eq!(log.len(), 200);
        assert_eq!(report.first.total, log[0].total);
        assert!(report.last.total <= 0.8 * report.first.total, "loss {} -> {}", report.first.total, report.last.total);
        for l in &log {
            assert!((l.losses.values().sum::<f64>() - l.total).abs() < 1e-4);
        }
        assert_eq!(load_checkpoint_model(dir.path()), model);
        let timing = fs::read_to_string(dir.path().join("train_timing.jsonl")).unwrap();
        assert_eq!(timing.lines().count(), 200);
    }

    fn load_checkpoint_model(dir: &Path) -> SANet {
        crate::checkpoint::load_checkpoint(&dir.join("model.json")).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, cfg) = tiny_setup(6);
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut model = SANet::new(cfg.model.clone(), cfg.seed).unwrap();
            fit(&mut model, &ds, &cfg, dir.path()).unwrap();
            crate::checkpoint::checkpoint_hash(&dir.path().join("model.json")).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn freeze_leaves_trunk_untouched() {
        let (ds, mut cfg) = tiny_setup(4);
        cfg.epochs = 2;
        cfg.warmup_freeze_epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        let init = SANet::new(cfg.model.clone(), cfg.seed).unwrap();
        let mut model = init.clone();
        let mut one = TrainConfig { epochs: 1, ..cfg.clone() };
        one.warmup_freeze_epochs = 1;
        fit(&mut model, &ds, &one, dir.path()).unwrap();
        for p in model.params.iter() {
            let before = &init.params.get(&p.name).unwrap().value;
            if p.group == Group::Trunk {
                assert_eq!(&p.value, before, "{}", p.name);
            } else if p.name.ends_with(".weight") {
                assert_ne!(&p.value, before, "{}", p.name);
            }
        }
        let log = read_log(&dir.path().join("train_log.jsonl"));
        assert!(log.iter().all(|l| !l.lr.contains_key("trunk")));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (ds, cfg) = tiny_setup(3);
        let mut model = SANet::new(cfg.model.clone(), cfg.seed).unwrap();
        model.params.get_mut("cls.global.weight").unwrap().value.data_mut()[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(fit(&mut model, &ds, &cfg, dir.path()), Err(Error::NonFinite(_))));
    }
}
