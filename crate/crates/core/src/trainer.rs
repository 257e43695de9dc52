//! Training loop, checkpoints and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::contrastive::{total_loss_var, Contrast, ContrastTargets, Extractor, ExtractorSpec, LayerWeights};
use crate::curriculum::{check_gamma, count_levels, CurriculumState, NegativeRecord, DEFAULT_GAMMA, DEFAULT_Z};
use crate::datasets::{crop_aligned, load_samples, write_atomic, DatasetManifest, LoadedSample, DEFAULT_GENERATORS};
use crate::error::{config, Error, Result};
use crate::hazephysics::{ImageTensor, MIN_SIDE};
use crate::metrics::{avg_psnr, psnr, MetricReport};
use crate::network::{Network, NetworkConfig};
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "c2p-ckpt-v1";

/// How negatives are weighted in the regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    /// Difficulty weights `1 ± γ`, hazy weight `z`.
    Curricular,
    /// Unit weights on negatives, hazy weight `z`.
    NoCurriculum,
    /// Unit weights everywhere.
    Canonical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub z: usize,
    pub crop: usize,
    pub calibration_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub grad_clip: f64,
    pub regularizer: RegularizerMode,
    pub xi: LayerWeights,
    pub network: NetworkConfig,
    pub extractor: ExtractorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 2,
            epochs: 30,
            lambda: 0.2,
            gamma: DEFAULT_GAMMA,
            z: DEFAULT_Z,
            crop: 64,
            calibration_size: 32,
            seed: 0,
            checkpoint_every: 5,
            grad_clip: 1.0,
            regularizer: RegularizerMode::Curricular,
            xi: LayerWeights::default(),
            network: NetworkConfig::default(),
            extractor: ExtractorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lr0", self.lr0)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config(format!("{name} = {v} must be positive")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config(format!("{name} = {v} must lie in [0, 1)")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("calibration_size", self.calibration_size),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return Err(config(format!("{name} must be at least 1")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config(format!("lambda = {} must be nonnegative", self.lambda)));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(config(format!("grad_clip = {} must be nonnegative (0 disables)", self.grad_clip)));
        }
        check_gamma(self.gamma)?;
        if self.z == 0 || self.z > DEFAULT_GENERATORS.len() {
            return Err(config(format!("z = {} must lie in 1..={}", self.z, DEFAULT_GENERATORS.len())));
        }
        if self.crop < MIN_SIDE {
            return Err(config(format!("crop {} is below {MIN_SIDE}", self.crop)));
        }
        self.network.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub avg_psnr: f64,
    pub mean_total_loss: f64,
    pub mean_fidelity: f64,
    pub mean_rstar: f64,
    pub n_hard: usize,
    pub n_ultrahard: usize,
    pub lr: f64,
    pub gamma: f64,
    pub z: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub next_epoch: usize,
    pub curriculum: CurriculumState,
    pub adam: Adam,
    pub params: crate::network::ParamStore,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("format {:?}, expected {CHECKPOINT_FORMAT:?}", ckpt.format)));
        }
        Ok(ckpt)
    }

    pub fn network(&self) -> Result<Network> {
        Network::from_params(self.config.network.clone(), self.params.clone())
    }
}

/// Indices of the calibration subset, fixed by the seed.
pub fn calibration_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(size.min(n));
    idx.sort_unstable();
    idx
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub struct Trainer {
    config: TrainConfig,
    network: Network,
    adam: Adam,
    curriculum: CurriculumState,
    samples: Vec<LoadedSample>,
    pools: Vec<Vec<NegativeRecord>>,
    calibration: Vec<usize>,
    extractor: Option<Extractor>,
    next_epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        config.validate()?;
        let network = Network::init(config.network.clone(), config.seed)?;
        let adam = Adam::new(network.params(), config.adam_beta1, config.adam_beta2);
        let curriculum = CurriculumState::new(config.gamma, config.z)?;
        Self::assemble(config, network, adam, curriculum, 0, manifest)
    }

    pub fn resume(ckpt: Checkpoint, manifest: &DatasetManifest) -> Result<Self> {
        let network = ckpt.network()?;
        if ckpt.curriculum.in_epoch() {
            return Err(Error::Checkpoint("checkpoint taken inside an epoch".into()));
        }
        Self::assemble(ckpt.config, network, ckpt.adam, ckpt.curriculum, ckpt.next_epoch, manifest)
    }

    fn assemble(
        config: TrainConfig,
        network: Network,
        adam: Adam,
        curriculum: CurriculumState,
        next_epoch: usize,
        manifest: &DatasetManifest,
    ) -> Result<Self> {
        config.validate()?;
        let uses_negatives = config.lambda > 0.0;
        if uses_negatives {
            manifest.require_negatives(config.z)?;
        }
        if manifest.entries.is_empty() {
            return Err(config_err("manifest has no entries"));
        }
        let samples = load_samples(manifest)?;
        if let Some(s) = samples.iter().find(|s| s.hazy.height().min(s.hazy.width()) < config.crop) {
            return Err(config_err(&format!("crop {} exceeds sample {} of size {:?}", config.crop, s.id, s.hazy.dims())));
        }
        let extractor = if uses_negatives {
            let e = Extractor::from_spec(&config.extractor)?;
            if e.taps() != config.xi.len() {
                return Err(config_err(&format!(
                    "extractor yields {} layers but xi has {} weights",
                    e.taps(),
                    config.xi.len()
                )));
            }
            Some(e)
        } else {
            None
        };
        let pools = samples.iter().map(|s| s.records.clone()).collect();
        let calibration = calibration_indices(samples.len(), config.calibration_size, config.seed);
        Ok(Trainer { config, network, adam, curriculum, samples, pools, calibration, extractor, next_epoch })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn curriculum(&self) -> &CurriculumState {
        &self.curriculum
    }

    pub fn pools(&self) -> &[Vec<NegativeRecord>] {
        &self.pools
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.config.batch_size)
    }

    /// Average full-image PSNR on the calibration subset with the current parameters.
    pub fn calibration_psnr(&self) -> Result<f64> {
        let restored = self
            .calibration
            .iter()
            .map(|&i| self.network.infer(&self.samples[i].hazy))
            .collect::<Result<Vec<_>>>()?;
        avg_psnr(restored.iter().zip(self.calibration.iter().map(|&i| &self.samples[i].clear)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            next_epoch: self.next_epoch,
            curriculum: self.curriculum.clone(),
            adam: self.adam.clone(),
            params: self.network.params().clone(),
        }
    }

    fn weights_for(&self, sample: usize) -> (Vec<f64>, f64) {
        let records = &self.pools[sample];
        match self.config.regularizer {
            RegularizerMode::Curricular => (records.iter().map(|r| r.weight).collect(), self.curriculum.easy_weight()),
            RegularizerMode::NoCurriculum => (vec![1.0; records.len()], self.curriculum.easy_weight()),
            RegularizerMode::Canonical => (vec![1.0; records.len()], 1.0),
        }
    }

    /// Measures, relabels, then takes one pass over the shuffled training set.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        if self.is_finished() {
            return Err(Error::Sequencing(format!("all {} epochs already ran", self.config.epochs)));
        }
        let epoch = self.next_epoch;
        let measured = self.calibration_psnr()?;
        self.curriculum.epoch_update(measured, &mut self.pools)?;
        let (n_hard, n_ultrahard) = count_levels(&self.pools);

        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        let per_epoch = self.batches_per_epoch();
        let total_steps = per_epoch * self.config.epochs;
        let first_lr = cosine_lr(epoch * per_epoch, total_steps, self.config.lr0);
        let (mut sum_total, mut sum_fid, mut sum_rstar) = (0.0, 0.0, 0.0);

        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            let lr = cosine_lr(step, total_steps, self.config.lr0);
            let (total, fid, rstar) = self.train_step(batch, &mut rng, lr, epoch)?;
            sum_total += total;
            sum_fid += fid;
            sum_rstar += rstar;
        }
        self.curriculum.end_epoch()?;
        self.next_epoch += 1;
        let n = per_epoch as f64;
        Ok(EpochLog {
            epoch,
            avg_psnr: measured,
            mean_total_loss: sum_total / n,
            mean_fidelity: sum_fid / n,
            mean_rstar: sum_rstar / n,
            n_hard,
            n_ultrahard,
            lr: first_lr,
            gamma: self.curriculum.gamma,
            z: self.curriculum.z,
        })
    }

    fn train_step(&mut self, batch: &[usize], rng: &mut ChaCha8Rng, lr: f64, epoch: usize) -> Result<(f64, f64, f64)> {
        let crops = batch
            .iter()
            .map(|&i| crop_aligned(&self.samples[i], self.config.crop, rng))
            .collect::<Result<Vec<_>>>()?;
        let targets = match &self.extractor {
            Some(ext) => Some(
                crops
                    .iter()
                    .map(|c| {
                        let negs: Vec<&Tensor> = c.negatives.iter().map(ImageTensor::tensor).collect();
                        ContrastTargets::compute(ext, c.clear.tensor(), c.hazy.tensor(), &negs)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let weights: Vec<(Vec<f64>, f64)> = batch.iter().map(|&i| self.weights_for(i)).collect();

        let graph = Graph::new();
        let bound = self.network.params().bind(&graph, true);
        let hazy: Vec<&Tensor> = crops.iter().map(|c| c.hazy.tensor()).collect();
        let output = self.network.forward(&bound, graph.constant(Tensor::stack_batch(&hazy)?));
        let placeholder = Extractor::from_spec(&ExtractorSpec::Identity)?;
        let extractor = self.extractor.as_ref().unwrap_or(&placeholder);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = None;
        let (mut fid, mut rstar) = (0.0, 0.0);
        for (k, crop) in crops.iter().enumerate() {
            let anchor = output.slice_batch(k, 1);
            let contrast = targets.as_ref().map(|t| Contrast {
                targets: &t[k],
                neg_weights: &weights[k].0,
                easy_weight: weights[k].1,
            });
            let parts = total_loss_var(anchor, crop.clear.tensor(), contrast, &self.config.xi, self.config.lambda, extractor)?;
            let b = parts.breakdown();
            fid += b.fidelity * scale;
            rstar += b.rstar * scale;
            let term = parts.total.scale(scale);
            loss = Some(match loss {
                Some(l) => term.add(l),
                None => term,
            });
        }
        let loss = loss.expect("nonempty batch");
        let total = loss.value().item();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                sample_ids: batch.iter().map(|&i| self.samples[i].id.clone()).collect(),
            });
        }
        let mut grads = graph.backward(loss);
        let mut grads = bound.gradients(&mut grads);
        drop(bound);
        clip_global_norm(&mut grads, self.config.grad_clip);
        self.adam.update(self.network.params_mut(), &grads, lr)?;
        Ok((total, fid, rstar))
    }
}

fn config_err(msg: &str) -> Error {
    config(msg.to_string())
}

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    /// Calibration PSNR after the last epoch.
    pub final_avg_psnr: f64,
    pub checkpoint: Checkpoint,
}

pub const LOG_NAME: &str = "logs.jsonl";
pub const CKPT_DIR: &str = "ckpt";
pub const FINAL_CKPT: &str = "final.json";

pub fn checkpoint_name(epochs_done: usize) -> String {
    format!("epoch_{epochs_done:04}.json")
}

/// Runs the remaining epochs. With `out_dir`, appends each log line to
/// `logs.jsonl` and writes `ckpt/epoch_NNNN.json` every `checkpoint_every`
/// epochs plus `ckpt/final.json`.
pub fn run(trainer: &mut Trainer, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut log_file = match out_dir {
        Some(dir) => {
            let ckpt = dir.join(CKPT_DIR);
            fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
            let path = dir.join(LOG_NAME);
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((file, path))
        }
        None => None,
    };
    let mut logs = Vec::new();
    while !trainer.is_finished() {
        let log = trainer.run_epoch()?;
        if let Some((file, path)) = log_file.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&log)?).map_err(|e| Error::io(&*path, e))?;
        }
        logs.push(log);
        let done = trainer.next_epoch();
        if let Some(dir) = out_dir {
            if done.is_multiple_of(trainer.config().checkpoint_every) {
                trainer.checkpoint().write(&dir.join(CKPT_DIR).join(checkpoint_name(done)))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        checkpoint.write(&dir.join(CKPT_DIR).join(FINAL_CKPT))?;
    }
    let final_avg_psnr = trainer.calibration_psnr()?;
    Ok(TrainOutcome { logs, final_avg_psnr, checkpoint })
}

pub fn train(config: TrainConfig, manifest: &DatasetManifest, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, manifest)?;
    run(&mut trainer, out_dir)
}

pub fn read_logs(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean PSNR of the hazy inputs themselves.
    pub hazy_psnr: f64,
}

/// Full-image PSNR and SSIM of `network` over every manifest entry.
pub fn evaluate_network(network: &Network, manifest: &DatasetManifest) -> Result<EvalReport> {
    if manifest.entries.is_empty() {
        return Err(config_err("manifest has no entries"));
    }
    let mut images = Vec::with_capacity(manifest.entries.len());
    let mut hazy_sum = 0.0;
    for entry in &manifest.entries {
        let hazy = ImageTensor::load_png(&manifest.path_of(&entry.hazy_path))?;
        let clear = ImageTensor::load_png(&manifest.path_of(&entry.clear_path))?;
        let restored = network.infer(&hazy)?;
        let m = MetricReport::measure(&restored, &clear)?;
        hazy_sum += psnr(&hazy, &clear)?;
        images.push(ImageReport { id: entry.id.clone(), psnr: m.psnr, ssim: m.ssim });
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        mean_psnr: images.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|r| r.ssim).sum::<f64>() / n,
        hazy_psnr: hazy_sum / n,
        images,
    })
}

pub fn evaluate(checkpoint: &Checkpoint, manifest: &DatasetManifest) -> Result<EvalReport> {
    evaluate_network(&checkpoint.network()?, manifest)
}

pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let dir = out_dir.join(CKPT_DIR);
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".json")))
        .collect();
    names.sort();
    names.pop()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_values() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda, c.gamma, c.z), (0.2, 0.25, 7));
        assert_eq!((c.adam_beta1, c.adam_beta2, c.batch_size), (0.9, 0.999, 2));
        assert_eq!(c.lr0, 1e-4);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig { seed: 9, lambda: 0.1, ..Default::default() };
        let text = c.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(matches!(TrainConfig::from_toml("learning_rate = 0.1"), Err(Error::Config(_))));
        let partial = TrainConfig::from_toml("epochs = 3\n[network]\nchannels = 8\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.network.channels, 8);
        assert_eq!(partial.network.groups, 1);
    }

    #[test]
    fn invalid_configs() {
        for text in ["gamma = 1.0", "z = 0", "z = 8", "lr0 = 0.0", "crop = 4", "batch_size = 0", "lambda = -0.5"] {
            assert!(TrainConfig::from_toml(text).is_err(), "{text}");
        }
        assert!(TrainConfig::from_toml("[extractor]\nkind = \"vgg\"").is_err());
    }

    #[test]
    fn calibration_subset_is_fixed() {
        assert_eq!(calibration_indices(5, 32, 1), vec![0, 1, 2, 3, 4]);
        let a = calibration_indices(100, 32, 3);
        assert_eq!(a.len(), 32);
        assert_eq!(a, calibration_indices(100, 32, 3));
    }
}
