//! Difficulty levels for consensual negatives and their per-epoch weights.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_Z: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyLevel {
    /// The hazy input itself.
    Easy,
    Hard,
    UltraHard,
}

/// A negative beats the network (ultra-hard) only when strictly better.
pub fn classify(neg_psnr: f64, net_avg_psnr: f64) -> DifficultyLevel {
    if neg_psnr > net_avg_psnr {
        DifficultyLevel::UltraHard
    } else {
        DifficultyLevel::Hard
    }
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(config(format!("gamma {gamma} must lie in (0, 1)")))
    }
}

pub fn weight_for(level: DifficultyLevel, gamma: f64, z: usize) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(match level {
        DifficultyLevel::Easy => z as f64,
        DifficultyLevel::Hard => 1.0 + gamma,
        DifficultyLevel::UltraHard => 1.0 - gamma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeRecord {
    pub image_ref: String,
    pub psnr_vs_positive: f64,
    pub generator_tag: String,
    pub difficulty: DifficultyLevel,
    pub weight: f64,
}

impl NegativeRecord {
    /// A fresh record, labelled hard until the first measurement arrives.
    pub fn new(image_ref: impl Into<String>, psnr_vs_positive: f64, generator_tag: impl Into<String>) -> Self {
        NegativeRecord {
            image_ref: image_ref.into(),
            psnr_vs_positive,
            generator_tag: generator_tag.into(),
            difficulty: DifficultyLevel::Hard,
            weight: 1.0 + DEFAULT_GAMMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub epoch: usize,
    pub avg_psnr: Option<f64>,
    pub gamma: f64,
    pub z: usize,
    in_epoch: bool,
}

impl Default for CurriculumState {
    fn default() -> Self {
        CurriculumState { epoch: 0, avg_psnr: None, gamma: DEFAULT_GAMMA, z: DEFAULT_Z, in_epoch: false }
    }
}

impl CurriculumState {
    pub fn new(gamma: f64, z: usize) -> Result<Self> {
        check_gamma(gamma)?;
        if z == 0 {
            return Err(config("z must be at least 1"));
        }
        Ok(CurriculumState { gamma, z, ..Default::default() })
    }

    pub fn in_epoch(&self) -> bool {
        self.in_epoch
    }

    /// Records a boundary measurement and relabels every negative. Opens the
    /// epoch; gradient steps may follow until [`end_epoch`](Self::end_epoch).
    pub fn epoch_update(&mut self, measured_avg_psnr: f64, pools: &mut [Vec<NegativeRecord>]) -> Result<()> {
        if self.in_epoch {
            return Err(Error::Sequencing(format!(
                "epoch_update called inside epoch {} before it ended",
                self.epoch
            )));
        }
        if !measured_avg_psnr.is_finite() {
            return Err(crate::error::invalid(format!("measured avg psnr {measured_avg_psnr} is not finite")));
        }
        check_gamma(self.gamma)?;
        for record in pools.iter_mut().flatten() {
            record.difficulty = classify(record.psnr_vs_positive, measured_avg_psnr);
            record.weight = weight_for(record.difficulty, self.gamma, self.z)?;
        }
        self.avg_psnr = Some(measured_avg_psnr);
        self.epoch += 1;
        self.in_epoch = true;
        Ok(())
    }

    pub fn end_epoch(&mut self) -> Result<()> {
        if !self.in_epoch {
            return Err(Error::Sequencing("end_epoch called with no epoch open".into()));
        }
        self.in_epoch = false;
        Ok(())
    }

    /// Weight for the hazy input: the number of non-easy negatives.
    pub fn easy_weight(&self) -> f64 {
        self.z as f64
    }
}

/// Hard and ultra-hard counts over all pools.
pub fn count_levels(pools: &[Vec<NegativeRecord>]) -> (usize, usize) {
    pools.iter().flatten().fold((0, 0), |(h, u), r| match r.difficulty {
        DifficultyLevel::Hard => (h + 1, u),
        DifficultyLevel::UltraHard => (h, u + 1),
        DifficultyLevel::Easy => (h, u),
    })
}
