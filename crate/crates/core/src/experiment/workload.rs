use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::mix64;
use crate::generator::sim::{Calibration, SimGenerator, SimWorld};
use crate::generator::Prompt;

/// Recipe for a synthetic prompt set.
///
/// "Saturated" prompts have a tiny reward spread and a greedy response near
/// the top of it: resampling cannot help. "Improvable" prompts have a wide
/// spread and a greedy response drawn around the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    pub n_prompts: usize,
    pub seed: u64,
    pub saturated_fraction: f64,
    pub epsilon: f64,
    pub full_length: u32,
    pub length_sigma: f64,
    /// Mid-generation noise scale, as a multiple of each prompt's sigma.
    pub mid_noise_scale: f64,
    pub calibration: Calibration,
    pub saturated_mu: (f64, f64),
    pub saturated_sigma: (f64, f64),
    /// Greedy reward of a saturated prompt, in sigmas above its mean.
    pub saturated_greedy_z: f64,
    pub improvable_mu: (f64, f64),
    pub improvable_sigma: (f64, f64),
    /// Mean and spread (in sigmas) of an improvable prompt's greedy reward.
    pub improvable_greedy_z: (f64, f64),
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            n_prompts: 1000,
            seed: 0,
            saturated_fraction: 0.4,
            epsilon: 0.01,
            full_length: 454,
            length_sigma: 0.0,
            mid_noise_scale: 1.5,
            calibration: Calibration::Noisy { logit_std: 0.3 },
            saturated_mu: (0.10, 0.18),
            saturated_sigma: (0.002, 0.005),
            saturated_greedy_z: 2.0,
            improvable_mu: (0.06, 0.16),
            improvable_sigma: (0.01, 0.03),
            improvable_greedy_z: (0.5, 0.75),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Workload {
    pub config: WorkloadConfig,
    pub worlds: Vec<SimWorld>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 {
            return Err(Error::Config("workload needs at least one prompt".into()));
        }
        if !(0.0..=1.0).contains(&self.saturated_fraction) {
            return Err(Error::Config(
                "saturated_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.full_length == 0 {
            return Err(Error::Config("full_length must be >= 1".into()));
        }
        if self.saturated_sigma.0 <= 0.0 || self.improvable_sigma.0 <= 0.0 {
            return Err(Error::Config("sigma ranges must be positive".into()));
        }
        Ok(())
    }

    /// Builds the prompt set. Prompt `i` draws from its own stream, so the
    /// first `k` prompts do not change when `n_prompts` grows.
    pub fn build(&self) -> Result<Workload> {
        self.validate()?;
        let worlds = (0..self.n_prompts)
            .map(|i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix64(mix64(self.seed ^ 0x574F_524B) ^ i as u64));
                let saturated = rng.random_bool(self.saturated_fraction);
                let (mu, sigma, greedy) = if saturated {
                    let mu = uniform(&mut rng, self.saturated_mu);
                    let sigma = uniform(&mut rng, self.saturated_sigma);
                    (mu, sigma, mu + self.saturated_greedy_z * sigma)
                } else {
                    let mu = uniform(&mut rng, self.improvable_mu);
                    let sigma = uniform(&mut rng, self.improvable_sigma);
                    let z: f64 = rng.sample(StandardNormal);
                    let (m, s) = self.improvable_greedy_z;
                    (mu, sigma, mu + (m + s * z) * sigma)
                };
                SimWorld {
                    mu,
                    sigma,
                    greedy_reward: greedy,
                    full_length: self.full_length,
                    length_sigma: self.length_sigma,
                    epsilon: self.epsilon,
                    mid_noise_sigma0: self.mid_noise_scale * sigma,
                    calibration: self.calibration,
                }
            })
            .collect();
        Ok(Workload {
            config: self.clone(),
            worlds,
        })
    }
}

impl Workload {
    pub fn generator(&self) -> Result<SimGenerator> {
        Ok(SimGenerator::new(self.worlds.clone())?)
    }

    pub fn prompts(&self) -> Vec<Prompt> {
        (0..self.worlds.len())
            .map(|i| Prompt::new(i as u64, format!("sim-prompt-{i}")))
            .collect()
    }
}
