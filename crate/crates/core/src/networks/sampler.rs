use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::EmbedderConfig;
use super::network::NetworkInstance;
use crate::error::{Error, Result};
use crate::format::Container;

/// Half-open accuracy interval `[lo, hi)` in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBucket {
    pub lo: f64,
    pub hi: f64,
}

impl AccuracyBucket {
    pub fn contains(&self, accuracy: f64) -> bool {
        accuracy >= self.lo && accuracy < self.hi
    }

    /// Parses `"40-50"`.
    pub fn parse(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("bucket {s:?} is not of the form lo-hi")))?;
        let parse = |v: &str| {
            v.trim()
                .trim_end_matches('%')
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bucket {s:?}: {e}")))
        };
        let b = Self {
            lo: parse(lo)?,
            hi: parse(hi)?,
        };
        if b.lo >= b.hi {
            return Err(Error::Config(format!("bucket {s:?} is empty")));
        }
        Ok(b)
    }
}

/// A stored parameter set with the validation accuracy (percent) it reached.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EmbedderConfig,
    pub state: Vec<Vec<f32>>,
    pub accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: EmbedderConfig,
    accuracy: f64,
    tensor_lengths: Vec<usize>,
}

impl Checkpoint {
    pub fn from_network(net: &NetworkInstance, accuracy: f64) -> Self {
        Self {
            config: net.config().clone(),
            state: net.state(),
            accuracy,
        }
    }

    pub fn to_network(&self) -> Result<NetworkInstance> {
        let mut net = NetworkInstance::build(&self.config, 0)?;
        net.load_state(&self.state)?;
        Ok(net)
    }

    /// Stored as a rank-2 DMC1 container `[1, P]` holding every tensor back to back.
    pub fn save(&self, path: &Path) -> Result<()> {
        let values: Vec<f32> = self.state.iter().flatten().copied().collect();
        let meta = CheckpointMeta {
            config: self.config.clone(),
            accuracy: self.accuracy,
            tensor_lengths: self.state.iter().map(Vec::len).collect(),
        };
        Container::new(vec![1, values.len() as u64], vec![0], values, Vec::new())?
            .with_metadata(&meta)?
            .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let meta: CheckpointMeta = c.metadata_as()?;
        if c.dims.len() != 2 || meta.tensor_lengths.iter().sum::<usize>() != c.values.len() {
            return Err(Error::Format(format!("{}: tensor lengths do not cover the stored values", path.display())));
        }
        let mut state = Vec::with_capacity(meta.tensor_lengths.len());
        let mut at = 0;
        for len in meta.tensor_lengths {
            state.push(c.values[at..at + len].to_vec());
            at += len;
        }
        Ok(Self {
            config: meta.config,
            state,
            accuracy: meta.accuracy,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointPool {
    pub checkpoints: Vec<Checkpoint>,
}

impl CheckpointPool {
    /// Loads every `*.dmc` file of `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "dmc"))
            .collect();
        files.sort();
        let checkpoints = files.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
        Ok(Self { checkpoints })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, c) in self.checkpoints.iter().enumerate() {
            c.save(&dir.join(format!("ckpt_{i:04}.dmc")))?;
        }
        Ok(())
    }

    pub fn in_bucket(&self, bucket: Option<AccuracyBucket>) -> Vec<&Checkpoint> {
        self.checkpoints
            .iter()
            .filter(|c| bucket.is_none_or(|b| b.contains(c.accuracy)))
            .collect()
    }
}

/// The distribution `P_theta` networks are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub enum SamplerStrategy {
    /// Fresh random initialisation on every draw.
    RandomInit,
    /// Uniform over the stored checkpoints, optionally restricted to an accuracy bucket.
    CheckpointPool {
        pool: CheckpointPool,
        bucket: Option<AccuracyBucket>,
    },
}

pub fn sample_network<R: Rng + ?Sized>(
    strategy: &SamplerStrategy,
    config: &EmbedderConfig,
    rng: &mut R,
) -> Result<NetworkInstance> {
    match strategy {
        SamplerStrategy::RandomInit => NetworkInstance::build(config, rng.random()),
        SamplerStrategy::CheckpointPool { pool, bucket } => {
            let eligible = pool.in_bucket(*bucket);
            if eligible.is_empty() {
                return Err(Error::Sampler(match bucket {
                    Some(b) => format!("no checkpoint with accuracy in [{}, {})", b.lo, b.hi),
                    None => "checkpoint pool is empty".into(),
                }));
            }
            let ckpt = eligible[rng.random_range(0..eligible.len())];
            if ckpt.config != *config {
                return Err(Error::Sampler(format!(
                    "checkpoint architecture {} does not match requested {}",
                    ckpt.config, config
                )));
            }
            ckpt.to_network()
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg() -> EmbedderConfig {
        let mut c = EmbedderConfig::convnet([1, 8, 8], 4);
        c.width = 4;
        c.depth = 2;
        c
    }

    fn pool() -> CheckpointPool {
        let checkpoints = [12.0, 45.0, 47.5, 80.0]
            .iter()
            .enumerate()
            .map(|(i, &acc)| Checkpoint::from_network(&NetworkInstance::build(&cfg(), i as u64 + 10).unwrap(), acc))
            .collect();
        CheckpointPool { checkpoints }
    }

    #[test]
    fn random_init_draws_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_network(&SamplerStrategy::RandomInit, &cfg(), &mut rng).unwrap();
        let b = sample_network(&SamplerStrategy::RandomInit, &cfg(), &mut rng).unwrap();
        assert_ne!(a.state(), b.state());
    }

    #[test]
    fn single_checkpoint_always_returned() {
        let net = NetworkInstance::build(&cfg(), 3).unwrap();
        let strategy = SamplerStrategy::CheckpointPool {
            pool: CheckpointPool {
                checkpoints: vec![Checkpoint::from_network(&net, 50.0)],
            },
            bucket: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            assert_eq!(sample_network(&strategy, &cfg(), &mut rng).unwrap().state(), net.state());
        }
    }

    #[test]
    fn bucket_restricts_draws() {
        let p = pool();
        let bucket = AccuracyBucket::parse("40-50").unwrap();
        let strategy = SamplerStrategy::CheckpointPool {
            pool: p.clone(),
            bucket: Some(bucket),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let state = sample_network(&strategy, &cfg(), &mut rng).unwrap().state();
            let src = p.checkpoints.iter().find(|c| c.state == state).expect("drawn from the pool");
            assert!(bucket.contains(src.accuracy), "accuracy {}", src.accuracy);
        }
    }

    #[test]
    fn empty_pool_is_a_sampler_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = SamplerStrategy::CheckpointPool {
            pool: CheckpointPool::default(),
            bucket: None,
        };
        assert!(matches!(sample_network(&empty, &cfg(), &mut rng), Err(Error::Sampler(_))));
        let no_match = SamplerStrategy::CheckpointPool {
            pool: pool(),
            bucket: Some(AccuracyBucket { lo: 90.0, hi: 100.0 }),
        };
        assert!(matches!(sample_network(&no_match, &cfg(), &mut rng), Err(Error::Sampler(_))));
    }

    #[test]
    fn pool_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = pool();
        p.save_dir(dir.path()).unwrap();
        assert_eq!(CheckpointPool::load_dir(dir.path()).unwrap(), p);
    }

    #[test]
    fn batch_norm_buffers_survive_checkpointing() {
        let mut c = cfg();
        c.norm = super::super::arch::NormKind::Batch;
        let mut net = NetworkInstance::build(&c, 5).unwrap();
        let mut state = net.state();
        let n = state.len();
        state[n - 1] = vec![2.5; state[n - 1].len()];
        net.load_state(&state).unwrap();
        let back = Checkpoint::from_network(&net, 1.0).to_network().unwrap();
        assert_eq!(back.bn_running_stats(), net.bn_running_stats());
    }
}
