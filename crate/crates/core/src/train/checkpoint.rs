//! Training state on disk: parameters, Adagrad accumulators, step counters
//! and the exact position of the run's random stream.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data::container::{Container, ContainerWriter};
use crate::data::{io_err, DataError, Result};
use crate::nn::ParamStore;
use crate::seed::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`; JSON numbers cannot hold it.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bad = |what: &str| DataError::Invalid(format!("bad rng {what} in checkpoint"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("position"))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    step: u64,
    skips: u64,
    examples: u64,
    rng: RngState,
    params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub skips: u64,
    pub examples: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub accum: Vec<Tensor>,
}

impl Checkpoint {
    /// Writes to a sibling temporary directory and renames it into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .ok_or_else(|| DataError::Invalid(format!("bad checkpoint path {}", dir.display())))?;
        let tmp = dir.with_file_name(format!(".{}.partial", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        let mut w = ContainerWriter::create(&tmp)?;
        for ((pname, t), acc) in self.params.iter().zip(&self.accum) {
            w.add_tensor(&format!("param.{pname}"), t)?;
            w.add_tensor(&format!("adagrad.{pname}"), acc)?;
        }
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            skips: self.skips,
            examples: self.examples,
            rng: self.rng.clone(),
            params: self.params.iter().map(|(n, _)| n.to_string()).collect(),
        };
        w.finish("checkpoint", serde_json::to_value(meta).expect("meta serializes"))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::rename(&tmp, dir).map_err(io_err(dir))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::open(dir)?;
        if c.manifest.kind != "checkpoint" {
            return Err(DataError::Invalid(format!(
                "{} holds a {}, not a checkpoint",
                dir.display(),
                c.manifest.kind
            )));
        }
        let meta: Meta = serde_json::from_value(c.manifest.meta.clone())
            .map_err(|e| DataError::Invalid(format!("{}: {e}", dir.display())))?;
        let mut params = ParamStore::new();
        let mut accum = Vec::with_capacity(meta.params.len());
        for name in &meta.params {
            params.insert(name.clone(), c.tensor(&format!("param.{name}"))?);
            accum.push(c.tensor(&format!("adagrad.{name}"))?);
        }
        Ok(Self {
            config: meta.config,
            step: meta.step,
            skips: meta.skips,
            examples: meta.examples,
            rng: meta.rng,
            params,
            accum,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn rng_state_resumes_mid_stream() {
        let mut a = crate::seed::rng(5);
        for _ in 0..17 {
            a.next_u32();
        }
        let mut b = RngState::capture(&a).restore().unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
