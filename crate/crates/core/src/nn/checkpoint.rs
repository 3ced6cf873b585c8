//! Checkpoint container: config, parameters, optimizer state, epoch counter
//! and RNG cursor in one JSON document. Floats are written with round-trip
//! precision so a reload is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, Backbone, ProbeHead};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a keyed random stream: `(seed, tag)` plus the ChaCha word offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub tag: String,
    /// Decimal string; JSON numbers cannot carry a u128.
    pub word_pos: String,
}

impl RngCursor {
    pub fn capture(seed: u64, tag: &str, stream: &crate::rng::Stream) -> Self {
        Self {
            seed,
            tag: tag.into(),
            word_pos: stream.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<crate::rng::Stream, String> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| format!("bad word_pos {:?}", self.word_pos))?;
        let mut s = crate::rng::stream(self.seed, &self.tag);
        s.set_word_pos(pos);
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub backbone: Backbone,
    pub heads: BTreeMap<String, ProbeHead>,
    pub optimizer: Option<AdamW>,
    pub epoch: usize,
    pub rng: Option<RngCursor>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {message}")]
    Io { path: String, message: String },
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let err = |m: String| CheckpointError::Io {
            path: path.display().to_string(),
            message: m,
        };
        let text = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let err = |m: String| CheckpointError::Io {
            path: path.display().to_string(),
            message: m,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ck.version));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{AdamWConfig, BackboneConfig, Mode, NamedGrads};
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = BackboneConfig {
            depth: 2,
            width: 6,
            d_in: 3,
            seed: 11,
        };
        let mut b = Backbone::new(&cfg).unwrap();
        let head = ProbeHead::new(6, 6, 3, 11, "ck").unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.3, 0.3, -0.9]]);
        let (f, cache) = b.forward(&x, Mode::Train).unwrap();
        let (g, _) = b.backward(&cache, &f).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(b.params_mut(), &g).unwrap();
        let mut stream = crate::rng::stream(5, "train/shuffle");
        let _: u64 = stream.random();
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            backbone: b,
            heads: BTreeMap::from([("moa".to_string(), head)]),
            optimizer: Some(opt),
            epoch: 7,
            rng: Some(RngCursor::capture(5, "train/shuffle", &stream)),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.backbone.parameter_hash(), ck.backbone.parameter_hash());
        let mut resumed = back.rng.unwrap().restore().unwrap();
        assert_eq!(resumed.random::<u64>(), stream.random::<u64>());
        let _ = NamedGrads::default();
    }
}
