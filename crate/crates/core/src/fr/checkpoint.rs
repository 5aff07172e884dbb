//! Embedder checkpoints: flat little-endian parameter blob plus a JSON
//! metadata sidecar. The blob starts with a magic header so stale or foreign
//! files are rejected before any parameter is read.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fr::net::{ArchitectureId, ConvNet};
use crate::fr::{FRModel, LossId};

const MAGIC: &[u8; 8] = b"UVCKFR\x01\x00";

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model_id: String,
    pub architecture_id: ArchitectureId,
    pub loss_id: LossId,
    pub feature_dim: usize,
    pub input_size: usize,
    pub channels: usize,
    pub training_seed: u64,
    pub accuracy: f64,
    pub param_count: usize,
}

/// Write `<stem>.bin` and `<stem>.json` under `dir`.
pub fn save(model: &FRModel, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let flat = model.net.to_flat();

    let mut blob = Vec::with_capacity(8 + 8 + flat.len() * 8);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in &flat {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(dir.join(format!("{stem}.bin")))?;
    f.write_all(&blob)?;

    let meta = CheckpointMeta {
        format_version: 1,
        model_id: model.model_id(),
        architecture_id: model.net.arch,
        loss_id: model.loss_id,
        feature_dim: model.net.feature_dim,
        input_size: model.net.input_size,
        channels: model.net.channels,
        training_seed: model.training_seed,
        accuracy: model.accuracy,
        param_count: flat.len(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| CoreError::Format(format!("meta encode: {e}")))?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

/// Load a checkpoint written by [`save`].
pub fn load(dir: &Path, stem: &str) -> Result<FRModel> {
    let meta: CheckpointMeta = serde_json::from_str(
        &std::fs::read_to_string(dir.join(format!("{stem}.json")))?,
    )
    .map_err(|e| CoreError::Format(format!("meta decode: {e}")))?;
    if meta.format_version != 1 {
        return Err(CoreError::Format(format!(
            "unsupported checkpoint format version {}",
            meta.format_version
        )));
    }

    let mut f = std::fs::File::open(dir.join(format!("{stem}.bin")))?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    if blob.len() < 16 || &blob[..8] != MAGIC {
        return Err(CoreError::Format("bad checkpoint magic".into()));
    }
    let count = u64::from_le_bytes(blob[8..16].try_into().unwrap()) as usize;
    if count != meta.param_count || blob.len() != 16 + count * 8 {
        return Err(CoreError::Format(format!(
            "checkpoint blob holds {} params, sidecar says {}",
            (blob.len().saturating_sub(16)) / 8,
            meta.param_count
        )));
    }
    let flat: Vec<f64> = blob[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = ConvNet::init(
        meta.architecture_id,
        meta.input_size,
        meta.channels,
        meta.feature_dim,
        &mut rng,
    );
    net.from_flat(&flat).map_err(CoreError::Format)?;
    Ok(FRModel {
        net,
        loss_id: meta.loss_id,
        training_seed: meta.training_seed,
        accuracy: meta.accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = FRModel {
            net: ConvNet::init(ArchitectureId::Conv4, 16, 3, 8, &mut rng),
            loss_id: LossId::ArcMargin,
            training_seed: 21,
            accuracy: 0.93,
        };
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path(), "m0").unwrap();
        let loaded = load(dir.path(), "m0").unwrap();
        assert_eq!(loaded.net.to_flat(), model.net.to_flat());
        assert_eq!(loaded.model_id(), model.model_id());

        let img = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0..1.0));
        assert_eq!(
            loaded.embed(&img).unwrap().values(),
            model.embed(&img).unwrap().values()
        );
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = FRModel {
            net: ConvNet::init(ArchitectureId::Conv3, 16, 3, 8, &mut rng),
            loss_id: LossId::Softmax,
            training_seed: 22,
            accuracy: 0.9,
        };
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path(), "m1").unwrap();
        let bin = dir.path().join("m1.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(load(dir.path(), "m1"), Err(CoreError::Format(_))));
    }
}
