//! PPT persistence: binary texture blob plus JSON sidecar, and the
//! training-log CSV.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ppt::{TrainLogRow, TrainingMeta, PPT};

const MAGIC: &[u8; 8] = b"UVCKPT\x01\x00";

#[derive(Debug, Serialize, Deserialize)]
pub struct PptMeta {
    pub format_version: u32,
    pub user_id: u32,
    pub epsilon: f64,
    pub texture_dims: (usize, usize, usize),
    pub training_meta: TrainingMeta,
}

/// Write `<stem>.bin` and `<stem>.json` under `dir`.
pub fn save_ppt(ppt: &PPT, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (u, v, c) = ppt.texture.dim();

    let mut blob = Vec::with_capacity(8 + 24 + ppt.texture.len() * 8);
    blob.extend_from_slice(MAGIC);
    for d in [u as u64, v as u64, c as u64] {
        blob.extend_from_slice(&d.to_le_bytes());
    }
    for x in ppt.texture.iter() {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(dir.join(format!("{stem}.bin")))?;
    f.write_all(&blob)?;

    let meta = PptMeta {
        format_version: 1,
        user_id: ppt.user_id,
        epsilon: ppt.epsilon,
        texture_dims: (u, v, c),
        training_meta: ppt.training_meta.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| CoreError::Format(format!("ppt meta encode: {e}")))?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

/// Load a PPT written by [`save_ppt`].
pub fn load_ppt(dir: &Path, stem: &str) -> Result<PPT> {
    let meta: PptMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)
            .map_err(|e| CoreError::Format(format!("ppt meta decode: {e}")))?;
    if meta.format_version != 1 {
        return Err(CoreError::Format(format!(
            "unsupported ppt format version {}",
            meta.format_version
        )));
    }

    let mut f = std::fs::File::open(dir.join(format!("{stem}.bin")))?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    if blob.len() < 32 || &blob[..8] != MAGIC {
        return Err(CoreError::Format("bad ppt magic".into()));
    }
    let dims: Vec<usize> = blob[8..32]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let (u, v, c) = (dims[0], dims[1], dims[2]);
    if (u, v, c) != meta.texture_dims {
        return Err(CoreError::Format("ppt blob dims disagree with sidecar".into()));
    }
    let expected = 32 + u * v * c * 8;
    if blob.len() != expected {
        return Err(CoreError::Format(format!(
            "ppt blob is {} bytes, expected {expected}",
            blob.len()
        )));
    }
    let values: Vec<f64> = blob[32..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let texture = Array3::from_shape_vec((u, v, c), values)
        .map_err(|e| CoreError::Format(format!("ppt reshape: {e}")))?;
    Ok(PPT {
        texture,
        epsilon: meta.epsilon,
        user_id: meta.user_id,
        training_meta: meta.training_meta,
    })
}

/// Write the training log as CSV.
pub fn write_training_log(path: &Path, rows: &[TrainLogRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a training log written by [`write_training_log`].
pub fn read_training_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::Format(format!("csv: {e}"))
}
