//! Trained MBR on disk: the two networks in the `MBRv1` text format plus a
//! JSON sidecar with the configuration that produced them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MbrModel, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{read_networks, write_networks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub training: TrainConfig,
    pub epochs_completed: usize,
}

/// Default file name for a model over `n` owners and `m` sub-bids.
pub fn checkpoint_name(n: usize, m: usize) -> String {
    format!("mbr_n{n}_m{m}.mbr")
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

pub fn save_checkpoint(path: &Path, model: &MbrModel, meta: &CheckpointMeta) -> Result<()> {
    if meta.training.model != *model.config() {
        return Err(Error::Config("checkpoint metadata does not describe this model".into()));
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write_networks(&mut w, &[("allocation", model.allocation()), ("payment", model.payment())])?;
    w.flush().map_err(|e| io_err(path, e))?;

    let side = sidecar(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&side, json).map_err(|e| io_err(&side, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MbrModel, CheckpointMeta)> {
    let side = sidecar(path);
    let text = std::fs::read_to_string(&side).map_err(|e| io_err(&side, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;

    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut nets = read_networks(BufReader::new(file))?;
    if nets.len() != 2 || nets[0].0 != "allocation" || nets[1].0 != "payment" {
        return Err(Error::Format(format!(
            "{}: expected `allocation` and `payment` networks",
            path.display()
        )));
    }
    let (_, payment) = nets.pop().expect("two networks");
    let (_, allocation) = nets.pop().expect("two networks");
    let model = MbrModel::from_networks(meta.training.model.clone(), allocation, payment)?;
    Ok((model, meta))
}
