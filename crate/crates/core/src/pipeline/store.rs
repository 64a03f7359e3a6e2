//! Model checkpoints on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::eqnet::VelocityModel;
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint};

/// Writes the training and EMA weights with the run configuration as metadata.
pub fn save_model(path: &Path, run: &RunConfig, model: &VelocityModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &run.to_toml(), &[("params", model.params()), ("ema", model.ema())])?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(RunConfig, VelocityModel)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::from(e).at(path))?);
    let (meta, sections) = read_checkpoint(&mut r).map_err(|e| e.at(path))?;
    let run = RunConfig::parse(&meta).map_err(|e| Error::Checkpoint(format!("stored configuration: {e}")))?;
    let mut params = None;
    let mut ema = None;
    for (name, store) in sections {
        match name.as_str() {
            "params" => params = Some(store),
            "ema" => ema = Some(store),
            _ => {}
        }
    }
    let (Some(params), Some(ema)) = (params, ema) else {
        return Err(Error::Checkpoint(format!("{}: missing params or ema section", path.display())));
    };
    let mut model = VelocityModel::from_stores(run.model.clone(), params, ema)?;
    model.set_use_ema(run.sample.use_ema);
    Ok((run, model))
}
