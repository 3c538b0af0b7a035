//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DLYFEED1"                      8-byte magic
//! u32 len, len bytes              regressor config as JSON
//! u32 count                       number of arrays that follow
//! count x (u64 len, len x f32)    parameters in declaration order, then
//!                                 the AdaGrad accumulators in the same order
//! ```
//!
//! Values are narrowed to 32-bit floats on write.

use std::io::{Read, Write};

use super::{PoissonRegressor, RegressorConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DLYFEED1";

impl PoissonRegressor {
    pub fn save_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        let config = serde_json::to_vec(&self.config)?;
        out.write_all(&(config.len() as u32).to_le_bytes())?;
        out.write_all(&config)?;
        let params = self.parameter_blocks();
        let accs = self.accumulator_blocks();
        out.write_all(&((params.len() + accs.len()) as u32).to_le_bytes())?;
        for (_, block) in params.iter().chain(&accs) {
            out.write_all(&(block.len() as u64).to_le_bytes())?;
            for v in block.iter() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let len = read_u32(&mut input)? as usize;
        let mut config = vec![0u8; len];
        input.read_exact(&mut config)?;
        let config: RegressorConfig = serde_json::from_slice(&config)?;
        let mut model = PoissonRegressor::new(config)?;

        let count = read_u32(&mut input)? as usize;
        let n_params = model.parameter_blocks().len();
        if count != 2 * n_params {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {count}",
                2 * n_params
            )));
        }
        for block in model.parameter_blocks_mut().into_iter().map(|(_, b)| b) {
            read_block(&mut input, block)?;
        }
        for block in model.accumulator_blocks_mut() {
            read_block(&mut input, block)?;
        }
        Ok(model)
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_block<R: Read>(input: &mut R, block: &mut [f64]) -> Result<()> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    let len = u64::from_le_bytes(b) as usize;
    if len != block.len() {
        return Err(Error::Checkpoint(format!(
            "array length {len} does not match expected {}",
            block.len()
        )));
    }
    let mut f = [0u8; 4];
    for v in block.iter_mut() {
        input.read_exact(&mut f)?;
        *v = f64::from(f32::from_le_bytes(f));
    }
    Ok(())
}
