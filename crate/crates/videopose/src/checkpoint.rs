//! Checkpoint files: both parameter stores (values + optimizer moments),
//! the config hash, and the step counter, in a fixed little-endian layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::store::{read_record, read_u32, read_u64, write_record, ParameterStore, RecordError};
use crate::tensor::Tensor;

const MAGIC: [u8; 8] = *b"VPCKPT\0\x01";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub estimator: Vec<(String, Tensor)>,
    pub discriminator: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(
        config_hash: u64,
        step: u64,
        est_store: &ParameterStore,
        disc_store: &ParameterStore,
    ) -> Self {
        Checkpoint {
            config_hash,
            step,
            estimator: est_store.to_records(),
            discriminator: disc_store.to_records(),
        }
    }

    /// Load values and optimizer state back into freshly constructed stores.
    pub fn restore(
        &self,
        est_store: &mut ParameterStore,
        disc_store: &mut ParameterStore,
    ) -> Result<(), RecordError> {
        est_store.load_records(&self.estimator)?;
        disc_store.load_records(&self.discriminator)
    }
}

fn write_section<W: Write>(w: &mut W, records: &[(String, Tensor)]) -> Result<(), RecordError> {
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (name, t) in records {
        write_record(w, name, t)?;
    }
    Ok(())
}

fn read_section<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>, RecordError> {
    let count = read_u64(r)? as usize;
    if count > 1 << 20 {
        return Err(RecordError::Malformed(format!("record count {count}")));
    }
    (0..count).map(|_| read_record(r)).collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), RecordError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ckpt.config_hash.to_le_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    write_section(&mut w, &ckpt.estimator)?;
    write_section(&mut w, &ckpt.discriminator)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, RecordError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(RecordError::BadMagic { expected: MAGIC });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(RecordError::Version(version as u8));
    }
    let config_hash = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    let estimator = read_section(&mut r)?;
    let discriminator = read_section(&mut r)?;
    Ok(Checkpoint { config_hash, step, estimator, discriminator })
}
