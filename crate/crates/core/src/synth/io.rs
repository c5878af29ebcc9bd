use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitDataset, SynthConfig, TaskSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MSDS";
const VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "samples.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: SynthConfig,
    tasks: Vec<TaskSpec>,
    splits: SplitDataset,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("dataset: {}", msg.into()))
}

/// Writes `samples.bin` (one record per sample: id, channel-major input,
/// one label per task) and `manifest.json` into `dir`.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(RECORDS_FILE))?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(data.n_samples() as u64)?;
    w.write_u64::<LittleEndian>(data.sample_len() as u64)?;
    w.write_u64::<LittleEndian>(data.tasks.len() as u64)?;
    for i in 0..data.n_samples() {
        w.write_u64::<LittleEndian>(i as u64)?;
        for &v in data.input(i) {
            w.write_f64::<LittleEndian>(v)?;
        }
        for l in &data.labels {
            w.write_f64::<LittleEndian>(l[i])?;
        }
    }
    w.flush()?;
    let manifest = Manifest {
        version: VERSION,
        config: data.config.clone(),
        tasks: data.tasks.clone(),
        splits: data.splits.clone(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(MANIFEST_FILE))?), &manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    if manifest.version != VERSION {
        return Err(corrupt(format!("manifest version {} not supported", manifest.version)));
    }
    let mut r = BufReader::new(File::open(dir.join(RECORDS_FILE))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(corrupt(format!("record version {version} not supported")));
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    let len = r.read_u64::<LittleEndian>()? as usize;
    let n_tasks = r.read_u64::<LittleEndian>()? as usize;
    let c = &manifest.config;
    if n != c.n_samples || len != c.channels * c.image[0] * c.image[1] || n_tasks != manifest.tasks.len() {
        return Err(corrupt("record header disagrees with manifest"));
    }
    let mut inputs = Vec::with_capacity(n * len);
    let mut labels = vec![Vec::with_capacity(n); n_tasks];
    for i in 0..n {
        if r.read_u64::<LittleEndian>()? as usize != i {
            return Err(corrupt(format!("record {i} out of order")));
        }
        for _ in 0..len {
            inputs.push(r.read_f64::<LittleEndian>()?);
        }
        for l in labels.iter_mut() {
            l.push(r.read_f64::<LittleEndian>()?);
        }
    }
    Ok(Dataset::from_parts(manifest.config, manifest.tasks, manifest.splits, inputs, labels))
}
