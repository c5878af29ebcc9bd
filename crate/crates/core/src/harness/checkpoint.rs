//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! "MSPK" u32:version [u8;32]:config_hash
//! u32:len json{model config, tasks}
//! f64:lambda_raw f64:beta
//! u8:has_rng [ [u8;32]:seed u64:stream u128:word_pos ]
//! u32:n_params { str:id u8:ndim u64*ndim:dims f64*numel:data }
//! u32:n_masks  { str:id u64:len u8*ceil(len/8):bits }
//! u32:n_points { u64:epoch f64:parameter_sparsity f64:group_sparsity }
//! ```
//!
//! Strings are a u16 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, MultiTaskModel, ParamKey, TaskId, TaskKind};
use crate::sparsity::{MaskSet, ProfilePoint};

pub const MAGIC: &[u8; 4] = b"MSPK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tasks: Vec<(TaskId, TaskKind)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub model_config: ModelConfig,
    pub tasks: Vec<(TaskId, TaskKind)>,
    pub params: BTreeMap<String, Tensor>,
    pub masks: MaskSet,
    pub lambda_raw: f64,
    pub beta: f64,
    pub rng: Option<RngState>,
    pub profile: Vec<ProfilePoint>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &MultiTaskModel, config_hash: &str) -> Result<Self> {
        let mut hash = [0u8; 32];
        if !config_hash.is_empty() {
            let bytes = hex::decode(config_hash).map_err(|e| ck_err(format!("config hash: {e}")))?;
            if bytes.len() != 32 {
                return Err(ck_err(format!("config hash must be 32 bytes, got {}", bytes.len())));
            }
            hash.copy_from_slice(&bytes);
        }
        Ok(Self {
            config_hash: hash,
            model_config: model.config().clone(),
            tasks: model.tasks().iter().map(|(&t, &k)| (t, k)).collect(),
            params: model.params().iter().map(|(k, t)| (k.to_string(), t.clone())).collect(),
            masks: MaskSet::new(),
            lambda_raw: 0.0,
            beta: 1.0,
            rng: None,
            profile: Vec::new(),
        })
    }

    pub fn config_hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }

    /// Rebuilds the model with the stored parameters.
    pub fn to_model(&self) -> Result<MultiTaskModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MultiTaskModel::new(self.model_config.clone(), &self.tasks, &mut rng)?;
        if model.params().len() != self.params.len() {
            return Err(ck_err(format!("checkpoint holds {} tensors, the model has {}", self.params.len(), model.params().len())));
        }
        for (id, t) in &self.params {
            let key: ParamKey = id.parse()?;
            if model.param(key)?.shape() != t.shape() {
                return Err(ck_err(format!("{id}: stored shape {:?}, model shape {:?}", t.shape(), model.param(key)?.shape())));
            }
            model.set_param(key, t.data().to_vec())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_all(&self.config_hash)?;
        let header = serde_json::to_vec(&Header {
            model: self.model_config.clone(),
            tasks: self.tasks.clone(),
        })?;
        w.write_u32::<LE>(header.len() as u32)?;
        w.write_all(&header)?;
        w.write_f64::<LE>(self.lambda_raw)?;
        w.write_f64::<LE>(self.beta)?;
        match &self.rng {
            None => w.write_u8(0)?,
            Some(s) => {
                w.write_u8(1)?;
                w.write_all(&s.seed)?;
                w.write_u64::<LE>(s.stream)?;
                w.write_u128::<LE>(s.word_pos)?;
            }
        }
        w.write_u32::<LE>(self.params.len() as u32)?;
        for (id, t) in &self.params {
            write_str(&mut w, id)?;
            w.write_u8(t.shape().len() as u8)?;
            for &d in t.shape() {
                w.write_u64::<LE>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LE>(v)?;
            }
        }
        w.write_u32::<LE>(self.masks.len() as u32)?;
        for (id, bits) in &self.masks {
            write_str(&mut w, id)?;
            w.write_u64::<LE>(bits.len() as u64)?;
            let mut packed = vec![0u8; bits.len().div_ceil(8)];
            for (i, &b) in bits.iter().enumerate() {
                if b {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&packed)?;
        }
        w.write_u32::<LE>(self.profile.len() as u32)?;
        for p in &self.profile {
            w.write_u64::<LE>(p.epoch as u64)?;
            w.write_f64::<LE>(p.parameter_sparsity_percent)?;
            w.write_f64::<LE>(p.group_sparsity_percent)?;
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| ck_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(ck_err("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(ck_err(format!("unsupported checkpoint version {version}")));
        }
        let parsed = read_body(&mut r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => ck_err("truncated checkpoint"),
            other => other,
        })?;
        if !r.is_empty() {
            return Err(ck_err(format!("{} trailing bytes", r.len())));
        }
        Ok(parsed)
    }

    /// Writes to `path`, refusing to replace an existing file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::ArtifactExists(path.display().to_string())
            } else {
                e.into()
            }
        })?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ck_err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_body(r: &mut &[u8]) -> Result<Checkpoint> {
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash)?;
    let n = r.read_u32::<LE>()? as usize;
    let header: Header = serde_json::from_slice(take(r, n)?)?;
    let lambda_raw = r.read_f64::<LE>()?;
    let beta = r.read_f64::<LE>()?;
    let rng = match r.read_u8()? {
        0 => None,
        1 => {
            let mut seed = [0u8; 32];
            r.read_exact(&mut seed)?;
            Some(RngState {
                seed,
                stream: r.read_u64::<LE>()?,
                word_pos: r.read_u128::<LE>()?,
            })
        }
        f => return Err(ck_err(format!("bad rng flag {f}"))),
    };
    let mut params = BTreeMap::new();
    for _ in 0..r.read_u32::<LE>()? {
        let id = read_str(r)?;
        let ndim = r.read_u8()? as usize;
        let shape = (0..ndim).map(|_| r.read_u64::<LE>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel * 8 > r.len() {
            return Err(ck_err(format!("{id}: shape {shape:?} exceeds the remaining data")));
        }
        let data = (0..numel).map(|_| r.read_f64::<LE>()).collect::<std::io::Result<Vec<_>>>()?;
        params.insert(id, Tensor::new(shape, data)?);
    }
    let mut masks = MaskSet::new();
    for _ in 0..r.read_u32::<LE>()? {
        let id = read_str(r)?;
        let len = r.read_u64::<LE>()? as usize;
        let packed = take(r, len.div_ceil(8))?;
        masks.insert(id, (0..len).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect());
    }
    let mut profile = Vec::new();
    for _ in 0..r.read_u32::<LE>()? {
        profile.push(ProfilePoint {
            epoch: r.read_u64::<LE>()? as usize,
            parameter_sparsity_percent: r.read_f64::<LE>()?,
            group_sparsity_percent: r.read_f64::<LE>()?,
        });
    }
    Ok(Checkpoint {
        config_hash,
        model_config: header.model,
        tasks: header.tasks,
        params,
        masks,
        lambda_raw,
        beta,
        rng,
        profile,
    })
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(ck_err("truncated checkpoint"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn write_str(w: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| ck_err(format!("id too long: {s}")))?;
    w.write_u16::<LE>(len)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let n = r.read_u16::<LE>()? as usize;
    String::from_utf8(take(r, n)?.to_vec()).map_err(|e| ck_err(format!("id is not utf-8: {e}")))
}
