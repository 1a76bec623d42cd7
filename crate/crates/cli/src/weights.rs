//! Binary weight files.
//!
//! All integers are little-endian.
//!
//! | field | type |
//! |---|---|
//! | magic | `b"FMVW"` |
//! | version | `u32` = 1 |
//! | form | `u8`: 0 training, 1 deployed |
//! | spec length, spec | `u32`, UTF-8 TOML model spec |
//! | entry count | `u32` |
//! | per entry | `u32` name length, name, `u8` dtype (0 = f32), `u8` rank, `rank × u32` dims, f32 payload |
//! | crc | `u32` CRC-32 of every byte from `form` through the last payload |
//!
//! Dims drop trailing unit axes (a bias of 64 channels has rank 1). Entries
//! appear in the model's parameter order and carry its parameter paths.

use std::collections::HashMap;

use fmvit_core::blocks::Model;
use fmvit_core::reparam::fuse_model;
use fmvit_core::tensor::Tensor;
use rand::SeedableRng;

use crate::spec_file::ModelSpecFile;
use crate::CliError;

pub const MAGIC: &[u8; 4] = b"FMVW";
pub const VERSION: u32 = 1;
const HEADER: usize = 8;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    Training,
    Deployed,
}

impl Form {
    pub fn of(model: &Model) -> Self {
        if model.is_deployed() {
            Form::Deployed
        } else {
            Form::Training
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Form::Training => "training",
            Form::Deployed => "deployed",
        }
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let spec = ModelSpecFile::from_variant(&model.spec).to_toml();
    let params = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match Form::of(model) {
        Form::Training => 0,
        Form::Deployed => 1,
    });
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, _, t) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        let dims = t.dims();
        let rank = dims.iter().rposition(|&d| d != 1).map_or(1, |i| i + 1);
        out.push(rank as u8);
        for d in &dims[..rank] {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[HEADER..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CliError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Format(format!("{what} is not UTF-8")))
    }
}

/// Raw contents of a weight file after the checksum has been validated.
pub struct WeightFile {
    pub form: Form,
    pub spec: ModelSpecFile,
    pub entries: Vec<(String, Tensor)>,
}

pub fn parse(bytes: &[u8]) -> Result<WeightFile, CliError> {
    if bytes.len() < HEADER + 4 || &bytes[..4] != MAGIC {
        return Err(CliError::Format("not a weight file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CliError::Format(format!("unsupported format version {version}")));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32fast::hash(&body[HEADER..]);
    if stored != actual {
        return Err(CliError::Format(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { buf: body, pos: HEADER };
    let form = match r.u8()? {
        0 => Form::Training,
        1 => Form::Deployed,
        t => return Err(CliError::Format(format!("unknown model form tag {t}"))),
    };
    let spec = ModelSpecFile::parse(&r.string("embedded spec")?)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("entry name")?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CliError::Format(format!("`{name}`: unsupported dtype tag {dtype}")));
        }
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(CliError::Format(format!("`{name}`: rank {rank} is outside 1..=4")));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank) {
            *d = r.u32()? as usize;
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| CliError::Format(format!("`{name}`: dims overflow")))?)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != body.len() {
        return Err(CliError::Format(format!("{} trailing bytes after the entry table", body.len() - r.pos)));
    }
    Ok(WeightFile { form, spec, entries })
}

/// Rebuilds the model a weight file describes.
///
/// The layer layout comes from the embedded spec (fused when the file holds
/// a deployed model); every parameter path must be present exactly once
/// with matching dims.
pub fn decode(bytes: &[u8]) -> Result<Model, CliError> {
    let file = parse(bytes)?;
    let spec = file.spec.to_variant()?;
    let mut model = Model::build(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    if file.form == Form::Deployed {
        model = fuse_model(&model)?.0;
    }
    let mut by_name: HashMap<&str, &Tensor> = HashMap::with_capacity(file.entries.len());
    for (name, t) in &file.entries {
        if by_name.insert(name, t).is_some() {
            return Err(CliError::Format(format!("duplicate entry `{name}`")));
        }
    }
    let mut problem = None;
    let mut used = 0;
    model.for_each_param_mut(&mut |path, _, t| {
        if problem.is_some() {
            return;
        }
        match by_name.get(path) {
            None => problem = Some(format!("missing entry `{path}`")),
            Some(src) if src.dims() != t.dims() => {
                problem = Some(format!("`{path}` has dims {:?}, the model expects {:?}", src.dims(), t.dims()))
            }
            Some(src) => {
                *t = (*src).clone();
                used += 1;
            }
        }
    });
    if let Some(p) = problem {
        return Err(CliError::Format(p));
    }
    if used != by_name.len() {
        let known: std::collections::HashSet<String> = model.named_params().into_iter().map(|(p, ..)| p).collect();
        let extra = by_name.keys().find(|k| !known.contains(**k)).unwrap();
        return Err(CliError::Format(format!("entry `{extra}` is not a parameter of this model")));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &std::path::Path) -> Result<(), CliError> {
    std::fs::write(path, encode(model)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &std::path::Path) -> Result<Model, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}
