//! Versioned binary checkpoints: the model config as a JSON blob followed
//! by named f64 tensors with shapes. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AnyModel, ModelConfig, ModelError, ParamSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ECGF";
const VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::CheckpointIo { path: path.to_path_buf(), source }
}

fn bad(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::BadCheckpoint { path: path.to_path_buf(), message: message.into() }
}

pub fn save_checkpoint(model: &AnyModel, path: &Path) -> Result<(), ModelError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<(), ModelError> {
        w.write_all(bytes).map_err(|e| io_err(path, e))
    };

    write(&mut w, MAGIC)?;
    write(&mut w, &VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config())
        .map_err(|e| bad(path, format!("config serialization: {e}")))?;
    write(&mut w, &(cfg.len() as u32).to_le_bytes())?;
    write(&mut w, &cfg)?;

    let params = model.params();
    write(&mut w, &(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        write(&mut w, &(name.len() as u32).to_le_bytes())?;
        write(&mut w, name.as_bytes())?;
        write(&mut w, &(tensor.dims().len() as u32).to_le_bytes())?;
        for &d in tensor.dims() {
            write(&mut w, &(d as u64).to_le_bytes())?;
        }
        for &v in tensor.values() {
            write(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel, ModelError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(bad(path, "wrong magic bytes"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }

    let cfg_len = read_u32(&mut r, path)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(|e| io_err(path, e))?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| bad(path, format!("config deserialization: {e}")))?;

    let count = read_u32(&mut r, path)? as usize;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name).map_err(|_| bad(path, "non-utf8 tensor name"))?;

        let rank = read_u32(&mut r, path)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
            dims.push(u64::from_le_bytes(buf) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
            values.push(f64::from_le_bytes(buf));
        }
        let tensor =
            Tensor::new(dims, values).map_err(|e| bad(path, format!("tensor {name}: {e}")))?;
        params.insert(name, tensor);
    }

    // rebuild at seed 0 just for the structure, then adopt the stored values
    let mut model = AnyModel::new(&config, 0)?;
    let expected: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let loaded: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    if expected != loaded {
        return Err(bad(path, "parameter names do not match the stored config"));
    }
    for ((_, dst), (_, src)) in model.params_mut().iter_mut().zip(params.iter()) {
        if dst.dims() != src.dims() {
            return Err(bad(path, "parameter shapes do not match the stored config"));
        }
        dst.values_mut().copy_from_slice(src.values());
    }
    Ok(model)
}

fn read_u32(r: &mut BufReader<File>, path: &Path) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(u32::from_le_bytes(buf))
}
