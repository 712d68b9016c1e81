//! Checkpoint container: magic "OBFL", format version, a JSON header block,
//! then named little-endian f32 arrays with shape headers. Round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::transformer::{ModelRole, PolicyModel};
use crate::numerics::params::ParameterStore;
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OBFL";
pub const VERSION: u32 = 1;

pub fn write_container(
    path: &Path,
    header: &Value,
    tensors: impl Iterator<Item = (String, Tensor<f32>)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header_bytes = serde_json::to_vec(header)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let entries: Vec<(String, Tensor<f32>)> = tensors.collect();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in &entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(Value, Vec<(String, Tensor<f32>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| corrupt(path, &format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(corrupt(path, "bad magic bytes"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(corrupt(path, &format!("unsupported version {version}")));
    }
    let header_len = read_u32(&mut r, path)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| corrupt(path, &format!("truncated header: {e}")))?;
    let header: Value =
        serde_json::from_slice(&header_bytes).map_err(|e| corrupt(path, &format!("header json: {e}")))?;
    let n_entries = read_u32(&mut r, path)? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| corrupt(path, &format!("truncated name: {e}")))?;
        let name =
            String::from_utf8(name).map_err(|_| corrupt(path, "tensor name not utf-8"))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(|e| corrupt(path, &format!("truncated tensor data: {e}")))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((
            name,
            Tensor::from_vec(shape, data).map_err(|e| corrupt(path, &e.to_string()))?,
        ));
    }
    Ok((header, entries))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| corrupt(path, &format!("truncated u32: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn corrupt(path: &Path, msg: &str) -> Error {
    Error::CorruptArtifact(format!("{}: {msg}", path.display()))
}

pub fn save_model(path: &Path, model: &PolicyModel) -> Result<()> {
    let header = serde_json::json!({
        "kind": "model",
        "config": model.config,
        "role": model.role,
    });
    write_container(
        path,
        &header,
        model.params.names().map(|n| (n.to_string(), model.params.get(n).clone())),
    )
}

pub fn load_model(path: &Path) -> Result<PolicyModel> {
    let (header, entries) = read_container(path)?;
    if header.get("kind").and_then(Value::as_str) != Some("model") {
        return Err(corrupt(path, "not a model checkpoint"));
    }
    let config: ModelConfig = serde_json::from_value(
        header.get("config").cloned().ok_or_else(|| corrupt(path, "missing config"))?,
    )?;
    config.validate()?;
    let role: ModelRole = serde_json::from_value(
        header.get("role").cloned().ok_or_else(|| corrupt(path, "missing role"))?,
    )?;
    let mut params = ParameterStore::new();
    for (name, tensor) in entries {
        params.insert(&name, tensor);
    }
    let model = PolicyModel { config, params, role };
    // Parameter-set completeness: a missing tensor would panic deep inside a
    // forward pass; fail fast here instead.
    let expect = PolicyModel::new(model.config.clone(), &mut crate::numerics::rng::RngState::new(0))?;
    for name in expect.params.names() {
        let want = expect.params.get(name).shape();
        match model.params.try_get(name) {
            Some(t) if t.shape() == want => {}
            Some(t) => {
                return Err(corrupt(
                    path,
                    &format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), want),
                ))
            }
            None => return Err(corrupt(path, &format!("missing tensor {name}"))),
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::micro_config;
    use crate::numerics::rng::RngState;

    #[test]
    fn model_roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join(format!("obfl-ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.obfl");
        let model = PolicyModel::new(micro_config(), &mut RngState::new(12)).unwrap();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model.params.fingerprint(), loaded.params.fingerprint());
        assert_eq!(model.config, loaded.config);
        // Write again from the loaded model: files must be byte-identical.
        let path2 = dir.join("m2.obfl");
        save_model(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join(format!("obfl-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.obfl");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_model(&path), Err(Error::CorruptArtifact(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
