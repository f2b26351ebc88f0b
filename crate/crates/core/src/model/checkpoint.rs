//! Checkpoint file: a text header of `meta` and `tensor` lines, a `data`
//! line, then every tensor as little-endian f64.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{ParamRegistry, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "immcast checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamRegistry,
}

pub fn save_checkpoint(path: &Path, meta: &BTreeMap<String, String>, params: &ParamRegistry) -> Result<()> {
    let mut header = String::new();
    let _ = writeln!(header, "{MAGIC}");
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("meta entry {k} cannot be stored")));
        }
        let _ = writeln!(header, "meta {k}={v}");
    }
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(header, "tensor {name} {} {offset}", dims.join(","));
        offset += 8 * t.len();
    }
    let _ = writeln!(header, "data");
    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, t) in params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        *pos += end + 1;
        Ok(line.to_string())
    };
    if next_line(&mut pos)? != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    loop {
        let line = next_line(&mut pos)?;
        if line == "data" {
            break;
        }
        if let Some(kv) = line.strip_prefix("meta ") {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad meta line {line}")))?;
            meta.insert(k.to_string(), v.to_string());
        } else if let Some(t) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = t.split(' ').collect();
            let [name, dims, offset] = parts[..] else {
                return Err(bad(format!("bad tensor line {line}")));
            };
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape in {line}")))?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in {line}")))?;
            entries.push((name.to_string(), shape, offset));
        } else {
            return Err(bad(format!("unrecognized header line {line}")));
        }
    }
    let data = &bytes[pos..];
    let mut params = ParamRegistry::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let chunk = data
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(format!("tensor {name} runs past end of file")))?;
        let values = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.register(name, Tensor::new(shape, values)?)?;
    }
    Ok(Checkpoint { meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig { d: 8, heads: 2, d_k: 4, d_v: 4, ff: 8, t_enc: 6, t_pred: 2, d_t: 5, ..Default::default() };
        let mut model = Model::new(cfg.clone(), 3).unwrap();
        // Awkward values survive too.
        let id = model.params().get("head.b").unwrap();
        model.params_mut().tensor_mut(id).data_mut().copy_from_slice(&[f64::MIN_POSITIVE, -0.0]);
        let mut meta: BTreeMap<String, String> = cfg.to_meta().into_iter().collect();
        meta.insert("norm.mean".into(), "0.1".into());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &meta, model.params()).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta);
        for ((na, a), (nb, b)) in model.params().iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let reloaded = Model::from_params(ModelConfig::from_meta(&back.meta).unwrap(), back.params).unwrap();
        assert_eq!(reloaded.params(), model.params());

        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &meta, reloaded.params()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, "hello\n").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        std::fs::write(&p, format!("{MAGIC}\ntensor a 2,2 0\ndata\n\0\0\0\0")).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
