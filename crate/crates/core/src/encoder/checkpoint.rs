//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"PYRMCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     header length H, u32 little-endian
//! 16      H     UTF-8 JSON header: {"config", "stages", "dtype", "tensors": [{"name", "group", "rows", "cols", "frozen"}]}
//! 16+H    ...   tensor values in header order, row-major, f64 little-endian
//! ```
//!
//! Values are always stored as `f64`; loading into `f32` rounds.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::config::ModelConfig;
use crate::encoder::model::{Model, Stage};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamGroup, ParameterSet};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"PYRMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stages: Vec<Stage>,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Model<T>, mut out: W) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        stages: model.stages.clone(),
        dtype: "f64".into(),
        tensors: model
            .params
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                group: p.group,
                rows: p.value.rows(),
                cols: p.value.cols(),
                frozen: p.frozen,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(model.params.element_count() * 8);
    for (_, p) in model.params.iter() {
        for &v in p.value.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<Model<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    input.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.dtype != "f64" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let mut params = ParameterSet::new();
    let mut cell = [0u8; 8];
    for t in header.tensors {
        let mut data = Vec::with_capacity(t.rows * t.cols);
        for _ in 0..t.rows * t.cols {
            input.read_exact(&mut cell)?;
            data.push(T::lit(f64::from_le_bytes(cell)));
        }
        let id = params.insert(t.name, t.group, Matrix::from_vec(t.rows, t.cols, data)?)?;
        params.set_frozen(id, t.frozen);
    }
    if input.read(&mut cell)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Model::from_parts(header.config, params, header.stages)
}

pub fn save<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut m = Model::<f64>::new(ModelConfig::new(2, 8, 2, 16, 3, 20, 12), 5).unwrap();
        m.stages = vec![Stage::Regular, Stage::Soft];
        m.set_deltas(&[0.01, 0.02]);
        let id = m.ids.head.proj_w;
        m.params.set_frozen(id, true);
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let back: Model<f64> = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        assert_eq!(back.stages, m.stages);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_corruption() {
        let m = Model::<f64>::new(ModelConfig::new(2, 8, 2, 16, 3, 20, 12), 5).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f64, _>(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint::<f64, _>(bad.as_slice()), Err(Error::Format(_))));
        assert!(read_checkpoint::<f64, _>(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(matches!(read_checkpoint::<f64, _>(long.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn loads_into_f32() {
        let m = Model::<f64>::new(ModelConfig::new(2, 8, 2, 16, 3, 20, 12), 5).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let small: Model<f32> = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(small.params.len(), m.params.len());
    }
}
