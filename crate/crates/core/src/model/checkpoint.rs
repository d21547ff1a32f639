use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ArchSpec, CallCounters, ModelBundle, ModelError};
use crate::autodiff::{Parameter, Tensor};

const MAGIC: &[u8; 8] = b"SMPC0001";

/// Serialize all parameters with their optimizer state plus the
/// architecture descriptor; bitwise round-trip.
pub fn write_checkpoint(path: &Path, bundle: &ModelBundle) -> Result<(), ModelError> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC)?;
    w.write_all(&(bundle.params.len() as u32).to_le_bytes())?;
    for p in &bundle.params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for t in [&p.value, &p.first_moment, &p.second_moment] {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&p.step_count.to_le_bytes())?;
    }
    let desc = bundle.arch.descriptor();
    w.write_all(&(desc.len() as u32).to_le_bytes())?;
    w.write_all(desc.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Load a checkpoint, validating it against the architecture the caller
/// expects (shapes, names, and the stored descriptor string).
pub fn read_checkpoint(path: &Path, arch: ArchSpec) -> Result<ModelBundle, ModelError> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let n_params = read_u32(&mut r)? as usize;
    let expected = arch.param_shapes();
    if n_params != expected.len() {
        return Err(ModelError::Format(format!(
            "checkpoint has {n_params} parameters, architecture needs {}",
            expected.len()
        )));
    }
    let mut params = Vec::with_capacity(n_params);
    for (exp_name, exp_shape) in &expected {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| ModelError::Format("non-UTF8 parameter name".into()))?;
        if &name != exp_name {
            return Err(ModelError::Format(format!(
                "parameter order mismatch: found '{name}', expected '{exp_name}'"
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        if &shape != exp_shape {
            return Err(ModelError::Format(format!(
                "parameter '{name}' has shape {shape:?}, expected {exp_shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let mut tensors = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(read_f64(&mut r)?);
            }
            tensors.push(Tensor::new(shape.clone(), data).unwrap());
        }
        let second_moment = tensors.pop().unwrap();
        let first_moment = tensors.pop().unwrap();
        let value = tensors.pop().unwrap();
        let mut step = [0u8; 8];
        read_exact(&mut r, &mut step)?;
        params.push(Parameter {
            name,
            value,
            first_moment,
            second_moment,
            step_count: u64::from_le_bytes(step),
        });
    }
    let desc_len = read_u32(&mut r)? as usize;
    let mut desc_buf = vec![0u8; desc_len];
    read_exact(&mut r, &mut desc_buf)?;
    let found = String::from_utf8(desc_buf)
        .map_err(|_| ModelError::Format("non-UTF8 descriptor".into()))?;
    let expected_desc = arch.descriptor();
    if found != expected_desc {
        return Err(ModelError::DescriptorMismatch {
            expected: expected_desc,
            found,
        });
    }
    Ok(ModelBundle {
        arch,
        params,
        counters: CallCounters::default(),
        use_mapper: true,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::Truncated
        } else {
            ModelError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, ModelError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
