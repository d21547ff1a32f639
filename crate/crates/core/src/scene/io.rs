use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{DatasetTriplet, Domain, HeadMode, Image, ObjectModel, Sample, SceneError};
use crate::geometry::{CameraIntrinsics, Pose, Rotation};

const MAGIC: &[u8; 8] = b"SMDS0001";

/// Serialize a triplet: header (magic, little-endian u32 sizes and mode
/// tag, f64 intrinsics and half-extents), then all samples in the order
/// synthetic, real, paired-synthetic.
pub fn write_triplet(path: &Path, t: &DatasetTriplet) -> Result<(), SceneError> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC)?;
    let k = &t.camera;
    for v in [
        k.width,
        k.height,
        t.synth.len() as u32,
        t.real.len() as u32,
        t.head_mode.target_dim() as u32,
        t.head_mode.tag(),
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in [k.fx, k.fy, k.cx, k.cy] {
        w.write_all(&v.to_le_bytes())?;
    }
    let h = t.object.corners().half_extents();
    for v in [h.x, h.y, h.z] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in t.synth.iter().chain(&t.real).chain(&t.paired_synth) {
        write_sample(&mut w, s)?;
    }
    w.flush()?;
    Ok(())
}

fn write_sample(w: &mut impl Write, s: &Sample) -> Result<(), SceneError> {
    w.write_all(&[s.domain.tag()])?;
    w.write_all(&s.background_seed.to_le_bytes())?;
    let r = s.pose.rotation.matrix();
    for row in 0..3 {
        for col in 0..3 {
            w.write_all(&r[(row, col)].to_le_bytes())?;
        }
    }
    for v in [s.pose.translation.x, s.pose.translation.y, s.pose.translation.z] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &s.target {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &s.image.pixels {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a triplet written by [`write_triplet`]; byte-exact round trip.
pub fn read_triplet(path: &Path) -> Result<DatasetTriplet, SceneError> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(SceneError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let width = read_u32(&mut r)?;
    let height = read_u32(&mut r)?;
    let n_s = read_u32(&mut r)? as usize;
    let n_r = read_u32(&mut r)? as usize;
    let target_dim = read_u32(&mut r)? as usize;
    let mode_tag = read_u32(&mut r)?;
    let head_mode = HeadMode::from_tag(mode_tag)
        .ok_or_else(|| SceneError::FormatMismatch(format!("unknown head-mode tag {mode_tag}")))?;
    if head_mode.target_dim() != target_dim {
        return Err(SceneError::FormatMismatch(format!(
            "target dim {target_dim} inconsistent with head mode {head_mode:?}"
        )));
    }
    let fx = read_f64(&mut r)?;
    let fy = read_f64(&mut r)?;
    let cx = read_f64(&mut r)?;
    let cy = read_f64(&mut r)?;
    let camera = CameraIntrinsics::new(fx, fy, cx, cy, width, height)
        .map_err(|e| SceneError::FormatMismatch(e.to_string()))?;
    let hx = read_f64(&mut r)?;
    let hy = read_f64(&mut r)?;
    let hz = read_f64(&mut r)?;
    let object = ObjectModel::from_half_extents(Vector3::new(hx, hy, hz))?;

    let pixel_count = (width * height) as usize;
    let mut read_block = |n: usize| -> Result<Vec<Sample>, SceneError> {
        (0..n)
            .map(|_| read_sample(&mut r, width, height, target_dim, pixel_count))
            .collect()
    };
    let synth = read_block(n_s)?;
    let real = read_block(n_r)?;
    let paired_synth = read_block(n_r)?;

    Ok(DatasetTriplet {
        synth,
        real,
        paired_synth,
        camera,
        object,
        head_mode,
    })
}

fn read_sample(
    r: &mut impl Read,
    width: u32,
    height: u32,
    target_dim: usize,
    pixel_count: usize,
) -> Result<Sample, SceneError> {
    let mut tag = [0u8; 1];
    read_exact(r, &mut tag)?;
    let domain = Domain::from_tag(tag[0])
        .ok_or_else(|| SceneError::FormatMismatch(format!("unknown domain tag {}", tag[0])))?;
    let mut seed = [0u8; 8];
    read_exact(r, &mut seed)?;
    let background_seed = u64::from_le_bytes(seed);
    let mut rot = Matrix3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            rot[(row, col)] = read_f64(r)?;
        }
    }
    let rotation = Rotation::from_matrix(rot)
        .map_err(|e| SceneError::FormatMismatch(format!("stored rotation invalid: {e}")))?;
    let translation = Vector3::new(read_f64(r)?, read_f64(r)?, read_f64(r)?);
    let mut target = Vec::with_capacity(target_dim);
    for _ in 0..target_dim {
        target.push(read_f64(r)?);
    }
    let mut pixels = Vec::with_capacity(pixel_count);
    let mut buf = [0u8; 4];
    for _ in 0..pixel_count {
        read_exact(r, &mut buf)?;
        pixels.push(f32::from_le_bytes(buf));
    }
    Ok(Sample {
        image: Image::new(width, height, pixels),
        pose: Pose::new(rotation, translation),
        target,
        domain,
        background_seed,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), SceneError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SceneError::Truncated
        } else {
            SceneError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, SceneError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, SceneError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
