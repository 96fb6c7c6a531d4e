//! Versioned binary checkpoints: named parameters, optimizer state,
//! integer counters and opaque named blobs (buffer snapshots).
//!
//! All floats are stored as f64 little-endian bits. f32 -> f64 -> f32 is
//! exact, so round-trips are value-exact at either training precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::NumericError;
use crate::optim::RmsProp;
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ZLABCKP1";

pub struct Checkpoint<R: Real> {
    pub params: ParamSet<R>,
    pub optimizer: Option<(Vec<Vec<R>>, u64)>,
    pub counters: Vec<(String, u64)>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

pub fn save<R: Real>(
    path: &Path,
    params: &ParamSet<R>,
    optimizer: Option<&RmsProp<R>>,
    counters: &[(String, u64)],
    blobs: &[(String, Vec<u8>)],
) -> Result<(), NumericError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;

    write_u32(&mut w, params.len() as u32)?;
    for (name, t) in params.iter() {
        write_str(&mut w, name)?;
        write_u32(&mut w, t.shape.len() as u32)?;
        for &d in &t.shape {
            write_u64(&mut w, d as u64)?;
        }
        write_floats(&mut w, &t.data)?;
    }

    match optimizer {
        Some(opt) => {
            write_u32(&mut w, 1)?;
            let (v, step) = opt.state();
            write_u64(&mut w, step)?;
            write_u32(&mut w, v.len() as u32)?;
            for vi in v {
                write_floats(&mut w, vi)?;
            }
        }
        None => write_u32(&mut w, 0)?,
    }

    write_u32(&mut w, counters.len() as u32)?;
    for (name, v) in counters {
        write_str(&mut w, name)?;
        write_u64(&mut w, *v)?;
    }

    write_u32(&mut w, blobs.len() as u32)?;
    for (name, bytes) in blobs {
        write_str(&mut w, name)?;
        write_u64(&mut w, bytes.len() as u64)?;
        w.write_all(bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load<R: Real>(path: &Path) -> Result<Checkpoint<R>, NumericError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericError::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }

    let n_params = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let data = read_floats::<R>(&mut r)?;
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| NumericError::Checkpoint(format!("{name}: {e}")))?;
        params.add(&name, t);
    }

    let optimizer = if read_u32(&mut r)? == 1 {
        let step = read_u64(&mut r)?;
        let nv = read_u32(&mut r)? as usize;
        let mut v = Vec::with_capacity(nv);
        for _ in 0..nv {
            v.push(read_floats::<R>(&mut r)?);
        }
        Some((v, step))
    } else {
        None
    };

    let n_counters = read_u32(&mut r)? as usize;
    let mut counters = Vec::with_capacity(n_counters);
    for _ in 0..n_counters {
        let name = read_str(&mut r)?;
        counters.push((name, read_u64(&mut r)?));
    }

    let n_blobs = read_u32(&mut r)? as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let name = read_str(&mut r)?;
        let len = read_u64(&mut r)? as usize;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes)?;
        blobs.push((name, bytes));
    }

    Ok(Checkpoint {
        params,
        optimizer,
        counters,
        blobs,
    })
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_floats<W: Write, R: Real>(w: &mut W, data: &[R]) -> std::io::Result<()> {
    write_u64(w, data.len() as u64)?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &v in data {
        buf.extend_from_slice(&v.into_f64().to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32<Rd: Read>(r: &mut Rd) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<Rd: Read>(r: &mut Rd) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<Rd: Read>(r: &mut Rd) -> Result<String, NumericError> {
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| NumericError::Checkpoint(e.to_string()))
}

fn read_floats<R: Real>(r: &mut impl Read) -> Result<Vec<R>, NumericError> {
    let len = read_u64(r)? as usize;
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    let mut out = Vec::with_capacity(len);
    for chunk in bytes.chunks_exact(8) {
        out.push(R::of_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_value_exact_f32() {
        let dir = std::env::temp_dir().join("zipflab_ckpt_test_f32");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.bin");

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params: ParamSet<f32> = ParamSet::new();
        params.add("a", Tensor::fan_in_uniform(&[4, 3], 3, &mut rng));
        params.add("b", Tensor::fan_in_uniform(&[7], 7, &mut rng));
        let mut opt = RmsProp::new(1e-3f32, 0.99, 1e-6).unwrap();
        // Produce nontrivial optimizer state.
        for id in params.ids() {
            let n = params.get(id).numel();
            params.get_mut(id).accumulate_grad(&vec![0.25; n]);
        }
        opt.step(&mut params).unwrap();

        save(
            &path,
            &params,
            Some(&opt),
            &[("env_steps".into(), 123)],
            &[("blob".into(), vec![1, 2, 3])],
        )
        .unwrap();
        let ck: Checkpoint<f32> = load(&path).unwrap();
        assert!(ck.params.value_eq(&params));
        let (v, step) = ck.optimizer.unwrap();
        assert_eq!(step, 1);
        assert_eq!(v, opt.state().0.to_vec());
        assert_eq!(ck.counters, vec![("env_steps".to_string(), 123)]);
        assert_eq!(ck.blobs[0].1, vec![1, 2, 3]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("zipflab_ckpt_test_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"NOTACKPT____").unwrap();
        assert!(load::<f64>(&path).is_err());
    }
}
