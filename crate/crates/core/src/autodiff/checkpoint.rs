//! Parameter checkpoints.
//!
//! Layout: an ASCII header followed by raw little-endian `f64` payloads in
//! header order.
//!
//! ```text
//! ERAKIT-CKPT v1
//! tensors 2
//! layer0.weight 3x8
//! layer0.bias 8
//! end
//! <32 f64 values>
//! ```
//!
//! A scalar is written with the dimension string `-`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::array::Array;
use super::nn::ParamSet;
use crate::error::{EraError, Result};

const MAGIC: &str = "ERAKIT-CKPT v1";

fn dims_string(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

pub fn write_params<W: Write, P: ParamSet + ?Sized>(mut w: W, params: &P) -> Result<()> {
    let ps = params.params();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "tensors {}", ps.len())?;
    for (name, a) in &ps {
        writeln!(w, "{name} {}", dims_string(a.shape()))?;
    }
    writeln!(w, "end")?;
    for (_, a) in &ps {
        for x in a.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads arrays in file order, as `(name, array)` pairs.
pub fn read_arrays<R: Read>(r: R) -> Result<Vec<(String, Array)>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(EraError::Checkpoint("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(EraError::Checkpoint("bad magic line".into()));
    }
    let count: usize = next_line(&mut r)?
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| EraError::Checkpoint("bad tensor count".into()))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let l = next_line(&mut r)?;
        let (name, dims) = l
            .rsplit_once(' ')
            .ok_or_else(|| EraError::Checkpoint(format!("bad entry `{l}`")))?;
        let shape: Vec<usize> = if dims == "-" {
            vec![]
        } else {
            dims.split('x')
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| EraError::Checkpoint(format!("bad dims `{dims}`")))?
        };
        entries.push((name.to_string(), shape));
    }
    if next_line(&mut r)? != "end" {
        return Err(EraError::Checkpoint("missing end marker".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for (name, shape) in entries {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| EraError::Checkpoint(format!("truncated payload for {name}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        let a = Array::new(shape, data)
            .map_err(|e| EraError::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, a));
    }
    if r.read(&mut buf)? != 0 {
        return Err(EraError::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(out)
}

/// Loads into `params`, requiring identical names, order and shapes.
pub fn read_params<R: Read, P: ParamSet + ?Sized>(r: R, params: &mut P) -> Result<()> {
    let arrays = read_arrays(r)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .params()
        .into_iter()
        .map(|(n, a)| (n, a.shape().to_vec()))
        .collect();
    if arrays.len() != expected.len() {
        return Err(EraError::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            arrays.len()
        )));
    }
    for ((name, a), (en, es)) in arrays.iter().zip(&expected) {
        if name != en || a.shape() != es.as_slice() {
            return Err(EraError::Checkpoint(format!(
                "expected {en} {}, found {name} {}",
                dims_string(es),
                dims_string(a.shape())
            )));
        }
    }
    for (dst, (_, src)) in params.params_mut().into_iter().zip(arrays) {
        *dst = src;
    }
    Ok(())
}

pub fn save<P: ParamSet + ?Sized>(path: impl AsRef<Path>, params: &P) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load<P: ParamSet + ?Sized>(path: impl AsRef<Path>, params: &mut P) -> Result<()> {
    read_params(std::fs::File::open(path)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::nn::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Mlp::new(&[3, 5, 2], Activation::Relu, &mut rng);
        let mut b = Mlp::new(&[3, 5, 2], Activation::Relu, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&path, &a).unwrap();
        load(&path, &mut b).unwrap();
        for ((_, x), (_, y)) in a.params().into_iter().zip(b.params()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn rejects_wrong_architecture_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Mlp::new(&[3, 5, 2], Activation::Relu, &mut rng);
        let mut b = Mlp::new(&[3, 4, 2], Activation::Relu, &mut rng);
        let mut bytes = Vec::new();
        write_params(&mut bytes, &a).unwrap();
        assert!(read_params(bytes.as_slice(), &mut b).is_err());

        let mut c = a.clone();
        assert!(read_params(&bytes[..bytes.len() - 3], &mut c).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_params(extra.as_slice(), &mut c).is_err());
        assert!(read_params(&b"NOPE\n"[..], &mut c).is_err());
    }
}
