//! `FOST` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FOST" | u32 version = 1 | u32 rank | rank × u64 extents | u8 dtype | data
//! ```
//!
//! `dtype` is 0 for f64 and 1 for f32; data is row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const FOST_MAGIC: [u8; 4] = *b"FOST";
pub const FOST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }
}

pub fn write_tensor_to<W: Write>(mut w: W, t: &Tensor, dtype: DType) -> std::io::Result<()> {
    w.write_all(&FOST_MAGIC)?;
    w.write_all(&FOST_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype.code()])?;
    match dtype {
        DType::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Decodes one tensor; `origin` names the source in error messages.
pub fn read_tensor_from<R: Read>(mut r: R, origin: &Path) -> Result<Tensor> {
    let fail = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let mut read = |buf: &mut [u8], what: &str| {
        r.read_exact(buf)
            .map_err(|e| fail(format!("truncated tensor file while reading {what}: {e}")))
    };
    let mut magic = [0u8; 4];
    read(&mut magic, "magic")?;
    if magic != FOST_MAGIC {
        return Err(fail(format!("bad magic bytes {magic:?}, expected \"FOST\"")));
    }
    let mut word = [0u8; 4];
    read(&mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != FOST_VERSION {
        return Err(fail(format!("unsupported version {version}, expected {FOST_VERSION}")));
    }
    read(&mut word, "rank")?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut long = [0u8; 8];
    for _ in 0..rank {
        read(&mut long, "extents")?;
        shape.push(u64::from_le_bytes(long) as usize);
    }
    let mut code = [0u8; 1];
    read(&mut code, "dtype")?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(format!("extents {shape:?} overflow")))?;
    let data = match code[0] {
        0 => {
            let mut raw = vec![0u8; n * 8];
            read(&mut raw, "data")?;
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        }
        1 => {
            let mut raw = vec![0u8; n * 4];
            read(&mut raw, "data")?;
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        }
        other => return Err(fail(format!("unknown dtype code {other}"))),
    };
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, t, dtype).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_header_bytes() {
        let t = Tensor::new([2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t, DType::F64).unwrap();
        let mut expect = b"FOST".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.push(0);
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn f32_storage_rounds() {
        let t = Tensor::vector(vec![0.1, 3.0]);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t, DType::F32).unwrap();
        assert_eq!(buf[4 + 4 + 4 + 8], 1);
        let back = read_tensor_from(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back.data(), &[0.1f32 as f64, 3.0]);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t, DType::F64).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        let err = read_tensor_from(bad.as_slice(), Path::new("a.fost")).unwrap_err().to_string();
        assert!(err.contains("a.fost") && err.contains("magic"), "{err}");

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_tensor_from(bad.as_slice(), Path::new("v")).unwrap_err().to_string().contains("version"));

        let short = &buf[..buf.len() - 3];
        assert!(read_tensor_from(short, Path::new("t")).unwrap_err().to_string().contains("truncated"));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(shape, 3.0, &mut rng);
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t, DType::F64).unwrap();
            let back = read_tensor_from(buf.as_slice(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
