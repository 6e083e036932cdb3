//! Flat binary parameter file, little-endian throughout:
//!
//! ```text
//! magic  b"MCPS"    version u32 (= 1)    entry count u32
//! per entry: name length u32, UTF-8 name, partition tag u8,
//!            rank u32, rank x u64 dimensions
//! payload:   every entry's values as f64, in entry order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use metacoop_autodiff::Tensor;

use crate::error::{CoreError, Result};
use crate::nn::{ParamSet, Partition};

const MAGIC: &[u8; 4] = b"MCPS";
const VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &ParamSet, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (info, _) in params.iter() {
        out.write_all(&(info.name.len() as u32).to_le_bytes())?;
        out.write_all(info.name.as_bytes())?;
        out.write_all(&[info.partition.tag()])?;
        out.write_all(&(info.shape.len() as u32).to_le_bytes())?;
        for &d in &info.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in params.iter() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

pub fn read_params<R: Read>(mut input: R) -> Result<ParamSet> {
    if &read_array::<4, _>(&mut input)? != MAGIC {
        return Err(CoreError::Format("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CoreError::Format(e.to_string()))?;
        let [tag] = read_array::<1, _>(&mut input)?;
        let partition =
            Partition::from_tag(tag).ok_or_else(|| CoreError::Format(format!("unknown partition tag {tag}")))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut input)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        header.push((name, partition, shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, partition, shape) in header {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| Ok(f64::from_le_bytes(read_array(&mut input)?)))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| CoreError::Format(e.to_string()))?;
        entries.push((name, partition, t));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(CoreError::Format("trailing bytes after payload".into()));
    }
    ParamSet::from_parts(entries)
}

pub fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    read_params(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, MlpSpec};

    #[test]
    fn header_layout() {
        let p = ParamSet::from_parts(vec![("ab".into(), Partition::CoHead, Tensor::vector(vec![1.5]))]).unwrap();
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        let mut expected = b"MCPS".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.push(2);
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn file_round_trip() {
        let p = init_params(&MlpSpec::sinusoid(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        save_params(&p, &path).unwrap();
        assert!(load_params(&path).unwrap().bit_eq(&p));
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let p = init_params(&MlpSpec::sinusoid(), 11).unwrap();
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        assert!(read_params(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_params(&extra[..]), Err(CoreError::Format(_))));
        buf[0] = b'X';
        assert!(matches!(read_params(&buf[..]), Err(CoreError::Format(_))));
    }
}
