//! Named-tensor checkpoint container.
//!
//! Layout: magic bytes `EAST`, version u32, then a sequence of records
//! until end of file. Record: name length u32, name bytes (utf-8), rank
//! u32, extents u64 each, then little-endian f32 payload, row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EAST";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_named_tensors<W: Write>(w: &mut W, tensors: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &e in &t.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated payload while reading {what}")))
}

pub fn read_named_tensors<R: Read>(r: &mut R, path: &Path) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, path, "magic bytes")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", magic, CHECKPOINT_MAGIC),
        ));
    }
    let mut v4 = [0u8; 4];
    read_exact_or(r, &mut v4, path, "version")?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }

    let mut tensors = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4) {
            Ok(0) => break,
            Ok(4) => {}
            Ok(n) => {
                // partial header read: try to complete it
                let mut rest = [0u8; 4];
                read_exact_or(r, &mut rest[..4 - n], path, "record header")?;
                len4[n..].copy_from_slice(&rest[..4 - n]);
            }
            Err(e) => return Err(Error::io(path, e)),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        if name_len > 4096 {
            return Err(Error::format(path, format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        read_exact_or(r, &mut name_buf, path, "tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format(path, "tensor name is not utf-8"))?;
        read_exact_or(r, &mut v4, path, "rank")?;
        let rank = u32::from_le_bytes(v4) as usize;
        if rank > 16 {
            return Err(Error::format(path, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e8 = [0u8; 8];
            read_exact_or(r, &mut e8, path, "extent")?;
            shape.push(u64::from_le_bytes(e8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f4 = [0u8; 4];
        for _ in 0..numel {
            read_exact_or(r, &mut f4, path, &format!("payload of {name}"))?;
            data.push(f32::from_le_bytes(f4));
        }
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "a.w".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 1e30],
            },
            NamedTensor {
                name: "b".into(),
                shape: vec![1],
                data: vec![42.0],
            },
        ]
    }

    #[test]
    fn roundtrip_bit_identical() {
        let mut buf = Vec::new();
        write_named_tensors(&mut buf, &sample()).unwrap();
        let mut buf2 = Vec::new();
        let read = read_named_tensors(&mut &buf[..], Path::new("mem")).unwrap();
        assert_eq!(read, sample());
        write_named_tensors(&mut buf2, &read).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn bad_magic_and_version_and_truncation_are_distinct() {
        let mut buf = Vec::new();
        write_named_tensors(&mut buf, &sample()).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        let e = read_named_tensors(&mut &bad_magic[..], Path::new("m")).unwrap_err();
        assert!(e.to_string().contains("bad magic"), "{e}");

        let mut bad_version = buf.clone();
        bad_version[4] = 99;
        let e = read_named_tensors(&mut &bad_version[..], Path::new("m")).unwrap_err();
        assert!(e.to_string().contains("unsupported version"), "{e}");

        let truncated = &buf[..buf.len() - 3];
        let e = read_named_tensors(&mut &truncated[..], Path::new("m")).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
    }
}
