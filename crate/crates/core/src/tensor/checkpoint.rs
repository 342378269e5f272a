//! Flat binary parameter checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes, ASCII "CPG1"
//! repeated until end of file, one record per parameter in set order:
//!   name_len       u32
//!   name           name_len bytes, UTF-8
//!   rank           u32
//!   dims           rank x u64
//!   values         product(dims) x f64, little-endian bit patterns
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CPG1";

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io)?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let pstr = path.display().to_string();
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &pstr, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Parse { path: pstr, detail: "bad magic, not a CPG1 checkpoint".into() });
    }
    let mut params = ParamSet::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4).map_err(|e| Error::io(&pstr, e))? {
            0 => break,
            4 => {}
            n => {
                // A short read here may still be a partial buffer; finish it.
                read_exact(&mut r, &mut len4[n..], &pstr, "name length")?;
            }
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, &pstr, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Parse { path: pstr.clone(), detail: "name is not UTF-8".into() })?;
        let mut rank4 = [0u8; 4];
        read_exact(&mut r, &mut rank4, &pstr, "rank")?;
        let rank = u32::from_le_bytes(rank4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d8 = [0u8; 8];
            read_exact(&mut r, &mut d8, &pstr, "dimension")?;
            shape.push(u64::from_le_bytes(d8) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut v8 = [0u8; 8];
        for _ in 0..count {
            read_exact(&mut r, &mut v8, &pstr, "value")?;
            data.push(f64::from_le_bytes(v8));
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Parse {
        path: path.to_string(),
        detail: format!("truncated checkpoint while reading {what}"),
    })
}
