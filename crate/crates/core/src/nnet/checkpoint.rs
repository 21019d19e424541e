//! Binary checkpoint format.
//!
//! ```text
//! CDNZ1\n
//! key=value\n ...        network config
//! \n
//! u32 record count
//! per record: u32 name length, name bytes, u32 ndim, u32 dims..., f32 values
//! ```
//!
//! Integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::unet::{DehazeUNet, NetConfig};
use super::{Float, NnError};
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &str = "CDNZ1";

const MAX_NAME: u32 = 4096;
const MAX_NDIM: u32 = 8;

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn write_checkpoint<F: Float, W: Write>(net: &DehazeUNet<F>, mut out: W) -> Result<(), NnError> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    for (k, v) in net.config().to_pairs() {
        writeln!(out, "{k}={v}")?;
    }
    writeln!(out, "params={}", net.params().numel())?;
    writeln!(out)?;
    let params = net.params();
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &p.value {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint<F: Float>(net: &DehazeUNet<F>, path: &Path) -> Result<(), NnError> {
    write_checkpoint(net, BufWriter::new(File::create(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad("truncated"),
        _ => NnError::Io(e),
    })?;
    Ok(u32::from_le_bytes(b))
}

fn read_header<R: BufRead>(r: &mut R) -> Result<BTreeMap<String, String>, NnError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pairs = BTreeMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated config block"));
        }
        let l = line.trim_end_matches('\n');
        if l.is_empty() {
            return Ok(pairs);
        }
        let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("bad config line '{l}'")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
}

/// Read a checkpoint, build the network its config block describes, and fill
/// every parameter. Record names, order and shapes must match the network
/// exactly.
pub fn read_checkpoint<F: Float, R: Read>(input: R) -> Result<DehazeUNet<F>, NnError> {
    let mut r = BufReader::new(input);
    let pairs = read_header(&mut r)?;
    let config = NetConfig::from_pairs(&pairs).map_err(bad)?;
    let mut net = DehazeUNet::<F>::new(config, &mut Rng::new(0));
    if let Some(n) = pairs.get("params") {
        if n.parse::<usize>().ok() != Some(net.params().numel()) {
            return Err(bad(format!("config declares {n} parameters, network has {}", net.params().numel())));
        }
    }
    let count = read_u32(&mut r)? as usize;
    if count != net.params().len() {
        return Err(bad(format!("{count} records, network has {} tensors", net.params().len())));
    }
    for p in net.params_mut().iter_mut() {
        let len = read_u32(&mut r)?;
        if len > MAX_NAME {
            return Err(bad("record name too long"));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(|_| bad("truncated"))?;
        let name = String::from_utf8(name).map_err(|_| bad("record name is not utf-8"))?;
        if name != p.name {
            return Err(bad(format!("expected record '{}', found '{name}'", p.name)));
        }
        let ndim = read_u32(&mut r)?;
        if ndim > MAX_NDIM {
            return Err(bad("too many dimensions"));
        }
        let shape = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != p.shape {
            return Err(bad(format!("'{name}' has shape {shape:?}, network expects {:?}", p.shape)));
        }
        for v in &mut p.value {
            let x = f32::from_le_bytes(read_u32(&mut r)?.to_le_bytes());
            if !x.is_finite() {
                return Err(bad(format!("non-finite value in '{name}'")));
            }
            *v = F::of(f64::from(x));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(net)
}

pub fn load_checkpoint<F: Float>(path: &Path) -> Result<DehazeUNet<F>, NnError> {
    read_checkpoint(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            widths: [4, 8, 8, 8, 4],
            ..NetConfig::default()
        }
    }

    fn random_net() -> DehazeUNet<f32> {
        let mut net = DehazeUNet::new(small(), &mut Rng::new(3));
        net.randomize_all(&mut Rng::new(4));
        net
    }

    fn bytes(net: &DehazeUNet<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(net, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let net = random_net();
        let buf = bytes(&net);
        assert!(buf.starts_with(b"CDNZ1\nwidths=4,8,8,8,4\n"));
        let back: DehazeUNet<f32> = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.config(), net.config());
        for (a, b) in back.params().iter().zip(net.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = random_net();
        save_checkpoint(&net, &path).unwrap();
        let back: DehazeUNet<f64> = load_checkpoint(&path).unwrap();
        let v = back.params().get(0).value[0];
        assert_eq!(v as f32, net.params().get(0).value[0]);
    }

    #[test]
    fn rejects_corruption() {
        let buf = bytes(&random_net());
        let mut magic = buf.clone();
        magic[0] = b'X';
        assert!(read_checkpoint::<f32, _>(&magic[..]).is_err());
        assert!(read_checkpoint::<f32, _>(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint::<f32, _>(&extra[..]).is_err());

        let text = String::from_utf8_lossy(&buf).into_owned();
        let header_end = text.find("\n\n").unwrap();
        let mut shape = buf.clone();
        let pos = text[..header_end].find("blocks=1").unwrap() + 7;
        shape[pos] = b'2';
        let err = read_checkpoint::<f32, _>(&shape[..]).unwrap_err();
        assert!(err.to_string().contains("parameters"), "{err}");
    }

    #[test]
    fn rejects_shape_disagreement() {
        // A record claiming a different shape for the first tensor.
        let mut buf = bytes(&random_net());
        let header_end = buf.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        let name_len = u32::from_le_bytes(buf[header_end + 4..header_end + 8].try_into().unwrap()) as usize;
        let first_dim = header_end + 8 + name_len + 4;
        buf[first_dim] ^= 1;
        let err = read_checkpoint::<f32, _>(&buf[..]).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
