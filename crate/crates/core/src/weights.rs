//! Weight files for [`ToyNetwork`].
//!
//! Layout: a little-endian `u64` header length, a JSON header of that many
//! bytes, then every array as little-endian `f64` in the order listed in the
//! header. Matrices are stored row-major.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::softmax::UnembeddingTable;
use crate::transformer::{BlockKind, LayerNorm, LayeredMap, Nonlinearity, ResidualBlock, ToyNetwork};
use crate::{lit, to_f64, Scalar};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub kind: BlockKind,
    pub nonlinearity: Nonlinearity,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub name: String,
    /// `[rows, cols]`; vectors have `cols = 1`.
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub format_version: String,
    pub seed: Option<u64>,
    pub dim: usize,
    pub vocab: usize,
    pub layers: Vec<LayerHeader>,
    pub final_ln: bool,
    pub arrays: Vec<ArrayHeader>,
}

struct Arrays {
    headers: Vec<ArrayHeader>,
    data: Vec<f64>,
}

impl Arrays {
    fn push_mat<T: Scalar>(&mut self, name: String, m: &DMatrix<T>) {
        self.headers.push(ArrayHeader { name, shape: [m.nrows(), m.ncols()] });
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.data.push(to_f64(m[(i, j)]));
            }
        }
    }

    fn push_vec<T: Scalar>(&mut self, name: String, v: &DVector<T>) {
        self.headers.push(ArrayHeader { name, shape: [v.len(), 1] });
        self.data.extend(v.iter().map(|&x| to_f64(x)));
    }
}

pub fn write_network<T: Scalar, W: Write>(net: &ToyNetwork<T>, seed: Option<u64>, mut out: W) -> Result<()> {
    let mut arrays = Arrays { headers: Vec::new(), data: Vec::new() };
    let mut layers = Vec::new();
    for (k, b) in net.blocks().iter().enumerate() {
        layers.push(LayerHeader { kind: b.kind, nonlinearity: b.nonlinearity, hidden: b.hidden() });
        arrays.push_vec(format!("block{k}.ln_gain"), &b.ln.gain);
        arrays.push_vec(format!("block{k}.ln_bias"), &b.ln.bias);
        arrays.push_mat(format!("block{k}.w_in"), &b.w_in);
        arrays.push_vec(format!("block{k}.b_in"), &b.b_in);
        arrays.push_mat(format!("block{k}.w_out"), &b.w_out);
        arrays.push_vec(format!("block{k}.b_out"), &b.b_out);
    }
    if let Some(ln) = net.final_ln() {
        arrays.push_vec("final_ln.gain".into(), &ln.gain);
        arrays.push_vec("final_ln.bias".into(), &ln.bias);
    }
    arrays.push_mat("unembedding".into(), net.table().gamma());
    let header = WeightHeader {
        format_version: FORMAT_VERSION.into(),
        seed,
        dim: net.table().dim(),
        vocab: net.table().vocab_size(),
        layers,
        final_ln: net.final_ln().is_some(),
        arrays: arrays.headers,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for x in arrays.data {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    headers: std::slice::Iter<'a, ArrayHeader>,
    data: &'a [f64],
}

impl Cursor<'_> {
    fn take<T: Scalar>(&mut self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<T>> {
        let h = self.headers.next().ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        if h.name != name || h.shape != [rows, cols] {
            return Err(Error::Format(format!(
                "expected {name} {rows}×{cols}, found {} {}×{}",
                h.name, h.shape[0], h.shape[1]
            )));
        }
        let n = rows * cols;
        if self.data.len() < n {
            return Err(Error::Format(format!("payload too short for {name}")));
        }
        let (head, tail) = self.data.split_at(n);
        self.data = tail;
        Ok(DMatrix::from_row_iterator(rows, cols, head.iter().map(|&x| lit::<T>(x))))
    }

    fn take_vec<T: Scalar>(&mut self, name: &str, n: usize) -> Result<DVector<T>> {
        Ok(self.take::<T>(name, n, 1)?.column(0).into_owned())
    }
}

pub fn read_network<T: Scalar, R: Read>(mut input: R) -> Result<(ToyNetwork<T>, WeightHeader)> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json)?;
    let header: WeightHeader = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut cur = Cursor { headers: header.arrays.iter(), data: &data };
    let d = header.dim;
    let mut blocks = Vec::with_capacity(header.layers.len());
    for (k, l) in header.layers.iter().enumerate() {
        let m = l.hidden;
        let gain = cur.take_vec(&format!("block{k}.ln_gain"), d)?;
        let bias = cur.take_vec(&format!("block{k}.ln_bias"), d)?;
        blocks.push(ResidualBlock {
            kind: l.kind,
            ln: LayerNorm { gain, bias },
            w_in: cur.take(&format!("block{k}.w_in"), m, d)?,
            b_in: cur.take_vec(&format!("block{k}.b_in"), m)?,
            w_out: cur.take(&format!("block{k}.w_out"), d, m)?,
            b_out: cur.take_vec(&format!("block{k}.b_out"), d)?,
            nonlinearity: l.nonlinearity,
        });
    }
    let final_ln = if header.final_ln {
        Some(LayerNorm { gain: cur.take_vec("final_ln.gain", d)?, bias: cur.take_vec("final_ln.bias", d)? })
    } else {
        None
    };
    let table = UnembeddingTable::new(cur.take("unembedding", header.vocab, d)?)?;
    if cur.headers.next().is_some() || !cur.data.is_empty() {
        return Err(Error::Format("trailing arrays or payload".into()));
    }
    Ok((ToyNetwork::new(blocks, final_ln, table)?, header))
}

pub fn save_network<T: Scalar>(net: &ToyNetwork<T>, seed: Option<u64>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_network(net, seed, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_network<T: Scalar>(path: &Path) -> Result<(ToyNetwork<T>, WeightHeader)> {
    read_network(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::NetworkSpec;

    #[test]
    fn round_trip_is_exact() {
        for final_ln in [true, false] {
            let net: ToyNetwork<f64> = NetworkSpec { final_ln, ..NetworkSpec::default() }.build(5).unwrap();
            let mut buf = Vec::new();
            write_network(&net, Some(5), &mut buf).unwrap();
            let (back, header) = read_network::<f64, _>(buf.as_slice()).unwrap();
            assert_eq!(back, net);
            assert_eq!(header.seed, Some(5));
            assert_eq!(header.format_version, FORMAT_VERSION);
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let net: ToyNetwork<f64> = NetworkSpec::default().build(1).unwrap();
        let mut buf = Vec::new();
        write_network(&net, None, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(read_network::<f64, _>(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net: ToyNetwork<f64> = NetworkSpec::default().build(2).unwrap();
        save_network(&net, Some(2), &path).unwrap();
        assert_eq!(load_network::<f64>(&path).unwrap().0, net);
    }
}
