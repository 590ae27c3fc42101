//! Binary weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   "PBSW"
//! version u32 (= 1)
//! count   u32   number of records
//! record  name_len u32, name bytes (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!         rank u32, dims u32 * rank, values
//! ```
//!
//! The first record, `meta.arch`, is an f64 vector
//! `[in_channels, num_anchors, head, total_stride, width, n_layers, channels...]`
//! (head: 0 = softmax, 1 = sigmoid). Each convolution then contributes
//! `<layer>.weight` with dims `[out, in, k, k]` and `<layer>.bias` with `[out]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::conv::Conv2d;
use super::net::{DetectorNet, HeadKind, NetConfig};
use crate::error::{Error, Result};
use crate::num::Real;

const MAGIC: &[u8; 4] = b"PBSW";
const VERSION: u32 = 1;
const META: &str = "meta.arch";

struct Record {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
    dtype: u8,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Real>(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[T]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE);
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for &v in values {
        v.write_le(out);
    }
}

pub fn write_weights<T: Real, W: Write>(net: &DetectorNet<T>, mut w: W) -> Result<()> {
    let cfg = net.config();
    let layers = net.layers();
    let mut buf = Vec::with_capacity(64 + net.num_params() * T::BYTES);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, 1 + 2 * layers.len() as u32);

    let mut meta = vec![
        cfg.in_channels as f64,
        cfg.num_anchors as f64,
        cfg.head.tag(),
        cfg.total_stride as f64,
        cfg.width,
        cfg.channels.len() as f64,
    ];
    meta.extend(cfg.channels.iter().map(|&c| c as f64));
    put_record(&mut buf, META, &[meta.len()], &meta);

    for (name, conv) in &layers {
        put_record(
            &mut buf,
            &format!("{name}.weight"),
            &[conv.out_channels, conv.in_channels, conv.kernel, conv.kernel],
            &conv.weight,
        );
        put_record(&mut buf, &format!("{name}.bias"), &[conv.out_channels], &conv.bias);
    }
    w.write_all(&buf).map_err(|e| Error::WeightFormat(e.to_string()))?;
    w.flush().map_err(|e| Error::WeightFormat(e.to_string()))
}

pub fn save_weights<T: Real>(net: &DetectorNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_weights(net, BufWriter::new(file))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::WeightFormat(format!("truncated file while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn parse(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::WeightFormat("bad magic, not a weight file".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = c.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = String::from_utf8(c.take(len, "name")?.to_vec())
            .map_err(|_| Error::WeightFormat("layer name is not UTF-8".into()))?;
        let dtype = c.take(1, "dtype")?[0];
        let rank = c.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values = match dtype {
            0 => c
                .take(n * 4, &name)?
                .chunks_exact(4)
                .map(|b| f32::read_le(b) as f64)
                .collect(),
            1 => c.take(n * 8, &name)?.chunks_exact(8).map(f64::read_le).collect(),
            t => {
                return Err(Error::LayerMismatch {
                    layer: name,
                    message: format!("unknown dtype tag {t}"),
                })
            }
        };
        out.push(Record {
            name,
            dims,
            values,
            dtype,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

fn config_from_meta(rec: &Record) -> Result<NetConfig> {
    let bad = || Error::LayerMismatch {
        layer: META.into(),
        message: "malformed architecture record".into(),
    };
    let m = &rec.values;
    if m.len() < 6 {
        return Err(bad());
    }
    let n_layers = m[5] as usize;
    if m.len() != 6 + n_layers {
        return Err(bad());
    }
    Ok(NetConfig {
        in_channels: m[0] as usize,
        num_anchors: m[1] as usize,
        head: HeadKind::from_tag(m[2]).ok_or_else(bad)?,
        total_stride: m[3] as usize,
        width: m[4],
        channels: m[6..].iter().map(|&c| c as usize).collect(),
    })
}

fn fill<T: Real>(net: &mut DetectorNet<T>, records: &[Record]) -> Result<()> {
    let names: Vec<String> = net.layers().into_iter().map(|(n, _)| n).collect();
    let mut recs = records.iter().filter(|r| r.name != META);
    for (name, conv) in names.iter().zip(net.layers_mut()) {
        load_param(conv, name, recs.next(), true)?;
        load_param(conv, name, recs.next(), false)?;
    }
    if let Some(extra) = recs.next() {
        return Err(Error::LayerMismatch {
            layer: extra.name.clone(),
            message: "layer not present in the net".into(),
        });
    }
    Ok(())
}

fn load_param<T: Real>(conv: &mut Conv2d<T>, layer: &str, rec: Option<&Record>, weight: bool) -> Result<()> {
    let name = format!("{layer}.{}", if weight { "weight" } else { "bias" });
    let rec = rec.ok_or_else(|| Error::LayerMismatch {
        layer: name.clone(),
        message: "missing from file".into(),
    })?;
    if rec.name != name {
        return Err(Error::LayerMismatch {
            layer: name,
            message: format!("found `{}` instead", rec.name),
        });
    }
    let expect = if weight {
        vec![conv.out_channels, conv.in_channels, conv.kernel, conv.kernel]
    } else {
        vec![conv.out_channels]
    };
    if rec.dims != expect {
        return Err(Error::LayerMismatch {
            layer: name,
            message: format!("file has dims {:?}, net expects {expect:?}", rec.dims),
        });
    }
    let dst = if weight { &mut conv.weight } else { &mut conv.bias };
    for (d, &v) in dst.iter_mut().zip(&rec.values) {
        *d = T::of(v);
    }
    if rec.dtype != T::DTYPE {
        log::debug!("{name}: converting dtype {} to {}", rec.dtype, T::DTYPE);
    }
    Ok(())
}

fn read_all<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::WeightFormat(e.to_string()))?;
    Ok(bytes)
}

/// Reads a net, rebuilding the architecture from the file.
pub fn read_weights<T: Real, R: Read>(r: R) -> Result<DetectorNet<T>> {
    let records = parse(&read_all(r)?)?;
    let meta = records
        .iter()
        .find(|r| r.name == META)
        .ok_or_else(|| Error::WeightFormat(format!("missing `{META}` record")))?;
    let mut net = DetectorNet::zeros(config_from_meta(meta)?)?;
    fill(&mut net, &records)?;
    Ok(net)
}

pub fn load_weights<T: Real>(path: impl AsRef<Path>) -> Result<DetectorNet<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(BufReader::new(file))
}

/// Loads parameters into an existing net; every layer must match its shape.
pub fn load_into<T: Real>(net: &mut DetectorNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = parse(&read_all(BufReader::new(file))?)?;
    fill(net, &records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(width: f64, head: HeadKind) -> DetectorNet<f32> {
        let cfg = NetConfig {
            width,
            head,
            ..NetConfig::default()
        };
        DetectorNet::new(cfg, 17).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for head in [HeadKind::Softmax, HeadKind::PreciseSigmoid] {
            let n = net(0.5, head);
            let mut buf = Vec::new();
            write_weights(&n, &mut buf).unwrap();
            assert_eq!(&buf[..4], b"PBSW");
            let back: DetectorNet<f32> = read_weights(&buf[..]).unwrap();
            assert_eq!(back, n);
            assert_eq!(back.checksum(), n.checksum());
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let mut buf = Vec::new();
        write_weights(&net(1.0, HeadKind::Softmax), &mut buf).unwrap();
        for cut in [3, 10, buf.len() / 2, buf.len() - 1] {
            let err = read_weights::<f32, _>(&buf[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated") || err.to_string().contains("magic"), "{err}");
        }
    }

    #[test]
    fn mismatched_width_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pbsw");
        save_weights(&net(1.0, HeadKind::Softmax), &path).unwrap();
        let mut small = net(0.25, HeadKind::Softmax);
        match load_into(&mut small, &path).unwrap_err() {
            Error::LayerMismatch { layer, .. } => assert_eq!(layer, "backbone.0.weight"),
            e => panic!("unexpected {e}"),
        }
        let mut same = net(1.0, HeadKind::Softmax);
        same.cls_head.bias[0] = 5.0;
        load_into(&mut same, &path).unwrap();
        assert_eq!(same, net(1.0, HeadKind::Softmax));
    }

    #[test]
    fn f64_file_loads_as_f32() {
        let n64: DetectorNet<f64> = net(1.0, HeadKind::Softmax).cast();
        let mut buf = Vec::new();
        write_weights(&n64, &mut buf).unwrap();
        let n32: DetectorNet<f32> = read_weights(&buf[..]).unwrap();
        assert_eq!(n32, net(1.0, HeadKind::Softmax));
    }
}
