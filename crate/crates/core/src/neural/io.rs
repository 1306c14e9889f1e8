use std::fs::File;
use std::io::{BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{BatchNorm, Dense, Layer, LayerSpec};
use super::loss::Head;
use super::network::{Architecture, Network, ParamBuffers};
use super::train::TrainingTrace;
use super::{Float, Precision};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 8] = *b"CSMUDNN\0";
pub const MODEL_VERSION: u32 = 1;

const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    arch: Architecture,
    precision: Precision,
    users: usize,
    block: usize,
    input_width: usize,
    head: Head,
    batches_seen: u64,
    param_count: usize,
    layers: Vec<LayerSpec>,
}

fn put<T: Float>(out: &mut Vec<u8>, values: impl IntoIterator<Item = T>) {
    for v in values {
        v.write_le(out);
    }
}

/// Serializes a network: magic, version, header length, JSON header,
/// little-endian parameters in layer order, SHA-256 of all preceding bytes.
pub fn write_model<T: Float>(network: &Network<T>, out: &mut impl Write) -> Result<()> {
    let header = ModelHeader {
        arch: network.arch,
        precision: T::PRECISION,
        users: network.users,
        block: network.block,
        input_width: network.input_width,
        head: network.head,
        batches_seen: network.batches_seen,
        param_count: network.param_count(),
        layers: network.specs(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 2 * T::BYTES * header.param_count + DIGEST_LEN);
    buf.extend_from_slice(&MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (layer, vel) in network.layers.iter().zip(&network.velocity) {
        match (layer, vel) {
            (Layer::Dense(d), ParamBuffers::Dense { w, b }) => {
                put(&mut buf, d.w.iter().copied());
                put(&mut buf, d.b.iter().copied());
                put(&mut buf, w.iter().copied());
                put(&mut buf, b.iter().copied());
            }
            (Layer::BatchNorm(bn), ParamBuffers::BatchNorm { gamma, beta }) => {
                for a in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var, gamma, beta] {
                    put(&mut buf, a.iter().copied());
                }
            }
            (Layer::Dense(_) | Layer::BatchNorm(_), _) => {
                return Err(Error::Shape("velocity buffers do not match the layers".into()));
            }
            _ => {}
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("model payload is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn vec<T: Float>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * T::BYTES)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn array1<T: Float>(&mut self, n: usize) -> Result<Array1<T>> {
        Ok(Array1::from(self.vec(n)?))
    }

    fn array2<T: Float>(&mut self, rows: usize, cols: usize) -> Result<Array2<T>> {
        Array2::from_shape_vec((rows, cols), self.vec(rows * cols)?).map_err(|e| Error::Shape(e.to_string()))
    }
}

pub fn read_model<T: Float>(input: &mut impl Read) -> Result<Network<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(Error::Integrity(format!("model file of {} bytes is truncated", bytes.len())));
    }
    if bytes[..8] != MODEL_MAGIC {
        return Err(Error::Header("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(Error::Header(format!("unsupported model version {version}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if 16 + header_len > body.len() {
        return Err(Error::Integrity("model header is truncated".into()));
    }
    let header: ModelHeader =
        serde_json::from_slice(&body[16..16 + header_len]).map_err(|e| Error::Header(format!("model header: {e}")))?;
    if header.precision != T::PRECISION {
        return Err(Error::Shape(format!("model stores {:?} parameters, {:?} requested", header.precision, T::PRECISION)));
    }
    let expected: usize = header
        .layers
        .iter()
        .map(|s| match *s {
            LayerSpec::Dense { input, output } => 2 * (input * output + output),
            LayerSpec::BatchNorm { width } => 6 * width,
            _ => 0,
        })
        .sum();
    if body.len() - 16 - header_len != expected * T::BYTES {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes, header implies {}",
            body.len() - 16 - header_len,
            expected * T::BYTES
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("model checksum mismatch".into()));
    }

    let mut net = Network::<T>::from_specs(
        header.arch,
        header.users,
        header.block,
        header.input_width,
        header.head,
        &header.layers,
        0,
    )?;
    let mut cur = Cursor { bytes: body, pos: 16 + header_len };
    for (layer, vel) in net.layers.iter_mut().zip(net.velocity.iter_mut()) {
        match layer {
            Layer::Dense(d) => {
                let (out, inp) = d.w.dim();
                *d = Dense { w: cur.array2(out, inp)?, b: cur.array1(out)? };
                *vel = ParamBuffers::Dense { w: cur.array2(out, inp)?, b: cur.array1(out)? };
            }
            Layer::BatchNorm(bn) => {
                let n = bn.gamma.len();
                *bn = BatchNorm {
                    gamma: cur.array1(n)?,
                    beta: cur.array1(n)?,
                    running_mean: cur.array1(n)?,
                    running_var: cur.array1(n)?,
                };
                *vel = ParamBuffers::BatchNorm { gamma: cur.array1(n)?, beta: cur.array1(n)? };
            }
            _ => {}
        }
    }
    net.batches_seen = header.batches_seen;
    Ok(net)
}

pub fn save_model<T: Float>(network: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model(network, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_model<T: Float>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    read_model(&mut file)
}

impl<T: Float> Network<T> {
    /// Replaces this network's parameters with `other`'s. Nothing is
    /// changed unless the architectures agree exactly.
    pub fn assign_from(&mut self, other: Network<T>) -> Result<()> {
        if self.arch != other.arch || self.input_width != other.input_width || self.specs() != other.specs() {
            return Err(Error::Shape(format!(
                "model is a {} over {} inputs with {} layers; expected a {} over {} inputs with {} layers",
                other.arch.name(),
                other.input_width,
                other.layers.len(),
                self.arch.name(),
                self.input_width,
                self.layers.len()
            )));
        }
        *self = other;
        Ok(())
    }
}

/// Writes `batch,loss,user_hit_ratio,exact_set_rate` rows.
pub fn write_trace_csv(trace: &TrainingTrace, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["batch", "loss", "user_hit_ratio", "exact_set_rate"])?;
    for cp in &trace.checkpoints {
        w.serialize(cp)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace written by [`write_trace_csv`].
pub fn read_trace_csv(input: impl Read) -> Result<TrainingTrace> {
    let mut r = csv::Reader::from_reader(input);
    let checkpoints = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(TrainingTrace { checkpoints })
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::neural::{ArchConfig, Checkpoint};

    fn net() -> Network<f32> {
        let mut n = Network::<f32>::build(Architecture::Brnn, 5, 2, 7, &ArchConfig { relu_width: Some(12), ..ArchConfig::default() }, 4).unwrap();
        n.batches_seen = 300;
        if let ParamBuffers::Dense { w, .. } = &mut n.velocity[0] {
            w.fill(0.25);
        }
        n
    }

    fn bytes(n: &Network<f32>) -> Vec<u8> {
        let mut v = Vec::new();
        write_model(n, &mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_is_exact() {
        let n = net();
        let back: Network<f32> = read_model(&mut bytes(&n).as_slice()).unwrap();
        assert_eq!(back, n);
        let x = Array2::from_shape_fn((100, 14), |(i, j)| ((i * 17 + j * 5) % 23) as f32 / 7.0 - 1.5);
        assert_eq!(back.predict_scores(x.view()).unwrap(), n.predict_scores(x.view()).unwrap());
    }

    #[test]
    fn corruption_and_mismatch() {
        let n = net();
        let raw = bytes(&n);
        assert!(matches!(read_model::<f32>(&mut &raw[..raw.len() - 5]), Err(Error::Integrity(_))));
        assert!(matches!(read_model::<f32>(&mut &raw[..10]), Err(Error::Integrity(_))));
        let mut flipped = raw.clone();
        let last = flipped.len() - 40;
        flipped[last] ^= 1;
        assert!(matches!(read_model::<f32>(&mut flipped.as_slice()), Err(Error::Integrity(_))));
        let mut magic = raw.clone();
        magic[0] = b'X';
        assert!(matches!(read_model::<f32>(&mut magic.as_slice()), Err(Error::Header(_))));
        assert!(matches!(read_model::<f64>(&mut raw.as_slice()), Err(Error::Shape(_))));

        let mut dnn = Network::<f32>::build(Architecture::Dnn, 5, 2, 7, &ArchConfig { relu_width: Some(12), ..ArchConfig::default() }, 4).unwrap();
        let before = dnn.clone();
        assert!(matches!(dnn.assign_from(read_model(&mut raw.as_slice()).unwrap()), Err(Error::Shape(_))));
        assert_eq!(dnn, before);
    }

    #[test]
    fn trace_csv_layout() {
        let trace = TrainingTrace {
            checkpoints: vec![Checkpoint { batch: 100, loss: 1.5, user_hit_ratio: 0.75, exact_set_rate: 0.5 }],
        };
        let mut out = Vec::new();
        write_trace_csv(&trace, &mut out).unwrap();
        assert_eq!(String::from_utf8(out.clone()).unwrap(), "batch,loss,user_hit_ratio,exact_set_rate\n100,1.5,0.75,0.5\n");
        let mut empty = Vec::new();
        write_trace_csv(&TrainingTrace::default(), &mut empty).unwrap();
        assert_eq!(empty, b"batch,loss,user_hit_ratio,exact_set_rate\n");
        assert_eq!(read_trace_csv(&out[..]).unwrap(), trace);
        assert!(read_trace_csv(&empty[..]).unwrap().checkpoints.is_empty());
    }
}
