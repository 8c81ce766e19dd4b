//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TATUCKPT" | version u32 | total_len u64 | kind (u32 len + utf8)
//! | meta (u64 len + utf8 JSON) | n_tensors u32
//! | per tensor: name (u32 len + utf8), ndim u32, dims u64 * ndim, f64 * prod(dims)
//! | sha256 of every preceding byte
//! ```
//!
//! The JSON metadata holds the model with its weights stripped; weights live
//! in named tensors, one weight and one bias per network layer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{read_bytes, write_atomic};
use crate::dynamics::DynamicsEnsemble;
use crate::error::{Error, Result};
use crate::learner::{ActorCritic, TabularQ};
use crate::nn::Mlp;
use crate::rollout::CvaeModel;

pub const MAGIC: &[u8; 8] = b"TATUCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const FIXED_HEADER: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Where a model keeps its weights.
pub enum Slot<'a> {
    Net(&'a mut Mlp),
    Table { data: &'a mut Vec<f64>, shape: Vec<usize> },
}

pub trait Checkpoint: Serialize + DeserializeOwned + Clone {
    const KIND: &'static str;

    fn slots(&mut self) -> Vec<(String, Slot<'_>)>;
}

impl Checkpoint for DynamicsEnsemble {
    const KIND: &'static str = "dynamics_ensemble";

    fn slots(&mut self) -> Vec<(String, Slot<'_>)> {
        self.members
            .iter_mut()
            .enumerate()
            .map(|(k, m)| (format!("member{k}"), Slot::Net(m)))
            .collect()
    }
}

impl Checkpoint for CvaeModel {
    const KIND: &'static str = "cvae";

    fn slots(&mut self) -> Vec<(String, Slot<'_>)> {
        vec![
            ("encoder".into(), Slot::Net(&mut self.encoder)),
            ("decoder".into(), Slot::Net(&mut self.decoder)),
        ]
    }
}

impl Checkpoint for ActorCritic {
    const KIND: &'static str = "actor_critic";

    fn slots(&mut self) -> Vec<(String, Slot<'_>)> {
        let [c0, c1] = &mut self.critics;
        let [t0, t1] = &mut self.critic_targets;
        vec![
            ("actor".into(), Slot::Net(&mut self.actor)),
            ("critic0".into(), Slot::Net(c0)),
            ("critic1".into(), Slot::Net(c1)),
            ("actor_target".into(), Slot::Net(&mut self.actor_target)),
            ("critic_target0".into(), Slot::Net(t0)),
            ("critic_target1".into(), Slot::Net(t1)),
        ]
    }
}

impl Checkpoint for TabularQ {
    const KIND: &'static str = "tabular_q";

    fn slots(&mut self) -> Vec<(String, Slot<'_>)> {
        let shape = vec![self.n_states, self.n_actions];
        vec![("q".into(), Slot::Table { data: &mut self.q, shape })]
    }
}

fn layer_tensors(name: &str, net: &mut Mlp) -> Vec<Tensor> {
    let sizes = net.sizes().to_vec();
    let params = net.take_params();
    let mut out = Vec::new();
    let mut at = 0;
    for (l, w) in sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        out.push(Tensor {
            name: format!("{name}.layer{l}.weight"),
            shape: vec![n_in, n_out],
            data: params[at..at + n_in * n_out].to_vec(),
        });
        at += n_in * n_out;
        out.push(Tensor {
            name: format!("{name}.layer{l}.bias"),
            shape: vec![n_out],
            data: params[at..at + n_out].to_vec(),
        });
        at += n_out;
    }
    out
}

/// Splits a model into stripped JSON metadata and weight tensors.
pub fn to_parts<T: Checkpoint>(model: &T) -> Result<(String, Vec<Tensor>)> {
    let mut stripped = model.clone();
    let mut tensors = Vec::new();
    for (name, slot) in stripped.slots() {
        match slot {
            Slot::Net(m) => tensors.extend(layer_tensors(&name, m)),
            Slot::Table { data, shape } => tensors.push(Tensor {
                name,
                shape,
                data: std::mem::take(data),
            }),
        }
    }
    let meta = serde_json::to_string(&stripped).map_err(|e| Error::Schema(e.to_string()))?;
    Ok((meta, tensors))
}

/// Rebuilds a model from metadata and tensors; every tensor must be used.
pub fn from_parts<T: Checkpoint>(meta: &str, tensors: Vec<Tensor>) -> Result<T> {
    let mut model: T = serde_json::from_str(meta).map_err(|e| Error::Schema(format!("checkpoint metadata: {e}")))?;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for t in tensors {
        if by_name.insert(t.name.clone(), t).is_some() {
            return Err(Error::Schema("duplicate tensor name".into()));
        }
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Schema(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
        }
        Ok(t.data)
    };
    for (name, slot) in model.slots() {
        match slot {
            Slot::Net(m) => {
                let sizes = m.sizes().to_vec();
                let mut params = Vec::with_capacity(m.expected_params());
                for (l, w) in sizes.windows(2).enumerate() {
                    params.extend(take(&format!("{name}.layer{l}.weight"), &[w[0], w[1]])?);
                    params.extend(take(&format!("{name}.layer{l}.bias"), &[w[1]])?);
                }
                m.set_params(params)?;
            }
            Slot::Table { data, shape } => *data = take(&name, &shape)?,
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Schema(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend((s.len() as u32).to_le_bytes());
    buf.extend(s.as_bytes());
}

/// Serializes a model into the container format.
pub fn encode<T: Checkpoint>(model: &T) -> Result<Vec<u8>> {
    encode_raw(VERSION, T::KIND, model)
}

fn encode_raw<T: Checkpoint>(version: u32, kind: &str, model: &T) -> Result<Vec<u8>> {
    let (meta, tensors) = to_parts(model)?;
    let mut body = Vec::new();
    put_str(&mut body, kind);
    body.extend((meta.len() as u64).to_le_bytes());
    body.extend(meta.as_bytes());
    body.extend((tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        put_str(&mut body, &t.name);
        body.extend((t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            body.extend((d as u64).to_le_bytes());
        }
        for v in &t.data {
            body.extend(v.to_le_bytes());
        }
    }
    let total = FIXED_HEADER + body.len() + DIGEST_LEN;
    let mut out = Vec::with_capacity(total);
    out.extend(MAGIC);
    out.extend(version.to_le_bytes());
    out.extend((total as u64).to_le_bytes());
    out.extend(body);
    let digest = Sha256::digest(&out);
    out.extend(digest.as_slice());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated("checkpoint body ends early".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { u64::from(self.u32()?) };
        usize::try_from(n).map_err(|_| Error::Schema("length overflows".into()))
    }

    fn string(&mut self, wide: bool) -> Result<String> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Schema("invalid utf-8".into()))
    }
}

/// Parses and verifies a container. Nothing is returned unless the whole
/// file checks out.
pub fn decode<T: Checkpoint>(bytes: &[u8]) -> Result<T> {
    if bytes.len() < FIXED_HEADER {
        return Err(Error::Truncated("checkpoint shorter than its header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Schema("not a checkpoint file (bad magic)".into()));
    }
    let declared = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if (bytes.len() as u64) < declared {
        return Err(Error::Truncated(format!("checkpoint has {} of {declared} bytes", bytes.len())));
    }
    if bytes.len() as u64 != declared || bytes.len() < FIXED_HEADER + DIGEST_LEN {
        return Err(Error::Schema("checkpoint length does not match its header".into()));
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(Error::Checksum("checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut r = Reader {
        bytes: content,
        at: FIXED_HEADER,
    };
    let kind = r.string(false)?;
    if kind != T::KIND {
        return Err(Error::Schema(format!("checkpoint holds a {kind}, expected a {}", T::KIND)));
    }
    let meta = r.string(true)?;
    let n = r.u32()?;
    let mut tensors = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = r.string(false)?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.len(true)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Schema("tensor size overflows".into()))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Schema("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.at != content.len() {
        return Err(Error::Schema("trailing bytes after tensors".into()));
    }
    from_parts(&meta, tensors)
}

pub fn save_checkpoint<T: Checkpoint>(path: &Path, model: &T) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn load_checkpoint<T: Checkpoint>(path: &Path) -> Result<T> {
    decode(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rollout::CvaeConfig;

    fn cvae() -> CvaeModel {
        CvaeModel::new(4, 2, 1.0, &CvaeConfig::default(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = cvae();
        m.encoder.params_mut()[0] = -0.0;
        m.decoder.params_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let back: CvaeModel = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let bits = |x: &CvaeModel| x.encoder.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        let q = TabularQ {
            n_states: 2,
            n_actions: 3,
            q: vec![0.1, -2.0, 3.5, 0.0, 1e-300, 7.0],
        };
        assert_eq!(decode::<TabularQ>(&encode(&q).unwrap()).unwrap(), q);
    }

    #[test]
    fn any_corrupted_body_byte_fails_the_checksum() {
        let bytes = encode(&cvae()).unwrap();
        for at in [FIXED_HEADER, FIXED_HEADER + 7, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x01;
            assert!(matches!(decode::<CvaeModel>(&bad), Err(Error::Checksum(_))), "byte {at}");
        }
    }

    #[test]
    fn truncation_version_and_kind_are_reported() {
        let bytes = encode(&cvae()).unwrap();
        assert!(matches!(decode::<CvaeModel>(&bytes[..bytes.len() - 5]), Err(Error::Truncated(_))));
        assert!(matches!(decode::<CvaeModel>(&bytes[..10]), Err(Error::Truncated(_))));
        let v2 = encode_raw(2, CvaeModel::KIND, &cvae()).unwrap();
        assert!(matches!(decode::<CvaeModel>(&v2), Err(Error::Version { found: 2, .. })));
        assert!(matches!(decode::<TabularQ>(&bytes), Err(Error::Schema(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode::<CvaeModel>(&magic), Err(Error::Schema(_))));
    }

    #[test]
    fn tensors_carry_layer_shapes() {
        let m = Mlp::new(3, &[5], 2, Activation::Relu, Activation::Identity, 1).unwrap();
        let mut c = m.clone();
        let ts = layer_tensors("net", &mut c);
        let shapes: Vec<(String, Vec<usize>)> = ts.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        assert_eq!(
            shapes,
            vec![
                ("net.layer0.weight".into(), vec![3, 5]),
                ("net.layer0.bias".into(), vec![5]),
                ("net.layer1.weight".into(), vec![5, 2]),
                ("net.layer1.bias".into(), vec![2]),
            ]
        );
        let flat: Vec<f64> = ts.into_iter().flat_map(|t| t.data).collect();
        assert_eq!(flat, m.params());
    }
}
