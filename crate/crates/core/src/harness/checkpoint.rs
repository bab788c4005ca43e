//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PRIPG1" | version u16 | count u32 | count × entry | meta count u32 | meta count × entry
//! entry = name_len u16 | name bytes | rank u8 | rank × dim u32 | prod(dims) × f32
//! ```
//!
//! Integer metadata (step counters) is stored as two `f32` words holding the low and high
//! 32 bits of the value as raw bit patterns, so it survives the round trip exactly.

use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp, Scalar};
use crate::p2p_sac::{Agent, AgentConfig};

pub const MAGIC: &[u8; 6] = b"PRIPG1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Self {
        Self { name: name.into(), dims, data }
    }

    pub fn from_u64(name: impl Into<String>, v: u64) -> Self {
        let words = vec![f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)];
        Self::new(name, vec![2], words)
    }

    pub fn as_u64(&self) -> Result<u64> {
        match self.data.as_slice() {
            [lo, hi] => Ok(lo.to_bits() as u64 | ((hi.to_bits() as u64) << 32)),
            _ => Err(Error::ShapeMismatch(format!("{} is not an integer entry", self.name))),
        }
    }

    pub fn scalar(name: impl Into<String>, v: f32) -> Self {
        Self::new(name, vec![1], vec![v])
    }

    /// Bitwise comparison, so NaN payloads count as equal to themselves.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.name == other.name
            && self.dims == other.dims
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: Vec<Tensor>,
    pub meta: Vec<Tensor>,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.iter().find(|t| t.name == name).ok_or_else(|| Error::Config(format!("missing tensor {name}")))
    }

    pub fn meta(&self, name: &str) -> Result<&Tensor> {
        self.meta.iter().find(|t| t.name == name).ok_or_else(|| Error::Config(format!("missing metadata {name}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_entries(&mut out, &self.params)?;
        write_entries(&mut out, &self.meta)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::CorruptContainer { offset: 0, reason: "bad magic".into() });
        }
        let at = r.at;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::CorruptContainer { offset: at, reason: format!("unsupported version {version}") });
        }
        let params = r.entries()?;
        let meta = r.entries()?;
        if r.at != bytes.len() {
            return Err(Error::CorruptContainer { offset: r.at, reason: "trailing bytes".into() });
        }
        Ok(Self { params, meta })
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        let same = |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y));
        same(&self.params, &other.params) && same(&self.meta, &other.meta)
    }
}

fn write_entries(out: &mut Vec<u8>, entries: &[Tensor]) -> Result<()> {
    let count = u32::try_from(entries.len()).map_err(|_| Error::Config("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in entries {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Config(format!("rank too high: {}", t.name)))?;
        let numel: u64 = t.dims.iter().map(|&d| d as u64).product();
        if numel != t.data.len() as u64 {
            return Err(Error::ShapeMismatch(format!("{}: dims {:?} for {} values", t.name, t.dims, t.data.len())));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::CorruptContainer { offset: self.at, reason: format!("truncated, wanted {n} more bytes") }),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn entries(&mut self) -> Result<Vec<Tensor>> {
        let count = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let at = self.at;
            let len = self.u16()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::CorruptContainer { offset: at, reason: "name is not UTF-8".into() })?;
            let rank = self.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let bytes = numel.and_then(|n| n.checked_mul(4));
            let Some(bytes) = bytes else {
                return Err(Error::CorruptContainer { offset: at, reason: "tensor size overflows".into() });
            };
            let raw = self.take(bytes)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            out.push(Tensor { name, dims, data });
        }
        Ok(out)
    }
}

fn mlp_tensors<T: Scalar>(prefix: &str, net: &Mlp<T>, out: &mut Vec<Tensor>) {
    for ((name, shape), data) in net.tensor_specs().into_iter().zip(net.tensors()) {
        let dims = shape.iter().map(|&d| d as u32).collect();
        out.push(Tensor::new(format!("{prefix}.{name}"), dims, data.iter().map(|v| v.as_f64() as f32).collect()));
    }
}

fn load_mlp<T: Scalar>(prefix: &str, net: &mut Mlp<T>, source: &[Tensor]) -> Result<()> {
    let specs = net.tensor_specs();
    for ((name, shape), dst) in specs.into_iter().zip(net.tensors_mut()) {
        let full = format!("{prefix}.{name}");
        let t = source.iter().find(|t| t.name == full).ok_or_else(|| Error::Config(format!("missing tensor {full}")))?;
        let dims: Vec<u32> = shape.iter().map(|&d| d as u32).collect();
        if t.dims != dims {
            return Err(Error::ShapeMismatch(format!("{full}: stored {:?}, expected {dims:?}", t.dims)));
        }
        for (d, &v) in dst.iter_mut().zip(&t.data) {
            *d = T::lit(v as f64);
        }
    }
    Ok(())
}

fn adam_tensors<T: Scalar>(prefix: &str, opt: &Adam<T>, names: &[String], out: &mut Vec<Tensor>) {
    out.push(Tensor::from_u64(format!("{prefix}.step"), opt.step));
    for (k, name) in names.iter().enumerate() {
        let conv = |v: &Vec<T>| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        out.push(Tensor::new(format!("{prefix}.m.{name}"), vec![opt.m[k].len() as u32], conv(&opt.m[k])));
        out.push(Tensor::new(format!("{prefix}.v.{name}"), vec![opt.v[k].len() as u32], conv(&opt.v[k])));
    }
}

fn load_adam<T: Scalar>(prefix: &str, opt: &mut Adam<T>, names: &[String], source: &Checkpoint) -> Result<()> {
    opt.step = source.meta(&format!("{prefix}.step"))?.as_u64()?;
    for (k, name) in names.iter().enumerate() {
        for (which, dst) in [("m", &mut opt.m[k]), ("v", &mut opt.v[k])] {
            let t = source.meta(&format!("{prefix}.{which}.{name}"))?;
            if t.data.len() != dst.len() {
                return Err(Error::ShapeMismatch(format!("{prefix}.{which}.{name}")));
            }
            for (d, &v) in dst.iter_mut().zip(&t.data) {
                *d = T::lit(v as f64);
            }
        }
    }
    Ok(())
}

fn names<T: Scalar>(net: &Mlp<T>) -> Vec<String> {
    net.tensor_specs().into_iter().map(|(n, _)| n).collect()
}

const NETS: [&str; 5] = ["policy", "q1", "q2", "q1_targ", "q2_targ"];

/// Training-state metadata stored next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMeta {
    pub step: u64,
    pub beta: f64,
    pub mature: bool,
}

pub fn agent_checkpoint<T: Scalar>(agent: &Agent<T>, meta: TrainingMeta) -> Checkpoint {
    let mut params = Vec::new();
    let nets = [
        &agent.policy.net,
        &agent.critics.q[0].net,
        &agent.critics.q[1].net,
        &agent.critics.target[0].net,
        &agent.critics.target[1].net,
    ];
    for (prefix, net) in NETS.iter().zip(nets) {
        mlp_tensors(prefix, net, &mut params);
    }
    let mut m = vec![
        Tensor::from_u64("meta.step", meta.step),
        Tensor::scalar("meta.beta", meta.beta as f32),
        Tensor::scalar("meta.mature", if meta.mature { 1.0 } else { 0.0 }),
        Tensor::scalar("meta.log_alpha", agent.log_alpha.as_f64() as f32),
    ];
    adam_tensors("opt.policy", &agent.policy_opt, &names(&agent.policy.net), &mut m);
    adam_tensors("opt.q1", &agent.critic_opt[0], &names(&agent.critics.q[0].net), &mut m);
    adam_tensors("opt.q2", &agent.critic_opt[1], &names(&agent.critics.q[1].net), &mut m);
    adam_tensors("opt.alpha", &agent.alpha_opt, &["log_alpha".to_string()], &mut m);
    Checkpoint { params, meta: m }
}

/// Rebuilds an agent with architecture from `cfg` and state from the checkpoint.
pub fn agent_from_checkpoint<T: Scalar>(cfg: &AgentConfig, ckpt: &Checkpoint) -> Result<(Agent<T>, TrainingMeta)> {
    let mut agent = Agent::<T>::new(cfg.clone(), &mut crate::p2p_sac::stream(0, 0))?;
    load_mlp("policy", &mut agent.policy.net, &ckpt.params)?;
    load_mlp("q1", &mut agent.critics.q[0].net, &ckpt.params)?;
    load_mlp("q2", &mut agent.critics.q[1].net, &ckpt.params)?;
    load_mlp("q1_targ", &mut agent.critics.target[0].net, &ckpt.params)?;
    load_mlp("q2_targ", &mut agent.critics.target[1].net, &ckpt.params)?;
    agent.log_alpha = T::lit(ckpt.meta("meta.log_alpha")?.data[0] as f64);
    let pn = names(&agent.policy.net);
    let qn = names(&agent.critics.q[0].net);
    load_adam("opt.policy", &mut agent.policy_opt, &pn, ckpt)?;
    load_adam("opt.q1", &mut agent.critic_opt[0], &qn, ckpt)?;
    load_adam("opt.q2", &mut agent.critic_opt[1], &qn, ckpt)?;
    load_adam("opt.alpha", &mut agent.alpha_opt, &["log_alpha".to_string()], ckpt)?;
    let meta = TrainingMeta {
        step: ckpt.meta("meta.step")?.as_u64()?,
        beta: ckpt.meta("meta.beta")?.data[0] as f64,
        mature: ckpt.meta("meta.mature")?.data[0] != 0.0,
    };
    Ok((agent, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::p2p_sac::stream;

    fn agent() -> Agent<f32> {
        Agent::new(AgentConfig { hidden: vec![8, 8], ..AgentConfig::default() }, &mut stream(3, 0)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = agent();
        let meta = TrainingMeta { step: (1u64 << 40) + 7, beta: 10.0, mature: true };
        let ck = agent_checkpoint(&a, meta);
        let bytes = ck.encode().unwrap();
        assert_eq!(&bytes[..6], b"PRIPG1");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert!(back.bit_eq(&ck));
        let (b, m) = agent_from_checkpoint::<f32>(&a.cfg, &back).unwrap();
        assert_eq!(m, meta);
        assert_eq!(a, b);
        assert_eq!(agent_checkpoint(&b, meta).encode().unwrap(), bytes);
    }

    #[test]
    fn integers_survive_as_bit_patterns() {
        for v in [0u64, 1, 0x7FC0_0001, u64::MAX] {
            assert_eq!(Tensor::from_u64("x", v).as_u64().unwrap(), v);
        }
    }

    #[test]
    fn truncation_reports_an_offset() {
        let bytes = agent_checkpoint(&agent(), TrainingMeta { step: 0, beta: 0.0, mature: false }).encode().unwrap();
        for cut in [3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::decode(&bytes[..cut]) {
                Err(Error::CorruptContainer { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::CorruptContainer { offset: 0, .. })));
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::decode(&longer).is_err());
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let ck = agent_checkpoint(&agent(), TrainingMeta { step: 0, beta: 0.0, mature: false });
        let cfg = AgentConfig { hidden: vec![16, 8], ..AgentConfig::default() };
        assert!(agent_from_checkpoint::<f32>(&cfg, &ck).is_err());
    }
}
