//! Binary checkpoints of a search in progress.
//!
//! Layout (little-endian): `ZCKP`, u32 version, u64 payload length, then
//! the payload: u32 tensor count, the named tensors (u16 name length, name,
//! u8 rank, u32 extents, f64 values), and the generator blob (u32 length,
//! 32-byte seed, u64 stream, u128 word position). A u64 checksum over all
//! prior bytes closes the file: the first eight bytes of their SHA-256.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::search::{EpochRecord, SearchState};
use crate::supernet::Supernet;
use crate::tensor::{ParamId, Tensor};

pub const MAGIC: &[u8; 4] = b"ZCKP";
pub const VERSION: u32 = 1;
const RNG_BLOB_LEN: u32 = 32 + 8 + 16;

/// Position of a ChaCha generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Named tensors plus one generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub rng: RngState,
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::InvalidArgument(format!("tensor {name:?} cannot be encoded")));
            }
            payload.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            payload.extend_from_slice(nb);
            payload.push(t.rank() as u8);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("tensor {name:?} extent too large")))?;
                payload.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        payload.extend_from_slice(&RNG_BLOB_LEN.to_le_bytes());
        payload.extend_from_slice(&self.rng.seed);
        payload.extend_from_slice(&self.rng.stream.to_le_bytes());
        payload.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        let mut out = Vec::with_capacity(payload.len() + 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:02x?}, expected {:02x?}", MAGIC)));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let len = r.u64("payload length")?;
        let expected = 16u64.saturating_add(len).saturating_add(8);
        if bytes.len() as u64 != expected {
            return Err(Error::format(
                8,
                format!("payload length {len} implies {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        let actual = checksum(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::format(
                body_end as u64,
                format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}"),
            ));
        }
        r.bytes = &bytes[..body_end];
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let at = r.pos as u64;
            let nl = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(nl, "name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|n| n.checked_mul(8).is_some_and(|b| b <= body_end - r.pos))
                .ok_or_else(|| Error::format(at, format!("tensor {name:?} extents {shape:?} exceed the file")))?;
            let data = r
                .take(n * 8, "values")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            tensors.push((name, t));
        }
        let blob_at = r.pos as u64;
        let blob = r.u32("rng blob length")?;
        if blob != RNG_BLOB_LEN {
            return Err(Error::format(blob_at, format!("rng blob length {blob}, expected {RNG_BLOB_LEN}")));
        }
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        if r.pos != body_end {
            return Err(Error::format(r.pos as u64, format!("{} unread payload bytes", body_end - r.pos)));
        }
        Ok(Self {
            tensors,
            rng: RngState { seed, stream, word_pos },
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join_u64(lo: f64, hi: f64, what: &str) -> Result<u64> {
    let ok = |x: f64| x >= 0.0 && x < 4294967296.0 && x.fract() == 0.0;
    if !ok(lo) || !ok(hi) {
        return Err(Error::InvalidArgument(format!("corrupt integer field {what}")));
    }
    Ok(lo as u64 | (hi as u64) << 32)
}

fn as_count(x: f64, what: &str) -> Result<usize> {
    if x >= 0.0 && x.fract() == 0.0 && x < 9007199254740992.0 {
        Ok(x as usize)
    } else {
        Err(Error::InvalidArgument(format!("corrupt count field {what}")))
    }
}

fn stream_fields(s: &BatchStream) -> Vec<f64> {
    let mut v = vec![s.len as f64, s.batch_size as f64];
    v.extend(split_u64(s.seed));
    v.extend(split_u64(s.pass));
    v.push(s.pos as f64);
    v
}

fn stream_from(f: &[f64]) -> Result<BatchStream> {
    Ok(BatchStream {
        len: as_count(f[0], "stream length")?,
        batch_size: as_count(f[1], "batch size")?,
        seed: join_u64(f[2], f[3], "stream seed")?,
        pass: join_u64(f[4], f[5], "stream pass")?,
        pos: as_count(f[6], "stream position")?,
    })
}

fn push_optimizer(out: &mut Vec<(String, Tensor)>, prefix: &str, opt: &Optimizer, net: &Supernet) {
    let mut meta = vec![opt.state.lr];
    meta.extend(split_u64(opt.state.step));
    out.push((format!("{prefix}/meta"), Tensor::from_vec(meta)));
    for (id, bufs) in &opt.state.buffers {
        let name = net.store.name(*id);
        for (k, b) in bufs.iter().enumerate() {
            out.push((format!("{prefix}/{name}/{k}"), Tensor::from_vec(b.clone())));
        }
        let t = opt.state.param_steps.get(id).copied().unwrap_or(0);
        out.push((format!("{prefix}/{name}/steps"), Tensor::from_vec(split_u64(t).to_vec())));
    }
}

fn restore_optimizer(ck: &Checkpoint, prefix: &str, opt: &mut Optimizer, net: &Supernet) -> Result<()> {
    let meta = ck.get(&format!("{prefix}/meta"))?.data();
    if meta.len() != 3 {
        return Err(Error::InvalidArgument(format!("{prefix}/meta has {} fields", meta.len())));
    }
    opt.state.lr = meta[0];
    opt.state.step = join_u64(meta[1], meta[2], "optimizer step")?;
    let mut ids: Vec<ParamId> = Vec::new();
    for (name, _) in &ck.tensors {
        if let Some(pname) = name.strip_prefix(&format!("{prefix}/")).and_then(|r| r.strip_suffix("/steps")) {
            let id = net
                .store
                .find(pname)
                .ok_or_else(|| Error::InvalidArgument(format!("optimizer state for unknown parameter {pname}")))?;
            ids.push(id);
        }
    }
    for id in ids {
        let pname = net.store.name(id).to_string();
        let n = net.store.get(id).len();
        let mut bufs = Vec::new();
        while let Ok(t) = ck.get(&format!("{prefix}/{pname}/{}", bufs.len())) {
            if t.len() != n {
                return Err(Error::InvalidArgument(format!("optimizer buffer for {pname} has the wrong length")));
            }
            bufs.push(t.data().to_vec());
        }
        let steps = ck.get(&format!("{prefix}/{pname}/steps"))?.data();
        if steps.len() != 2 {
            return Err(Error::InvalidArgument(format!("step counter for {pname} is corrupt")));
        }
        opt.state.buffers.insert(id, bufs);
        opt.state.param_steps.insert(id, join_u64(steps[0], steps[1], "parameter steps")?);
    }
    Ok(())
}

const TRACE_COLS: usize = 8;

fn push_trace(out: &mut Vec<(String, Tensor)>, trace: &[EpochRecord], net: &Supernet) -> Result<()> {
    let cfg = &net.config;
    let (s, e, k, d) = (cfg.stages, cfg.edge_count(), cfg.kernel_sizes.len(), cfg.depths.len());
    let n = trace.len();
    let mut scalars = Vec::with_capacity(n * TRACE_COLS);
    let (mut ops, mut ks, mut ds) = (Vec::new(), Vec::new(), Vec::new());
    for r in trace {
        scalars.extend([
            r.epoch as f64,
            r.tau_eff,
            r.lambda,
            r.mu,
            r.expected_params,
            r.train_loss,
            r.val_loss,
            r.penalty,
        ]);
        ops.extend(r.op_probs.iter().flatten().flatten());
        ks.extend(r.kernel_probs.iter().flatten().flatten());
        ds.extend(r.depth_probs.iter().flatten());
    }
    out.push(("trace/scalars".into(), Tensor::new(vec![n, TRACE_COLS], scalars)?));
    out.push(("trace/op_probs".into(), Tensor::new(vec![n, s, e, 5], ops)?));
    out.push(("trace/kernel_probs".into(), Tensor::new(vec![n, s, e, k], ks)?));
    out.push(("trace/depth_probs".into(), Tensor::new(vec![n, s, d], ds)?));
    Ok(())
}

fn nest3(data: &[f64], a: usize, b: usize) -> Vec<Vec<Vec<f64>>> {
    let c = if a * b == 0 { 0 } else { data.len() / (a * b) };
    (0..a)
        .map(|i| (0..b).map(|j| data[(i * b + j) * c..(i * b + j + 1) * c].to_vec()).collect())
        .collect()
}

fn restore_trace(ck: &Checkpoint, net: &Supernet) -> Result<Vec<EpochRecord>> {
    let cfg = &net.config;
    let (s, e) = (cfg.stages, cfg.edge_count());
    let sc = ck.get("trace/scalars")?;
    let ops = ck.get("trace/op_probs")?;
    let ks = ck.get("trace/kernel_probs")?;
    let ds = ck.get("trace/depth_probs")?;
    let n = sc.shape().first().copied().unwrap_or(0);
    let expect = |t: &Tensor, shape: Vec<usize>, what: &str| {
        if t.shape() == shape.as_slice() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("trace tensor {what} has shape {:?}, expected {shape:?}", t.shape())))
        }
    };
    expect(sc, vec![n, TRACE_COLS], "scalars")?;
    expect(ops, vec![n, s, e, 5], "op_probs")?;
    expect(ks, vec![n, s, e, cfg.kernel_sizes.len()], "kernel_probs")?;
    expect(ds, vec![n, s, cfg.depths.len()], "depth_probs")?;
    let (op_n, k_n, d_n) = (s * e * 5, s * e * cfg.kernel_sizes.len(), s * cfg.depths.len());
    (0..n)
        .map(|i| {
            let r = &sc.data()[i * TRACE_COLS..(i + 1) * TRACE_COLS];
            let dp = &ds.data()[i * d_n..(i + 1) * d_n];
            Ok(EpochRecord {
                epoch: as_count(r[0], "trace epoch")?,
                tau_eff: r[1],
                lambda: r[2],
                mu: r[3],
                expected_params: r[4],
                train_loss: r[5],
                val_loss: r[6],
                penalty: r[7],
                op_probs: nest3(&ops.data()[i * op_n..(i + 1) * op_n], s, e),
                kernel_probs: nest3(&ks.data()[i * k_n..(i + 1) * k_n], s, e),
                depth_probs: dp.chunks(cfg.depths.len().max(1)).map(<[f64]>::to_vec).collect(),
            })
        })
        .collect()
}

/// Captures a search state together with the configuration that produced it.
pub fn encode_search(state: &SearchState, config: &RunConfig) -> Result<Checkpoint> {
    let text = config.to_text()?;
    let mut tensors = vec![(
        "meta/config".to_string(),
        Tensor::from_vec(text.bytes().map(f64::from).collect()),
    )];
    let mut sched = vec![state.epoch as f64];
    sched.extend(stream_fields(&state.train_stream));
    sched.extend(stream_fields(&state.val_stream));
    tensors.push(("meta/schedule".into(), Tensor::from_vec(sched)));
    for (_, name, t) in state.net.store.iter() {
        tensors.push((format!("param/{name}"), Tensor::new(t.shape().to_vec(), t.data().to_vec())?));
    }
    push_optimizer(&mut tensors, "opt_w", &state.opt_w, &state.net);
    push_optimizer(&mut tensors, "opt_arch", &state.opt_arch, &state.net);
    push_trace(&mut tensors, &state.trace, &state.net)?;
    Ok(Checkpoint {
        tensors,
        rng: RngState::capture(&state.rng),
    })
}

/// Rebuilds the configuration and search state from a checkpoint.
pub fn decode_search(ck: &Checkpoint) -> Result<(RunConfig, SearchState)> {
    let bytes: Vec<u8> = ck
        .get("meta/config")?
        .data()
        .iter()
        .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { Err(()) })
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument("embedded configuration is corrupt".into()))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::InvalidArgument("embedded configuration is not UTF-8".into()))?;
    let config = RunConfig::parse(&text)?;
    let sched = ck.get("meta/schedule")?.data();
    if sched.len() != 15 {
        return Err(Error::InvalidArgument(format!("schedule record has {} fields, expected 15", sched.len())));
    }
    let mut net = Supernet::build(config.supernet.clone(), config.search.seed)?;
    let ids: Vec<ParamId> = net.store.ids().collect();
    for id in ids {
        let name = net.store.name(id).to_string();
        let src = ck.get(&format!("param/{name}"))?;
        let dst = net.store.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter {name} has shape {:?} in the checkpoint, {:?} in the network",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    let mut opt_w = Optimizer::new(config.search.weight_rule(), config.search.lr_w);
    let mut opt_arch = Optimizer::new(config.search.arch_rule(), config.search.lr_alpha);
    restore_optimizer(ck, "opt_w", &mut opt_w, &net)?;
    restore_optimizer(ck, "opt_arch", &mut opt_arch, &net)?;
    let state = SearchState {
        trace: restore_trace(ck, &net)?,
        net,
        opt_w,
        opt_arch,
        rng: ck.rng.restore(),
        train_stream: stream_from(&sched[1..8])?,
        val_stream: stream_from(&sched[8..15])?,
        epoch: as_count(sched[0], "epoch")?,
    };
    Ok((config, state))
}

/// Writes a search checkpoint.
pub fn save_search(path: impl AsRef<Path>, state: &SearchState, config: &RunConfig) -> Result<()> {
    encode_search(state, config)?.save(path)
}

/// Reads a search checkpoint.
pub fn load_search(path: impl AsRef<Path>) -> Result<(RunConfig, SearchState)> {
    decode_search(&Checkpoint::load(path)?)
}
