use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::{DeformNet, FreqEncoding};
use crate::diffkernel::Array;
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::hashenc::{Aabb, HashColorField, HashGridConfig};
use crate::model::Model;
use crate::nn::Linear;
use crate::trainer::{Moments, OptimizerState, ParamGroup, TrainConfig};

pub const MAGIC: [u8; 4] = *b"DSPL";
pub const VERSION: u32 = 1;
/// Magic, version, profile byte and three padding bytes.
pub const HEADER_BYTES: usize = 12;
/// Tag, length and CRC32 around every section payload.
pub const SECTION_OVERHEAD: usize = 16;
/// Floats stored per point: position 3, rotation 4, log-scale 3, opacity
/// logit 1, mask logit 1, and 2 reserved zero words.
pub const POINT_FLOATS: usize = 14;
/// Per-point floats of the spherical-harmonics representation: 11
/// geometric values plus 48 degree-3 SH coefficients.
pub const SH_BASELINE_FLOATS: usize = 59;

pub const SECTION_CLOUD: u32 = 1;
pub const SECTION_DEFORM: u32 = 2;
pub const SECTION_HASH: u32 = 3;
pub const SECTION_CONFIG: u32 = 4;
pub const SECTION_PROGRESS: u32 = 5;
pub const SECTION_OPTIMIZER: u32 = 6;

/// Float width and contents of a checkpoint file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    /// f64 values plus optimizer state; reloads bit-exactly.
    Training,
    /// f32 values, no optimizer state; the size that [`StorageReport`] measures.
    Export,
}

impl Profile {
    fn byte(self) -> u8 {
        match self {
            Profile::Training => 0,
            Profile::Export => 1,
        }
    }

    fn float_bytes(self) -> usize {
        match self {
            Profile::Training => 8,
            Profile::Export => 4,
        }
    }
}

/// Everything a checkpoint carries.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub iteration: u64,
    pub extent: f64,
    pub optimizer: Option<OptimizerState>,
}

struct Writer {
    buf: Vec<u8>,
    profile: Profile,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    /// A value in the profile's float width.
    fn real(&mut self, v: f64) {
        match self.profile {
            Profile::Training => self.f64(v),
            Profile::Export => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    fn reals(&mut self, v: &[f64]) {
        for &x in v {
            self.real(x);
        }
    }
    fn linear(&mut self, l: &Linear) {
        self.u32(l.inputs() as u32);
        self.u32(l.outputs() as u32);
        self.reals(l.weight.data());
        self.reals(l.bias.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    profile: Profile,
    section: u32,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("section {} is truncated", self.section)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn real(&mut self) -> Result<f64> {
        match self.profile {
            Profile::Training => self.f64(),
            Profile::Export => Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64),
        }
    }
    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n.checked_mul(self.profile.float_bytes());
        if need.is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Checkpoint(format!("section {} is truncated", self.section)));
        }
        (0..n).map(|_| self.real()).collect()
    }
    fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn linear(&mut self) -> Result<Linear> {
        let (i, o) = (self.count()?, self.count()?);
        let weight = Array::new(vec![i, o], self.reals(i * o)?)?;
        let bias = Array::new(vec![1, o], self.reals(o)?)?;
        Ok(Linear { weight, bias })
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("section {} has {} trailing bytes", self.section, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn section(out: &mut Vec<u8>, tag: u32, payload: &[u8]) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

fn encode_cloud(w: &mut Writer, c: &GaussianCloud) {
    w.u64(c.len() as u64);
    for i in 0..c.len() {
        w.reals(c.mu.row(i));
        w.reals(c.rot.row(i));
        w.reals(c.log_scale.row(i));
        w.real(c.opacity_logit.data()[i]);
        w.real(c.mask_logit.data()[i]);
        w.real(0.0);
        w.real(0.0);
    }
}

fn decode_cloud(r: &mut Reader) -> Result<GaussianCloud> {
    let n = r.u64()? as usize;
    let vals = r.reals(n.checked_mul(POINT_FLOATS).ok_or_else(|| Error::Checkpoint("point count overflows".into()))?)?;
    let mut c = GaussianCloud::empty();
    let (mut mu, mut rot, mut ls, mut op, mut mk) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for p in vals.chunks_exact(POINT_FLOATS) {
        mu.extend_from_slice(&p[0..3]);
        rot.extend_from_slice(&p[3..7]);
        ls.extend_from_slice(&p[7..10]);
        op.push(p[10]);
        mk.push(p[11]);
    }
    c.mu = Array::new(vec![n, 3], mu)?;
    c.rot = Array::new(vec![n, 4], rot)?;
    c.log_scale = Array::new(vec![n, 3], ls)?;
    c.opacity_logit = Array::new(vec![n, 1], op)?;
    c.mask_logit = Array::new(vec![n, 1], mk)?;
    Ok(c)
}

fn encode_deform(w: &mut Writer, d: &DeformNet) {
    for e in [d.pos_enc, d.time_enc] {
        w.u32(e.levels as u32);
        w.u8(e.include_input as u8);
    }
    w.u32(d.hidden.len() as u32);
    w.u32(d.skip as u32);
    for l in d.layers() {
        w.linear(l);
    }
}

fn decode_deform(r: &mut Reader) -> Result<DeformNet> {
    let mut enc = || -> Result<FreqEncoding> {
        Ok(FreqEncoding {
            levels: r.count()?,
            include_input: r.u8()? != 0,
        })
    };
    let (pos_enc, time_enc) = (enc()?, enc()?);
    let depth = r.count()?;
    let skip = r.count()?;
    let hidden = (0..depth).map(|_| r.linear()).collect::<Result<Vec<_>>>()?;
    let heads = [r.linear()?, r.linear()?, r.linear()?, r.linear()?];
    Ok(DeformNet {
        pos_enc,
        time_enc,
        hidden,
        skip,
        heads,
    })
}

fn encode_hash(w: &mut Writer, f: &HashColorField) {
    let c = &f.config;
    for v in [c.levels, c.log2_table_size as usize, c.feat_dim, c.min_resolution, c.max_resolution, c.decoder_width] {
        w.u32(v as u32);
    }
    // The box stays f64 in both profiles so lookups normalize identically.
    for v in f.aabb.min.iter().chain(&f.aabb.max) {
        w.f64(*v);
    }
    w.reals(f.table.data());
    for l in &f.decoder {
        w.linear(l);
    }
}

fn decode_hash(r: &mut Reader) -> Result<HashColorField> {
    let config = HashGridConfig {
        levels: r.count()?,
        log2_table_size: r.u32()?,
        feat_dim: r.count()?,
        min_resolution: r.count()?,
        max_resolution: r.count()?,
        decoder_width: r.count()?,
    };
    if config.log2_table_size > 30 || config.levels == 0 || config.feat_dim == 0 || config.min_resolution == 0 {
        return Err(Error::Checkpoint("implausible hash grid configuration".into()));
    }
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = r.f64()?;
    }
    let aabb = Aabb {
        min: [b[0], b[1], b[2]],
        max: [b[3], b[4], b[5]],
    };
    let rows = config.levels * config.table_size();
    let table = Array::new(vec![rows, config.feat_dim], r.reals(rows * config.feat_dim)?)?;
    let decoder = [r.linear()?, r.linear()?, r.linear()?];
    Ok(HashColorField::from_parts(config, table, decoder, aabb))
}

fn encode_optimizer(w: &mut Writer, o: &OptimizerState) {
    w.u32(o.groups.len() as u32);
    for g in &o.groups {
        w.u32(g.name.len() as u32);
        w.buf.extend_from_slice(g.name.as_bytes());
        w.u64(g.step);
        w.u32(g.tensors.len() as u32);
        for t in &g.tensors {
            w.u64(t.m.len() as u64);
            t.m.iter().for_each(|&v| w.f64(v));
            t.v.iter().for_each(|&v| w.f64(v));
        }
    }
}

fn decode_optimizer(r: &mut Reader) -> Result<OptimizerState> {
    let n = r.count()?;
    let mut groups = Vec::new();
    for _ in 0..n {
        let len = r.count()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("group name is not UTF-8".into()))?;
        let step = r.u64()?;
        let k = r.count()?;
        let mut tensors = Vec::new();
        for _ in 0..k {
            let len = r.u64()? as usize;
            if len.checked_mul(16).is_none_or(|b| b > r.buf.len() - r.pos) {
                return Err(Error::Checkpoint("optimizer section is truncated".into()));
            }
            let m = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let v = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Moments { m, v });
        }
        groups.push(ParamGroup { name, step, tensors });
    }
    Ok(OptimizerState { groups })
}

/// Serializes `ck`. The export profile drops the optimizer state.
pub fn encode_checkpoint(ck: &Checkpoint, profile: Profile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[profile.byte(), 0, 0, 0]);
    let mut emit = |tag: u32, f: &dyn Fn(&mut Writer)| {
        let mut w = Writer { buf: Vec::new(), profile };
        f(&mut w);
        section(&mut out, tag, &w.buf);
    };
    emit(SECTION_CLOUD, &|w| encode_cloud(w, &ck.model.cloud));
    emit(SECTION_DEFORM, &|w| encode_deform(w, &ck.model.deform));
    emit(SECTION_HASH, &|w| encode_hash(w, &ck.model.field));
    emit(SECTION_CONFIG, &|w| w.buf.extend_from_slice(serde_json::to_string(&ck.config).expect("config json").as_bytes()));
    emit(SECTION_PROGRESS, &|w| {
        w.u64(ck.iteration);
        w.f64(ck.extent);
    });
    if let (Profile::Training, Some(o)) = (profile, &ck.optimizer) {
        emit(SECTION_OPTIMIZER, &|w| encode_optimizer(w, o));
    }
    out
}

/// Parses a checkpoint and reports its profile.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Checkpoint, Profile)> {
    if bytes.len() < HEADER_BYTES || bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let profile = match bytes[8] {
        0 => Profile::Training,
        1 => Profile::Export,
        p => return Err(Error::Checkpoint(format!("unknown profile {p}"))),
    };
    let mut pos = HEADER_BYTES;
    let mut sections: Vec<(u32, &[u8])> = Vec::new();
    while pos < bytes.len() {
        if bytes.len() - pos < 12 {
            return Err(Error::Checkpoint("truncated section header".into()));
        }
        let tag = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
        let start = pos + 12;
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| start.checked_add(l))
            .filter(|&e| e + 4 <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("section {tag} is truncated")))?;
        let payload = &bytes[start..end];
        let crc = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum { section: tag });
        }
        sections.push((tag, payload));
        pos = end + 4;
    }
    let find = |tag: u32| -> Result<Reader> {
        sections
            .iter()
            .find(|s| s.0 == tag)
            .map(|s| Reader {
                buf: s.1,
                pos: 0,
                profile,
                section: tag,
            })
            .ok_or_else(|| Error::Checkpoint(format!("missing section {tag}")))
    };
    let mut r = find(SECTION_CLOUD)?;
    let cloud = decode_cloud(&mut r)?;
    r.done()?;
    let mut r = find(SECTION_DEFORM)?;
    let deform = decode_deform(&mut r)?;
    r.done()?;
    let mut r = find(SECTION_HASH)?;
    let field = decode_hash(&mut r)?;
    r.done()?;
    let r = find(SECTION_CONFIG)?;
    let config: TrainConfig = serde_json::from_slice(r.buf).map_err(|e| Error::Checkpoint(format!("config section: {e}")))?;
    let mut r = find(SECTION_PROGRESS)?;
    let iteration = r.u64()?;
    let extent = r.f64()?;
    r.done()?;
    let optimizer = match find(SECTION_OPTIMIZER) {
        Ok(mut r) => {
            let o = decode_optimizer(&mut r)?;
            r.done()?;
            Some(o)
        }
        Err(_) => None,
    };
    Ok((
        Checkpoint {
            model: Model { cloud, deform, field },
            config,
            iteration,
            extent,
            optimizer,
        },
        profile,
    ))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint, profile: Profile) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck, profile)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Profile)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Export-profile storage accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub points: usize,
    pub point_floats: usize,
    pub bytes_per_float: usize,
    /// `points * point_floats * bytes_per_float`.
    pub point_bytes: usize,
    pub deform_bytes: usize,
    pub hash_table_bytes: usize,
    pub decoder_bytes: usize,
    pub shared_bytes: usize,
    /// Header, section framing, config echo and progress record.
    pub overhead_bytes: usize,
    pub total_bytes: usize,
    pub total_mb: f64,
    pub point_mb: f64,
    pub shared_mb: f64,
    /// `points * 59 * 4` bytes of the SH representation.
    pub sh_baseline_bytes: usize,
    pub sh_baseline_mb: f64,
    /// `point_floats / 59`.
    pub point_ratio_vs_sh: f64,
}

const MB: f64 = 1e6;

impl StorageReport {
    /// Accounting for `points` points and shared networks of the given size.
    pub fn from_parts(points: usize, deform_params: usize, table_entries: usize, decoder_params: usize, overhead_bytes: usize) -> Self {
        let f = 4;
        let point_bytes = points * POINT_FLOATS * f;
        let deform_bytes = deform_params * f;
        let hash_table_bytes = table_entries * f;
        let decoder_bytes = decoder_params * f;
        let shared_bytes = deform_bytes + hash_table_bytes + decoder_bytes;
        let total_bytes = point_bytes + shared_bytes + overhead_bytes;
        let sh = points * SH_BASELINE_FLOATS * f;
        Self {
            points,
            point_floats: POINT_FLOATS,
            bytes_per_float: f,
            point_bytes,
            deform_bytes,
            hash_table_bytes,
            decoder_bytes,
            shared_bytes,
            overhead_bytes,
            total_bytes,
            total_mb: total_bytes as f64 / MB,
            point_mb: point_bytes as f64 / MB,
            shared_mb: shared_bytes as f64 / MB,
            sh_baseline_bytes: sh,
            sh_baseline_mb: sh as f64 / MB,
            point_ratio_vs_sh: POINT_FLOATS as f64 / SH_BASELINE_FLOATS as f64,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "points                {}\n\
             point payload         {} B ({} x {} f32) = {:.3} MB\n\
             deformation network   {} B\n\
             hash tables           {} B\n\
             color decoder         {} B\n\
             shared networks       {:.3} MB\n\
             framing + metadata    {} B\n\
             total (export)        {:.3} MB\n\
             SH baseline points    {:.3} MB ({} x {} f32)\n\
             per-point ratio       {:.4} ({} / {} floats)\n",
            self.points,
            self.point_bytes,
            self.points,
            self.point_floats,
            self.point_mb,
            self.deform_bytes,
            self.hash_table_bytes,
            self.decoder_bytes,
            self.shared_mb,
            self.overhead_bytes,
            self.total_mb,
            self.sh_baseline_mb,
            self.points,
            SH_BASELINE_FLOATS,
            self.point_ratio_vs_sh,
            self.point_floats,
            SH_BASELINE_FLOATS,
        )
    }
}

/// Storage accounting of `ck` in the export profile. `total_bytes` equals
/// the size of the exported file.
pub fn storage_report(ck: &Checkpoint) -> StorageReport {
    let m = &ck.model;
    let deform = m.deform.parameter_count();
    let table = m.field.table.len();
    let decoder = m.field.parameter_count() - table;
    let file = encode_checkpoint(ck, Profile::Export).len();
    let payload = (m.cloud.len() * POINT_FLOATS + deform + table + decoder) * 4;
    StorageReport::from_parts(m.cloud.len(), deform, table, decoder, file - payload)
}
