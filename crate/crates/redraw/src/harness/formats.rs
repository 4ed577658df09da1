//! On-disk formats: datasets, checkpoints, metrics. Binary formats are
//! little-endian and open with an 8-byte magic string plus a format version,
//! so a wrong file is rejected before any payload is touched. Round-trips are
//! bit-exact; tests compare raw f64 bits, not values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::envs::Episode;
use crate::error::{Error, Result};
use crate::gradcore::{Adam, Array, ParameterStore};

pub const DATASET_MAGIC: &[u8; 8] = b"REDRAWDS";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"REDRAWCK";
pub const FORMAT_VERSION: u32 = 1;

/// Writes via a temp file in the same directory, then renames over the
/// target, so readers never observe a half-written file and an aborted run
/// keeps its previous checkpoint intact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("out");
    let tmp = dir.join(format!(".{stem}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Little-endian encode/decode helpers.

#[derive(Default)]
struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
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

    fn f64s(&mut self, xs: &[f64]) {
        self.buf.reserve(xs.len() * 8);
        for &x in xs {
            self.f64(x);
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], path: &Path) -> Self {
        ByteReader { buf, pos: 0, path: path.display().to_string() }
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.clone(), detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("invalid utf-8 in string field"))
    }

    fn expect_magic(&mut self, magic: &[u8; 8], what: &str) -> Result<()> {
        let got = self.take(8)?;
        if got != magic {
            return Err(self.fail(format!("not a {what} file (bad magic)")));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.fail(format!(
                "unsupported {what} format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Datasets.

/// Collection metadata stamped into every dataset file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub policy_id: String,
    pub env: String,
    pub variant: String,
    pub seed: u64,
}

/// The raw contents of a dataset file. Reward-free files store (x, a,
/// continue) per transition; reward-bearing files add the reward scalar.
/// Episodes loaded from a reward-free file have empty `rewards` vectors.
#[derive(Clone, Debug)]
pub struct StoredDataset {
    pub meta: DatasetMeta,
    pub has_rewards: bool,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub episodes: Vec<Episode>,
}

impl StoredDataset {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }
}

pub fn write_dataset(
    path: &Path,
    episodes: &[Episode],
    meta: &DatasetMeta,
    with_rewards: bool,
) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::Schema("refusing to write a dataset with no episodes".into()));
    }
    let obs_dim = episodes[0].obs[0].len();
    let act_dim = episodes[0].actions[0].len();
    for (i, ep) in episodes.iter().enumerate() {
        let n = ep.len();
        let ok = n > 0
            && ep.obs.len() == n + 1
            && ep.continues.len() == n
            && (!with_rewards || ep.rewards.len() == n)
            && ep.obs.iter().all(|o| o.len() == obs_dim)
            && ep.actions.iter().all(|a| a.len() == act_dim);
        if !ok {
            return Err(Error::Schema(format!("episode {i} is malformed or inconsistent")));
        }
    }

    let mut w = ByteWriter::default();
    w.buf.extend_from_slice(DATASET_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(with_rewards as u8);
    w.str(&meta.policy_id);
    w.str(&meta.env);
    w.str(&meta.variant);
    w.u64(meta.seed);
    w.u32(obs_dim as u32);
    w.u32(act_dim as u32);
    w.u32(episodes.len() as u32);
    for ep in episodes {
        let n = ep.len();
        w.u32(n as u32);
        for o in &ep.obs {
            w.f64s(o);
        }
        for a in &ep.actions {
            w.f64s(a);
        }
        for &c in &ep.continues {
            w.u8(c as u8);
        }
        if with_rewards {
            w.f64s(&ep.rewards);
        }
    }
    atomic_write(path, &w.buf)
}

fn read_dataset(path: &Path) -> Result<StoredDataset> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(DATASET_MAGIC, "dataset")?;
    let has_rewards = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(r.fail(format!("bad has_rewards flag {other}"))),
    };
    let meta = DatasetMeta {
        policy_id: r.str()?,
        env: r.str()?,
        variant: r.str()?,
        seed: r.u64()?,
    };
    let obs_dim = r.u32()? as usize;
    let act_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(r.fail("zero-length episode"));
        }
        let mut obs = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            obs.push(r.f64s(obs_dim)?);
        }
        let mut actions = Vec::with_capacity(n);
        for _ in 0..n {
            actions.push(r.f64s(act_dim)?);
        }
        let mut continues = Vec::with_capacity(n);
        for _ in 0..n {
            continues.push(match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(r.fail(format!("bad continue flag {other}"))),
            });
        }
        let rewards = if has_rewards { r.f64s(n)? } else { Vec::new() };
        episodes.push(Episode { obs, actions, rewards, continues });
    }
    r.done()?;
    Ok(StoredDataset { meta, has_rewards, obs_dim, act_dim, episodes })
}

/// Reward-free episodes of (x, a, continue). Loading a reward-bearing file
/// into this type is a schema error, not a silent strip.
#[derive(Clone, Debug)]
pub struct OfflineDataset(pub StoredDataset);

impl OfflineDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let ds = read_dataset(path)?;
        if ds.has_rewards {
            return Err(Error::Schema(format!(
                "{} carries rewards; this phase expects a reward-free dataset",
                path.display()
            )));
        }
        Ok(OfflineDataset(ds))
    }
}

/// Reward-bearing episodes, the schema the pretraining buffer would dump and
/// the only one reward-consuming adaptation may read.
#[derive(Clone, Debug)]
pub struct RewardDataset(pub StoredDataset);

impl RewardDataset {
    pub fn load(path: &Path) -> Result<Self> {
        let ds = read_dataset(path)?;
        if !ds.has_rewards {
            return Err(Error::Schema(format!(
                "{} is reward-free; this phase needs reward labels",
                path.display()
            )));
        }
        Ok(RewardDataset(ds))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints.

/// One named array in a checkpoint, tagged with its parameter group. Entries
/// in group "aux" are bookkeeping (optimizer moments, rng positions, counters,
/// embedded config) rather than model parameters.
#[derive(Clone, Debug)]
pub struct CkEntry {
    pub group: String,
    pub value: Array,
}

/// A checkpoint is a manifest of (name, group, dtype, shape, byte offset)
/// records plus one flat little-endian f64 blob. Round-trips are bit-exact.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, CkEntry>,
}

pub const AUX_GROUP: &str = "aux";

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, name: &str, group: &str, value: Array) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate checkpoint entry {name}")));
        }
        self.entries.insert(name.to_string(), CkEntry { group: group.to_string(), value });
        Ok(())
    }

    pub fn put_scalar(&mut self, name: &str, v: f64) -> Result<()> {
        self.put(name, AUX_GROUP, Array::scalar(v))
    }

    /// Stores a u128 (rng word position) as two bit-cast f64 halves, so the
    /// all-f64 blob can carry it exactly.
    pub fn put_u128(&mut self, name: &str, v: u128) -> Result<()> {
        let lo = f64::from_bits(v as u64);
        let hi = f64::from_bits((v >> 64) as u64);
        self.put(name, AUX_GROUP, Array::new(vec![2], vec![lo, hi])?)
    }

    /// Stores a string one byte per f64 element.
    pub fn put_string(&mut self, name: &str, s: &str) -> Result<()> {
        let data: Vec<f64> = s.bytes().map(|b| b as f64).collect();
        let shape = vec![data.len().max(1)];
        let arr = if data.is_empty() { Array::zeros(shape) } else { Array::new(shape, data)? };
        self.put(name, AUX_GROUP, arr)
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing checkpoint entry {name}")))
    }

    pub fn maybe(&self, name: &str) -> Option<&Array> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.array(name)?.item())
    }

    pub fn u128(&self, name: &str) -> Result<u128> {
        let a = self.array(name)?;
        if a.numel() != 2 {
            return Err(Error::Checkpoint(format!("{name} is not a stored u128")));
        }
        let lo = a.data()[0].to_bits() as u128;
        let hi = a.data()[1].to_bits() as u128;
        Ok((hi << 64) | lo)
    }

    pub fn string(&self, name: &str) -> Result<String> {
        let a = self.array(name)?;
        let bytes: Vec<u8> = a.data().iter().map(|&v| v as u8).collect();
        String::from_utf8(bytes)
            .map_err(|_| Error::Checkpoint(format!("{name} is not a stored string")))
    }

    /// Copies every parameter (with its group) out of the store.
    pub fn put_store(&mut self, store: &ParameterStore) -> Result<()> {
        for (name, entry) in store.iter() {
            self.put(name, &entry.group, entry.value.clone())?;
        }
        Ok(())
    }

    /// Rebuilds a store from every non-aux entry.
    pub fn restore_store(&self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for (name, entry) in &self.entries {
            if entry.group != AUX_GROUP {
                store.insert(name, &entry.group, entry.value.clone())?;
            }
        }
        Ok(store)
    }

    pub fn put_adam(&mut self, prefix: &str, opt: &Adam) -> Result<()> {
        for (name, arr) in opt.to_entries(prefix) {
            self.put(&name, AUX_GROUP, arr)?;
        }
        Ok(())
    }

    /// Restores an optimizer saved under `prefix`; `lr` comes from config,
    /// moments and step count from the checkpoint.
    pub fn restore_adam(&self, prefix: &str, lr: f64) -> Adam {
        let mut opt = Adam::new(lr);
        let scoped: BTreeMap<String, Array> = self
            .entries
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(name, e)| (name.clone(), e.value.clone()))
            .collect();
        opt.restore_entries(prefix, &scoped);
        opt
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = ByteWriter::default();
        let mut blob = ByteWriter::default();
        manifest.buf.extend_from_slice(CHECKPOINT_MAGIC);
        manifest.u32(FORMAT_VERSION);
        manifest.u32(self.entries.len() as u32);
        for (name, entry) in &self.entries {
            manifest.str(name);
            manifest.str(&entry.group);
            manifest.str("f64");
            let shape = entry.value.shape();
            manifest.u32(shape.len() as u32);
            for &d in shape {
                manifest.u64(d as u64);
            }
            manifest.u64(blob.buf.len() as u64);
            blob.f64s(entry.value.data());
        }
        manifest.u64(blob.buf.len() as u64);
        manifest.buf.extend_from_slice(&blob.buf);
        atomic_write(path, &manifest.buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes, path);
        r.expect_magic(CHECKPOINT_MAGIC, "checkpoint")?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let group = r.str()?;
            let dtype = r.str()?;
            if dtype != "f64" {
                return Err(r.fail(format!("unsupported dtype {dtype} for {name}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            manifest.push((name, group, shape, offset));
        }
        let blob_len = r.u64()? as usize;
        let blob = r.take(blob_len)?;
        r.done()?;

        let mut out = Checkpoint::new();
        for (name, group, shape, offset) in manifest {
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if end > blob.len() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("entry {name} overruns the blob"),
                });
            }
            let data: Vec<f64> = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.put(&name, &group, Array::new(shape, data)?)?;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Metrics.

pub const METRICS_HEADER: &str = "phase,step,metric,value,seed";

/// Append-only CSV of (phase, step, metric, value, seed) rows. Steps must be
/// non-decreasing within a phase and are zero-padded to 9 digits so plain
/// lexicographic sorting agrees with numeric order. Values use the default
/// f64 debug formatting, the shortest string that round-trips the bits, so a
/// deterministic run produces a byte-identical file. Wall-clock timings go to
/// a separate sidecar and never into this file.
pub struct MetricsWriter {
    out: BufWriter<fs::File>,
    seed: u64,
    last_step: BTreeMap<String, u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path, seed: u64) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out, seed, last_step: BTreeMap::new() })
    }

    /// Reopens an existing file for append (used on resume), seeding the
    /// per-phase monotonicity state from the rows already present.
    pub fn open_or_create(path: &Path, seed: u64) -> Result<Self> {
        if !path.exists() {
            return Self::create(path, seed);
        }
        let rows = read_metrics(path)?;
        let mut last_step = BTreeMap::new();
        for row in &rows {
            let step: u64 = row
                .step
                .parse()
                .map_err(|_| Error::Format {
                    path: path.display().to_string(),
                    detail: format!("bad step field {}", row.step),
                })?;
            last_step.insert(row.phase.clone(), step);
        }
        let out = BufWriter::new(fs::OpenOptions::new().append(true).open(path)?);
        Ok(MetricsWriter { out, seed, last_step })
    }

    pub fn record(&mut self, phase: &str, step: u64, metric: &str, value: f64) -> Result<()> {
        if let Some(&last) = self.last_step.get(phase) {
            if step < last {
                return Err(Error::Format {
                    path: "metrics".into(),
                    detail: format!("step {step} after {last} in phase {phase}"),
                });
            }
        }
        self.last_step.insert(phase.to_string(), step);
        writeln!(self.out, "{phase},{step:09},{metric},{value:?},{}", self.seed)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// One parsed metrics row. Fields stay as the exact strings written, so
/// exports reproduce rows byte for byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricsRow {
    pub phase: String,
    pub step: String,
    pub metric: String,
    pub value: String,
    pub seed: String,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let fail = |detail: String| Error::Format { path: path.display().to_string(), detail };
    match lines.next() {
        Some(Ok(h)) if h == METRICS_HEADER => {}
        Some(Ok(h)) => return Err(fail(format!("bad header {h:?}"))),
        Some(Err(e)) => return Err(e.into()),
        None => return Err(fail("empty metrics file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(fail(format!("line {}: wanted 5 fields, got {}", i + 2, parts.len())));
        }
        rows.push(MetricsRow {
            phase: parts[0].to_string(),
            step: parts[1].to_string(),
            metric: parts[2].to_string(),
            value: parts[3].to_string(),
            seed: parts[4].to_string(),
        });
    }
    Ok(rows)
}

/// Splits a run's metrics into one file per (phase, metric) series under
/// `run_dir/export/`, rows sorted lexicographically by (phase, step) and
/// byte-identical to the originals. Returns the files written.
pub fn export_metrics(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics_path = run_dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(Error::Format {
            path: metrics_path.display().to_string(),
            detail: "no metrics found in run dir".into(),
        });
    }
    let mut rows = read_metrics(&metrics_path)?;
    rows.sort_by(|a, b| (&a.phase, &a.step).cmp(&(&b.phase, &b.step)));

    let export_dir = run_dir.join("export");
    fs::create_dir_all(&export_dir)?;
    let mut by_series: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for row in &rows {
        by_series
            .entry((row.phase.clone(), row.metric.clone()))
            .or_default()
            .push(row);
    }
    let mut written = Vec::new();
    for ((phase, metric), series) in &by_series {
        let path = export_dir.join(format!("{phase}_{metric}.csv"));
        let mut buf = String::from(METRICS_HEADER);
        buf.push('\n');
        for row in series {
            buf.push_str(&format!(
                "{},{},{},{},{}\n",
                row.phase, row.step, row.metric, row.value, row.seed
            ));
        }
        atomic_write(&path, buf.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Wall-clock sidecar, one "phase,step,millis" line per note. Kept out of
/// metrics.csv so that file stays deterministic for a fixed config and seed.
pub struct TimingsWriter {
    out: BufWriter<fs::File>,
}

impl TimingsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(TimingsWriter { out: BufWriter::new(file) })
    }

    pub fn note(&mut self, phase: &str, step: u64, millis: u128) -> Result<()> {
        writeln!(self.out, "{phase},{step},{millis}")?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{RngStream, StreamId};
    use std::collections::BTreeMap;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("redraw_fmt_{}_{name}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn fake_episode(n: usize, obs_dim: usize, act_dim: usize, salt: f64) -> Episode {
        let mut ep = Episode::default();
        for i in 0..=n {
            ep.obs.push((0..obs_dim).map(|d| salt + i as f64 + 0.01 * d as f64).collect());
        }
        for i in 0..n {
            ep.actions.push((0..act_dim).map(|d| -salt + i as f64 + 0.1 * d as f64).collect());
            ep.rewards.push(salt * i as f64 + 0.123456789);
            ep.continues.push(i != n - 1 || n % 2 == 0);
        }
        ep
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let eps = vec![fake_episode(5, 3, 2, 0.7), fake_episode(2, 3, 2, -1.3)];
        let meta = DatasetMeta {
            policy_id: "expert".into(),
            env: "pendulum".into(),
            variant: "target".into(),
            seed: 42,
        };
        let path = tmp("roundtrip.ds");
        write_dataset(&path, &eps, &meta, true).unwrap();
        let ds = RewardDataset::load(&path).unwrap().0;
        assert_eq!(ds.meta, meta);
        assert_eq!(ds.obs_dim, 3);
        assert_eq!(ds.act_dim, 2);
        assert_eq!(ds.episodes.len(), 2);
        for (a, b) in ds.episodes.iter().zip(&eps) {
            assert_eq!(a.continues, b.continues);
            for (x, y) in a.obs.iter().zip(&b.obs) {
                for (u, v) in x.iter().zip(y) {
                    assert_eq!(u.to_bits(), v.to_bits());
                }
            }
            for (x, y) in a.actions.iter().zip(&b.actions) {
                for (u, v) in x.iter().zip(y) {
                    assert_eq!(u.to_bits(), v.to_bits());
                }
            }
            for (u, v) in a.rewards.iter().zip(&b.rewards) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn reward_flag_gates_both_loaders() {
        let eps = vec![fake_episode(4, 2, 1, 0.5)];
        let meta = DatasetMeta {
            policy_id: "random".into(),
            env: "spinner".into(),
            variant: "source".into(),
            seed: 7,
        };
        let free = tmp("free.ds");
        let full = tmp("full.ds");
        write_dataset(&free, &eps, &meta, false).unwrap();
        write_dataset(&full, &eps, &meta, true).unwrap();

        assert!(OfflineDataset::load(&free).is_ok());
        assert!(RewardDataset::load(&full).is_ok());
        assert!(matches!(OfflineDataset::load(&full), Err(Error::Schema(_))));
        assert!(matches!(RewardDataset::load(&free), Err(Error::Schema(_))));
        // Reward-free files drop the reward floats entirely.
        let loaded = OfflineDataset::load(&free).unwrap().0;
        assert!(loaded.episodes[0].rewards.is_empty());
        assert_eq!(loaded.episodes[0].continues, eps[0].continues);
    }

    #[test]
    fn wrong_magic_and_truncation_are_format_errors() {
        let path = tmp("junk.ds");
        fs::write(&path, b"NOTMAGIC....").unwrap();
        assert!(matches!(OfflineDataset::load(&path), Err(Error::Format { .. })));

        let eps = vec![fake_episode(3, 2, 1, 0.2)];
        let meta = DatasetMeta {
            policy_id: "x".into(),
            env: "pendulum".into(),
            variant: "source".into(),
            seed: 0,
        };
        let good = tmp("cut.ds");
        write_dataset(&good, &eps, &meta, false).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&good, &bytes).unwrap();
        assert!(matches!(OfflineDataset::load(&good), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(9, StreamId::Init);
        let mut data = Vec::new();
        for _ in 0..12 {
            data.push(rng.normal() * 1e3);
        }
        store.insert("enc/w", "encoder", Array::new(vec![3, 4], data).unwrap()).unwrap();
        store.insert("enc/b", "encoder", Array::new(vec![4], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e-300]).unwrap()).unwrap();

        let mut opt = Adam::new(1e-3);
        let mut grads = BTreeMap::new();
        grads.insert("enc/b".to_string(), Array::new(vec![4], vec![1.0, -2.0, 0.5, 0.25]).unwrap());
        opt.step(&mut store, &grads).unwrap();

        let mut ck = Checkpoint::new();
        ck.put_store(&store).unwrap();
        ck.put_adam("opt/wm", &opt).unwrap();
        ck.put_scalar("meta/env_steps", 12345.0).unwrap();
        ck.put_u128("rng/collect", (7u128 << 64) | 0xdead_beef).unwrap();
        ck.put_string("meta/config", "[run]\nenv = pendulum\n").unwrap();

        let path = tmp("roundtrip.ck");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        assert_eq!(back.entries.len(), ck.entries.len());
        for (name, entry) in &ck.entries {
            let got = back.array(name).unwrap();
            assert_eq!(got.shape(), entry.value.shape(), "{name}");
            assert!(got.bits_eq(&entry.value), "{name} changed bits");
            assert_eq!(back.entries[name].group, entry.group);
        }
        assert_eq!(back.u128("rng/collect").unwrap(), (7u128 << 64) | 0xdead_beef);
        assert_eq!(back.string("meta/config").unwrap(), "[run]\nenv = pendulum\n");

        let store2 = back.restore_store().unwrap();
        assert!(store2.get("enc/w").unwrap().bits_eq(store.get("enc/w").unwrap()));
        assert_eq!(store2.group_of("enc/w").unwrap(), "encoder");
        assert!(store2.get("opt/wm/step_count").is_err(), "aux entries must stay out of the store");

        let opt2 = back.restore_adam("opt/wm", 1e-3);
        assert_eq!(opt2.step_count(), 1);
        let e1 = opt.to_entries("opt/wm");
        let e2 = opt2.to_entries("opt/wm");
        assert_eq!(e1.len(), e2.len());
        for ((n1, a1), (n2, a2)) in e1.iter().zip(&e2) {
            assert_eq!(n1, n2);
            assert!(a1.bits_eq(a2));
        }
    }

    #[test]
    fn duplicate_checkpoint_entries_are_rejected() {
        let mut ck = Checkpoint::new();
        ck.put_scalar("x", 1.0).unwrap();
        assert!(matches!(ck.put_scalar("x", 2.0), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn metrics_rows_and_monotonicity() {
        let path = tmp("metrics.csv");
        let mut w = MetricsWriter::create(&path, 3).unwrap();
        w.record("pretrain", 100, "wm_total", 1.5).unwrap();
        w.record("pretrain", 100, "eval_return", -0.25).unwrap();
        w.record("pretrain", 250, "wm_total", 0.125).unwrap();
        w.record("adapt", 10, "adapt_kl", 2.0).unwrap();
        assert!(w.record("pretrain", 99, "wm_total", 0.0).is_err(), "step went backwards");
        w.flush().unwrap();

        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].step, "000000100");
        assert_eq!(rows[0].value, "1.5");
        assert_eq!(rows[1].value, "-0.25");
        assert_eq!(rows[3].phase, "adapt");
        assert_eq!(rows[3].seed, "3");

        // Reopening for append keeps the monotonic state.
        drop(w);
        let mut w2 = MetricsWriter::open_or_create(&path, 3).unwrap();
        assert!(w2.record("adapt", 5, "adapt_kl", 1.0).is_err());
        w2.record("adapt", 11, "adapt_kl", 1.0).unwrap();
        w2.flush().unwrap();
        assert_eq!(read_metrics(&path).unwrap().len(), 5);
    }

    #[test]
    fn export_splits_series_and_keeps_rows_verbatim() {
        let dir = std::env::temp_dir().join(format!("redraw_export_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let mut w = MetricsWriter::create(&dir.join("metrics.csv"), 11).unwrap();
        w.record("pretrain", 1, "a", 0.1).unwrap();
        w.record("pretrain", 2, "b", 0.2).unwrap();
        w.record("pretrain", 3, "a", 0.3).unwrap();
        w.record("adapt", 1, "a", 0.4).unwrap();
        w.flush().unwrap();

        let files = export_metrics(&dir).unwrap();
        assert_eq!(files.len(), 3);
        let a = fs::read_to_string(dir.join("export/pretrain_a.csv")).unwrap();
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "pretrain,000000001,a,0.1,11");
        assert_eq!(lines[2], "pretrain,000000003,a,0.3,11");
        assert_eq!(lines.len(), 3);
        // Total exported rows equal the rows appended.
        let total: usize = files
            .iter()
            .map(|f| read_metrics(f).unwrap().len())
            .sum();
        assert_eq!(total, 4);

        assert!(export_metrics(&dir.join("missing")).is_err());
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let path = tmp("atomic.bin");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
    }
}
