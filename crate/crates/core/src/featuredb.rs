//! Append-only store of extracted video features, partitioned by task.
//!
//! Layout: magic `CTVRFDB1`, `u32` version, `u32` width, `u64` record count,
//! then records of `u32` task, `u64` video id, `u32` category and `width`
//! little-endian `f32` values. Appends write the new records first and only
//! then rewrite the count, so a reader never sees a half-written record.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"CTVRFDB1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
const COUNT_OFFSET: u64 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatureRecord {
    pub task: u32,
    pub video_id: u64,
    pub category: u32,
    pub feature: Vec<f32>,
}

/// Features and id columns of a contiguous range of tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    /// `[n, width]`; `None` when the range is empty.
    pub features: Option<Tensor>,
    pub video_ids: Vec<u64>,
    pub tasks: Vec<u32>,
    pub categories: Vec<u32>,
}

impl FeatureBlock {
    pub fn len(&self) -> usize {
        self.video_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    width: usize,
    records: Vec<VideoFeatureRecord>,
}

fn record_len(width: usize) -> usize {
    16 + 4 * width
}

impl FeatureStore {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(dim_err!("feature width must be positive"));
        }
        Ok(Self {
            width,
            records: Vec::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[VideoFeatureRecord] {
        &self.records
    }

    pub fn max_task(&self) -> u32 {
        self.records.last().map_or(0, |r| r.task)
    }

    fn check_append(&self, t: u32, records: &[VideoFeatureRecord]) -> Result<()> {
        if t <= self.max_task() {
            return Err(Error::Protocol(format!(
                "task {t} appended after task {}",
                self.max_task()
            )));
        }
        let mut ids = BTreeSet::new();
        for r in records {
            if r.task != t {
                return Err(Error::Protocol(format!("record of task {} in append for task {t}", r.task)));
            }
            if r.feature.len() != self.width {
                return Err(dim_err!("feature width {} != store width {}", r.feature.len(), self.width));
            }
            if !ids.insert(r.video_id) {
                return Err(Error::Protocol(format!("duplicate video {} in task {t}", r.video_id)));
            }
        }
        Ok(())
    }

    /// Appends the records of task `t`, which must exceed every stored task.
    pub fn append_task_features(&mut self, t: u32, records: Vec<VideoFeatureRecord>) -> Result<()> {
        self.check_append(t, &records)?;
        self.records.extend(records);
        Ok(())
    }

    /// Records with `task <= up_to_task`, in append order.
    pub fn load_range(&self, up_to_task: u32) -> FeatureBlock {
        let chosen: Vec<&VideoFeatureRecord> = self.records.iter().take_while(|r| r.task <= up_to_task).collect();
        let features = (!chosen.is_empty()).then(|| {
            let data = chosen
                .iter()
                .flat_map(|r| r.feature.iter().map(|&v| v as f64))
                .collect();
            Tensor::new(vec![chosen.len(), self.width], data).expect("nonempty block")
        });
        FeatureBlock {
            features,
            video_ids: chosen.iter().map(|r| r.video_id).collect(),
            tasks: chosen.iter().map(|r| r.task).collect(),
            categories: chosen.iter().map(|r| r.category).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = header(self.width, self.records.len() as u64);
        for r in &self.records {
            encode_record(&mut out, r);
        }
        out
    }

    /// Parses a whole file. Bytes past the committed count are ignored.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("feature store shorter than its header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad feature store magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported feature store version {version}")));
        }
        let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if width == 0 {
            return Err(Error::Format("feature width is zero".into()));
        }
        let rl = record_len(width);
        let need = (count as usize)
            .checked_mul(rl)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format("record count overflows".into()))?;
        if bytes.len() < need {
            return Err(Error::Format(format!(
                "truncated feature store: {} bytes, {need} expected",
                bytes.len()
            )));
        }
        let mut store = Self::new(width)?;
        let mut records = Vec::with_capacity(count as usize);
        for i in 0..count as usize {
            let b = &bytes[HEADER_LEN + i * rl..HEADER_LEN + (i + 1) * rl];
            records.push(VideoFeatureRecord {
                task: u32::from_le_bytes(b[0..4].try_into().unwrap()),
                video_id: u64::from_le_bytes(b[4..12].try_into().unwrap()),
                category: u32::from_le_bytes(b[12..16].try_into().unwrap()),
                feature: b[16..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            });
        }
        // Re-validate ordering and uniqueness through the append path.
        let mut start = 0;
        while start < records.len() {
            let t = records[start].task;
            let end = start + records[start..].iter().take_while(|r| r.task == t).count();
            store
                .append_task_features(t, records[start..end].to_vec())
                .map_err(|e| Error::Format(format!("invalid record sequence: {e}")))?;
            start = end;
        }
        Ok(store)
    }
}

fn header(width: usize, count: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out
}

fn encode_record(out: &mut Vec<u8>, r: &VideoFeatureRecord) {
    out.extend_from_slice(&r.task.to_le_bytes());
    out.extend_from_slice(&r.video_id.to_le_bytes());
    out.extend_from_slice(&r.category.to_le_bytes());
    for v in &r.feature {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_store(path: &Path, store: &FeatureStore) -> Result<()> {
    fs::write(path, store.encode())?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<FeatureStore> {
    FeatureStore::decode(&fs::read(path)?)
}

/// Appends task `t` to the store file at `path`, creating it when absent.
/// Only the count field of the header changes; every other existing byte is
/// left in place. Returns the updated in-memory store.
pub fn append_file(path: &Path, width: usize, t: u32, records: Vec<VideoFeatureRecord>) -> Result<FeatureStore> {
    let mut store = if path.exists() {
        read_store(path)?
    } else {
        let s = FeatureStore::new(width)?;
        write_store(path, &s)?;
        s
    };
    if store.width() != width {
        return Err(dim_err!("store width {} != {width}", store.width()));
    }
    store.check_append(t, &records)?;
    let committed = (HEADER_LEN + store.len() * record_len(width)) as u64;
    let mut payload = Vec::with_capacity(records.len() * record_len(width));
    for r in &records {
        encode_record(&mut payload, r);
    }
    let mut f = OpenOptions::new().read(true).write(true).open(path)?;
    // Drop any bytes a crashed append left past the committed records.
    f.set_len(committed)?;
    f.seek(SeekFrom::Start(committed))?;
    f.write_all(&payload)?;
    f.sync_data()?;
    let count = (store.len() + records.len()) as u64;
    f.seek(SeekFrom::Start(COUNT_OFFSET))?;
    f.write_all(&count.to_le_bytes())?;
    f.sync_data()?;
    store.append_task_features(t, records)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(t: u32, ids: &[u64], width: usize) -> Vec<VideoFeatureRecord> {
        ids.iter()
            .map(|&id| VideoFeatureRecord {
                task: t,
                video_id: id,
                category: t * 10 + id as u32,
                feature: (0..width).map(|j| (id as f32) * 0.5 - j as f32 * 1e-3).collect(),
            })
            .collect()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let mut s = FeatureStore::new(3).unwrap();
        s.append_task_features(1, recs(1, &[0, 1], 3)).unwrap();
        s.append_task_features(2, recs(2, &[5], 3)).unwrap();
        let back = FeatureStore::decode(&s.encode()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.encode(), s.encode());
    }

    #[test]
    fn corrupt_and_truncated() {
        let mut s = FeatureStore::new(2).unwrap();
        s.append_task_features(1, recs(1, &[0, 1, 2], 2)).unwrap();
        let bytes = s.encode();
        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        assert!(matches!(FeatureStore::decode(&bad), Err(Error::Format(_))));
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(FeatureStore::decode(cut), Err(Error::Format(_))));
    }

    #[test]
    fn append_protocol() {
        let mut s = FeatureStore::new(2).unwrap();
        s.append_task_features(2, recs(2, &[0], 2)).unwrap();
        assert!(matches!(s.append_task_features(1, recs(1, &[1], 2)), Err(Error::Protocol(_))));
        assert!(matches!(s.append_task_features(2, recs(2, &[3], 2)), Err(Error::Protocol(_))));
        assert!(matches!(s.append_task_features(3, recs(3, &[4, 4], 2)), Err(Error::Protocol(_))));
        assert!(matches!(s.append_task_features(3, recs(3, &[4], 3)), Err(Error::Dimension(_))));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn load_range_filters() {
        let mut s = FeatureStore::new(2).unwrap();
        for t in 1..=3 {
            s.append_task_features(t, recs(t, &[t as u64 * 10, t as u64 * 10 + 1], 2)).unwrap();
        }
        assert_eq!(s.load_range(3).len(), 6);
        let one = s.load_range(1);
        assert_eq!(one.video_ids, vec![10, 11]);
        assert_eq!(one.tasks, vec![1, 1]);
        assert!(s.load_range(0).features.is_none());
        assert_eq!(s.load_range(2), s.load_range(2));
    }

    #[test]
    fn file_append_keeps_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fdb");
        append_file(&path, 2, 1, recs(1, &[0, 1], 2)).unwrap();
        let before = fs::read(&path).unwrap();
        let store = append_file(&path, 2, 2, recs(2, &[7], 2)).unwrap();
        let after = fs::read(&path).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(after[..16], before[..16]);
        assert_eq!(after[HEADER_LEN..before.len()], before[HEADER_LEN..]);
        assert_eq!(read_store(&path).unwrap(), store);
        // an uncommitted tail is ignored on read and dropped on the next append
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[1, 2, 3]).unwrap();
        assert_eq!(read_store(&path).unwrap(), store);
        let store = append_file(&path, 2, 3, recs(3, &[9], 2)).unwrap();
        assert_eq!(read_store(&path).unwrap(), store);
    }
}
