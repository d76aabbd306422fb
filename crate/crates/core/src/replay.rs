//! Fixed-capacity replay memory with equal per-task allocation.
//!
//! After task `t` every stored task `t′ ≤ t` is allotted `⌊N/t⌋` slots, with
//! the remainder going one each to the lowest task ids. Older tasks shrink by
//! uniform-random eviction; the new task fills its slots with a uniform draw
//! without replacement from its training set. Stored images are quantized to
//! 8 bits so a PNG snapshot restores them exactly.
//!
//! The buffer is generic over what an entry keeps. [`ReplayBuffer`] stores
//! degraded images only; [`PairedBuffer`] keeps clean targets as well and
//! exists for the experience-replay baselines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Dataset, Image, SamplePair};

pub const DEFAULT_CAPACITY: usize = 500;
pub const SNAPSHOT_FILE: &str = "buffer.json";
const SNAPSHOT_FORMAT: &str = "weathercl-replay-v1";

/// What a buffer entry holds and how it is written to disk.
pub trait Exemplar: Clone + PartialEq + Sized {
    const KIND: &'static str;

    fn from_pair(pair: &SamplePair) -> Self;

    fn degraded(&self) -> &Image;

    /// Writes the entry's images under `dir`, returning the file names.
    fn save(&self, dir: &Path, stem: &str) -> Result<Vec<String>>;

    fn load(dir: &Path, files: &[String], task_id: usize) -> Result<Self>;
}

fn load_png_checked(dir: &Path, name: &str) -> Result<Image> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::Format(format!("snapshot image {name} is missing")));
    }
    Image::load_png(&path).map_err(|e| Error::Format(format!("snapshot image {name}: {e}")))
}

impl Exemplar for Image {
    const KIND: &'static str = "degraded";

    fn from_pair(pair: &SamplePair) -> Self {
        pair.degraded.quantized()
    }

    fn degraded(&self) -> &Image {
        self
    }

    fn save(&self, dir: &Path, stem: &str) -> Result<Vec<String>> {
        let name = format!("{stem}.png");
        self.save_png(&dir.join(&name))?;
        Ok(vec![name])
    }

    fn load(dir: &Path, files: &[String], _task_id: usize) -> Result<Self> {
        match files {
            [f] => load_png_checked(dir, f),
            _ => Err(Error::Format("degraded entry needs exactly one file".into())),
        }
    }
}

impl Exemplar for SamplePair {
    const KIND: &'static str = "paired";

    fn from_pair(pair: &SamplePair) -> Self {
        SamplePair {
            degraded: pair.degraded.quantized(),
            clean: pair.clean.quantized(),
            task_id: pair.task_id,
        }
    }

    fn degraded(&self) -> &Image {
        &self.degraded
    }

    fn save(&self, dir: &Path, stem: &str) -> Result<Vec<String>> {
        let d = format!("{stem}_degraded.png");
        let c = format!("{stem}_clean.png");
        self.degraded.save_png(&dir.join(&d))?;
        self.clean.save_png(&dir.join(&c))?;
        Ok(vec![d, c])
    }

    fn load(dir: &Path, files: &[String], task_id: usize) -> Result<Self> {
        match files {
            [d, c] => SamplePair::new(load_png_checked(dir, d)?, load_png_checked(dir, c)?, task_id)
                .map_err(|e| Error::Format(e.to_string())),
            _ => Err(Error::Format("paired entry needs exactly two files".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub item: T,
    pub task_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer<T> {
    capacity: usize,
    entries: Vec<Entry<T>>,
    last_task: usize,
    rng: ChaCha8Rng,
}

/// Degraded-only memory: entries carry no clean images.
pub type ReplayBuffer = MemoryBuffer<Image>;
pub type PairedBuffer = MemoryBuffer<SamplePair>;

/// Slot counts for tasks `1..=tasks`.
pub fn quotas(capacity: usize, tasks: usize) -> Vec<usize> {
    if tasks == 0 {
        return Vec::new();
    }
    let base = capacity / tasks;
    let extra = capacity % tasks;
    (0..tasks).map(|i| base + usize::from(i < extra)).collect()
}

impl<T: Exemplar> MemoryBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
            last_task: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn last_task(&self) -> usize {
        self.last_task
    }

    /// Stored entries per task id.
    pub fn counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for t in 1..=self.last_task {
            m.insert(t, 0);
        }
        for e in &self.entries {
            *m.entry(e.task_id).or_insert(0) += 1;
        }
        m
    }

    /// Rebalances after finishing `task_id` and stores that task's share. Entries
    /// are `patch × patch` random crops when `patch` is given. Returns how many new
    /// entries were stored.
    pub fn update_after_task(
        &mut self,
        dataset: &Dataset,
        task_id: usize,
        patch: Option<usize>,
    ) -> Result<usize> {
        if task_id != self.last_task + 1 {
            return Err(Error::invalid(format!(
                "tasks must arrive in order: expected {}, got {task_id}",
                self.last_task + 1
            )));
        }
        let q = quotas(self.capacity, task_id);
        for t in 1..task_id {
            let idx: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].task_id == t)
                .collect();
            if idx.len() > q[t - 1] {
                let mut drop: Vec<usize> = index::sample(&mut self.rng, idx.len(), idx.len() - q[t - 1])
                    .into_iter()
                    .map(|k| idx[k])
                    .collect();
                drop.sort_unstable();
                for i in drop.into_iter().rev() {
                    self.entries.remove(i);
                }
            }
        }
        let want = q[task_id - 1];
        let take = want.min(dataset.len());
        if take < want {
            log::warn!(
                "task {task_id} has {} samples for {want} memory slots; {} slots stay empty",
                dataset.len(),
                want - take
            );
        }
        let picks: Vec<usize> = index::sample(&mut self.rng, dataset.len(), take).into_vec();
        for i in picks {
            let mut pair = dataset.pairs()[i].clone();
            pair.task_id = task_id;
            if let Some(size) = patch {
                let (h, w) = pair.degraded.dims();
                if size < h || size < w {
                    pair = pair.random_crop(size.min(h).min(w), &mut self.rng)?;
                }
            }
            self.entries.push(Entry {
                item: T::from_pair(&pair),
                task_id,
            });
        }
        self.last_task = task_id;
        Ok(take)
    }

    /// `n` entries drawn uniformly with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<&Entry<T>>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..n)
            .map(|_| &self.entries[rng.random_range(0..self.entries.len())])
            .collect())
    }

    /// Writes `buffer.json` and the entry images into `dir`.
    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let files = e.item.save(dir, &format!("entry{i:05}"))?;
            entries.push(SnapshotEntry {
                task_id: e.task_id,
                files,
            });
        }
        let manifest = SnapshotManifest {
            format: SNAPSHOT_FORMAT.into(),
            kind: T::KIND.into(),
            capacity: self.capacity,
            last_task: self.last_task,
            rng: RngState {
                seed: hex::encode(self.rng.get_seed()),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            entries,
        };
        fs::write(
            dir.join(SNAPSHOT_FILE),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }

    pub fn load_snapshot(dir: &Path) -> Result<Self> {
        let path = dir.join(SNAPSHOT_FILE);
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
        let m: SnapshotManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.format != SNAPSHOT_FORMAT || m.kind != T::KIND {
            return Err(Error::Format(format!(
                "snapshot is {}/{}, expected {SNAPSHOT_FORMAT}/{}",
                m.format,
                m.kind,
                T::KIND
            )));
        }
        let seed: [u8; 32] = hex::decode(&m.rng.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format("bad rng seed".into()))?;
        let word_pos: u128 = m
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::Format("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(m.rng.stream);
        rng.set_word_pos(word_pos);
        if m.entries.len() > m.capacity {
            return Err(Error::Format("snapshot holds more entries than capacity".into()));
        }
        let mut entries = Vec::with_capacity(m.entries.len());
        for e in &m.entries {
            if e.task_id == 0 || e.task_id > m.last_task {
                return Err(Error::Format(format!("entry task id {} out of range", e.task_id)));
            }
            entries.push(Entry {
                item: T::load(dir, &e.files, e.task_id)?,
                task_id: e.task_id,
            });
        }
        Ok(Self {
            capacity: m.capacity,
            entries,
            last_task: m.last_task,
            rng,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotManifest {
    format: String,
    kind: String,
    capacity: usize,
    last_task: usize,
    rng: RngState,
    entries: Vec<SnapshotEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotEntry {
    task_id: usize,
    files: Vec<String>,
}
