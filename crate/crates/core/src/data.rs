//! Labelled datasets, IDX ingestion, a seeded Gaussian generator and
//! device partitioning (IID and 80/20 label skew).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs stored row-major in one buffer; every value lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStore {
    dim: usize,
    num_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl DatasetStore {
    pub fn new(dim: usize, num_classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(Error::Dimension(format!(
                "{} input values cannot form {} rows of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if inputs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("input values must lie in [0, 1]".into()));
        }
        Ok(Self {
            dim,
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input(&self, index: usize) -> &[f64] {
        &self.inputs[index * self.dim..(index + 1) * self.dim]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the given rows into a new store with the same class count.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Self {
            dim: self.dim,
            num_classes: self.num_classes,
            inputs,
            labels,
        }
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> IdxReader<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("{} file truncated in header", self.what)))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(Error::Format(format!(
                "{} file truncated: expected {len} payload bytes, found {}",
                self.what,
                rest.len()
            )));
        }
        Ok(&rest[..len])
    }
}

/// Decoded IDX image file: `count` images of `rows * cols` raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut r = IdxReader { bytes, pos: 0, what: "image" };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.payload(count * rows * cols)?.to_vec();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = IdxReader { bytes, pos: 0, what: "label" };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = r.u32_be()? as usize;
    Ok(r.payload(count)?.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a store from raw IDX bytes; pixels are scaled by `1/255` and the
/// class count is `max(label) + 1`.
pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<DatasetStore> {
    let images = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.count != labels.len() {
        return Err(Error::Format(format!(
            "image file holds {} items but label file holds {}",
            images.count,
            labels.len()
        )));
    }
    let dim = images.rows * images.cols;
    let inputs = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    DatasetStore::new(dim, num_classes, inputs, labels).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<DatasetStore> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    decode_idx(&read(images.as_ref())?, &read(labels.as_ref())?)
}

/// Isotropic Gaussian classes squashed through a logistic into `[0, 1]`.
///
/// Class means are random directions scaled to norm `separation`; samples
/// are grouped by class in ascending label order.
pub fn synth_gaussian(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<DatasetStore> {
    let (train, _) = synth_gaussian_split(num_classes, dim, samples_per_class, 0, separation, seed)?;
    Ok(train)
}

/// Same class means for both stores; the test draws continue the stream.
pub fn synth_gaussian_split(
    num_classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<(DatasetStore, DatasetStore)> {
    if num_classes == 0 || dim == 0 || train_per_class == 0 {
        return Err(Error::Validation(
            "synthetic generator needs positive class count, dimension and sample count".into(),
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Validation(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.into_iter().map(|v| v * separation / norm).collect()
        })
        .collect();

    let mut draw = |per_class: usize| {
        let mut inputs = Vec::with_capacity(num_classes * per_class * dim);
        let mut labels = Vec::with_capacity(num_classes * per_class);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for m in mean {
                    let z: f64 = rng.sample(StandardNormal);
                    inputs.push(1.0 / (1.0 + (-(m + z)).exp()));
                }
                labels.push(c);
            }
        }
        DatasetStore {
            dim,
            num_classes,
            inputs,
            labels,
        }
    };
    let train = draw(train_per_class);
    let test = draw(test_per_class);
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    /// 80% of each shard from one dominant label, 20% spread over the rest.
    NonIid80,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_devices: usize,
    pub samples_per_device: usize,
    pub seed: u64,
    /// Lets a label pool that runs dry be reshuffled and reused by later
    /// devices. Shards then overlap; a single shard never repeats an index.
    #[serde(default)]
    pub allow_overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceShard {
    pub device_id: usize,
    /// Sorted indices into the backing store.
    pub indices: Vec<usize>,
    pub per_label_counts: Vec<usize>,
}

impl DeviceShard {
    pub fn from_indices(device_id: usize, mut indices: Vec<usize>, store: &DatasetStore) -> Self {
        indices.sort_unstable();
        let mut per_label_counts = vec![0; store.num_classes()];
        for &i in &indices {
            per_label_counts[store.label(i)] += 1;
        }
        Self {
            device_id,
            indices,
            per_label_counts,
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `round(0.8 * size)` for the dominant label, the rest split evenly with
/// the excess going to the lowest remaining label indices.
pub fn non_iid_label_quota(size: usize, num_classes: usize, dominant: usize) -> Vec<usize> {
    let mut quota = vec![0; num_classes];
    if num_classes == 1 {
        quota[0] = size;
        return quota;
    }
    let dominant_count = (size * 4 + 2) / 5;
    quota[dominant] = dominant_count;
    let rest = size - dominant_count;
    let others = num_classes - 1;
    let (base, excess) = (rest / others, rest % others);
    for (rank, label) in (0..num_classes).filter(|&l| l != dominant).enumerate() {
        quota[label] = base + usize::from(rank < excess);
    }
    quota
}

struct LabelPool {
    items: Vec<usize>,
    cursor: usize,
}

pub fn partition(store: &DatasetStore, spec: &PartitionSpec) -> Result<Vec<DeviceShard>> {
    if spec.num_devices == 0 || spec.samples_per_device == 0 {
        return Err(Error::Validation("partition needs at least one device and one sample each".into()));
    }
    let needed = spec.num_devices * spec.samples_per_device;
    if needed > store.len() && !spec.allow_overlap {
        return Err(Error::Validation(format!(
            "{} devices x {} samples exceeds the {} available",
            spec.num_devices,
            spec.samples_per_device,
            store.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    match spec.scheme {
        PartitionScheme::Iid => {
            if needed > store.len() {
                return Err(Error::Validation("IID partition cannot overlap shards".into()));
            }
            let mut all: Vec<usize> = (0..store.len()).collect();
            all.shuffle(&mut rng);
            Ok(all
                .chunks_exact(spec.samples_per_device)
                .take(spec.num_devices)
                .enumerate()
                .map(|(id, chunk)| DeviceShard::from_indices(id, chunk.to_vec(), store))
                .collect())
        }
        PartitionScheme::NonIid80 => {
            let classes = store.num_classes();
            let mut pools: Vec<LabelPool> = (0..classes)
                .map(|_| LabelPool { items: Vec::new(), cursor: 0 })
                .collect();
            for (i, &l) in store.labels().iter().enumerate() {
                pools[l].items.push(i);
            }
            for pool in &mut pools {
                pool.items.shuffle(&mut rng);
            }
            let mut shards = Vec::with_capacity(spec.num_devices);
            for device in 0..spec.num_devices {
                let quota = non_iid_label_quota(spec.samples_per_device, classes, device % classes);
                let mut indices = Vec::with_capacity(spec.samples_per_device);
                for (label, &want) in quota.iter().enumerate() {
                    take_from_pool(&mut pools[label], label, want, spec.allow_overlap, &mut rng, &mut indices)?;
                }
                shards.push(DeviceShard::from_indices(device, indices, store));
            }
            Ok(shards)
        }
    }
}

fn take_from_pool(
    pool: &mut LabelPool,
    label: usize,
    want: usize,
    allow_overlap: bool,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<usize>,
) -> Result<()> {
    let available = pool.items.len() - pool.cursor;
    if want <= available {
        out.extend_from_slice(&pool.items[pool.cursor..pool.cursor + want]);
        pool.cursor += want;
        return Ok(());
    }
    if !allow_overlap || want > pool.items.len() {
        return Err(Error::Infeasible {
            label,
            needed: want - available,
        });
    }
    // Drain the tail, then recycle a fresh permutation that skips what this
    // shard already holds.
    let start = out.len();
    out.extend_from_slice(&pool.items[pool.cursor..]);
    let taken: Vec<usize> = out[start..].to_vec();
    pool.items.shuffle(rng);
    let (fresh, reused): (Vec<usize>, Vec<usize>) = pool.items.iter().partition(|i| !taken.contains(i));
    pool.items = fresh.into_iter().chain(reused).collect();
    pool.cursor = want - taken.len();
    out.extend_from_slice(&pool.items[..pool.cursor]);
    Ok(())
}
