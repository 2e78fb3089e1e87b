//! Dataset loading, client partitioning, and seeded mini-batch iteration.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

/// Features (N, sample_shape) plus N class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }
}

/// How the global dataset is spread across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plan", rename_all = "kebab-case")]
pub enum PartitionPlan {
    Iid,
    LabelShards { shards_per_client: usize },
    Dirichlet { concentration: f64 },
}

/// Index view into a parent dataset owned by one client.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

/// One mini-batch: a slice of the parent dataset.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub batch_index: usize,
}

const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Parses a standard IDX image/label file pair (big-endian, magic
/// 0x00000803 / 0x00000801). Pixels are scaled to [0,1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images)?;
    let lbl_bytes = std::fs::read(labels)?;
    let (shape, pixels) = parse_idx_images(&img_bytes)?;
    let label_vals = parse_idx_labels(&lbl_bytes)?;
    if label_vals.len() != shape[0] {
        return Err(Error::Format {
            offset: 4,
            msg: format!("label count {} != image count {}", label_vals.len(), shape[0]),
        });
    }
    let num_classes = label_vals.iter().copied().max().map_or(0, |m| m as usize + 1);
    Ok(Dataset {
        features: Tensor::new(shape, pixels),
        labels: label_vals.into_iter().map(|v| v as usize).collect(),
        num_classes,
    })
}

fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut rdr = std::io::Cursor::new(bytes);
    let magic = rdr
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format { offset: 0, msg: "truncated magic".into() })?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::Format { offset: 0, msg: format!("bad image magic 0x{magic:08x}") });
    }
    let n = rdr.read_u32::<BigEndian>().map_err(|_| Error::Format { offset: 4, msg: "truncated count".into() })? as usize;
    let h = rdr.read_u32::<BigEndian>().map_err(|_| Error::Format { offset: 8, msg: "truncated rows".into() })? as usize;
    let w = rdr.read_u32::<BigEndian>().map_err(|_| Error::Format { offset: 12, msg: "truncated cols".into() })? as usize;
    let mut raw = vec![0u8; n * h * w];
    rdr.read_exact(&mut raw)
        .map_err(|_| Error::Format { offset: rdr.position(), msg: "truncated pixel data".into() })?;
    let pixels = raw.iter().map(|&b| b as f64 / 255.0).collect();
    // single-channel images: shape (N, 1, H, W)
    Ok((vec![n, 1, h, w], pixels))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut rdr = std::io::Cursor::new(bytes);
    let magic = rdr
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format { offset: 0, msg: "truncated magic".into() })?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::Format { offset: 0, msg: format!("bad label magic 0x{magic:08x}") });
    }
    let n = rdr.read_u32::<BigEndian>().map_err(|_| Error::Format { offset: 4, msg: "truncated count".into() })? as usize;
    let mut raw = vec![0u8; n];
    rdr.read_exact(&mut raw)
        .map_err(|_| Error::Format { offset: rdr.position(), msg: "truncated label data".into() })?;
    Ok(raw)
}

/// CSV fallback loader: one sample per line, `label,pixel,pixel,...`,
/// pixels taken as already-scaled reals, reshaped to `sample_shape`.
pub fn load_csv(path: &Path, sample_shape: &[usize], num_classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let per_sample: usize = sample_shape.iter().product();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::Data(format!("line {}: bad label", lineno + 1)))?;
        if label >= num_classes {
            return Err(Error::Data(format!("line {}: label {label} >= {num_classes}", lineno + 1)));
        }
        let row: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        if row.len() != per_sample {
            return Err(Error::Data(format!(
                "line {}: {} values, expected {per_sample}",
                lineno + 1,
                row.len()
            )));
        }
        features.extend(row);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Data("empty CSV dataset".into()));
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(sample_shape);
    Ok(Dataset { features: Tensor::new(shape, features), labels, num_classes })
}

/// Seeded Gaussian-blob dataset: one unit-variance blob per class, class
/// means `separation` apart along random orthogonal-ish directions.
pub fn synth_dataset(seed: u64, n: usize, dim: usize, classes: usize, separation: f64) -> Dataset {
    synth_dataset_split(seed, seed, n, dim, classes, separation)
}

/// Like `synth_dataset`, but with the class means and the sample noise
/// seeded independently — train and test splits of the same task share
/// `mean_seed` and differ in `sample_seed`.
pub fn synth_dataset_split(
    mean_seed: u64,
    sample_seed: u64,
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
) -> Dataset {
    assert!(classes >= 2, "need at least 2 classes");
    let mut mean_rng = ChaCha20Rng::seed_from_u64(mean_seed);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let dir: Vec<f64> =
            (0..dim).map(|_| mean_rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        means.push(dir.into_iter().map(|v| v / norm * separation).collect::<Vec<_>>());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(sample_seed.wrapping_add(0x6A09_E667));
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dim {
            features.push(means[class][d] + rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(class);
    }
    Dataset { features: Tensor::new(vec![n, dim], features), labels, num_classes: classes }
}

/// Splits a dataset over `n` clients per the plan. Shards are disjoint; IID
/// shards differ in size by at most one.
pub fn partition(dataset: &Dataset, plan: PartitionPlan, n: usize, seed: u64) -> Result<Vec<ClientShard>> {
    if n == 0 || n > dataset.len() {
        return Err(Error::Plan(format!("cannot split {} samples over {n} clients", dataset.len())));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    match plan {
        PartitionPlan::Iid => {
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            idx.shuffle(&mut rng);
            let mut shards: Vec<ClientShard> =
                (0..n).map(|client_id| ClientShard { client_id, indices: Vec::new() }).collect();
            for (pos, sample) in idx.into_iter().enumerate() {
                shards[pos % n].indices.push(sample);
            }
            Ok(shards)
        }
        PartitionPlan::LabelShards { shards_per_client } => {
            if shards_per_client == 0 {
                return Err(Error::Plan("shards_per_client must be >= 1".into()));
            }
            let total_shards = shards_per_client * n;
            if total_shards > dataset.len() {
                return Err(Error::Plan(format!(
                    "{total_shards} label shards from {} samples",
                    dataset.len()
                )));
            }
            // sort by label, cut into equal contiguous slices, deal at random
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            idx.sort_by_key(|&i| (dataset.labels[i], i));
            let per_shard = dataset.len() / total_shards;
            let mut shard_ids: Vec<usize> = (0..total_shards).collect();
            shard_ids.shuffle(&mut rng);
            let mut shards: Vec<ClientShard> =
                (0..n).map(|client_id| ClientShard { client_id, indices: Vec::new() }).collect();
            for (k, &sid) in shard_ids.iter().enumerate() {
                let client = k / shards_per_client;
                shards[client].indices.extend_from_slice(&idx[sid * per_shard..(sid + 1) * per_shard]);
            }
            Ok(shards)
        }
        PartitionPlan::Dirichlet { concentration } => {
            if concentration <= 0.0 {
                return Err(Error::Plan("Dirichlet concentration must be > 0".into()));
            }
            let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::Plan(e.to_string()))?;
            let mut shards: Vec<ClientShard> =
                (0..n).map(|client_id| ClientShard { client_id, indices: Vec::new() }).collect();
            for class in 0..dataset.num_classes {
                let mut members: Vec<usize> =
                    (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
                members.shuffle(&mut rng);
                let mut weights: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= total.max(1e-300));
                // cumulative cut points over the shuffled class members
                let mut start = 0usize;
                let mut cum = 0.0;
                for (client, &w) in weights.iter().enumerate() {
                    cum += w;
                    let end = if client + 1 == n { members.len() } else { (cum * members.len() as f64).round() as usize };
                    let end = end.clamp(start, members.len());
                    shards[client].indices.extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            Ok(shards)
        }
    }
}

/// A seeded permutation of the shard, chunked by B, drop-last.
pub fn batches(shard: &ClientShard, dataset: &Dataset, batch_size: usize, epoch_seed: u64) -> Vec<MiniBatch> {
    assert!(batch_size >= 1 && batch_size <= shard.indices.len(), "batch size out of range");
    let mut order = shard.indices.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch_size)
        .enumerate()
        .map(|(batch_index, rows)| MiniBatch {
            features: dataset.features.select_rows(rows),
            labels: rows.iter().map(|&r| dataset.labels[r]).collect(),
            batch_index,
        })
        .collect()
}

/// Center-crops (N,C,H,W) images to (N,C,side,side).
pub fn center_crop(features: &Tensor, side: usize) -> Tensor {
    let (n, c, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
        features.shape()[3],
    );
    assert!(side <= h && side <= w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let mut out = Vec::with_capacity(n * c * side * side);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..side {
                let row = ((s * c + ch) * h + y0 + y) * w + x0;
                out.extend_from_slice(&features.data()[row..row + side]);
            }
        }
    }
    Tensor::new(vec![n, c, side, side], out)
}

/// Per-channel standardization to zero mean / unit variance over the dataset.
pub fn standardize_per_channel(features: &Tensor) -> Tensor {
    let (n, c) = (features.shape()[0], features.shape()[1]);
    let plane: usize = features.shape()[2..].iter().product();
    let mut out = features.data().to_vec();
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for s in 0..n {
            for p in 0..plane {
                let v = features.data()[(s * c + ch) * plane + p];
                sum += v;
                sq += v * v;
            }
        }
        let count = (n * plane) as f64;
        let mean = sum / count;
        let std = (sq / count - mean * mean).max(1e-12).sqrt();
        for s in 0..n {
            for p in 0..plane {
                let i = (s * c + ch) * plane + p;
                out[i] = (out[i] - mean) / std;
            }
        }
    }
    Tensor::new(features.shape().to_vec(), out)
}

/// Seeded sampling of K of n clients, without replacement, for one round.
pub fn sample_participants(n: usize, k: usize, seed: u64, round: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= n);
    let mut ids: Vec<usize> = (0..n).collect();
    if k == n {
        return ids;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (round as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    ids.shuffle(&mut rng);
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(dir: &Path, pixels: &[u8], h: usize, w: usize, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = labels.len();
        let img = dir.join("images.idx");
        let lbl = dir.join("labels.idx");
        let mut f = std::fs::File::create(&img).unwrap();
        f.write_all(&IDX_MAGIC_IMAGES.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(h as u32).to_be_bytes()).unwrap();
        f.write_all(&(w as u32).to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
        let mut f = std::fs::File::create(&lbl).unwrap();
        f.write_all(&IDX_MAGIC_LABELS.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (img, lbl)
    }

    #[test]
    fn idx_round_trip_hand_crafted_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = write_idx_pair(dir.path(), &[0, 51, 102, 255], 2, 2, &[3]);
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.features.shape(), &[1, 1, 2, 2]);
        let expect = [0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0];
        for (a, b) in ds.features.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(ds.labels, vec![3]);
    }

    #[test]
    fn empty_idx_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("empty.idx");
        std::fs::write(&img, b"").unwrap();
        let lbl = dir.path().join("l.idx");
        std::fs::write(&lbl, b"").unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(Error::Format { .. })));
    }

    #[test]
    fn label_count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = write_idx_pair(dir.path(), &[0, 0, 0, 0], 2, 2, &[1]);
        let lbl2 = dir.path().join("labels2.idx");
        let mut f = std::fs::File::create(&lbl2).unwrap();
        f.write_all(&IDX_MAGIC_LABELS.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&[1, 0]).unwrap();
        assert!(matches!(load_idx(&img, &lbl2), Err(Error::Format { .. })));
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let a = synth_dataset(9, 40, 5, 4, 3.0);
        let b = synth_dataset(9, 40, 5, 4, 3.0);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn iid_partition_even_split() {
        let ds = synth_dataset(0, 10, 2, 2, 1.0);
        let shards = partition(&ds, PartitionPlan::Iid, 2, 0).unwrap();
        assert_eq!(shards[0].indices.len(), 5);
        assert_eq!(shards[1].indices.len(), 5);
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn single_label_shard_per_client_is_pure() {
        let ds = synth_dataset(1, 20, 2, 2, 1.0);
        let shards = partition(&ds, PartitionPlan::LabelShards { shards_per_client: 1 }, 2, 3).unwrap();
        for shard in &shards {
            let labels: std::collections::BTreeSet<usize> =
                shard.indices.iter().map(|&i| ds.labels[i]).collect();
            assert_eq!(labels.len(), 1, "client {} holds labels {labels:?}", shard.client_id);
        }
    }

    #[test]
    fn infeasible_label_shards_rejected() {
        let ds = synth_dataset(1, 4, 2, 2, 1.0);
        assert!(matches!(
            partition(&ds, PartitionPlan::LabelShards { shards_per_client: 3 }, 2, 0),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn dirichlet_concentration_controls_skew() {
        // lower concentration -> histograms farther from uniform (20 seeds)
        let ds = synth_dataset(2, 400, 2, 4, 1.0);
        let tv = |shards: &[ClientShard]| -> f64 {
            let mut total = 0.0;
            for shard in shards {
                let mut hist = vec![0.0f64; ds.num_classes];
                for &i in &shard.indices {
                    hist[ds.labels[i]] += 1.0;
                }
                let count: f64 = hist.iter().sum();
                if count == 0.0 {
                    total += 1.0;
                    continue;
                }
                total += hist
                    .iter()
                    .map(|h| (h / count - 1.0 / ds.num_classes as f64).abs())
                    .sum::<f64>()
                    / 2.0;
            }
            total
        };
        let mut skew_low = 0.0;
        let mut skew_high = 0.0;
        for seed in 0..20 {
            skew_low += tv(&partition(&ds, PartitionPlan::Dirichlet { concentration: 0.1 }, 4, seed).unwrap());
            skew_high += tv(&partition(&ds, PartitionPlan::Dirichlet { concentration: 100.0 }, 4, seed).unwrap());
        }
        assert!(skew_low > skew_high, "low={skew_low} high={skew_high}");
    }

    #[test]
    fn batches_cover_shard_once_drop_last() {
        let ds = synth_dataset(3, 101, 2, 2, 1.0);
        let shard = ClientShard { client_id: 0, indices: (0..101).collect() };
        let bs = batches(&shard, &ds, 50, 7);
        assert_eq!(bs.len(), 2);
        assert_eq!(bs[0].labels.len(), 50);
        let again = batches(&shard, &ds, 50, 7);
        assert_eq!(bs[0].features, again[0].features);
        // full coverage when B divides the shard
        let shard100 = ClientShard { client_id: 0, indices: (0..100).collect() };
        let bs = batches(&shard100, &ds, 50, 7);
        assert_eq!(bs.iter().map(|b| b.labels.len()).sum::<usize>(), 100);
    }

    #[test]
    fn center_crop_extracts_middle() {
        // 1x1x4x4 with values 0..16, crop to 2x2 -> rows 1..3, cols 1..3
        let t = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f64).collect());
        let c = center_crop(&t, 2);
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn participant_sampling_is_deterministic_and_sized() {
        let a = sample_participants(10, 4, 5, 3);
        let b = sample_participants(10, 4, 5, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|&c| c < 10));
    }
}
