//! Bag files, dataset manifests, and the synthetic benchmark generator.
//!
//! Bag file layout (all integers little-endian):
//!
//! ```text
//! magic   "CAPB" (4 bytes)
//! version u32 = 1
//! N       u32  (patches, ≥ 1)
//! D       u32  (feature width, ≥ 1)
//! flags   u32  (bit 0: coords present; other bits must be zero)
//! data    N·D f32, row-major
//! coords  N pairs of u32 (x, y), only when flag bit 0 is set
//! ```
//!
//! Manifests are plain text, one `path,label,split` per line; `#` starts a
//! comment. Relative bag paths are resolved against the manifest's
//! directory.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::name_tag;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{BagSource, LabeledBag};

const MAGIC: &[u8; 4] = b"CAPB";
const VERSION: u32 = 1;
const FLAG_COORDS: u32 = 1;

/// Fixed header size: magic + version + N + D + flags, 4 bytes each.
pub const BAG_HEADER_BYTES: usize = 20;

/// One bag of patch features, with optional grid coordinates for heatmaps.
#[derive(Debug, Clone)]
pub struct BagRecord {
    pub id: String,
    /// `[N, D_in]`, untracked.
    pub features: Tensor<f32>,
    pub label: usize,
    pub coords: Option<Vec<[u32; 2]>>,
}

impl BagRecord {
    pub fn n_patches(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.features.shape()[1]
    }

    /// Convert to the trainer's element type.
    pub fn to_labeled<T: Scalar>(&self) -> LabeledBag<T> {
        LabeledBag {
            features: self.features.cast(),
            label: self.label,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize a bag into the binary format.
pub fn write_bag_bytes(record: &BagRecord) -> Vec<u8> {
    let n = record.n_patches();
    let d = record.d_in();
    let has_coords = record.coords.is_some();
    let mut out = Vec::with_capacity(BAG_HEADER_BYTES + n * d * 4 + if has_coords { n * 8 } else { 0 });
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&if has_coords { FLAG_COORDS } else { 0 }.to_le_bytes());
    for &v in record.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(coords) = &record.coords {
        for &[x, y] in coords {
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
        }
    }
    out
}

pub fn write_bag(path: &Path, record: &BagRecord) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&write_bag_bytes(record))
        .and_then(|()| w.flush())
        .map_err(|e| io_err(path, e))
}

/// Parse a bag from raw bytes. `id` is caller-assigned (the file readers use
/// the file stem); the label is not part of the format and defaults to 0 —
/// it comes from the manifest.
pub fn read_bag_bytes(bytes: &[u8], id: &str) -> Result<BagRecord> {
    if bytes.len() < BAG_HEADER_BYTES {
        return Err(Error::format(format!(
            "bag truncated at byte {}: header needs {BAG_HEADER_BYTES} bytes",
            bytes.len()
        )));
    }
    let u32_at = |off: usize| u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
    if &bytes[..4] != MAGIC {
        return Err(Error::format(format!(
            "not a bag file: magic {:02x?} != {MAGIC:02x?}",
            &bytes[..4]
        )));
    }
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported bag version {version} (expected {VERSION})"
        )));
    }
    let n = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let flags = u32_at(16);
    if n == 0 {
        return Err(Error::data("bag has zero patches"));
    }
    if d == 0 {
        return Err(Error::data("bag has zero feature width"));
    }
    if flags & !FLAG_COORDS != 0 {
        return Err(Error::format(format!("unknown flag bits {flags:#x}")));
    }
    let has_coords = flags & FLAG_COORDS != 0;

    // Expected size computed in wide arithmetic so absurd headers cannot
    // overflow; mismatches report where the file ran out.
    let expected = BAG_HEADER_BYTES as u128
        + n as u128 * d as u128 * 4
        + if has_coords { n as u128 * 8 } else { 0 };
    if (bytes.len() as u128) < expected {
        return Err(Error::format(format!(
            "bag truncated at byte {}: header promises {expected} bytes",
            bytes.len()
        )));
    }
    if bytes.len() as u128 > expected {
        return Err(Error::format(format!(
            "{} trailing bytes after bag payload",
            bytes.len() as u128 - expected
        )));
    }

    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in bytes[BAG_HEADER_BYTES..BAG_HEADER_BYTES + n * d * 4]
        .chunks_exact(4)
        .enumerate()
    {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::data(format!(
                "non-finite feature value at flat index {i} in bag '{id}'"
            )));
        }
        data.push(v);
    }
    let coords = if has_coords {
        let base = BAG_HEADER_BYTES + n * d * 4;
        Some(
            bytes[base..base + n * 8]
                .chunks_exact(8)
                .map(|c| {
                    [
                        u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                        u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                    ]
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(BagRecord {
        id: id.to_string(),
        features: Tensor::constant(data, &[n, d])?,
        label: 0,
        coords,
    })
}

pub fn read_bag(path: &Path) -> Result<BagRecord> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("bag")
        .to_string();
    read_bag_bytes(&bytes, &id)
}

/// Which split a manifest row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split tag '{other}' (expected train, val, or test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Bag path; relative entries are already resolved against the manifest
    /// directory.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Parse `path,label,split` lines. Labels across the whole manifest must
/// form a contiguous `0..C-1` set, and no bag path may repeat.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "manifest line {}: expected 'path,label,split', got {raw:?}",
                ln + 1
            )));
        }
        let label: usize = fields[1].parse().map_err(|_| {
            Error::data(format!(
                "manifest line {}: label {:?} is not a nonnegative integer",
                ln + 1,
                fields[1]
            ))
        })?;
        let split: Split = fields[2].parse()?;
        let bag_path = if Path::new(fields[0]).is_absolute() {
            PathBuf::from(fields[0])
        } else {
            base.join(fields[0])
        };
        if !seen.insert(bag_path.clone()) {
            return Err(Error::data(format!(
                "manifest line {}: duplicate bag path {}",
                ln + 1,
                bag_path.display()
            )));
        }
        entries.push(ManifestEntry {
            path: bag_path,
            label,
            split,
        });
    }
    if entries.is_empty() {
        return Err(Error::data(format!(
            "manifest {} holds no entries",
            path.display()
        )));
    }
    let max_label = entries.iter().map(|e| e.label).max().unwrap_or(0);
    for wanted in 0..=max_label {
        if !entries.iter().any(|e| e.label == wanted) {
            return Err(Error::data(format!(
                "labels are not contiguous: {wanted} missing below max {max_label}"
            )));
        }
    }
    Ok(entries)
}

/// Write bags and a manifest (one split tag per bag, parallel to `bags`)
/// into `dir`; returns the manifest path. Bag files are named `{id}.capb`
/// and referenced relatively.
pub fn write_dataset(dir: &Path, bags: &[BagRecord], splits: &[Split]) -> Result<PathBuf> {
    if bags.len() != splits.len() {
        return Err(Error::config(format!(
            "{} bags but {} split tags",
            bags.len(),
            splits.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let file = File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    for (bag, split) in bags.iter().zip(splits) {
        let file_name = format!("{}.capb", bag.id);
        write_bag(&dir.join(&file_name), bag)?;
        writeln!(w, "{file_name},{},{split}", bag.label).map_err(|e| io_err(&manifest_path, e))?;
    }
    w.flush().map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Lazily reads bags from disk per trainer request, so datasets bigger than
/// RAM stream through training.
#[derive(Debug, Clone)]
pub struct DiskBagSource<T: Scalar> {
    entries: Vec<ManifestEntry>,
    _elem: PhantomData<T>,
}

impl<T: Scalar> DiskBagSource<T> {
    /// Keep only `split` rows from a loaded manifest.
    pub fn from_manifest(entries: &[ManifestEntry], split: Split) -> Self {
        DiskBagSource {
            entries: entries.iter().filter(|e| e.split == split).cloned().collect(),
            _elem: PhantomData,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.entries.iter().map(|e| e.path.as_path())
    }
}

impl<T: Scalar> BagSource<T> for DiskBagSource<T> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, idx: usize) -> Result<LabeledBag<T>> {
        let entry = &self.entries[idx];
        let mut record = read_bag(&entry.path)?;
        record.label = entry.label;
        Ok(record.to_labeled())
    }
}

/// Recipe for a seeded synthetic dataset that reproduces the published
/// failure mode: at low witness rate and large bags, mean pooling collapses
/// while the context-aware model does not.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_bags_per_class: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub d_in: usize,
    /// Fraction of patches in a positive bag replaced by signal morphology.
    pub witness_rate: f64,
    pub n_morphologies: usize,
    /// Distance between the signal mean and its parent background mean.
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Low witness rate, large bags: the regime where mean pooling fails.
    pub fn hard(n_bags_per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_bags_per_class,
            n_min: 2000,
            n_max: 6000,
            d_in: 1024,
            witness_rate: 0.02,
            n_morphologies: 8,
            separation: 4.0,
            noise_sigma: 1.0,
            seed,
        }
    }

    /// High witness rate, small bags: the regime where mean pooling is
    /// competitive.
    pub fn easy(n_bags_per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_min: 300,
            n_max: 700,
            witness_rate: 0.5,
            ..SyntheticSpec::hard(n_bags_per_class, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bags_per_class == 0 {
            return Err(Error::config("n_bags_per_class must be at least 1"));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::config(format!(
                "bag-size range [{}, {}] is invalid",
                self.n_min, self.n_max
            )));
        }
        if self.d_in == 0 {
            return Err(Error::config("d_in must be at least 1"));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return Err(Error::config(format!(
                "witness_rate must be in (0, 1], got {}",
                self.witness_rate
            )));
        }
        if self.n_morphologies < 2 {
            return Err(Error::config("n_morphologies must be at least 2"));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::config(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        if !(self.separation > 0.0) {
            return Err(Error::config(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        Ok(())
    }
}

fn unit_sphere_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Index drawn from the categorical distribution given by `cumulative`.
fn categorical(rng: &mut Rng, cumulative: &[f64]) -> usize {
    let u = rng.uniform();
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

/// Bag-at-a-time sampler behind the synthetic generator. Every bag draws
/// from its own seeded stream, so bags can be produced in any order — or
/// streamed straight to disk — without changing a single byte of output.
#[derive(Debug, Clone)]
pub struct SyntheticSampler {
    spec: SyntheticSpec,
    means: Vec<Vec<f64>>,
    signal: Vec<f64>,
    sizes: Vec<usize>,
}

impl SyntheticSampler {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut morph_rng = Rng::stream(spec.seed, name_tag("synthetic.morphologies"));
        let means: Vec<Vec<f64>> = (0..spec.n_morphologies)
            .map(|_| unit_sphere_vector(spec.d_in, &mut morph_rng))
            .collect();
        // Signal = the first morphology radially shifted so that the distance
        // to its parent equals `separation` (means are unit length).
        let signal: Vec<f64> = means[0]
            .iter()
            .map(|&x| x * (1.0 + spec.separation))
            .collect();

        // One size stream reused verbatim by both classes: bag j of either
        // class has the same N, so size cannot leak the label.
        let mut size_rng = Rng::stream(spec.seed, name_tag("synthetic.bag_sizes"));
        let span = (spec.n_max - spec.n_min + 1) as u64;
        let sizes: Vec<usize> = (0..spec.n_bags_per_class)
            .map(|_| spec.n_min + (size_rng.next_u64() % span) as usize)
            .collect();

        Ok(SyntheticSampler {
            spec: spec.clone(),
            means,
            signal,
            sizes,
        })
    }

    /// Bags per class (bag index `j` ranges over `0..bags_per_class()`).
    pub fn bags_per_class(&self) -> usize {
        self.spec.n_bags_per_class
    }

    /// Patch count of bag `j` (shared by both classes).
    pub fn bag_size(&self, j: usize) -> usize {
        self.sizes[j]
    }

    /// Synthesize bag `j` of `class`, returning it with its true signal-patch
    /// count. Deterministic in `(spec.seed, class, j)` alone.
    pub fn bag(&self, class: usize, j: usize) -> Result<(BagRecord, usize)> {
        if class > 1 || j >= self.sizes.len() {
            return Err(Error::config(format!(
                "bag (class {class}, index {j}) outside the {}-per-class grid",
                self.sizes.len()
            )));
        }
        let spec = &self.spec;
        let (k, d_in, n) = (spec.n_morphologies, spec.d_in, self.sizes[j]);
        let mut rng = Rng::stream(spec.seed, name_tag(&format!("synthetic.bag.c{class}.{j}")));
        // Per-bag background composition: symmetric Dirichlet over the
        // K morphologies via normalized exponentials.
        let gammas: Vec<f64> = (0..k).map(|_| -rng.uniform().max(1e-300).ln()).collect();
        let total: f64 = gammas.iter().sum();
        let mut cumulative = Vec::with_capacity(k);
        let mut acc = 0.0;
        for g in &gammas {
            acc += g / total;
            cumulative.push(acc);
        }

        let mut features = vec![0f32; n * d_in];
        let mut n_signal = 0usize;
        for p in 0..n {
            let is_signal = class == 1 && rng.uniform() < spec.witness_rate;
            let mean: &[f64] = if is_signal {
                n_signal += 1;
                &self.signal
            } else {
                &self.means[categorical(&mut rng, &cumulative)]
            };
            let row = &mut features[p * d_in..(p + 1) * d_in];
            for (slot, &m) in row.iter_mut().zip(mean) {
                *slot = (m + spec.noise_sigma * rng.normal()) as f32;
            }
        }

        let side = (n as f64).sqrt().ceil() as u32;
        let coords = (0..n as u32).map(|p| [p % side, p / side]).collect();
        let record = BagRecord {
            id: format!("syn_c{class}_{j:04}"),
            features: Tensor::constant(features, &[n, d_in])?,
            label: class,
            coords: Some(coords),
        };
        Ok((record, n_signal))
    }
}

/// [`generate_synthetic`] plus the true signal-patch count per bag, for
/// validating the witness-rate contract. Holds every bag in memory — for
/// datasets near RAM size, stream with [`write_synthetic_dataset`] instead.
pub fn generate_synthetic_traced(spec: &SyntheticSpec) -> Result<(Vec<BagRecord>, Vec<usize>)> {
    let sampler = SyntheticSampler::new(spec)?;
    let per_class = sampler.bags_per_class();
    let mut bags = Vec::with_capacity(2 * per_class);
    let mut signal_counts = Vec::with_capacity(2 * per_class);
    for class in 0..2usize {
        for j in 0..per_class {
            let (record, n_signal) = sampler.bag(class, j)?;
            bags.push(record);
            signal_counts.push(n_signal);
        }
    }
    Ok((bags, signal_counts))
}

/// Deterministic synthetic bags: class 1 plants `witness_rate` signal
/// patches; class 0 is pure background. See [`SyntheticSpec`].
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<BagRecord>> {
    Ok(generate_synthetic_traced(spec)?.0)
}

/// Shape of one dataset written by [`write_synthetic_dataset`]: sizes and
/// signal counts run in manifest order (class 0 bags, then class 1).
#[derive(Debug, Clone)]
pub struct SyntheticDatasetSummary {
    pub manifest: PathBuf,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub sizes: Vec<usize>,
    pub signal_counts: Vec<usize>,
}

/// Generate a synthetic dataset and stream it to `dir` one bag at a time,
/// so datasets bigger than RAM can be produced in bounded memory. The
/// output (bag bytes and manifest) is byte-identical to generating with
/// [`generate_synthetic`] and writing via [`write_dataset`].
///
/// `assign_split` maps `(class, bag index within class)` to a split tag.
pub fn write_synthetic_dataset(
    dir: &Path,
    spec: &SyntheticSpec,
    mut assign_split: impl FnMut(usize, usize) -> Split,
) -> Result<SyntheticDatasetSummary> {
    let sampler = SyntheticSampler::new(spec)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let file = File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut w = BufWriter::new(file);

    let per_class = sampler.bags_per_class();
    let mut summary = SyntheticDatasetSummary {
        manifest: manifest_path.clone(),
        labels: Vec::with_capacity(2 * per_class),
        splits: Vec::with_capacity(2 * per_class),
        sizes: Vec::with_capacity(2 * per_class),
        signal_counts: Vec::with_capacity(2 * per_class),
    };
    for class in 0..2usize {
        for j in 0..per_class {
            let (bag, n_signal) = sampler.bag(class, j)?;
            let split = assign_split(class, j);
            let file_name = format!("{}.capb", bag.id);
            write_bag(&dir.join(&file_name), &bag)?;
            writeln!(w, "{file_name},{},{split}", bag.label)
                .map_err(|e| io_err(&manifest_path, e))?;
            summary.labels.push(class);
            summary.splits.push(split);
            summary.sizes.push(bag.n_patches());
            summary.signal_counts.push(n_signal);
        }
    }
    w.flush().map_err(|e| io_err(&manifest_path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bag(n: usize, d: usize, with_coords: bool) -> BagRecord {
        let mut rng = Rng::stream(5, 5);
        let data: Vec<f32> = (0..n * d).map(|_| rng.normal() as f32).collect();
        BagRecord {
            id: "tiny".into(),
            features: Tensor::constant(data, &[n, d]).unwrap(),
            label: 1,
            coords: with_coords.then(|| (0..n as u32).map(|p| [p, p * 2]).collect()),
        }
    }

    #[test]
    fn bag_round_trip_is_bit_exact() {
        for with_coords in [false, true] {
            let bag = tiny_bag(7, 5, with_coords);
            let bytes = write_bag_bytes(&bag);
            let back = read_bag_bytes(&bytes, "tiny").unwrap();
            assert_eq!(back.features.shape(), bag.features.shape());
            assert!(back
                .features
                .data()
                .iter()
                .zip(bag.features.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(back.coords, bag.coords);
        }
    }

    #[test]
    fn bag_file_size_is_exactly_header_plus_payload() {
        // Five 4-byte header fields (magic, version, N, D, flags) = 20
        // bytes, then N·D f32s and optionally N coordinate pairs.
        let no_coords = tiny_bag(9, 4, false);
        assert_eq!(write_bag_bytes(&no_coords).len(), 20 + 9 * 4 * 4);
        let with_coords = tiny_bag(9, 4, true);
        assert_eq!(write_bag_bytes(&with_coords).len(), 20 + 9 * 4 * 4 + 9 * 8);
    }

    #[test]
    fn reader_rejects_bad_magic_version_flags_and_empty_bags() {
        let bag = tiny_bag(3, 2, true);
        let good = write_bag_bytes(&bag);

        let mut bad = good.clone();
        bad[0] = b'Z';
        assert!(matches!(read_bag_bytes(&bad, "x"), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[4] = 7;
        assert!(read_bag_bytes(&bad, "x").unwrap_err().to_string().contains("version"));

        let mut bad = good.clone();
        bad[16] = 0x02; // undefined flag bit
        assert!(read_bag_bytes(&bad, "x").unwrap_err().to_string().contains("flag"));

        let mut bad = good.clone();
        bad[8..12].fill(0); // N = 0
        assert!(matches!(read_bag_bytes(&bad, "x"), Err(Error::Data(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_reported() {
        let bag = tiny_bag(4, 3, false);
        let good = write_bag_bytes(&bag);
        let err = read_bag_bytes(&good[..good.len() - 5], "x").unwrap_err().to_string();
        assert!(err.contains("truncated at byte"), "{err}");
        let mut long = good.clone();
        long.push(0);
        let err = read_bag_bytes(&long, "x").unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn non_finite_features_are_data_errors() {
        let bag = tiny_bag(3, 2, false);
        let mut bytes = write_bag_bytes(&bag);
        bytes[BAG_HEADER_BYTES..BAG_HEADER_BYTES + 4]
            .copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(read_bag_bytes(&bytes, "x"), Err(Error::Data(_))));
    }

    #[test]
    fn header_fuzz_never_panics() {
        let bag = tiny_bag(5, 3, true);
        let good = write_bag_bytes(&bag);
        for i in 0..BAG_HEADER_BYTES {
            for flip in [0x01u8, 0x80, 0xFF] {
                let mut fuzzed = good.clone();
                fuzzed[i] ^= flip;
                let _ = read_bag_bytes(&fuzzed, "x"); // typed error or success, no panic
            }
        }
        for cut in 0..good.len().min(64) {
            assert!(read_bag_bytes(&good[..cut], "x").is_err());
        }
    }

    #[test]
    fn manifest_parses_in_order_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        fs::write(
            &path,
            "# comment\nbag0.capb,0,train\n\nbag1.capb,1,test # inline note\n",
        )
        .unwrap();
        let entries = load_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].path, dir.path().join("bag0.capb"));
        assert_eq!(entries[0].label, 0);
        assert_eq!(entries[0].split, Split::Train);
        assert_eq!(entries[1].split, Split::Test);
    }

    #[test]
    fn manifest_rejects_gapped_labels_duplicates_and_unknown_splits() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, body: &str| {
            let p = dir.path().join(name);
            fs::write(&p, body).unwrap();
            p
        };
        let gapped = write("gapped.csv", "a.capb,0,train\nb.capb,2,train\n");
        assert!(matches!(load_manifest(&gapped), Err(Error::Data(_))));
        let dup = write("dup.csv", "a.capb,0,train\na.capb,1,test\n");
        assert!(matches!(load_manifest(&dup), Err(Error::Data(_))));
        let weird = write("weird.csv", "a.capb,0,validation\n");
        assert!(matches!(load_manifest(&weird), Err(Error::Config(_))));
    }

    #[test]
    fn ten_fold_style_manifests_cover_every_bag_exactly_once() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..30).map(|i| format!("bag{i:02}.capb")).collect();
        for fold in 0..10 {
            let body: String = ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let split = if i / 3 == fold { "test" } else { "train" };
                    format!("{id},{},{split}\n", i % 2)
                })
                .collect();
            let path = dir.path().join(format!("fold{fold}.csv"));
            fs::write(&path, body).unwrap();
            let entries = load_manifest(&path).unwrap();
            assert_eq!(entries.len(), ids.len());
            let mut seen: Vec<&str> = entries
                .iter()
                .map(|e| e.path.file_name().unwrap().to_str().unwrap())
                .collect();
            seen.sort_unstable();
            let mut want: Vec<&str> = ids.iter().map(String::as_str).collect();
            want.sort_unstable();
            assert_eq!(seen, want, "fold {fold} does not cover all bags once");
            assert_eq!(entries.iter().filter(|e| e.split == Split::Test).count(), 3);
        }
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_bags_per_class: 12,
            n_min: 20,
            n_max: 40,
            d_in: 16,
            witness_rate: 0.3,
            n_morphologies: 4,
            separation: 4.0,
            noise_sigma: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.label, y.label);
            assert_eq!(x.coords, y.coords);
            assert!(x
                .features
                .data()
                .iter()
                .zip(y.features.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn bag_sizes_match_exactly_across_classes() {
        let bags = generate_synthetic(&small_spec()).unwrap();
        let per_class: Vec<Vec<usize>> = (0..2)
            .map(|c| {
                bags.iter()
                    .filter(|b| b.label == c)
                    .map(BagRecord::n_patches)
                    .collect()
            })
            .collect();
        assert_eq!(per_class[0], per_class[1]);
    }

    #[test]
    fn witness_rate_matches_within_three_binomial_sigmas() {
        let spec = SyntheticSpec {
            n_bags_per_class: 30,
            n_min: 50,
            n_max: 100,
            d_in: 8,
            ..small_spec()
        };
        let (bags, counts) = generate_synthetic_traced(&spec).unwrap();
        let mut signal = 0usize;
        let mut total = 0usize;
        for (bag, &c) in bags.iter().zip(&counts) {
            if bag.label == 1 {
                signal += c;
                total += bag.n_patches();
            } else {
                assert_eq!(c, 0, "negative bag got signal patches");
            }
        }
        let w = spec.witness_rate;
        let sigma = (w * (1.0 - w) / total as f64).sqrt();
        let observed = signal as f64 / total as f64;
        assert!(
            (observed - w).abs() <= 3.0 * sigma,
            "observed witness rate {observed} vs {w} ± {}",
            3.0 * sigma
        );
    }

    #[test]
    fn coords_form_a_square_raster() {
        let bags = generate_synthetic(&small_spec()).unwrap();
        for bag in &bags {
            let n = bag.n_patches();
            let side = (n as f64).sqrt().ceil() as u32;
            let coords = bag.coords.as_ref().unwrap();
            assert_eq!(coords.len(), n);
            for (p, &[x, y]) in coords.iter().enumerate() {
                assert_eq!(x, p as u32 % side);
                assert_eq!(y, p as u32 / side);
                assert!(x < side && y <= side);
            }
        }
    }

    /// Fisher criterion of bag-mean features projected on the class-mean
    /// difference: with every patch a signal patch and a 10σ shift, the bag
    /// means must be separable by a huge margin.
    #[test]
    fn full_witness_large_separation_is_linearly_separable() {
        let spec = SyntheticSpec {
            n_bags_per_class: 25,
            n_min: 20,
            n_max: 40,
            d_in: 32,
            witness_rate: 1.0,
            n_morphologies: 4,
            separation: 10.0,
            noise_sigma: 1.0,
            seed: 11,
        };
        let bags = generate_synthetic(&spec).unwrap();
        let bag_means: Vec<(usize, Vec<f64>)> = bags
            .iter()
            .map(|b| {
                let n = b.n_patches() as f64;
                let mut m = vec![0.0; spec.d_in];
                for row in b.features.data().chunks_exact(spec.d_in) {
                    for (acc, &v) in m.iter_mut().zip(row) {
                        *acc += v as f64 / n;
                    }
                }
                (b.label, m)
            })
            .collect();
        let class_mean = |c: usize| -> Vec<f64> {
            let members: Vec<&Vec<f64>> = bag_means
                .iter()
                .filter(|(l, _)| *l == c)
                .map(|(_, m)| m)
                .collect();
            let mut out = vec![0.0; spec.d_in];
            for m in &members {
                for (o, &v) in out.iter_mut().zip(m.iter()) {
                    *o += v / members.len() as f64;
                }
            }
            out
        };
        let (m0, m1) = (class_mean(0), class_mean(1));
        let dir: Vec<f64> = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
        let project = |m: &Vec<f64>| m.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
        let stats = |c: usize| -> (f64, f64) {
            let xs: Vec<f64> = bag_means
                .iter()
                .filter(|(l, _)| *l == c)
                .map(|(_, m)| project(m))
                .collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            (mean, var)
        };
        let ((mu0, v0), (mu1, v1)) = (stats(0), stats(1));
        let fisher = (mu1 - mu0).powi(2) / (v0 + v1);
        assert!(fisher > 100.0, "Fisher criterion {fisher} not > 100");
    }

    #[test]
    fn dataset_round_trip_through_disk_source() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_bags_per_class: 3,
            n_min: 5,
            n_max: 9,
            d_in: 6,
            ..small_spec()
        };
        let bags = generate_synthetic(&spec).unwrap();
        let splits: Vec<Split> = (0..bags.len())
            .map(|i| if i % 3 == 0 { Split::Test } else { Split::Train })
            .collect();
        let manifest = write_dataset(dir.path(), &bags, &splits).unwrap();
        let entries = load_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), bags.len());
        let source: DiskBagSource<f32> = DiskBagSource::from_manifest(&entries, Split::Train);
        assert_eq!(BagSource::<f32>::len(&source), 4);
        for idx in 0..BagSource::<f32>::len(&source) {
            let lb = source.get(idx).unwrap();
            assert_eq!(lb.features.shape()[1], spec.d_in);
        }
        // Round-trip bit-exactness against the original record
        let back = read_bag(&entries[0].path).unwrap();
        let original = bags
            .iter()
            .find(|b| format!("{}.capb", b.id) == entries[0].path.file_name().unwrap().to_str().unwrap())
            .unwrap();
        assert!(back
            .features
            .data()
            .iter()
            .zip(original.features.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn streamed_dataset_matches_the_in_memory_path_byte_for_byte() {
        let spec = SyntheticSpec {
            n_bags_per_class: 4,
            n_min: 6,
            n_max: 11,
            d_in: 7,
            ..small_spec()
        };
        let split_of = |class: usize, j: usize| match (class + j) % 3 {
            0 => Split::Train,
            1 => Split::Val,
            _ => Split::Test,
        };

        let streamed = tempfile::tempdir().unwrap();
        let summary = write_synthetic_dataset(streamed.path(), &spec, split_of).unwrap();

        let (bags, signal_counts) = generate_synthetic_traced(&spec).unwrap();
        let splits: Vec<Split> = bags
            .iter()
            .enumerate()
            .map(|(i, _)| split_of(i / spec.n_bags_per_class, i % spec.n_bags_per_class))
            .collect();
        let in_memory = tempfile::tempdir().unwrap();
        let manifest = write_dataset(in_memory.path(), &bags, &splits).unwrap();

        assert_eq!(
            std::fs::read(&summary.manifest).unwrap(),
            std::fs::read(&manifest).unwrap(),
            "manifests differ between the streaming and in-memory writers"
        );
        for bag in &bags {
            let name = format!("{}.capb", bag.id);
            assert_eq!(
                std::fs::read(streamed.path().join(&name)).unwrap(),
                std::fs::read(in_memory.path().join(&name)).unwrap(),
                "{name} differs between the streaming and in-memory writers"
            );
        }
        assert_eq!(summary.signal_counts, signal_counts);
        assert_eq!(
            summary.sizes,
            bags.iter().map(|b| b.n_patches()).collect::<Vec<_>>()
        );
        assert_eq!(summary.splits, splits);
    }

    #[test]
    fn spec_validation_rejects_out_of_range_fields() {
        let mut bad = small_spec();
        bad.witness_rate = 0.0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = small_spec();
        bad.n_morphologies = 1;
        assert!(bad.validate().is_err());
        let mut bad = small_spec();
        bad.n_min = 50;
        bad.n_max = 20;
        assert!(bad.validate().is_err());
        let mut bad = small_spec();
        bad.noise_sigma = 0.0;
        assert!(bad.validate().is_err());
    }
}
