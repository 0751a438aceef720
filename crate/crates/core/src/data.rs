//! Datasets: per-sample payload files, the manifest CSV, the synthetic
//! stripe-texture generator, the seeded batch sampler and the k-fold splitter.
//!
//! Training code only ever sees an [`ImageSet`] (pixels and ids). Ground
//! truth lives in [`Dataset::labels`] and the separate `labels.csv` file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::InputGeometry;
use crate::tensor::Tensor;

pub const PAYLOAD_MAGIC: &[u8; 4] = b"PCLS";
pub const PAYLOAD_VERSION: u8 = 1;
pub const MANIFEST_HEADER: &str = "#pseudoclass-manifest v1";
pub const LABELS_HEADER: &str = "#pseudoclass-labels v1";

/// Smallest image side the texture generator accepts.
pub const MIN_SYNTHETIC_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    /// Quantized samples, scaled by 1/255 on load.
    U8(Vec<u8>),
    /// Already-scaled samples.
    F64(Vec<f64>),
}

/// One image, stored height × width × channels (channels fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub geometry: InputGeometry,
    pub pixels: Pixels,
}

impl Payload {
    /// Converts to a CHW tensor of `[0, 1]` doubles.
    pub fn to_chw(&self) -> Tensor {
        let InputGeometry {
            channels: c,
            height: h,
            width: w,
        } = self.geometry;
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let src = (y * w + x) * c + ch;
                    out[(ch * h + y) * w + x] = match &self.pixels {
                        Pixels::U8(b) => f64::from(b[src]) / 255.0,
                        Pixels::F64(v) => v[src],
                    };
                }
            }
        }
        Tensor::new(vec![c, h, w], out).expect("geometry and length agree")
    }

    pub fn encode(&self) -> Vec<u8> {
        let g = self.geometry;
        let mut out = Vec::with_capacity(18 + g.len() * 8);
        out.extend_from_slice(PAYLOAD_MAGIC);
        out.push(PAYLOAD_VERSION);
        out.push(match self.pixels {
            Pixels::U8(_) => 0,
            Pixels::F64(_) => 1,
        });
        for v in [g.height, g.width, g.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        match &self.pixels {
            Pixels::U8(b) => out.extend_from_slice(b),
            Pixels::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Payload, String> {
        if bytes.len() < 18 || &bytes[..4] != PAYLOAD_MAGIC {
            return Err("bad magic or short header".into());
        }
        if bytes[4] != PAYLOAD_VERSION {
            return Err(format!("unsupported payload version {}", bytes[4]));
        }
        let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let geometry = InputGeometry::new(dim(14), dim(6), dim(10));
        let n = geometry.len();
        let body = &bytes[18..];
        let pixels = match bytes[5] {
            0 if body.len() == n => Pixels::U8(body.to_vec()),
            1 if body.len() == n * 8 => Pixels::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            0 | 1 => return Err(format!("payload length {} does not match geometry {geometry:?}", body.len())),
            t => return Err(format!("unknown sample type {t}")),
        };
        Ok(Payload { geometry, pixels })
    }
}

pub fn write_sample(path: &Path, payload: &Payload) -> Result<()> {
    fs::write(path, payload.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<Payload> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Payload::decode(&bytes).map_err(|reason| Error::Payload {
        path: path.to_path_buf(),
        reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub label_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub geometry: Option<InputGeometry>,
    /// Directory that relative payload paths resolve against.
    pub root: PathBuf,
}

fn parse_header_fields(line: &str, prefix: &str) -> Option<BTreeMap<String, String>> {
    let rest = line.strip_prefix(prefix)?;
    Some(
        rest.split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    )
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut geometry = None;
        let mut declared = None;
        if let Some(fields) = text.lines().next().and_then(|l| parse_header_fields(l, MANIFEST_HEADER)) {
            let get = |k: &str| fields.get(k).and_then(|v| v.parse::<usize>().ok());
            if let (Some(h), Some(w), Some(c)) = (get("height"), get("width"), get("channels")) {
                geometry = Some(InputGeometry::new(c, h, w));
            }
            declared = get("count");
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let entries = reader
            .deserialize::<ManifestEntry>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if entries.is_empty() {
            return Err(Error::Dataset(format!("{}: no samples", path.display())));
        }
        if let Some(n) = declared {
            if n != entries.len() {
                return Err(Error::Dataset(format!(
                    "{}: header declares {n} samples, found {}",
                    path.display(),
                    entries.len()
                )));
            }
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample id `{}`", e.id)));
            }
        }
        Ok(DatasetManifest {
            entries,
            geometry,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        match self.geometry {
            Some(g) => writeln!(
                out,
                "{MANIFEST_HEADER} height={} width={} channels={} count={}",
                g.height,
                g.width,
                g.channels,
                self.entries.len()
            ),
            None => writeln!(out, "{MANIFEST_HEADER} count={}", self.entries.len()),
        }
        .expect("write to Vec");
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["id", "path", "label", "label_name"])?;
        for e in &self.entries {
            w.write_record([
                e.id.as_str(),
                e.path.as_str(),
                &e.label.map(|l| l.to_string()).unwrap_or_default(),
                e.label_name.as_deref().unwrap_or(""),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        drop(w);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Pixels and ids only; this is all the trainer ever receives.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    ids: Vec<String>,
    /// `[N, C, H, W]`.
    images: Tensor,
}

impl ImageSet {
    pub fn new(ids: Vec<String>, images: Tensor) -> Result<Self> {
        if images.shape().len() != 4 || images.rows() != ids.len() {
            return Err(Error::Dataset(format!(
                "{} ids for image tensor {:?}",
                ids.len(),
                images.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::Dataset("no samples".into()));
        }
        Ok(ImageSet { ids, images })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn geometry(&self) -> InputGeometry {
        let s = self.images.shape();
        InputGeometry::new(s[1], s[2], s[3])
    }

    pub fn select(&self, indices: &[usize]) -> Tensor {
        self.images.select_rows(indices)
    }
}

/// A loaded dataset: the unlabeled image set plus any ground truth found in
/// the manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: ImageSet,
}

impl Dataset {
    pub fn images(&self) -> &ImageSet {
        &self.images
    }

    /// Per-sample labels from the manifest, if every entry carries one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.manifest.entries.iter().map(|e| e.label).collect()
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let mut geometry = manifest.geometry;
    let mut data = Vec::new();
    for e in &manifest.entries {
        let p = manifest.root.join(&e.path);
        if !p.is_file() {
            return Err(Error::Dataset(format!("missing payload {} for sample `{}`", p.display(), e.id)));
        }
        let payload = read_sample(&p)?;
        match geometry {
            None => geometry = Some(payload.geometry),
            Some(g) if g != payload.geometry => {
                return Err(Error::Dataset(format!(
                    "geometry mismatch for sample `{}`: expected {g:?}, payload is {:?}",
                    e.id, payload.geometry
                )))
            }
            Some(_) => {}
        }
        data.extend(payload.to_chw().into_data());
    }
    let g = geometry.expect("non-empty manifest");
    let images = Tensor::new(vec![manifest.len(), g.channels, g.height, g.width], data)?;
    let ids = manifest.entries.iter().map(|e| e.id.clone()).collect();
    Ok(Dataset {
        images: ImageSet::new(ids, images)?,
        manifest,
    })
}

/// Ground truth, keyed by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub label: usize,
    #[serde(default)]
    pub label_name: Option<String>,
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{LABELS_HEADER} count={}", records.len()).expect("write to Vec");
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["id", "label", "label_name"])?;
    for r in records {
        w.write_record([r.id.as_str(), &r.label.to_string(), r.label_name.as_deref().unwrap_or("")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    drop(w);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let records = reader
        .deserialize::<LabelRecord>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if records.is_empty() {
        return Err(Error::Dataset(format!("{}: no labels", path.display())));
    }
    Ok(records)
}

/// Looks up the label of every id, in the order given.
pub fn align_labels(ids: &[String], records: &[LabelRecord]) -> Result<Vec<usize>> {
    let map: BTreeMap<&str, usize> = records.iter().map(|r| (r.id.as_str(), r.label)).collect();
    ids.iter()
        .map(|id| {
            map.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Dataset(format!("no label for sample `{id}`")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub per_class: usize,
    pub geometry: InputGeometry,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Generated samples before they are written to disk.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub payloads: Vec<Payload>,
}

impl SyntheticSet {
    pub fn image_set(&self) -> ImageSet {
        let g = self.payloads[0].geometry;
        let data = self.payloads.iter().flat_map(|p| p.to_chw().into_data()).collect();
        let images = Tensor::new(vec![self.ids.len(), g.channels, g.height, g.width], data)
            .expect("uniform geometry");
        ImageSet::new(self.ids.clone(), images).expect("non-empty")
    }
}

/// Noise-free intensity of class `class` at pixel `(y, x)`, channel `ch`.
///
/// Each class is an oriented sinusoidal grating with its own angle and
/// period; channels differ by a phase offset.
pub fn stripe_intensity(class: usize, num_classes: usize, y: usize, x: usize, ch: usize) -> f64 {
    let angle = std::f64::consts::PI * class as f64 / num_classes as f64;
    let period = 3.0 + 4.0 * ((class * 3) % num_classes) as f64 / num_classes as f64;
    let phase = ch as f64 * std::f64::consts::FRAC_PI_3;
    let u = x as f64 * angle.cos() + y as f64 * angle.sin();
    0.5 + 0.4 * (2.0 * std::f64::consts::PI * u / period + phase).sin()
}

/// Stripe-texture classes plus Gaussian pixel noise, quantized to bytes.
/// Samples are interleaved by class: sample `i` belongs to class `i % K`.
pub fn synthesize(params: &SyntheticParams) -> Result<SyntheticSet> {
    let SyntheticParams {
        num_classes,
        per_class,
        geometry: g,
        noise_sigma,
        seed,
    } = *params;
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    if per_class == 0 || g.channels == 0 {
        return Err(Error::Config("per_class and channels must be positive".into()));
    }
    if g.height < MIN_SYNTHETIC_SIDE || g.width < MIN_SYNTHETIC_SIDE {
        return Err(Error::Config(format!(
            "geometry {}x{} too small for textures (minimum {MIN_SYNTHETIC_SIDE}x{MIN_SYNTHETIC_SIDE})",
            g.height, g.width
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma must be non-negative, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let n = num_classes * per_class;
    let mut set = SyntheticSet {
        ids: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        payloads: Vec::with_capacity(n),
    };
    for i in 0..n {
        let class = i % num_classes;
        let mut bytes = Vec::with_capacity(g.len());
        for y in 0..g.height {
            for x in 0..g.width {
                for ch in 0..g.channels {
                    let mut v = stripe_intensity(class, num_classes, y, x, ch);
                    if noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        set.ids.push(format!("s{i:05}"));
        set.labels.push(class);
        set.payloads.push(Payload {
            geometry: g,
            pixels: Pixels::U8(bytes),
        });
    }
    Ok(set)
}

/// Resubstitution accuracy of a nearest-class-mean classifier on raw pixels.
pub fn nearest_centroid_accuracy(images: &Tensor, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let d = images.row_len();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (m, v) in means[l].iter_mut().zip(images.row(i)) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = images.row(i);
            let best = (0..k)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&means[a]).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = row.iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == l
        })
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticReport {
    pub format: String,
    pub version: u32,
    pub params: SyntheticParams,
    pub num_samples: usize,
    pub nearest_centroid_accuracy: f64,
}

/// Writes payloads, `manifest.csv` (no labels), `labels.csv` and
/// `calibration.json` under `out_dir`.
pub fn gen_synthetic(params: &SyntheticParams, out_dir: &Path) -> Result<SyntheticReport> {
    let set = synthesize(params)?;
    let payload_dir = out_dir.join("payloads");
    fs::create_dir_all(&payload_dir).map_err(|e| Error::io(&payload_dir, e))?;
    let mut entries = Vec::with_capacity(set.ids.len());
    let mut labels = Vec::with_capacity(set.ids.len());
    for ((id, &label), payload) in set.ids.iter().zip(&set.labels).zip(&set.payloads) {
        let rel = format!("payloads/{id}.pcs");
        write_sample(&out_dir.join(&rel), payload)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            path: rel,
            label: None,
            label_name: None,
        });
        labels.push(LabelRecord {
            id: id.clone(),
            label,
            label_name: Some(format!("stripes{label}")),
        });
    }
    DatasetManifest {
        entries,
        geometry: Some(params.geometry),
        root: out_dir.to_path_buf(),
    }
    .write(&out_dir.join("manifest.csv"))?;
    write_labels(&out_dir.join("labels.csv"), &labels)?;

    let report = SyntheticReport {
        format: "pseudoclass-synthetic".into(),
        version: 1,
        params: *params,
        num_samples: set.ids.len(),
        nearest_centroid_accuracy: nearest_centroid_accuracy(set.image_set().images(), &set.labels),
    };
    let path = out_dir.join("calibration.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// K disjoint, jointly exhaustive folds of sample indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
    pub stratified: bool,
    pub warnings: Vec<String>,
}

impl FoldSplit {
    pub fn num_samples(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }
}

/// Seeded split into `k` folds; stratified by class when labels are given
/// and every class has at least `k` members.
pub fn kfold_split(num_samples: usize, labels: Option<&[usize]>, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if num_samples < k {
        return Err(Error::Config(format!("{num_samples} samples cannot fill {k} folds")));
    }
    if let Some(l) = labels {
        if l.len() != num_samples {
            return Err(Error::Config(format!("{} labels for {num_samples} samples", l.len())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut order: Vec<usize> = Vec::with_capacity(num_samples);
    let mut stratified = false;
    if let Some(labels) = labels {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        if let Some((class, members)) = groups.iter().find(|(_, m)| m.len() < k) {
            warnings.push(format!(
                "class {class} has {} samples, fewer than {k} folds; falling back to an unstratified split",
                members.len()
            ));
        } else {
            stratified = true;
            for members in groups.values_mut() {
                members.shuffle(&mut rng);
                order.extend_from_slice(members);
            }
        }
    }
    if !stratified {
        order = (0..num_samples).collect();
        order.shuffle(&mut rng);
    }
    let mut folds = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    Ok(FoldSplit {
        folds,
        stratified,
        warnings,
    })
}

/// Deterministic minibatch schedule: each pass over the data is a fresh
/// seeded permutation cut into consecutive slices, and the short tail slice
/// of a pass is kept. The batch for any step is computable directly, which
/// makes resuming from a checkpoint exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSampler {
    num_samples: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(num_samples: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > num_samples {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be in 1..={num_samples}"
            )));
        }
        Ok(BatchSampler {
            num_samples,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_pass(&self) -> usize {
        self.num_samples.div_ceil(self.batch_size)
    }

    pub fn permutation(&self, pass: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(pass);
        let mut perm: Vec<usize> = (0..self.num_samples).collect();
        perm.shuffle(&mut rng);
        perm
    }

    /// Sample indices of the batch used at `step` (0-based).
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let bpp = self.batches_per_pass() as u64;
        let (pass, slot) = (step / bpp, (step % bpp) as usize);
        let perm = self.permutation(pass);
        let start = slot * self.batch_size;
        perm[start..(start + self.batch_size).min(self.num_samples)].to_vec()
    }
}

/// One minibatch: pixels and ids, no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub images: Tensor,
}

pub struct BatchIter<'a> {
    set: &'a ImageSet,
    sampler: BatchSampler,
    step: u64,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let indices = self.sampler.batch(self.step);
        self.step += 1;
        Some(Batch {
            ids: indices.iter().map(|&i| self.set.ids()[i].clone()).collect(),
            images: self.set.select(&indices),
            indices,
        })
    }
}

/// Endless stream of batches following [`BatchSampler`].
pub fn batch_iter(set: &ImageSet, batch_size: usize, seed: u64) -> Result<BatchIter<'_>> {
    Ok(BatchIter {
        set,
        sampler: BatchSampler::new(set.len(), batch_size, seed)?,
        step: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(per_class: usize, noise: f64) -> SyntheticParams {
        SyntheticParams {
            num_classes: 5,
            per_class,
            geometry: InputGeometry::new(1, 16, 16),
            noise_sigma: noise,
            seed: 7,
        }
    }

    #[test]
    fn payload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Payload {
            geometry: InputGeometry::new(2, 3, 4),
            pixels: Pixels::U8((0..24).map(|v| (v * 10) as u8).collect()),
        };
        let path = dir.path().join("a.pcs");
        write_sample(&path, &p).unwrap();
        let back = read_sample(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_chw(), p.to_chw());

        let f = Payload {
            geometry: InputGeometry::new(1, 2, 2),
            pixels: Pixels::F64(vec![0.0, 0.25, 0.5, 1.0]),
        };
        assert_eq!(Payload::decode(&f.encode()).unwrap(), f);
        assert!(Payload::decode(&f.encode()[..20]).is_err());
    }

    #[test]
    fn pixel_scaling_is_exact() {
        let p = Payload {
            geometry: InputGeometry::new(1, 1, 3),
            pixels: Pixels::U8(vec![0, 17, 255]),
        };
        assert_eq!(p.to_chw().data(), &[0.0, 17.0 / 255.0, 1.0]);
    }

    #[test]
    fn hwc_payload_becomes_chw() {
        let p = Payload {
            geometry: InputGeometry::new(2, 1, 2),
            pixels: Pixels::F64(vec![0.1, 0.2, 0.3, 0.4]),
        };
        assert_eq!(p.to_chw().data(), &[0.1, 0.3, 0.2, 0.4]);
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let set = synthesize(&params(4, 0.0)).unwrap();
        for i in 5..20 {
            assert_eq!(set.payloads[i], set.payloads[i % 5]);
        }
        assert_ne!(set.payloads[0], set.payloads[1]);
    }

    #[test]
    fn synthetic_counts_and_separability() {
        let set = synthesize(&params(100, 0.05)).unwrap();
        assert_eq!(set.ids.len(), 500);
        let mut counts = [0; 5];
        set.labels.iter().for_each(|&l| counts[l] += 1);
        assert_eq!(counts, [100; 5]);
        let acc = nearest_centroid_accuracy(set.image_set().images(), &set.labels);
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn synthetic_rejects_bad_params() {
        let mut p = params(2, 0.0);
        p.geometry = InputGeometry::new(1, 7, 16);
        assert!(synthesize(&p).is_err());
        let mut p = params(2, 0.0);
        p.num_classes = 1;
        assert!(synthesize(&p).is_err());
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synthesize(&params(3, 0.1)).unwrap();
        let b = synthesize(&params(3, 0.1)).unwrap();
        assert_eq!(a.payloads, b.payloads);
        let mut p = params(3, 0.1);
        p.seed = 8;
        assert_ne!(synthesize(&p).unwrap().payloads, a.payloads);
    }

    #[test]
    fn generated_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let report = gen_synthetic(&params(2, 0.05), dir.path()).unwrap();
        assert_eq!(report.num_samples, 10);
        let ds = load_dataset(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(ds.images().len(), 10);
        assert_eq!(ds.images().geometry(), InputGeometry::new(1, 16, 16));
        assert!(ds.labels().is_none(), "training manifest must not carry labels");
        let labels = read_labels(&dir.path().join("labels.csv")).unwrap();
        let aligned = align_labels(ds.images().ids(), &labels).unwrap();
        assert_eq!(aligned, (0..10).map(|i| i % 5).collect::<Vec<_>>());

        let set = synthesize(&params(2, 0.05)).unwrap();
        assert_eq!(set.image_set(), *ds.images());
    }

    fn write_manifest(dir: &Path, rows: &[(&str, &str)]) -> PathBuf {
        let path = dir.join("m.csv");
        let mut text = String::from("id,path,label,label_name\n");
        for (id, p) in rows {
            text.push_str(&format!("{id},{p},,\n"));
        }
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write_manifest(dir.path(), &[]);
        let err = load_dataset(&empty).unwrap_err().to_string();
        assert!(err.contains("no samples"), "{err}");

        let a = Payload {
            geometry: InputGeometry::new(1, 2, 2),
            pixels: Pixels::U8(vec![1, 2, 3, 4]),
        };
        let b = Payload {
            geometry: InputGeometry::new(1, 2, 3),
            pixels: Pixels::U8(vec![0; 6]),
        };
        write_sample(&dir.path().join("a.pcs"), &a).unwrap();
        write_sample(&dir.path().join("b.pcs"), &b).unwrap();

        let ok = write_manifest(dir.path(), &[("x", "a.pcs"), ("y", "a.pcs"), ("z", "a.pcs")]);
        assert_eq!(load_dataset(&ok).unwrap().images().len(), 3);

        let dup = write_manifest(dir.path(), &[("x", "a.pcs"), ("x", "a.pcs")]);
        assert!(load_dataset(&dup).unwrap_err().to_string().contains("duplicate"));

        let missing = write_manifest(dir.path(), &[("x", "a.pcs"), ("y", "nope.pcs")]);
        assert!(load_dataset(&missing).unwrap_err().to_string().contains("missing payload"));

        let mixed = write_manifest(dir.path(), &[("x", "a.pcs"), ("y", "b.pcs")]);
        assert!(load_dataset(&mixed).unwrap_err().to_string().contains("geometry mismatch"));
    }

    #[test]
    fn kfold_basic_properties() {
        let split = kfold_split(10, None, 5, 1).unwrap();
        assert!(split.folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<usize> = split.folds.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(kfold_split(3, None, 5, 1).is_err());
    }

    #[test]
    fn kfold_stratifies() {
        let labels: Vec<usize> = (0..500).map(|i| i % 5).collect();
        let split = kfold_split(500, Some(&labels), 5, 3).unwrap();
        assert!(split.stratified);
        for fold in &split.folds {
            let mut counts = [0; 5];
            fold.iter().for_each(|&i| counts[labels[i]] += 1);
            assert_eq!(counts, [20; 5]);
        }
        assert_eq!(split, kfold_split(500, Some(&labels), 5, 3).unwrap());
    }

    #[test]
    fn kfold_falls_back_for_small_classes() {
        let mut labels = vec![0; 20];
        labels[3] = 1;
        let split = kfold_split(20, Some(&labels), 5, 0).unwrap();
        assert!(!split.stratified);
        assert_eq!(split.warnings.len(), 1);
        assert_eq!(split.num_samples(), 20);
    }

    #[test]
    fn sampler_covers_each_pass() {
        let s = BatchSampler::new(10, 4, 9).unwrap();
        assert_eq!(s.batches_per_pass(), 3);
        for pass in 0..3u64 {
            let mut seen: Vec<usize> = (0..3).flat_map(|b| s.batch(pass * 3 + b)).collect();
            assert_eq!(s.batch(pass * 3 + 2).len(), 2);
            seen.sort();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
        assert_ne!(s.permutation(0), s.permutation(1));
        assert!(BatchSampler::new(3, 4, 0).is_err());
    }

    #[test]
    fn batch_iter_is_deterministic() {
        let set = synthesize(&params(2, 0.05)).unwrap().image_set();
        let a: Vec<Batch> = batch_iter(&set, 10, 5).unwrap().take(3).collect();
        let b: Vec<Batch> = batch_iter(&set, 10, 5).unwrap().take(3).collect();
        assert_eq!(a, b);
        // batch_size == N: one batch per pass with every sample
        let mut ids = a[0].ids.clone();
        ids.sort();
        assert_eq!(ids, set.ids().to_vec());
    }
}
