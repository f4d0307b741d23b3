//! Datasets, IDX ingestion and non-IID partitioning.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.batch() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} samples but {} labels",
                samples.batch(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Dataset(format!(
                "label {l} at index {i} outside [0, {class_count})"
            )));
        }
        Ok(Dataset { samples, labels, class_count })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn indices_of_class(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.class_count];
        for &l in &self.labels {
            n[l] += 1;
        }
        n
    }

    /// Samples and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Dataset(format!("index {i} outside dataset of {}", self.len())));
        }
        let x = self.samples.select_rows(indices);
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty subset".into()));
        }
        let (samples, labels) = self.batch(indices)?;
        Dataset::new(samples, labels, self.class_count)
    }

    /// Stratified split: `held_out` samples of every class go to the second
    /// dataset.
    pub fn split_per_class(&self, held_out: usize, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
        let mut keep = Vec::new();
        let mut out = Vec::new();
        for c in 0..self.class_count {
            let mut idx = self.indices_of_class(c);
            if idx.len() <= held_out {
                return Err(Error::Dataset(format!(
                    "class {c} has {} samples, cannot hold out {held_out}",
                    idx.len()
                )));
            }
            rng.shuffle(&mut idx);
            out.extend_from_slice(&idx[..held_out]);
            keep.extend_from_slice(&idx[held_out..]);
        }
        keep.sort_unstable();
        out.sort_unstable();
        Ok((self.subset(&keep)?, self.subset(&out)?))
    }
}

/// Gaussian class blobs. Each class gets a random template `t_c` with
/// standard normal entries; a sample is `separation * t_c + noise` with
/// standard normal noise. Sample `i` has label `i % classes`.
pub fn synth_gaussian(
    classes: usize,
    per_class: usize,
    shape: &[usize],
    separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Dataset("need at least two classes".into()));
    }
    if per_class == 0 || shape.is_empty() || shape.contains(&0) {
        return Err(Error::Dataset("empty sample shape or class size".into()));
    }
    let dim: usize = shape.iter().product();
    let templates: Vec<f64> = (0..classes * dim).map(|_| rng.normal()).collect();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        let t = &templates[c * dim..(c + 1) * dim];
        data.extend(t.iter().map(|&m| separation * m + rng.normal()));
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Dataset::new(Tensor::new(full, data)?, labels, classes)
}

/// Element types of the IDX format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    pub fn code(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::I8 => 0x09,
            IdxType::I16 => 0x0B,
            IdxType::I32 => 0x0C,
            IdxType::F32 => 0x0D,
            IdxType::F64 => 0x0E,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    pub fn width(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

/// A decoded IDX array with values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dtype: IdxType,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<IdxArray> {
    let err = |detail: String| Error::Idx { path: path.to_path_buf(), detail };
    if bytes.len() < 4 {
        return Err(err(format!("{} bytes, header needs at least 4", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    let dtype = IdxType::from_code(bytes[2]).ok_or_else(|| err(format!("unknown type code 0x{:02x}", bytes[2])))?;
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(err("zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(err(format!("truncated header: {} of {header} bytes", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("dimension overflow".into()))?;
    let need = count * dtype.width();
    let body = &bytes[header..];
    if body.len() != need {
        return Err(err(format!(
            "payload is {} bytes, dimensions {dims:?} need {need}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(dtype.width())
        .map(|c| match dtype {
            IdxType::U8 => c[0] as f64,
            IdxType::I8 => c[0] as i8 as f64,
            IdxType::I16 => i16::from_be_bytes([c[0], c[1]]) as f64,
            IdxType::I32 => i32::from_be_bytes(c.try_into().unwrap()) as f64,
            IdxType::F32 => f32::from_be_bytes(c.try_into().unwrap()) as f64,
            IdxType::F64 => f64::from_be_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok(IdxArray { dtype, dims, values })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::Idx {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    parse_idx(path, &bytes)
}

/// Encodes values as IDX; they are narrowed to `dtype` with `as` casts.
pub fn encode_idx(dtype: IdxType, dims: &[usize], values: &[f64]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 255 || dims.iter().product::<usize>() != values.len() {
        return Err(Error::Idx {
            path: Default::default(),
            detail: format!("dimensions {dims:?} do not hold {} values", values.len()),
        });
    }
    let mut out = vec![0, 0, dtype.code(), dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in values {
        match dtype {
            IdxType::U8 => out.push(v as u8),
            IdxType::I8 => out.push(v as i8 as u8),
            IdxType::I16 => out.extend_from_slice(&(v as i16).to_be_bytes()),
            IdxType::I32 => out.extend_from_slice(&(v as i32).to_be_bytes()),
            IdxType::F32 => out.extend_from_slice(&(v as f32).to_be_bytes()),
            IdxType::F64 => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    Ok(out)
}

pub fn write_idx(path: &Path, dtype: IdxType, dims: &[usize], values: &[f64]) -> Result<()> {
    let bytes = encode_idx(dtype, dims, values)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Loads an image/label IDX pair as `[n, 1, H, W]` samples scaled to
/// `[0, 1]`. Unsigned bytes are divided by 255, signed bytes shifted by 128
/// first; wider types are min-max scaled over the whole file.
pub fn load_idx(images: &Path, labels: &Path, class_count: usize) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.dims.len() != 3 {
        return Err(Error::Idx {
            path: images.to_path_buf(),
            detail: format!("images need 3 dimensions, found {:?}", img.dims),
        });
    }
    if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            detail: format!("labels {:?} do not match {} images", lab.dims, img.dims[0]),
        });
    }
    if img.dims[0] == 0 {
        return Err(Error::Idx { path: images.to_path_buf(), detail: "no records".into() });
    }
    let scaled: Vec<f64> = match img.dtype {
        IdxType::U8 => img.values.iter().map(|v| v / 255.0).collect(),
        IdxType::I8 => img.values.iter().map(|v| (v + 128.0) / 255.0).collect(),
        _ => {
            let lo = img.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            img.values.iter().map(|v| (v - lo) / span).collect()
        }
    };
    let mut label_idx = Vec::with_capacity(lab.values.len());
    for (i, &v) in lab.values.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || v >= class_count as f64 {
            return Err(Error::Idx {
                path: labels.to_path_buf(),
                detail: format!("label {v} at record {i} outside [0, {class_count})"),
            });
        }
        label_idx.push(v as usize);
    }
    let shape = vec![img.dims[0], 1, img.dims[1], img.dims[2]];
    Dataset::new(Tensor::new(shape, scaled)?, label_idx, class_count)
}

/// Per-client index lists into a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    /// Non-fatal problems found while partitioning.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// Checks indices are in range and no sample is used twice.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let mut seen = vec![false; ds.len()];
        for (n, idx) in self.clients.iter().enumerate() {
            for &i in idx {
                if i >= ds.len() {
                    return Err(Error::Partition(format!("client {n} index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("sample {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    /// Per-client class histograms.
    pub fn histograms(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; ds.class_count()];
                for &i in idx {
                    h[ds.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Classes each client holds at least one sample of.
    pub fn client_classes(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.histograms(ds)
            .into_iter()
            .map(|h| (0..h.len()).filter(|&c| h[c] > 0).collect())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Splits `idx` into `parts` contiguous chunks whose sizes differ by at
/// most one, larger chunks first.
fn even_chunks(idx: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = idx.len() / parts;
    let extra = idx.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let n = base + usize::from(p < extra);
        out.push(idx[at..at + n].to_vec());
        at += n;
    }
    out
}

/// Class-skew split: client `n` receives the window of `c_local`
/// consecutive classes (mod C) starting at `floor(n * C / N)`, and each
/// class's samples are shuffled and divided evenly among the clients
/// holding it. Evenly spaced starts cover every class once
/// `N * c_local >= C` and give each class `floor` or `ceil` of
/// `N * c_local / C` holders.
pub fn partition_nxc(ds: &Dataset, clients: usize, c_local: usize, rng: &mut RngStream) -> Result<Partition> {
    let c = ds.class_count();
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if c_local == 0 || c_local > c {
        return Err(Error::Partition(format!("classes per client {c_local} outside [1, {c}]")));
    }
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); c];
    for n in 0..clients {
        for j in 0..c_local {
            holders[(n * c / clients + j) % c].push(n);
        }
    }
    let mut warnings = Vec::new();
    let mut out = vec![Vec::new(); clients];
    for (class, hs) in holders.iter().enumerate() {
        let mut idx = ds.indices_of_class(class);
        if hs.is_empty() {
            warnings.push(format!("class {class} is held by no client"));
            continue;
        }
        rng.shuffle(&mut idx);
        for (h, chunk) in hs.iter().zip(even_chunks(&idx, hs.len())) {
            out[*h].extend(chunk);
        }
    }
    for list in &mut out {
        list.sort_unstable();
    }
    Ok(Partition { clients: out, warnings })
}

/// Integer counts summing to `total`, proportional to `p`, by largest
/// remainder (ties to the lower index).
pub fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|&q| q * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws Dirichlet(alpha) proportions over `n` entries via normalized Gamma
/// draws. If every draw underflows to zero, all mass goes to one entry.
pub fn dirichlet(n: usize, alpha: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(format!("alpha {alpha}: {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng.inner())).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        return Ok(draws.iter().map(|d| d / sum).collect());
    }
    let mut p = vec![0.0; n];
    p[rng.index(n)] = 1.0;
    Ok(p)
}

/// Per-class Dirichlet split with largest-remainder rounding.
pub fn partition_dirichlet(ds: &Dataset, clients: usize, alpha: f64, rng: &mut RngStream) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Partition(format!("alpha {alpha} must be positive and finite")));
    }
    let mut out = vec![Vec::new(); clients];
    for class in 0..ds.class_count() {
        let p = dirichlet(clients, alpha, rng)?;
        let mut idx = ds.indices_of_class(class);
        rng.shuffle(&mut idx);
        let counts = largest_remainder(&p, idx.len());
        let mut at = 0;
        for (n, k) in counts.into_iter().enumerate() {
            out[n].extend_from_slice(&idx[at..at + k]);
            at += k;
        }
    }
    for list in &mut out {
        list.sort_unstable();
    }
    Ok(Partition { clients: out, warnings: Vec::new() })
}

/// Gini coefficient of non-negative values; 0 for uniform mass.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut diff = 0.0;
    for a in values {
        for b in values {
            diff += (a - b).abs();
        }
    }
    diff / (2.0 * n as f64 * total)
}

/// Mean Gini coefficient of the clients' class histograms.
pub fn mean_class_gini(partition: &Partition, ds: &Dataset) -> f64 {
    let hs = partition.histograms(ds);
    if hs.is_empty() {
        return 0.0;
    }
    hs.iter()
        .map(|h| gini(&h.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .sum::<f64>()
        / hs.len() as f64
}
