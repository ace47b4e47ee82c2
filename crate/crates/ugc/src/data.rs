//! Paired-translation datasets: synthetic corpus, PNG IO, split manifests and batching.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use ugc_core::{partition, substream, DatasetPartition};

use crate::error::{Result, UgcError};
use crate::tensor::Tensor;

/// One source image and, for labeled samples, its target.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// Sample id (file stem).
    pub id: String,
    /// `C x H x W` source in `[-1, 1]`.
    pub source: Tensor<f32>,
    /// `C x H x W` target in `[-1, 1]`, absent for unlabeled samples.
    pub target: Option<Tensor<f32>>,
}

/// Which side of a partition to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Samples with targets.
    Labeled,
    /// Samples used as sources only.
    Unlabeled,
}

/// Flat colour of each shape kind in the target domain.
pub const KIND_COLORS: [[u8; 3]; 3] = [[230, 70, 60], [70, 200, 90], [80, 110, 240]];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Polygon { kind: usize, pts: [(f64, f64); 4], n: usize },
}

impl Shape {
    fn kind(&self) -> usize {
        match self {
            Shape::Ellipse { .. } => 0,
            Shape::Polygon { kind, .. } => *kind,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon { pts, n, .. } => {
                // Convex, counter-clockwise vertices.
                (0..n).all(|i| {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % n];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                })
            }
        }
    }
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Shape {
    let s = size as f64;
    let r = rng.random_range(0.12 * s..0.26 * s);
    let margin = r + 2.0;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    match rng.random_range(0..3) {
        0 => Shape::Ellipse {
            cx,
            cy,
            rx: r,
            ry: r * rng.random_range(0.55..1.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        },
        kind => {
            let n = if kind == 1 { 3 } else { 4 };
            let start = rng.random_range(0.0..std::f64::consts::TAU);
            let mut pts = [(0.0, 0.0); 4];
            for (i, p) in pts.iter_mut().take(n).enumerate() {
                let jitter = rng.random_range(-0.25..0.25);
                let a = start + (i as f64 + jitter) * std::f64::consts::TAU / n as f64;
                let rr = r * rng.random_range(0.8..1.0);
                *p = (cx + rr * a.cos(), cy + rr * a.sin());
            }
            Shape::Polygon { kind, pts, n }
        }
    }
}

/// Renders one pair: binary white edges on black, and the filled, coloured shapes.
///
/// Both images are `size x size` RGB, row-major, 3 bytes per pixel.
pub fn render_pair(seed: u64, index: u64, size: usize) -> (Vec<u8>, Vec<u8>) {
    let mut rng = substream(seed, "synth", index);
    let mut label = vec![0u8; size * size];
    let want = rng.random_range(1..=3);
    let mut placed = 0;
    for _ in 0..40 {
        if placed == want {
            break;
        }
        let shape = random_shape(&mut rng, size);
        let mask: Vec<bool> = (0..size * size)
            .map(|p| shape.contains((p % size) as f64 + 0.5, (p / size) as f64 + 0.5))
            .collect();
        let area = mask.iter().filter(|&&m| m).count();
        if area < 12 {
            continue;
        }
        // Keep a two-pixel gap to every existing shape.
        let clash = (0..size * size).any(|p| {
            mask[p] && {
                let (x, y) = ((p % size) as isize, (p / size) as isize);
                (-2..=2).any(|dy| {
                    (-2..=2).any(|dx| {
                        let (u, v) = (x + dx, y + dy);
                        u >= 0 && v >= 0 && (u as usize) < size && (v as usize) < size && label[v as usize * size + u as usize] != 0
                    })
                })
            }
        });
        if clash {
            continue;
        }
        let tag = shape.kind() as u8 + 1;
        for (l, m) in label.iter_mut().zip(&mask) {
            if *m {
                *l = tag;
            }
        }
        placed += 1;
    }
    let mut source = vec![0u8; size * size * 3];
    let mut target = vec![0u8; size * size * 3];
    for p in 0..size * size {
        let tag = label[p];
        if tag == 0 {
            continue;
        }
        target[p * 3..p * 3 + 3].copy_from_slice(&KIND_COLORS[tag as usize - 1]);
        let (x, y) = (p % size, p / size);
        let edge = [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)].iter().any(|&(dx, dy)| {
            let (u, v) = (x as isize + dx, y as isize + dy);
            u < 0 || v < 0 || u as usize >= size || v as usize >= size || label[v as usize * size + u as usize] != tag
        });
        if edge {
            source[p * 3..p * 3 + 3].copy_from_slice(&[255, 255, 255]);
        }
    }
    (source, target)
}

/// Zero-padded id of sample `i`.
pub fn sample_id(i: usize) -> String {
    format!("{i:05}")
}

/// Writes `n` synthetic pairs under `root/source` and `root/target`.
pub fn synth_generate(root: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    if n == 0 {
        return Err(UgcError::Empty("synthetic corpus size".into()));
    }
    for sub in ["source", "target"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| UgcError::io(&dir, e))?;
    }
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = sample_id(i);
        let (src, tgt) = render_pair(seed, i as u64, size);
        write_png_rgb(&root.join("source").join(format!("{id}.png")), size, size, &src)?;
        write_png_rgb(&root.join("target").join(format!("{id}.png")), size, size, &tgt)?;
        ids.push(id);
    }
    Ok(ids)
}

/// Writes an 8-bit RGB PNG.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| UgcError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| UgcError::format(path, e.to_string()))?;
    w.write_image_data(rgb).map_err(|e| UgcError::format(path, e.to_string()))?;
    w.finish().map_err(|e| UgcError::format(path, e.to_string()))
}

/// Reads an 8-bit RGB (or grayscale / RGBA) PNG as `(width, height, rgb bytes)`.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| UgcError::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = dec.read_info().map_err(|e| UgcError::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| UgcError::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(UgcError::format(path, "only 8-bit images are supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        other => return Err(UgcError::format(path, format!("unsupported colour type {other:?}"))),
    };
    Ok((w, h, rgb))
}

/// Interleaved RGB bytes to a `3 x H x W` tensor in `[-1, 1]`.
pub fn rgb_to_tensor(width: usize, height: usize, rgb: &[u8]) -> Tensor<f32> {
    let hw = width * height;
    let mut data = vec![0f32; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            data[c * hw + p] = f32::from(rgb[p * 3 + c]) / 127.5 - 1.0;
        }
    }
    Tensor::from_vec(&[3, height, width], data)
}

/// `3 x H x W` tensor in `[-1, 1]` to interleaved RGB bytes.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Vec<u8> {
    let s = t.shape();
    let hw = s[1] * s[2];
    let mut out = vec![0u8; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            let v = (t.data()[c * hw + p] + 1.0) * 127.5;
            out[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Path of the manifest for a `(fraction, seed)` split.
pub fn manifest_path(root: &Path, fraction: f64, seed: u64) -> PathBuf {
    root.join("splits").join(format!("{fraction}_{seed}.manifest"))
}

/// Writes the labeled ids of `p`, one per line.
pub fn write_manifest(root: &Path, p: &DatasetPartition) -> Result<PathBuf> {
    let path = manifest_path(root, p.fraction, p.seed);
    let dir = path.parent().expect("manifest has a parent");
    fs::create_dir_all(dir).map_err(|e| UgcError::io(dir, e))?;
    let mut text = String::new();
    for id in &p.labeled_ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| UgcError::io(&path, e))?;
    Ok(path)
}

/// Rebuilds a partition from its manifest and the full training id list.
pub fn read_manifest(root: &Path, fraction: f64, seed: u64, train_ids: &[String]) -> Result<DatasetPartition> {
    let path = manifest_path(root, fraction, seed);
    let text = fs::read_to_string(&path).map_err(|e| UgcError::io(&path, e))?;
    let mut labeled: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
    labeled.sort();
    for id in &labeled {
        if train_ids.binary_search(id).is_err() {
            return Err(UgcError::format(&path, format!("unknown id {id}")));
        }
    }
    let unlabeled = train_ids.iter().filter(|id| labeled.binary_search(id).is_err()).cloned().collect();
    Ok(DatasetPartition { labeled_ids: labeled, unlabeled_ids: unlabeled, fraction, seed })
}

/// Lists the ids present under `root/source`, sorted.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("source");
    if !dir.is_dir() {
        return Err(UgcError::Missing(dir));
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| UgcError::io(&dir, e))? {
        let entry = entry.map_err(|e| UgcError::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".png") {
            ids.push(stem.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(UgcError::Empty(format!("no images in {}", dir.display())));
    }
    Ok(ids)
}

/// Splits sorted ids into training ids and the last `eval_count` held-out ids.
pub fn train_eval_split(ids: &[String], eval_count: usize) -> Result<(Vec<String>, Vec<String>)> {
    if eval_count >= ids.len() {
        return Err(UgcError::Config(format!("eval_count {eval_count} leaves no training ids out of {}", ids.len())));
    }
    let cut = ids.len() - eval_count;
    Ok((ids[..cut].to_vec(), ids[cut..].to_vec()))
}

/// A paired dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    sources: BTreeMap<String, Tensor<f32>>,
    targets: BTreeMap<String, Tensor<f32>>,
}

impl Dataset {
    /// Loads every pair under `root`.
    pub fn load(root: &Path) -> Result<Self> {
        let ids = list_ids(root)?;
        let mut sources = BTreeMap::new();
        let mut targets = BTreeMap::new();
        for id in ids {
            let (w, h, rgb) = read_png_rgb(&root.join("source").join(format!("{id}.png")))?;
            sources.insert(id.clone(), rgb_to_tensor(w, h, &rgb));
            let tpath = root.join("target").join(format!("{id}.png"));
            if tpath.exists() {
                let (w, h, rgb) = read_png_rgb(&tpath)?;
                targets.insert(id, rgb_to_tensor(w, h, &rgb));
            }
        }
        Ok(Self { sources, targets })
    }

    /// Builds a dataset from in-memory tensors.
    pub fn from_parts(sources: BTreeMap<String, Tensor<f32>>, targets: BTreeMap<String, Tensor<f32>>) -> Self {
        Self { sources, targets }
    }

    /// All ids, sorted.
    pub fn ids(&self) -> Vec<String> {
        self.sources.keys().cloned().collect()
    }

    /// Sample `id`, exposing the target only when `labeled`.
    pub fn sample(&self, id: &str, labeled: bool) -> Result<PairedSample> {
        let source = self.sources.get(id).ok_or_else(|| UgcError::Empty(format!("unknown id {id}")))?.clone();
        let target = if labeled {
            Some(self.targets.get(id).ok_or_else(|| UgcError::Empty(format!("no target for {id}")))?.clone())
        } else {
            None
        };
        Ok(PairedSample { id: id.to_string(), source, target })
    }

    /// Stacks sources (and targets when `labeled`) of `ids` into `N x C x H x W` batches.
    pub fn batch(&self, ids: &[String], labeled: bool) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        let samples = ids.iter().map(|id| self.sample(id, labeled)).collect::<Result<Vec<_>>>()?;
        Ok(stack(&samples))
    }
}

/// Stacks samples into a source batch and, when every sample has one, a target batch.
pub fn stack(samples: &[PairedSample]) -> (Tensor<f32>, Option<Tensor<f32>>) {
    let unsqueeze = |t: &Tensor<f32>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshape(&s)
    };
    let src: Vec<Tensor<f32>> = samples.iter().map(|s| unsqueeze(&s.source)).collect();
    let x = Tensor::stack_batch(&src.iter().collect::<Vec<_>>());
    let y = if samples.iter().all(|s| s.target.is_some()) {
        let tg: Vec<Tensor<f32>> = samples.iter().map(|s| unsqueeze(s.target.as_ref().unwrap())).collect();
        Some(Tensor::stack_batch(&tg.iter().collect::<Vec<_>>()))
    } else {
        None
    };
    (x, y)
}

/// Epoch-wise shuffled batches without replacement.
///
/// The order is a pure function of `(ids, seed, stream)`; the `k`-th batch
/// can be recomputed at any time, so resuming needs no loader state.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    ids: Vec<String>,
    seed: u64,
    stream: String,
}

impl BatchSampler {
    /// Sampler over `ids` for one named stream.
    pub fn new(ids: Vec<String>, seed: u64, stream: &str) -> Self {
        Self { ids, seed, stream: stream.to_string() }
    }

    /// Number of ids per epoch.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Whether there is nothing to sample.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.shuffle(&mut substream(self.seed, &self.stream, epoch));
        order
    }

    /// Ids of batch `k` when every batch has `batch_size` samples.
    pub fn batch(&self, k: u64, batch_size: usize) -> Result<Vec<String>> {
        if self.ids.is_empty() {
            return Err(UgcError::Empty(format!("{} split", self.stream)));
        }
        let n = self.ids.len() as u64;
        let start = k * batch_size as u64;
        let mut out = Vec::with_capacity(batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in start..start + batch_size as u64 {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            let order = &cached.as_ref().unwrap().1;
            out.push(self.ids[order[(pos % n) as usize]].clone());
        }
        Ok(out)
    }
}

/// Draws batch `k` of `split` from a partition.
pub fn load_batch(
    data: &Dataset,
    part: &DatasetPartition,
    split: Split,
    batch_size: usize,
    seed: u64,
    k: u64,
) -> Result<Vec<PairedSample>> {
    let (ids, labeled, stream) = match split {
        Split::Labeled => (&part.labeled_ids, true, "labeled"),
        Split::Unlabeled => (&part.unlabeled_ids, false, "unlabeled"),
    };
    if ids.is_empty() {
        return Err(UgcError::Empty(format!("{stream} split")));
    }
    let sampler = BatchSampler::new(ids.clone(), seed, stream);
    sampler.batch(k, batch_size)?.iter().map(|id| data.sample(id, labeled)).collect()
}

/// Partitions `train_ids` and writes the manifest, or reads it if present.
pub fn ensure_partition(root: &Path, train_ids: &[String], fraction: f64, seed: u64) -> Result<DatasetPartition> {
    let path = manifest_path(root, fraction, seed);
    if path.exists() {
        return read_manifest(root, fraction, seed, train_ids);
    }
    let p = partition(train_ids, fraction, seed)?;
    write_manifest(root, &p)?;
    Ok(p)
}
