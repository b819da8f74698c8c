//! Datasets: landmark CSV and feature-clip files, the synthetic generator,
//! SMOTE, stratified splits and folds, and image augmentation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::NUM_LANDMARKS;
use crate::models::DEFAULT_FRAMES;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;

/// One labelled clip: landmarks `[T, 68, 2]`, features `[T, D]` or images.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub data: Tensor<f64>,
}

/// Ordered clips with unique ids and binary labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if s.label >= NUM_CLASSES {
                return Err(Error::Data(format!(
                    "clip `{}` has label {} (expected 0 or 1)",
                    s.id, s.label
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate clip id `{}`", s.id)));
            }
            if s.data.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("clip `{}` has non-finite values", s.id)));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    /// Shape shared by every sample, if any.
    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.data.shape())
    }

    /// Clips at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn map_data(&self, f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    id: s.id.clone(),
                    label: s.label,
                    data: f(&s.data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }
}

// ---- landmark CSV -----------------------------------------------------------------

pub fn landmark_header() -> Vec<String> {
    let mut h = vec!["clip_id".to_string(), "frame_idx".into(), "label".into()];
    for i in 0..NUM_LANDMARKS {
        h.push(format!("x{i}"));
        h.push(format!("y{i}"));
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Per-clip zero mean and unit RMS radius.
    pub normalize: bool,
    pub frames: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            frames: DEFAULT_FRAMES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedClip {
    pub clip_id: String,
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct LandmarkLoad {
    pub dataset: Dataset,
    pub rejected: Vec<RejectedClip>,
}

struct ClipRows {
    label: usize,
    frames: BTreeMap<usize, Vec<f64>>,
}

/// Reads a landmark CSV. Clips are returned sorted by id; clips without
/// exactly `opts.frames` frames are skipped with a warning.
pub fn load_landmark_csv(path: &Path, opts: &LoadOptions) -> Result<LandmarkLoad> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_landmark_csv(file, path, opts)
}

pub fn parse_landmark_csv<R: std::io::Read>(reader: R, origin: &Path, opts: &LoadOptions) -> Result<LandmarkLoad> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line: line as usize,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let expected = landmark_header();
    let mut clips: BTreeMap<String, ClipRows> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if first {
            first = false;
            if record.iter().ne(expected.iter().map(String::as_str)) {
                return Err(parse_err(
                    line,
                    "header must be clip_id,frame_idx,label,x0,y0,...,x67,y67".into(),
                ));
            }
            continue;
        }
        if record.len() != expected.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", expected.len(), record.len()),
            ));
        }
        let clip_id = record[0].trim().to_string();
        if clip_id.is_empty() {
            return Err(parse_err(line, "empty clip_id".into()));
        }
        let frame: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad frame_idx `{}`", &record[1])))?;
        let label: usize = match record[2].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(line, format!("bad label `{other}`"))),
        };
        let mut coords = Vec::with_capacity(2 * NUM_LANDMARKS);
        for (j, field) in record.iter().enumerate().skip(3) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad coordinate `{field}` in column {}", expected[j])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite coordinate in column {}", expected[j])));
            }
            coords.push(v);
        }
        let entry = clips.entry(clip_id.clone()).or_insert_with(|| ClipRows {
            label,
            frames: BTreeMap::new(),
        });
        if entry.label != label {
            return Err(parse_err(
                line,
                format!("clip `{clip_id}` changes label from {} to {label}", entry.label),
            ));
        }
        if entry.frames.insert(frame, coords).is_some() {
            return Err(parse_err(
                line,
                format!("duplicate frame {frame} for clip `{clip_id}`"),
            ));
        }
    }
    if first {
        return Err(parse_err(1, "file is empty (missing header)".into()));
    }

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for (id, rows) in clips {
        if rows.frames.len() != opts.frames {
            log::warn!(
                "rejecting clip `{id}`: {} frames (expected {})",
                rows.frames.len(),
                opts.frames
            );
            rejected.push(RejectedClip {
                clip_id: id,
                frames: rows.frames.len(),
            });
            continue;
        }
        let values: Vec<f64> = rows.frames.into_values().flatten().collect();
        let mut data = Tensor::from_vec(&[opts.frames, NUM_LANDMARKS, 2], values)?;
        if opts.normalize {
            normalize_clip(&mut data);
        }
        samples.push(Sample {
            id,
            label: rows.label,
            data,
        });
    }
    Ok(LandmarkLoad {
        dataset: Dataset::new(samples)?,
        rejected,
    })
}

/// Writes `[T, 68, 2]` clips in dataset order, one row per frame.
pub fn write_landmark_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(landmark_header()).map_err(io)?;
    for s in dataset.samples() {
        let shape = s.data.shape();
        if shape.len() != 3 || shape[1] != NUM_LANDMARKS || shape[2] != 2 {
            return Err(Error::shape(
                "write_landmark_csv",
                format!("clip `{}` has shape {shape:?}", s.id),
            ));
        }
        for (t, frame) in s.data.data().chunks(2 * NUM_LANDMARKS).enumerate() {
            let mut row = vec![s.id.clone(), t.to_string(), s.label.to_string()];
            row.extend(frame.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Zero mean and unit RMS distance from the centroid, over all frames of
/// a `[T, V, 2]` clip.
pub fn normalize_clip(clip: &mut Tensor<f64>) {
    let d = clip.data_mut();
    let n = (d.len() / 2) as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in d.chunks(2) {
        mx += p[0];
        my += p[1];
    }
    mx /= n;
    my /= n;
    let mut ss = 0.0;
    for p in d.chunks_mut(2) {
        p[0] -= mx;
        p[1] -= my;
        ss += p[0] * p[0] + p[1] * p[1];
    }
    let rms = (ss / n).sqrt();
    if rms > 0.0 {
        d.iter_mut().for_each(|v| *v /= rms);
    }
}

pub fn normalize_dataset(ds: &Dataset) -> Result<Dataset> {
    ds.map_data(|t| {
        let mut t = t.clone();
        normalize_clip(&mut t);
        Ok(t)
    })
}

/// `[T, V, 2]` landmark clips as `[T, 2V]` feature sequences.
pub fn flatten_landmarks(ds: &Dataset) -> Result<Dataset> {
    ds.map_data(|t| {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("flatten_landmarks", format!("clip shape {s:?}")));
        }
        t.clone().reshape(&[s[0], s[1] * s[2]])
    })
}

// ---- feature clips ------------------------------------------------------------------

/// Reads every `FEATCLIP v1` record in a file.
pub fn read_feature_file(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_clips(&text, path)
}

pub fn parse_feature_clips(text: &str, origin: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    let mut samples = Vec::new();
    while let Some((ln, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "FEATCLIP" || parts[1] != "v1" {
            return Err(err(ln, "expected `FEATCLIP v1 <clip_id> <label> <T> <D>`".into()));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| err(ln, format!("bad {what} `{s}`")));
        let label = num(parts[3], "label")?;
        let (t, d) = (num(parts[4], "T")?, num(parts[5], "D")?);
        if t == 0 || d == 0 {
            return Err(err(ln, "T and D must be positive".into()));
        }
        let mut values = Vec::with_capacity(t * d);
        for _ in 0..t {
            let (rl, row) = lines
                .next()
                .ok_or_else(|| err(ln, format!("clip `{}` ends before {t} rows", parts[2])))?;
            let before = values.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| err(rl, format!("bad value `{tok}`")))?;
                values.push(v);
            }
            if values.len() - before != d {
                return Err(err(rl, format!("expected {d} values, found {}", values.len() - before)));
            }
        }
        samples.push(Sample {
            id: parts[2].to_string(),
            label,
            data: Tensor::from_vec(&[t, d], values)?,
        });
    }
    Dataset::new(samples)
}

pub fn write_feature_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in dataset.samples() {
        let shape = s.data.shape();
        if shape.len() != 2 {
            return Err(Error::shape("write_feature_file", format!("clip `{}` has shape {shape:?}", s.id)));
        }
        let _ = writeln!(out, "FEATCLIP v1 {} {} {} {}", s.id, s.label, shape[0], shape[1]);
        for row in s.data.data().chunks(shape[1]) {
            let row: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

// ---- synthetic data ------------------------------------------------------------------

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, n: usize, start: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = start + std::f64::consts::TAU * i as f64 / n as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Neutral face, pixel units with y growing downward, centred near 0.
pub fn face_template() -> Vec<(f64, f64)> {
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let a = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
        p.push((70.0 * a.cos(), -20.0 + 95.0 * a.sin()));
    }
    for i in 0..5 {
        let x = -60.0 + 10.0 * i as f64;
        p.push((x, -45.0 - 6.0 * (1.0 - ((x + 40.0) / 20.0).powi(2)).max(0.0)));
    }
    for i in 0..5 {
        let x = 20.0 + 10.0 * i as f64;
        p.push((x, -45.0 - 6.0 * (1.0 - ((x - 40.0) / 20.0).powi(2)).max(0.0)));
    }
    for i in 0..4 {
        p.push((0.0, -30.0 + 11.0 * i as f64));
    }
    for i in 0..5 {
        p.push((-12.0 + 6.0 * i as f64, 10.0 + if i == 2 { 3.0 } else { 0.0 }));
    }
    p.extend(ellipse(-35.0, -28.0, 12.0, 5.0, 6, std::f64::consts::PI));
    p.extend(ellipse(35.0, -28.0, 12.0, 5.0, 6, std::f64::consts::PI));
    p.extend(ellipse(0.0, 40.0, 26.0, 11.0, 12, std::f64::consts::PI));
    p.extend(ellipse(0.0, 40.0, 18.0, 4.0, 8, std::f64::consts::PI));
    debug_assert_eq!(p.len(), NUM_LANDMARKS);
    p
}

/// Noise-free position of `node` at `frame` for a clip of `label`, before
/// the per-clip translation and scale.
pub fn synthetic_trajectory(template: &[(f64, f64)], node: usize, label: usize, frame: usize, frames: usize) -> (f64, f64) {
    let (mut x, mut y) = template[node];
    if label == 0 {
        return (x, y);
    }
    let s = frame as f64 / (frames.max(2) - 1) as f64;
    match node {
        17..=26 => {
            let inner = if node <= 21 { node - 17 } else { 26 - node };
            y += (10.0 + 5.0 * inner as f64) * s;
        }
        48 => {
            x -= 12.0 * s;
            y -= 10.0 * s;
        }
        54 => {
            x += 12.0 * s;
            y -= 10.0 * s;
        }
        36..=47 => {
            let cy = -28.0;
            y = cy + (y - cy) * (1.0 - 0.9 * s);
        }
        _ => {}
    }
    (x, y)
}

/// `n_per_class` static neutral clips (label 0) and `n_per_class` clips
/// with progressive brow lowering, mouth-corner and eye deformation
/// (label 1), in raw pixel coordinates.
pub fn generate_synthetic(n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let frames = DEFAULT_FRAMES;
    let template = face_template();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape_noise = Normal::new(0.0, 1.5).expect("valid sigma");
    let jitter = Normal::new(0.0, 0.4).expect("valid sigma");
    let mut samples = Vec::with_capacity(2 * n_per_class);
    for label in 0..NUM_CLASSES {
        for i in 0..n_per_class {
            let tx = rng.gen_range(150.0..350.0);
            let ty = rng.gen_range(150.0..350.0);
            let scale = rng.gen_range(0.7..1.3);
            let offsets: Vec<(f64, f64)> = (0..NUM_LANDMARKS)
                .map(|_| (shape_noise.sample(&mut rng), shape_noise.sample(&mut rng)))
                .collect();
            let mut values = Vec::with_capacity(frames * NUM_LANDMARKS * 2);
            for t in 0..frames {
                for (node, off) in offsets.iter().enumerate() {
                    let (x, y) = synthetic_trajectory(&template, node, label, t, frames);
                    values.push(tx + scale * (x + off.0) + jitter.sample(&mut rng));
                    values.push(ty + scale * (y + off.1) + jitter.sample(&mut rng));
                }
            }
            samples.push(Sample {
                id: format!("synth_{label}_{i:04}"),
                label,
                data: Tensor::from_vec(&[frames, NUM_LANDMARKS, 2], values)?,
            });
        }
    }
    Dataset::new(samples)
}

// ---- SMOTE ------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Oversamples the minority class to the majority count by interpolating
/// towards one of the `k` nearest minority neighbours. Original clips are
/// kept unchanged and first.
pub fn smote_oversample(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let counts = ds.class_counts();
    if counts.contains(&0) {
        return Err(Error::Data(format!(
            "SMOTE needs both classes present, got counts {counts:?}"
        )));
    }
    if counts[0] == counts[1] {
        return Ok(ds.clone());
    }
    let minority = if counts[0] < counts[1] { 0 } else { 1 };
    let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.get(i).label == minority).collect();
    let m = members.len();
    if m < 2 {
        return Err(Error::Data(
            "SMOTE needs at least 2 minority samples to find a neighbour".into(),
        ));
    }
    let k = k.min(m - 1);
    if k == 0 {
        return Err(Error::Config("SMOTE k must be at least 1".into()));
    }
    let vecs: Vec<&[f64]> = members.iter().map(|&i| ds.get(i).data.data()).collect();
    let neighbours: Vec<Vec<usize>> = (0..m)
        .map(|a| {
            let mut others: Vec<(f64, usize)> = (0..m)
                .filter(|&b| b != a)
                .map(|b| (sq_dist(vecs[a], vecs[b]), b))
                .collect();
            others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            others.into_iter().take(k).map(|(_, b)| b).collect()
        })
        .collect();

    let need = counts[1 - minority] - counts[minority];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = ds.samples().to_vec();
    for n in 0..need {
        let a = n % m;
        let b = *neighbours[a].choose(&mut rng).expect("k >= 1");
        let u: f64 = rng.gen();
        let base = ds.get(members[a]);
        let values = vecs[a]
            .iter()
            .zip(vecs[b])
            .map(|(x, y)| x + u * (y - x))
            .collect();
        samples.push(Sample {
            id: format!("{}_smote{n}", base.id),
            label: minority,
            data: Tensor::from_vec(base.data.shape(), values)?,
        });
    }
    Dataset::new(samples)
}

// ---- splits -----------------------------------------------------------------------

fn shuffled_by_class(ds: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..NUM_CLASSES)
        .map(|c| {
            let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.get(i).label == c).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect()
}

/// Indices of a stratified train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified 80/10/10: per class, `floor(n / 10)` clips each go to
/// validation and test and the remainder to training.
pub fn split_dataset(ds: &Dataset, seed: u64) -> Result<Split> {
    if ds.len() < 10 {
        return Err(Error::Data(format!("need at least 10 clips to split, got {}", ds.len())));
    }
    let counts = ds.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} is absent from the dataset")));
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for idx in shuffled_by_class(ds, seed) {
        let tenth = idx.len() / 10;
        split.val.extend_from_slice(&idx[..tenth]);
        split.test.extend_from_slice(&idx[tenth..2 * tenth]);
        split.train.extend_from_slice(&idx[2 * tenth..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Stratified hold-out: per class, `floor(n * fraction)` clips go to the
/// second set.
pub fn carve_validation(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction {fraction} must be in [0, 1)")));
    }
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for idx in shuffled_by_class(ds, seed) {
        let n = (idx.len() as f64 * fraction).floor() as usize;
        held.extend_from_slice(&idx[..n]);
        keep.extend_from_slice(&idx[n..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((ds.subset(&keep), ds.subset(&held)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k folds: each class is shuffled and dealt round-robin, the
/// dealing position carrying over between classes so fold sizes differ by
/// at most one.
pub fn kfold_partitions(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let counts = ds.class_counts();
    if let Some(c) = counts.iter().position(|&n| n < k) {
        return Err(Error::Data(format!(
            "class {c} has {} clips, fewer than k = {k}",
            counts[c]
        )));
    }
    let mut tests = vec![Vec::new(); k];
    let mut pos = 0;
    for idx in shuffled_by_class(ds, seed) {
        for i in idx {
            tests[pos % k].push(i);
            pos += 1;
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let held: HashSet<usize> = test.iter().copied().collect();
            let train = (0..ds.len()).filter(|i| !held.contains(i)).collect();
            Fold { train, test }
        })
        .collect())
}

// ---- images -------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Side of the square crop, in pixels.
    pub crop_side: usize,
    pub crop_x: usize,
    pub crop_y: usize,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub fn identity(size: usize) -> Self {
        Self {
            crop_side: size,
            crop_x: 0,
            crop_y: 0,
            angle_deg: 0.0,
        }
    }

    /// Crop covering `crop_area` of the image at a random offset and a
    /// rotation uniform in `[-max_deg, max_deg]`.
    pub fn sample<R: Rng>(rng: &mut R, size: usize, crop_area: f64, max_deg: f64) -> Self {
        let side = ((size as f64 * crop_area.sqrt()).round() as usize).clamp(1, size);
        let slack = size - side;
        Self {
            crop_side: side,
            crop_x: rng.gen_range(0..=slack),
            crop_y: rng.gen_range(0..=slack),
            angle_deg: if max_deg > 0.0 {
                rng.gen_range(-max_deg..=max_deg)
            } else {
                0.0
            },
        }
    }
}

pub const CROP_AREA: f64 = 0.875;
pub const MAX_ROTATION_DEG: f64 = 15.0;

/// Random crop to 87.5% area, nearest-neighbour resize back and a
/// bilinear rotation within ±15° with zero fill.
pub fn augment_image(image: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let size = image.shape().get(1).copied().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::sample(&mut rng, size, CROP_AREA, MAX_ROTATION_DEG);
    augment_image_with(image, &params)
}

pub fn augment_image_with(image: &Tensor<f64>, p: &AugmentParams) -> Result<Tensor<f64>> {
    let s = image.shape();
    if s.len() != 3 || s[1] != s[2] || s[1] == 0 {
        return Err(Error::shape("augment_image", format!("expected [C,S,S], got {s:?}")));
    }
    let (c, n) = (s[0], s[1]);
    if p.crop_side == 0 || p.crop_x + p.crop_side > n || p.crop_y + p.crop_side > n {
        return Err(Error::Config(format!("crop {p:?} does not fit a {n}px image")));
    }
    let src = image.data();
    let mut cropped = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..n {
            let si = p.crop_y + (i * p.crop_side) / n;
            for j in 0..n {
                let sj = p.crop_x + (j * p.crop_side) / n;
                cropped[(ch * n + i) * n + j] = src[(ch * n + si) * n + sj];
            }
        }
    }
    if p.angle_deg == 0.0 {
        return Tensor::from_vec(s, cropped);
    }
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let centre = (n as f64 - 1.0) / 2.0;
    let last = (n - 1) as f64;
    let mut out = vec![0.0; src.len()];
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (i as f64 - centre, j as f64 - centre);
            let sy = centre + cos * dy - sin * dx;
            let sx = centre + sin * dy + cos * dx;
            if !(0.0..=last).contains(&sy) || !(0.0..=last).contains(&sx) {
                continue;
            }
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let at = |y: usize, x: usize| cropped[(ch * n + y) * n + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(ch * n + i) * n + j] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Renders each frame of a normalized `[T, V, 2]` clip as a `[3, S, S]`
/// image of small Gaussian dots, giving `[T, 3, S, S]`.
pub fn render_clip(clip: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    let s = clip.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::shape("render_clip", format!("expected [T,V,2], got {s:?}")));
    }
    let (t_len, v) = (s[0], s[1]);
    let plane = size * size;
    let mut out = vec![0.0; t_len * 3 * plane];
    let half = size as f64 / 2.0;
    let reach = size as f64 / 5.0;
    for t in 0..t_len {
        let img = &mut out[t * 3 * plane..(t + 1) * 3 * plane];
        for node in 0..v {
            let base = (t * v + node) * 2;
            let px = half + clip.data()[base] * reach;
            let py = half + clip.data()[base + 1] * reach;
            let (lo_y, hi_y) = ((py - 2.0).floor().max(0.0) as usize, (py + 2.0).ceil().min(size as f64 - 1.0));
            let (lo_x, hi_x) = ((px - 2.0).floor().max(0.0) as usize, (px + 2.0).ceil().min(size as f64 - 1.0));
            if hi_y < 0.0 || hi_x < 0.0 {
                continue;
            }
            for y in lo_y..=hi_y as usize {
                for x in lo_x..=hi_x as usize {
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    let w = (-d2 / 1.0).exp();
                    for ch in 0..3 {
                        img[ch * plane + y * size + x] += w;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[t_len, 3, size, size], out)
}

/// Renders every clip, optionally augmenting each frame with a seed
/// derived from `augment_seed`, the clip index and the frame index.
pub fn render_dataset(ds: &Dataset, size: usize, augment_seed: Option<u64>) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(ds.len());
    for (ci, s) in ds.samples().iter().enumerate() {
        let mut frames = render_clip(&s.data, size)?;
        if let Some(seed) = augment_seed {
            let t_len = frames.shape()[0];
            let per = 3 * size * size;
            for t in 0..t_len {
                let img = Tensor::from_vec(&[3, size, size], frames.data()[t * per..(t + 1) * per].to_vec())?;
                let aug = augment_image(&img, seed ^ ((ci as u64) << 20) ^ t as u64)?;
                frames.data_mut()[t * per..(t + 1) * per].copy_from_slice(aug.data());
            }
        }
        samples.push(Sample {
            id: s.id.clone(),
            label: s.label,
            data: frames,
        });
    }
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn csv_text(clips: &[(&str, usize, usize)]) -> String {
        let mut s = landmark_header().join(",");
        s.push('\n');
        for &(id, label, frames) in clips {
            for t in 0..frames {
                let mut row = vec![id.to_string(), t.to_string(), label.to_string()];
                for j in 0..136 {
                    row.push(format!("{}", (j * 7 + t * 3) % 50));
                }
                s.push_str(&row.join(","));
                s.push('\n');
            }
        }
        s
    }

    fn raw() -> LoadOptions {
        LoadOptions {
            normalize: false,
            ..LoadOptions::default()
        }
    }

    #[test]
    fn loads_well_formed_file() {
        let f = write_tmp(&csv_text(&[("b", 1, 20), ("a", 0, 20)]));
        let load = load_landmark_csv(f.path(), &LoadOptions::default()).unwrap();
        assert_eq!(load.dataset.len(), 2);
        assert_eq!(load.dataset.class_counts(), [1, 1]);
        assert_eq!(load.dataset.get(0).id, "a");
        assert!(load.rejected.is_empty());
    }

    #[test]
    fn short_clip_is_rejected_not_fatal() {
        let f = write_tmp(&csv_text(&[("a", 0, 20), ("b", 1, 19)]));
        let load = load_landmark_csv(f.path(), &raw()).unwrap();
        assert_eq!(load.dataset.len(), 1);
        assert_eq!(
            load.rejected,
            vec![RejectedClip {
                clip_id: "b".into(),
                frames: 19
            }]
        );
    }

    #[test]
    fn malformed_and_duplicate_rows() {
        let mut text = csv_text(&[("a", 0, 20)]);
        text = text.replacen(",0,0,", ",0,0,oops,", 1);
        let f = write_tmp(&text);
        match load_landmark_csv(f.path(), &raw()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        let mut text = csv_text(&[("a", 0, 20)]);
        let dup = text.lines().nth(3).unwrap().to_string();
        text.push_str(&dup);
        text.push('\n');
        let f = write_tmp(&text);
        match load_landmark_csv(f.path(), &raw()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 22);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }

        let f = write_tmp("clip_id,frame,label\n");
        assert!(matches!(load_landmark_csv(f.path(), &raw()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn normalization_centres_and_scales() {
        let ds = generate_synthetic(2, 3).unwrap();
        for s in normalize_dataset(&ds).unwrap().samples() {
            let d = s.data.data();
            let n = (d.len() / 2) as f64;
            let mx: f64 = d.iter().step_by(2).sum::<f64>() / n;
            let my: f64 = d.iter().skip(1).step_by(2).sum::<f64>() / n;
            let rms = (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            assert!(mx.abs() < 1e-9 && my.abs() < 1e-9);
            assert!((rms - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_removes_translation_and_scale() {
        let ds = generate_synthetic(2, 4).unwrap();
        let moved = ds
            .map_data(|t| {
                Tensor::from_vec(t.shape(), t.data().iter().enumerate().map(|(i, v)| 2.5 * v + if i % 2 == 0 { 40.0 } else { -17.0 }).collect())
            })
            .unwrap();
        let (a, b) = (normalize_dataset(&ds).unwrap(), normalize_dataset(&moved).unwrap());
        for (x, y) in a.samples().iter().zip(b.samples()) {
            for (p, q) in x.data.data().iter().zip(y.data.data()) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_synthetic(2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clips.csv");
        write_landmark_csv(&ds, &path).unwrap();
        let back = load_landmark_csv(&path, &raw()).unwrap().dataset;
        assert_eq!(back, ds);
        let again = dir.path().join("again.csv");
        write_landmark_csv(&back, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn feature_file_round_trip() {
        let ds = flatten_landmarks(&generate_synthetic(1, 6).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.featclip");
        write_feature_file(&ds, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.get(0).data.shape(), &[20, 136]);
        let bad = write_tmp("FEATCLIP v1 a 0 2 3\n1 2 3\n1 2\n");
        assert!(matches!(read_feature_file(bad.path()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn synthetic_generator_properties() {
        let ds = generate_synthetic(8, 0).unwrap();
        assert_eq!(ds.len(), 16);
        assert_eq!(ds.class_counts(), [8, 8]);
        assert_eq!(ds, generate_synthetic(8, 0).unwrap());
        assert_ne!(ds, generate_synthetic(8, 1).unwrap());
        let tpl = face_template();
        let ys: Vec<f64> = (0..20).map(|t| synthetic_trajectory(&tpl, 19, 1, t, 20).1).collect();
        assert!(ys.windows(2).all(|w| w[1] > w[0]));
        let still: Vec<f64> = (0..20).map(|t| synthetic_trajectory(&tpl, 19, 0, t, 20).1).collect();
        assert!(still.windows(2).all(|w| w[1] == w[0]));
    }

    fn labelled(values: &[(Vec<f64>, usize)]) -> Dataset {
        Dataset::new(
            values
                .iter()
                .enumerate()
                .map(|(i, (v, l))| Sample {
                    id: format!("c{i}"),
                    label: *l,
                    data: Tensor::from_vec(&[v.len()], v.clone()).unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn smote_balanced_and_degenerate_cases() {
        let ds = labelled(&[(vec![0.0], 0), (vec![1.0], 1)]);
        assert_eq!(smote_oversample(&ds, 5, 0).unwrap(), ds);

        let ds = labelled(&[
            (vec![1.0, 2.0], 1),
            (vec![1.0, 2.0], 1),
            (vec![0.0, 0.0], 0),
            (vec![3.0, 0.0], 0),
            (vec![0.0, 3.0], 0),
            (vec![5.0, 5.0], 0),
        ]);
        let out = smote_oversample(&ds, 5, 1).unwrap();
        assert_eq!(out.class_counts(), [4, 4]);
        for s in &out.samples()[6..] {
            assert_eq!(s.data.data(), &[1.0, 2.0]);
        }

        let lonely = labelled(&[(vec![0.0], 1), (vec![1.0], 0), (vec![2.0], 0)]);
        assert!(smote_oversample(&lonely, 5, 0).is_err());
        let one_class = labelled(&[(vec![0.0], 0), (vec![1.0], 0)]);
        assert!(smote_oversample(&one_class, 5, 0).is_err());
    }

    /// Distance from `p` to the segment `a`-`b`.
    fn segment_distance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        let len2: f64 = ab.iter().map(|v| v * v).sum();
        let t = if len2 == 0.0 {
            0.0
        } else {
            (p.iter().zip(a).zip(&ab).map(|((p, a), d)| (p - a) * d).sum::<f64>() / len2).clamp(0.0, 1.0)
        };
        p.iter()
            .zip(a)
            .zip(&ab)
            .map(|((p, a), d)| (p - a - t * d).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn smote_samples_lie_on_minority_segments(seed in 0u64..1000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<(Vec<f64>, usize)> = (0..12)
                .map(|i| ((0..4).map(|_| rng.gen_range(-3.0..3.0)).collect(), usize::from(i < 3)))
                .collect();
            let ds = labelled(&vals);
            let out = smote_oversample(&ds, k, seed).unwrap();
            prop_assert_eq!(out.class_counts(), [9, 9]);
            prop_assert_eq!(&out.samples()[..12], ds.samples());
            let minority: Vec<&[f64]> = ds.samples().iter().filter(|s| s.label == 1).map(|s| s.data.data()).collect();
            for s in &out.samples()[12..] {
                prop_assert_eq!(s.label, 1);
                let best = (0..3)
                    .flat_map(|a| (0..3).map(move |b| (a, b)))
                    .filter(|(a, b)| a != b)
                    .map(|(a, b)| segment_distance(s.data.data(), minority[a], minority[b]))
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(best < 1e-9);
            }
        }
    }

    #[test]
    fn split_proportions_and_partition() {
        let ds = generate_synthetic(50, 7).unwrap();
        let split = split_dataset(&ds, 3).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (80, 10, 10));
        for part in [&split.val, &split.test] {
            assert_eq!(ds.subset(part).class_counts(), [5, 5]);
        }
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split, split_dataset(&ds, 3).unwrap());
        let small = ds.subset(&(0..9).collect::<Vec<_>>());
        assert!(split_dataset(&small, 0).is_err());
        let one_class = ds.subset(&(0..20).collect::<Vec<_>>());
        assert!(split_dataset(&one_class, 0).is_err());
    }

    #[test]
    fn kfold_partition_properties() {
        let ds = generate_synthetic(10, 8).unwrap();
        let folds = kfold_partitions(&ds, 5, 2).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = [0; 20];
        for f in &folds {
            assert_eq!(f.test.len(), 4);
            assert_eq!(f.train.len(), 16);
            assert_eq!(ds.subset(&f.test).class_counts(), [2, 2]);
            for &i in &f.test {
                seen[i] += 1;
                assert!(!f.train.contains(&i));
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
        assert_eq!(folds, kfold_partitions(&ds, 5, 2).unwrap());
        assert!(kfold_partitions(&generate_synthetic(4, 0).unwrap(), 5, 0).is_err());
    }

    fn noise_image(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[3, n, n], (0..3 * n * n).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn identity_augmentation() {
        let img = noise_image(16, 9);
        let out = augment_image_with(&img, &AugmentParams::identity(16)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn augmentation_shape_and_constant_interior() {
        let img = noise_image(32, 10);
        for seed in 0..5 {
            assert_eq!(augment_image(&img, seed).unwrap().shape(), &[3, 32, 32]);
        }
        let n = 32;
        let flat = Tensor::full(&[3, n, n], 0.7);
        for angle in [-15.0, -7.3, 4.0, 15.0] {
            let p = AugmentParams {
                angle_deg: angle,
                ..AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(1), n, CROP_AREA, 0.0)
            };
            let out = augment_image_with(&flat, &p).unwrap();
            let c = (n as f64 - 1.0) / 2.0;
            for i in 0..n {
                for j in 0..n {
                    let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
                    if r < c - 1.0 {
                        assert!((out.data()[i * n + j] - 0.7).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_shape() {
        let ds = normalize_dataset(&generate_synthetic(1, 11).unwrap()).unwrap();
        let imgs = render_dataset(&ds, 32, Some(3)).unwrap();
        assert_eq!(imgs.get(0).data.shape(), &[20, 3, 32, 32]);
        assert!(imgs.get(0).data.data().iter().any(|&v| v > 0.1));
    }
}
