//! Discrete unit codec: k-means codebook training, quantization, and
//! adjacent-duplicate removal, plus the on-disk unit and codebook formats.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureFrames;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"UFCB";
pub const CODEBOOK_VERSION: u32 = 1;

/// K centroid feature vectors; the quantizer and the synthesis lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>, // K x feature_dim, row-major
    pub k: usize,
    pub feature_dim: usize,
}

impl Codebook {
    pub fn from_centroids(centroids: Vec<f32>, k: usize, feature_dim: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::BadClusterCount(k));
        }
        assert_eq!(centroids.len(), k * feature_dim);
        if !centroids.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("non-finite centroid".into()));
        }
        Ok(Codebook {
            centroids,
            k,
            feature_dim,
        })
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }
}

/// Ordered discrete unit indices in [0, K).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    pub reduced: bool,
}

impl UnitSequence {
    pub fn new(units: Vec<u32>, reduced: bool) -> Self {
        debug_assert!(!reduced || units.windows(2).all(|w| w[0] != w[1]));
        UnitSequence { units, reduced }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        for &u in &self.units {
            if u as usize >= k {
                return Err(Error::UnitOutOfRange { unit: u, k });
            }
        }
        if self.reduced && self.units.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::NotReduced);
        }
        Ok(())
    }

    /// Textual rendering: "<u_{a}><u_{b}>...".
    pub fn render(&self) -> String {
        let mut s = String::new();
        for &u in &self.units {
            s.push_str(&format!("<u_{{{u}}}>"));
        }
        s
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    acc
}

fn nearest(frame: &[f32], centroids: &[f32], k: usize, dim: usize) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d = sq_dist(frame, &centroids[c * dim..(c + 1) * dim]);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Seeded k-means++ initialization over `n` frames of width `dim`.
fn kmeans_pp_init(data: &[f32], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    let mut centroids = vec![0f32; k * dim];
    let first = rng.gen_range(0..n);
    centroids[..dim].copy_from_slice(&data[first * dim..(first + 1) * dim]);

    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&data[i * dim..(i + 1) * dim], &centroids[..dim]))
        .collect();

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientDistinctData { k });
        }
        let threshold = rng.gen::<f64>() * total;
        let mut acc = 0f64;
        let mut chosen = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if acc >= threshold {
                chosen = i;
                break;
            }
        }
        let slot = &mut centroids[c * dim..(c + 1) * dim];
        slot.copy_from_slice(&data[chosen * dim..(chosen + 1) * dim]);
        let slot = &centroids[c * dim..(c + 1) * dim];
        for i in 0..n {
            let d = sq_dist(&data[i * dim..(i + 1) * dim], slot);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    Ok(centroids)
}

/// Lloyd's algorithm with k-means++ initialization.
///
/// Stops when no assignment changes or after `max_iters`. Empty clusters are
/// re-seeded from the frame farthest from its assigned centroid. The
/// assignment step runs in parallel; accumulation is sequential in frame
/// order, so results are identical for any worker count.
pub fn train_codebook(
    frames: &[&FeatureFrames],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Codebook> {
    if k < 2 {
        return Err(Error::BadClusterCount(k));
    }
    let dim = frames.iter().map(|f| f.feature_dim).max().unwrap_or(0);
    let mut data = Vec::new();
    let mut n = 0usize;
    for f in frames {
        if f.feature_dim != dim {
            return Err(Error::DimensionMismatch {
                frames: f.feature_dim,
                codebook: dim,
            });
        }
        data.extend_from_slice(f.as_slice());
        n += f.num_frames;
    }
    if n < k {
        return Err(Error::InsufficientData { frames: n, k });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&data, n, dim, k, &mut rng)?;
    let mut assign = vec![usize::MAX; n];

    for _ in 0..max_iters {
        let new_assign: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(&data[i * dim..(i + 1) * dim], &centroids, k, dim))
            .collect();

        let changed = new_assign
            .iter()
            .enumerate()
            .any(|(i, (a, _))| *a != assign[i]);
        for (i, (a, _)) in new_assign.iter().enumerate() {
            assign[i] = *a;
        }
        if !changed {
            break;
        }

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for j in 0..dim {
                sums[c * dim + j] += data[i * dim + j] as f64;
            }
        }

        // Re-seed empty clusters from the farthest-from-home frames,
        // lowest frame index wins ties; each frame stolen at most once.
        let mut stolen = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = (usize::MAX, f64::MIN);
            for i in 0..n {
                if stolen[i] || counts[assign[i]] <= 1 {
                    continue;
                }
                let d = new_assign[i].1;
                if d > far.1 {
                    far = (i, d);
                }
            }
            let (i, _) = far;
            if i == usize::MAX {
                return Err(Error::InsufficientDistinctData { k });
            }
            stolen[i] = true;
            let old = assign[i];
            counts[old] -= 1;
            counts[c] += 1;
            for j in 0..dim {
                sums[old * dim + j] -= data[i * dim + j] as f64;
                sums[c * dim + j] += data[i * dim + j] as f64;
            }
            assign[i] = c;
        }

        for c in 0..k {
            for j in 0..dim {
                centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
            }
        }
    }

    Codebook::from_centroids(centroids, k, dim)
}

/// Sum of squared distances from each frame to its nearest centroid.
pub fn inertia(frames: &FeatureFrames, cb: &Codebook) -> f64 {
    frames
        .rows()
        .map(|f| nearest(f, cb.centroids(), cb.k, cb.feature_dim).1)
        .sum()
}

/// Nearest-centroid assignment; ties break toward the lowest index.
pub fn quantize(frames: &FeatureFrames, cb: &Codebook) -> Result<UnitSequence> {
    if frames.feature_dim != cb.feature_dim {
        return Err(Error::DimensionMismatch {
            frames: frames.feature_dim,
            codebook: cb.feature_dim,
        });
    }
    let units = frames
        .rows()
        .map(|f| nearest(f, cb.centroids(), cb.k, cb.feature_dim).0 as u32)
        .collect();
    Ok(UnitSequence::new(units, false))
}

/// Collapses each maximal run of equal adjacent units to one occurrence.
pub fn deduplicate(u: &UnitSequence) -> UnitSequence {
    let mut out = Vec::with_capacity(u.units.len());
    for &unit in &u.units {
        if out.last() != Some(&unit) {
            out.push(unit);
        }
    }
    UnitSequence::new(out, true)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Codebook file: magic "UFCB", version u32, K u32, dim u32, K*dim LE f32.
pub fn save_codebook(path: impl AsRef<Path>, cb: &Codebook) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + cb.centroids.len() * 4);
    buf.extend_from_slice(CODEBOOK_MAGIC);
    buf.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cb.k as u32).to_le_bytes());
    buf.extend_from_slice(&(cb.feature_dim as u32).to_le_bytes());
    for v in &cb.centroids {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if buf.len() < 16 || &buf[0..4] != CODEBOOK_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CODEBOOK_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let k = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let need = 16 + k * dim * 4;
    if buf.len() != need {
        return Err(fail("truncated centroid data"));
    }
    let centroids = buf[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Codebook::from_centroids(centroids, k, dim)
}

/// Unit file: header line "#K=<K> reduced=<bool>", then one utterance per
/// line of space-separated decimal unit indices.
pub fn save_units(path: impl AsRef<Path>, seqs: &[UnitSequence], k: usize) -> Result<()> {
    let path = path.as_ref();
    let reduced = seqs.iter().all(|s| s.reduced);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(w, "#K={k} reduced={reduced}")?;
        for s in seqs {
            let line: Vec<String> = s.units.iter().map(|u| u.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    };
    emit(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_units(path: impl AsRef<Path>) -> Result<(Vec<UnitSequence>, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let parse_header = || -> Option<(usize, bool)> {
        let rest = header.strip_prefix("#K=")?;
        let (k, red) = rest.split_once(" reduced=")?;
        Some((k.parse().ok()?, red.trim().parse().ok()?))
    };
    let (k, reduced) = parse_header().ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: "bad unit file header".into(),
    })?;
    let mut seqs = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut units = Vec::new();
        for tok in line.split_whitespace() {
            let u: u32 = tok.parse().map_err(|_| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("bad unit '{tok}' on line {}", idx + 2),
            })?;
            units.push(u);
        }
        let seq = UnitSequence { units, reduced };
        seq.validate(k)?;
        seqs.push(seq);
    }
    Ok((seqs, k))
}
