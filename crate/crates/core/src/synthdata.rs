//! Paired pseudo-OCT / pseudo-OCTA layered phantoms with per-pixel layer
//! labels, their binary file format, and stratified datasets on disk.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Layers drawn as filled bands below the background.
pub const LAYER_NAMES: [&str; 6] = ["ILM", "IPL", "OPL", "ISOS", "RPE", "BM"];
/// Background plus one class per layer.
pub const NUM_CLASSES: usize = 7;
pub const DEFAULT_SIZE: usize = 64;
pub const MAGIC: &[u8; 8] = b"TAPEIMG1";
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8;

/// Nominal layer thicknesses, in rows of a 64-row image.
const THICKNESS: [f64; 5] = [8.0, 8.5, 7.0, 8.5, 6.5];
const TOP: f64 = 11.0;
/// Mean OCT intensity of background then each layer.
const OCT_LEVELS: [f32; NUM_CLASSES] = [0.04, 0.88, 0.42, 0.72, 0.22, 0.95, 0.55];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pathology {
    Normal,
    Amd,
    Dr,
    Rvo,
}

impl Pathology {
    pub const ALL: [Pathology; 4] = [Pathology::Normal, Pathology::Amd, Pathology::Dr, Pathology::Rvo];

    pub fn code(self) -> u32 {
        match self {
            Pathology::Normal => 0,
            Pathology::Amd => 1,
            Pathology::Dr => 2,
            Pathology::Rvo => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pathology::Normal => "NORMAL",
            Pathology::Amd => "AMD",
            Pathology::Dr => "DR",
            Pathology::Rvo => "RVO",
        }
    }
}

impl fmt::Display for Pathology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pathology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Dataset(format!("unknown pathology `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    /// `[1×H×W]`, values in `[0, 1]`.
    pub oct: Tensor<f32>,
    /// `[1×H×W]`, values in `[0, 1]`.
    pub octa: Tensor<f32>,
    /// Row-major class indices in `0..NUM_CLASSES`.
    pub labels: Vec<u8>,
    pub pathology: Pathology,
    pub seed: u64,
}

impl PhantomSample {
    pub fn height(&self) -> usize {
        self.oct.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.oct.shape()[2]
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn bit_eq(&self, other: &PhantomSample) -> bool {
        self.oct.bit_eq(&other.oct)
            && self.octa.bit_eq(&other.octa)
            && self.labels == other.labels
            && self.pathology == other.pathology
            && self.seed == other.seed
    }
}

/// Independent random streams, so pathology draws never shift the shared
/// geometry or noise.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Smooth curve: linear trend plus up to three low-frequency sinusoids.
struct Curve {
    trend: f64,
    waves: Vec<(f64, f64, f64)>,
}

impl Curve {
    fn random(rng: &mut ChaCha8Rng, trend: f64, amplitude: f64) -> Self {
        let n = rng.gen_range(1..=3);
        let waves = (0..n)
            .map(|_| {
                (
                    rng.gen_range(0.0..amplitude),
                    rng.gen_range(0.3..1.6),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Curve {
            trend: rng.gen_range(-trend..=trend),
            waves,
        }
    }

    /// Offset at horizontal position `u ∈ [0, 1]`.
    fn at(&self, u: f64) -> f64 {
        let mut y = self.trend * (u - 0.5);
        for &(a, f, phase) in &self.waves {
            y += a * (std::f64::consts::TAU * f * u + phase).sin();
        }
        y
    }
}

/// Surface rows per column: `surfaces[s][x]` is the first row of layer
/// `s + 1`.
type Surfaces = [Vec<f64>; 6];

fn base_geometry(seed: u64, h: usize, w: usize) -> Surfaces {
    let mut rng = stream(seed, 0);
    let scale = h as f64 / 64.0;
    let shape = Curve::random(&mut rng, 4.0 * scale, 1.5 * scale);
    let top = TOP * scale + rng.gen_range(-1.0..1.0) * scale;
    let thickness: Vec<f64> = THICKNESS
        .iter()
        .map(|t| t * scale * rng.gen_range(0.92..1.08))
        .collect();
    let wobble: Vec<Curve> = (0..6).map(|_| Curve::random(&mut rng, 0.0, 0.5 * scale)).collect();
    let mut surfaces: Surfaces = Default::default();
    for x in 0..w {
        let u = (x as f64 + 0.5) / w as f64;
        let mut y = top + shape.at(u);
        for s in 0..6 {
            surfaces[s].push(y + wobble[s].at(u));
            if s < 5 {
                y += thickness[s];
            }
        }
    }
    surfaces
}

/// Compactly supported smooth bump, zero for `|x − center| ≥ radius`.
fn bump(x: f64, center: f64, radius: f64) -> f64 {
    let t = (x - center) / radius;
    if t.abs() >= 1.0 {
        0.0
    } else {
        let c = (std::f64::consts::PI * t).cos();
        0.5 * (1.0 + c)
    }
}

/// Deformations applied to the surface geometry.
struct Lesion {
    center: f64,
    radius: f64,
    amplitude: f64,
}

fn lesion(seed: u64, pathology: Pathology, h: usize, w: usize) -> Lesion {
    let mut rng = stream(seed, 2 + pathology.code() as u64);
    let scale = h as f64 / 64.0;
    let wf = w as f64;
    Lesion {
        center: rng.gen_range(0.25 * wf..0.75 * wf),
        radius: rng.gen_range(0.12 * wf..0.22 * wf),
        amplitude: match pathology {
            Pathology::Amd => rng.gen_range(3.0..5.5) * scale,
            Pathology::Rvo => rng.gen_range(3.0..5.0) * scale,
            _ => 0.0,
        },
    }
}

fn deform(surfaces: &mut Surfaces, pathology: Pathology, l: &Lesion) {
    let w = surfaces[0].len();
    for x in 0..w {
        let k = bump(x as f64 + 0.5, l.center, l.radius) * l.amplitude;
        if k == 0.0 {
            continue;
        }
        match pathology {
            // drusen: RPE and BM surfaces pushed up
            Pathology::Amd => {
                surfaces[4][x] -= k;
                surfaces[5][x] -= 0.8 * k;
            }
            // swelling of the inner layers pushes everything below down
            Pathology::Rvo => {
                surfaces[1][x] += 0.5 * k;
                for s in 2..6 {
                    surfaces[s][x] += k;
                }
            }
            _ => {}
        }
    }
}

/// Integer band starts per column, strictly increasing with ≥1 row of
/// background above and ≥1 row of the last layer below.
fn quantize(surfaces: &Surfaces, h: usize) -> Vec<[usize; 6]> {
    let w = surfaces[0].len();
    (0..w)
        .map(|x| {
            let mut rows = [0usize; 6];
            for s in 0..6 {
                let lo = if s == 0 { 1 } else { rows[s - 1] + 1 };
                let hi = h - 6 + s;
                rows[s] = (surfaces[s][x].round().max(0.0) as usize).clamp(lo, hi);
            }
            rows
        })
        .collect()
}

fn label_at(bands: &[usize; 6], y: usize) -> u8 {
    bands.iter().filter(|&&b| b <= y).count() as u8
}

/// Smallest image height that fits every band.
pub const MIN_HEIGHT: usize = 24;

/// Generates one phantom; a pure function of its arguments.
pub fn gen_phantom(seed: u64, pathology: Pathology, h: usize, w: usize) -> Result<PhantomSample> {
    if h < MIN_HEIGHT || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "phantom of {h}×{w} cannot hold six bands (need height ≥ {MIN_HEIGHT})"
        )));
    }
    let mut surfaces = base_geometry(seed, h, w);
    let les = lesion(seed, pathology, h, w);
    deform(&mut surfaces, pathology, &les);
    let bands = quantize(&surfaces, h);

    let mut labels = vec![0u8; h * w];
    for (x, b) in bands.iter().enumerate() {
        for y in 0..h {
            labels[y * w + x] = label_at(b, y);
        }
    }

    let mut oct: Vec<f32> = labels.iter().map(|&l| OCT_LEVELS[l as usize]).collect();
    let mut octa: Vec<f32> = labels
        .iter()
        .map(|&l| if l == 0 { 0.02 } else { 0.25 * OCT_LEVELS[l as usize] })
        .collect();

    // pathology intensity effects
    let mut prng = stream(seed, 16 + pathology.code() as u64);
    match pathology {
        Pathology::Dr => {
            for _ in 0..prng.gen_range(2..=4) {
                let cx = prng.gen_range(0..w);
                let x0 = (cx as f64 + 0.5).min(w as f64 - 0.5);
                let b = &bands[cx];
                let cy = (b[0] + b[2]) as f64 / 2.0 + prng.gen_range(-1.0..1.0);
                let (rx, ry) = (prng.gen_range(1.5..3.5), prng.gen_range(1.0..2.0));
                for y in 0..h {
                    for x in 0..w {
                        let dx = (x as f64 + 0.5 - x0) / rx;
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let l = labels[y * w + x];
                        if dx * dx + dy * dy <= 1.0 && (1..=3).contains(&l) {
                            oct[y * w + x] *= 0.3;
                        }
                    }
                }
            }
        }
        Pathology::Rvo => {
            let apex = les.center;
            for x in 0..w {
                let b = &bands[x];
                for y in b[0]..b[3] {
                    let depth = (y - b[0]) as f64 / (b[3] - b[0]).max(1) as f64;
                    let half = 0.3 * les.radius * (1.0 - depth);
                    if (x as f64 + 0.5 - apex).abs() <= half {
                        oct[y * w + x] *= 0.45;
                    }
                }
            }
        }
        _ => {}
    }

    // vessels: bright dots and short vertical streaks in the inner layers
    let mut vrng = stream(seed, 1);
    let extra = if pathology == Pathology::Dr { 2.0 } else { 1.0 };
    let n_vessels = (0.6 * w as f64 * extra) as usize;
    let place = |rng: &mut ChaCha8Rng, octa: &mut [f32]| {
        let x = rng.gen_range(0..w);
        let b = &bands[x];
        let span = (b[3] - b[0]).max(1);
        let y0 = b[0] + rng.gen_range(0..span);
        let len = rng.gen_range(1..=3);
        let v = rng.gen_range(0.75..1.0);
        for y in y0..(y0 + len).min(b[3]) {
            octa[y * w + x] = v;
        }
    };
    for _ in 0..(0.6 * w as f64) as usize {
        place(&mut vrng, &mut octa);
    }
    if n_vessels > (0.6 * w as f64) as usize {
        let mut drng = stream(seed, 32);
        for _ in (0.6 * w as f64) as usize..n_vessels {
            place(&mut drng, &mut octa);
        }
    }

    // speckle, drawn for every pixel in a fixed order
    let mut nrng = stream(seed, 64);
    for v in oct.iter_mut().chain(octa.iter_mut()) {
        let s: f32 = nrng.gen_range(0.7..1.3);
        *v = (*v * s).clamp(0.0, 1.0);
    }

    Ok(PhantomSample {
        oct: Tensor::from_vec(&[1, h, w], oct)?,
        octa: Tensor::from_vec(&[1, h, w], octa)?,
        labels,
        pathology,
        seed,
    })
}

/// Row of each label transition down column `x`.
pub fn column_transitions(labels: &[u8], h: usize, w: usize, x: usize) -> Vec<(usize, u8)> {
    (1..h)
        .filter(|&y| labels[y * w + x] != labels[(y - 1) * w + x])
        .map(|y| (y, labels[y * w + x]))
        .collect()
}

// ------------------------------------------------------------------ file format

pub fn encode_sample(s: &PhantomSample) -> Vec<u8> {
    let (h, w) = (s.height(), s.width());
    let mut out = Vec::with_capacity(sample_file_len(h, w));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&s.pathology.code().to_le_bytes());
    out.extend_from_slice(&s.seed.to_le_bytes());
    for v in s.oct.data().iter().chain(s.octa.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.labels);
    out
}

/// Exact byte length of a stored `h × w` sample.
pub fn sample_file_len(h: usize, w: usize) -> usize {
    HEADER_LEN + 2 * 4 * h * w + h * w
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<PhantomSample> {
    let bad = |d: String| Error::format(path, d);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            std::str::from_utf8(MAGIC).unwrap_or_default()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let (h, w) = (u32_at(8) as usize, u32_at(12) as usize);
    let pathology =
        Pathology::from_code(u32_at(16)).ok_or_else(|| bad(format!("unknown pathology code {}", u32_at(16))))?;
    let seed = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
    if h == 0 || w == 0 {
        return Err(bad("zero image dimension".into()));
    }
    let expected = sample_file_len(h, w);
    if bytes.len() != expected {
        return Err(bad(format!(
            "{} bytes for a {h}×{w} sample, expected {expected}",
            bytes.len()
        )));
    }
    let n = h * w;
    let floats = |start: usize| -> Vec<f32> {
        bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };
    let oct = floats(HEADER_LEN);
    let octa = floats(HEADER_LEN + 4 * n);
    let labels = bytes[HEADER_LEN + 8 * n..].to_vec();
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(bad(format!("label {l} out of range")));
    }
    Ok(PhantomSample {
        oct: Tensor::from_vec(&[1, h, w], oct)?,
        octa: Tensor::from_vec(&[1, h, w], octa)?,
        labels,
        pathology,
        seed,
    })
}

pub fn save_sample(path: &Path, s: &PhantomSample) -> Result<()> {
    fs::write(path, encode_sample(s)).map_err(|e| Error::io(path, e))
}

pub fn load_sample(path: &Path) -> Result<PhantomSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes, path)
}

// ---------------------------------------------------------------------- datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One row of `index.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub filename: String,
    pub pathology: Pathology,
    pub split: Split,
    pub seed: u64,
}

pub const INDEX_FILE: &str = "index.csv";
pub const FINGERPRINT_FILE: &str = "fingerprint.txt";

/// Per-class split sizes: 10% validation and 20% test (at least one
/// each), the rest training.
pub fn split_sizes(n_per_class: usize) -> (usize, usize, usize) {
    let val = ((n_per_class as f64 * 0.1).round() as usize).max(1);
    let test = ((n_per_class as f64 * 0.2).round() as usize).max(1);
    (n_per_class - val - test, val, test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_per_class: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl DatasetSpec {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        DatasetSpec {
            n_per_class,
            seed,
            height: DEFAULT_SIZE,
            width: DEFAULT_SIZE,
        }
    }
}

/// Samples and their index rows, in index order.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Vec<(IndexEntry, PhantomSample)>> {
    if spec.n_per_class < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 samples per class, got {}",
            spec.n_per_class
        )));
    }
    let (n_train, n_val, _) = split_sizes(spec.n_per_class);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(4 * spec.n_per_class);
    for pathology in Pathology::ALL {
        let mut order: Vec<usize> = (0..spec.n_per_class).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut split_of = vec![Split::Test; spec.n_per_class];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (i, split) in split_of.into_iter().enumerate() {
            let seed: u64 = rng.gen();
            let sample = gen_phantom(seed, pathology, spec.height, spec.width)?;
            let entry = IndexEntry {
                filename: format!("{}_{i:04}.timg", pathology.as_str().to_lowercase()),
                pathology,
                split,
                seed,
            };
            out.push((entry, sample));
        }
    }
    Ok(out)
}

fn index_csv(entries: &[IndexEntry]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e).map_err(|e| Error::Dataset(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Dataset(e.to_string()))
}

/// SHA-256 over the index bytes followed by each sample file's digest.
pub fn fingerprint<'a>(index: &[u8], sample_files: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    h.update(index);
    for bytes in sample_files {
        h.update(Sha256::digest(bytes));
    }
    hex::encode(h.finalize())
}

/// Writes a dataset into `dir`, which must not already contain one.
/// Returns the fingerprint.
pub fn gen_dataset(dir: &Path, spec: &DatasetSpec) -> Result<String> {
    if dir.join(INDEX_FILE).exists() {
        return Err(Error::Dataset(format!("{} already holds a dataset", dir.display())));
    }
    let items = build_dataset(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(items.len());
    for (entry, sample) in &items {
        let path = dir.join(&entry.filename);
        if path.exists() {
            return Err(Error::Dataset(format!("{} already exists", path.display())));
        }
        let bytes = encode_sample(sample);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(bytes);
    }
    let entries: Vec<IndexEntry> = items.into_iter().map(|(e, _)| e).collect();
    let index = index_csv(&entries)?;
    let fp = fingerprint(&index, files.iter().map(Vec::as_slice));
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, &index).map_err(|e| Error::io(&index_path, e))?;
    let fp_path = dir.join(FINGERPRINT_FILE);
    fs::write(&fp_path, format!("{fp}\n")).map_err(|e| Error::io(&fp_path, e))?;
    Ok(fp)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
    pub fingerprint: String,
    samples: Vec<PhantomSample>,
}

impl Dataset {
    /// Reads the index and every sample, recomputing the fingerprint.
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let index = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut reader = csv::Reader::from_reader(index.as_slice());
        let entries: Vec<IndexEntry> = reader
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(&index_path, e.to_string()))?;
        if entries.is_empty() {
            return Err(Error::Dataset(format!("{} lists no samples", index_path.display())));
        }
        let mut files = Vec::with_capacity(entries.len());
        let mut samples = Vec::with_capacity(entries.len());
        for e in &entries {
            let path = dir.join(&e.filename);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let s = decode_sample(&bytes, &path)?;
            if s.pathology != e.pathology || s.seed != e.seed {
                return Err(Error::format(&path, "sample disagrees with its index row"));
            }
            samples.push(s);
            files.push(bytes);
        }
        let fingerprint = fingerprint(&index, files.iter().map(Vec::as_slice));
        Ok(Dataset {
            root: dir.to_path_buf(),
            entries,
            fingerprint,
            samples,
        })
    }

    /// An in-memory dataset, fingerprinted as if written to disk.
    pub fn from_items(items: Vec<(IndexEntry, PhantomSample)>) -> Result<Self> {
        let (entries, samples): (Vec<_>, Vec<_>) = items.into_iter().unzip();
        let index = index_csv(&entries)?;
        let files: Vec<Vec<u8>> = samples.iter().map(encode_sample).collect();
        let fingerprint = fingerprint(&index, files.iter().map(Vec::as_slice));
        Ok(Dataset {
            root: PathBuf::new(),
            entries,
            fingerprint,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PhantomSample] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> Vec<&PhantomSample> {
        self.entries
            .iter()
            .zip(&self.samples)
            .filter(|(e, _)| e.split == split)
            .map(|(_, s)| s)
            .collect()
    }
}
