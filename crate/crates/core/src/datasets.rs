//! Synthetic hazy/clear pairs, their on-disk manifest, consensual-negative
//! pools, and aligned random crops.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::NegativeRecord;
use crate::error::{config, invalid, Error, Result};
use crate::hazephysics::{
    blend_restore, dcp_restore, invert_haze, synthetic_depth, AtmosphericLight, DepthKind, HazeSample, ImageTensor,
    T_MIN,
};
use crate::metrics::psnr;
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "c2p-manifest-v1";
pub const MANIFEST_NAME: &str = "manifest.json";
pub const MIN_SIZE: usize = 32;
pub const DCP_PATCH: usize = 7;

/// Negative generators in pool order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Generator {
    Dcp { omega: f64 },
    Perturbed { factor: f64 },
    Blend { alpha: f64 },
}

pub const DEFAULT_GENERATORS: [Generator; 7] = [
    Generator::Dcp { omega: 0.75 },
    Generator::Dcp { omega: 0.95 },
    Generator::Perturbed { factor: 0.7 },
    Generator::Perturbed { factor: 1.3 },
    Generator::Blend { alpha: 0.4 },
    Generator::Blend { alpha: 0.7 },
    Generator::Blend { alpha: 0.9 },
];

impl Generator {
    pub fn tag(&self) -> String {
        match self {
            Generator::Dcp { omega } => format!("dcp_omega_{omega}"),
            Generator::Perturbed { factor } => format!("invert_t_x{factor}"),
            Generator::Blend { alpha } => format!("blend_alpha_{alpha}"),
        }
    }

    pub fn apply(&self, sample: &HazeSample) -> Result<ImageTensor> {
        match *self {
            Generator::Dcp { omega } => dcp_restore(&sample.hazy, omega, DCP_PATCH),
            Generator::Perturbed { factor } => {
                invert_haze(&sample.hazy, &sample.transmission.perturbed(factor, T_MIN)?, sample.airlight, T_MIN)
            }
            Generator::Blend { alpha } => blend_restore(&sample.hazy, &sample.clear, alpha),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeEntry {
    pub path: String,
    pub psnr: f64,
    pub generator_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub clear_path: String,
    pub hazy_path: String,
    /// 16-bit grayscale PNG of the normalized depth used for synthesis.
    pub depth_path: String,
    pub beta: f64,
    pub airlight: [f64; 3],
    pub depth_kind: DepthKind,
    pub negatives: Vec<NegativeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// Writes `manifest.json` under `root` via a temporary file and rename.
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_NAME);
        write_atomic(&path, self.to_json()?.as_bytes())?;
        Ok(path)
    }

    /// Loads a manifest file and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| invalid(format!("manifest {}: {e}", path.display())))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(invalid(format!("manifest format {:?}, expected {MANIFEST_FORMAT:?}", manifest.format)));
        }
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for entry in &manifest.entries {
            let rels = [&entry.clear_path, &entry.hazy_path, &entry.depth_path];
            for rel in rels.into_iter().chain(entry.negatives.iter().map(|n| &n.path)) {
                let full = manifest.path_of(rel);
                if !full.is_file() {
                    return Err(invalid(format!("manifest entry {} references missing {}", entry.id, full.display())));
                }
            }
        }
        Ok(manifest)
    }

    pub fn require_negatives(&self, z: usize) -> Result<()> {
        match self.entries.iter().find(|e| e.negatives.len() != z) {
            Some(e) => Err(config(format!("entry {} has {} negatives, expected z = {z}", e.id, e.negatives.len()))),
            None => Ok(()),
        }
    }

    /// Reconstructs the haze sample of an entry from its stored clear image and depth.
    pub fn haze_sample(&self, entry: &ManifestEntry) -> Result<HazeSample> {
        let clear = ImageTensor::load_png(&self.path_of(&entry.clear_path))?;
        let depth = load_depth(&self.path_of(&entry.depth_path))?;
        let mut sample = HazeSample::synthesize(clear, &depth, entry.beta, AtmosphericLight::new(entry.airlight)?)?;
        sample.hazy = ImageTensor::load_png(&self.path_of(&entry.hazy_path))?;
        Ok(sample)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).and_then(|_| file.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_depth(depth: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (depth.height(), depth.width());
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(depth.at([0, 0, y as usize, x as usize]).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_depth(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn([1, 1, h as usize, w as usize], |[_, _, y, x]| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
    }))
}

fn quantized(depth: &Tensor) -> Tensor {
    depth.map(|d| (d.clamp(0.0, 1.0) * 65535.0).round() / 65535.0)
}

/// A random scene of gradients, shapes and stripes. Every shape colour has
/// one weak channel so the dark channel of clear content stays low.
pub fn procedural_clear<R: Rng>(size: usize, rng: &mut R) -> Result<ImageTensor> {
    let s = size as f64;
    let top: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.9));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.6));
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..rng.gen_range(3..7))
        .map(|_| {
            let weak = rng.gen_range(0..3);
            let color = std::array::from_fn(|c| if c == weak { rng.gen_range(0.0..0.15) } else { rng.gen_range(0.2..1.0) });
            (rng.gen(), rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(0.08..0.3) * s, rng.gen_range(0.08..0.3) * s, color)
        })
        .collect();
    let freq = rng.gen_range(2.0..8.0) * std::f64::consts::TAU / s;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.02..0.08);
    let mut img = Tensor::from_fn([1, 3, size, size], |[_, c, y, _]| {
        let v = y as f64 / s;
        (1.0 - v) * top[c] + v * bottom[c]
    });
    for (round, cy, cx, ry, rx, color) in shapes {
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if round { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for (c, &value) in color.iter().enumerate() {
                        img.set([0, c, y, x], value);
                    }
                }
            }
        }
    }
    let tex = Tensor::from_fn(img.shape(), |[_, _, y, x]| amp * ((x + y) as f64 * freq + phase).sin());
    ImageTensor::clamped(img.zip_map(&tex, |a, b| a + b))
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Writes `n` synthetic pairs under `out_dir` and the manifest that lists
/// them (without negatives).
pub fn generate_dataset(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(invalid("dataset size n must be at least 1"));
    }
    if size < MIN_SIZE {
        return Err(invalid(format!("image size {size} is below the minimum {MIN_SIZE}")));
    }
    for sub in ["clear", "hazy", "depth"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, i as u64);
        let id = format!("{i:05}");
        // Quantize first so the stored files reproduce the synthesis exactly.
        let clear = ImageTensor::clamped(procedural_clear(size, &mut rng)?.into_tensor().map(|v| crate::hazephysics::quantize(v) as f64 / 255.0))?;
        let depth_kind = DepthKind::ALL[rng.gen_range(0..DepthKind::ALL.len())];
        let depth = quantized(&synthetic_depth(depth_kind, size, size, &mut rng));
        let beta = crate::hazephysics::sample_beta(&mut rng);
        let tied = rng.gen_bool(0.5);
        let airlight = AtmosphericLight::sample(&mut rng, tied);
        let sample = HazeSample::synthesize(clear, &depth, beta, airlight)?;
        let entry = ManifestEntry {
            clear_path: format!("clear/{id}.png"),
            hazy_path: format!("hazy/{id}.png"),
            depth_path: format!("depth/{id}.png"),
            id,
            beta,
            airlight: airlight.0,
            depth_kind,
            negatives: Vec::new(),
        };
        sample.clear.save_png(&out_dir.join(&entry.clear_path))?;
        sample.hazy.save_png(&out_dir.join(&entry.hazy_path))?;
        save_depth(&depth, &out_dir.join(&entry.depth_path))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest { format: MANIFEST_FORMAT.into(), entries, root: out_dir.to_path_buf() };
    manifest.write()?;
    Ok(manifest)
}

/// A negative image with its record.
#[derive(Clone, Debug)]
pub struct PooledNegative {
    pub image: ImageTensor,
    pub record: NegativeRecord,
}

/// `z` consensual negatives for one sample. With fewer than seven slots the
/// generators are a seeded subset, kept in pool order.
pub fn build_negative_pool(sample: &HazeSample, z: usize, seed: u64) -> Result<Vec<PooledNegative>> {
    if z == 0 {
        return Err(invalid("z must be at least 1"));
    }
    if z > DEFAULT_GENERATORS.len() {
        return Err(config(format!("z = {z} exceeds the {} available generator slots", DEFAULT_GENERATORS.len())));
    }
    let mut slots: Vec<usize> = (0..DEFAULT_GENERATORS.len()).collect();
    if z < slots.len() {
        slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        slots.truncate(z);
        slots.sort_unstable();
    }
    slots
        .into_iter()
        .map(|slot| {
            let generator = DEFAULT_GENERATORS[slot];
            // Measure what will be stored on disk.
            let raw = generator.apply(sample)?;
            let image = ImageTensor::clamped(raw.into_tensor().map(|v| crate::hazephysics::quantize(v) as f64 / 255.0))?;
            let psnr = psnr(&image, &sample.clear)?;
            Ok(PooledNegative { image, record: NegativeRecord::new("", psnr, generator.tag()) })
        })
        .collect()
}

/// Builds, stores and lists pools of `z` negatives for every manifest entry.
pub fn build_pools_for_manifest(manifest: &mut DatasetManifest, z: usize, seed: u64) -> Result<()> {
    let dir = manifest.root.join("negatives");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut all = Vec::with_capacity(manifest.entries.len());
    for (i, entry) in manifest.entries.iter().enumerate() {
        let sample = manifest.haze_sample(entry)?;
        let pool = build_negative_pool(&sample, z, seed.wrapping_add(i as u64))?;
        let mut negatives = Vec::with_capacity(z);
        for (q, neg) in pool.into_iter().enumerate() {
            let path = format!("negatives/{}_{q}.png", entry.id);
            neg.image.save_png(&manifest.path_of(&path))?;
            negatives.push(NegativeEntry { path, psnr: neg.record.psnr_vs_positive, generator_tag: neg.record.generator_tag });
        }
        all.push(negatives);
    }
    for (entry, negatives) in manifest.entries.iter_mut().zip(all) {
        entry.negatives = negatives;
    }
    manifest.write()?;
    Ok(())
}

/// A sample loaded fully into memory.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub hazy: ImageTensor,
    pub clear: ImageTensor,
    pub negatives: Vec<ImageTensor>,
    pub records: Vec<NegativeRecord>,
}

pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<LoadedSample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let negatives = e
                .negatives
                .iter()
                .map(|n| ImageTensor::load_png(&manifest.path_of(&n.path)))
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedSample {
                id: e.id.clone(),
                hazy: ImageTensor::load_png(&manifest.path_of(&e.hazy_path))?,
                clear: ImageTensor::load_png(&manifest.path_of(&e.clear_path))?,
                negatives,
                records: e.negatives.iter().map(|n| NegativeRecord::new(&n.path, n.psnr, &n.generator_tag)).collect(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub hazy: ImageTensor,
    pub clear: ImageTensor,
    pub negatives: Vec<ImageTensor>,
    pub neg_psnrs: Vec<f64>,
    /// Window origin `(row, col)`.
    pub offset: (usize, usize),
}

/// One random `crop × crop` window applied to the hazy, clear and every negative image.
pub fn crop_aligned<R: Rng>(sample: &LoadedSample, crop: usize, rng: &mut R) -> Result<TrainSample> {
    let (h, w) = sample.hazy.dims();
    if crop == 0 || crop > h.min(w) {
        return Err(invalid(format!("crop {crop} does not fit a {h}x{w} image")));
    }
    if sample.clear.dims() != (h, w) || sample.negatives.iter().any(|n| n.dims() != (h, w)) {
        return Err(invalid(format!("sample {} mixes image sizes", sample.id)));
    }
    let top = rng.gen_range(0..=h - crop);
    let left = rng.gen_range(0..=w - crop);
    Ok(TrainSample {
        hazy: sample.hazy.crop(top, left, crop, crop)?,
        clear: sample.clear.crop(top, left, crop, crop)?,
        negatives: sample.negatives.iter().map(|n| n.crop(top, left, crop, crop)).collect::<Result<_>>()?,
        neg_psnrs: sample.records.iter().map(|r| r.psnr_vs_positive).collect(),
        offset: (top, left),
    })
}
