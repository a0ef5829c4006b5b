//! Voronoi-layout synthetic segmentation domains.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::ImageSample;
use crate::numerics::Tensor;
use crate::vocab_align::ConceptMap;

/// Appearance of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAppearance {
    pub name: String,
    /// Mean RGB in `[0, 1]`.
    pub color: [f64; 3],
    /// Spatial frequency of the stripe texture, radians per pixel.
    pub texture_freq: f64,
    pub noise: f64,
}

/// Differences between the source and target domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    pub color_offset: [f64; 3],
    pub noise_multiplier: f64,
    /// Source class name to target class name; unlisted classes keep their name.
    pub renaming: BTreeMap<String, String>,
    /// Concepts attached to target class names.
    pub concepts: BTreeMap<String, Vec<String>>,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            color_offset: [0.0; 3],
            noise_multiplier: 1.0,
            renaming: BTreeMap::new(),
            concepts: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub classes: Vec<ClassAppearance>,
    pub height: usize,
    pub width: usize,
    pub source_samples: usize,
    pub source_val_samples: usize,
    pub target_train_samples: usize,
    pub target_val_samples: usize,
    /// Inclusive range of Voronoi seeds per image.
    pub seeds_min: usize,
    pub seeds_max: usize,
    /// Amplitude of the stripe texture.
    pub texture_amplitude: f64,
    pub shift: DomainShift,
}

fn class(name: &str, color: [f64; 3], texture_freq: f64) -> ClassAppearance {
    ClassAppearance {
        name: name.into(),
        color,
        texture_freq,
        noise: 0.05,
    }
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        let classes = vec![
            class("automobile", [0.80, 0.15, 0.15], 0.9),
            class("road", [0.35, 0.35, 0.38], 0.0),
            class("sky", [0.45, 0.65, 0.95], 0.1),
            class("tree", [0.15, 0.55, 0.20], 1.3),
            class("building", [0.70, 0.60, 0.45], 0.5),
            class("person", [0.90, 0.70, 0.30], 1.8),
            class("water", [0.10, 0.25, 0.60], 0.3),
            class("grass", [0.50, 0.80, 0.30], 2.4),
        ];
        let renaming = [("automobile", "car"), ("person", "pedestrian"), ("water", "lake")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let concepts = [("car", "automobile"), ("pedestrian", "person"), ("lake", "water")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), vec![b.to_string()]))
            .collect();
        Self {
            classes,
            height: 64,
            width: 64,
            source_samples: 120,
            source_val_samples: 50,
            target_train_samples: 200,
            target_val_samples: 50,
            seeds_min: 3,
            seeds_max: 6,
            texture_amplitude: 0.08,
            shift: DomainShift {
                color_offset: [0.08, -0.06, 0.05],
                noise_multiplier: 1.6,
                renaming,
                concepts,
            },
        }
    }
}

impl SyntheticDatasetSpec {
    /// Same layout and appearance, no shift between domains.
    pub fn identity_shift(&self) -> Self {
        Self {
            shift: DomainShift::default(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.classes.is_empty() {
            return bad("dataset spec has no classes".into());
        }
        if self.classes.len() > 255 {
            return bad("at most 255 classes are supported".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.seeds_min == 0 || self.seeds_max < self.seeds_min {
            return bad(format!("bad seed range {}..={}", self.seeds_min, self.seeds_max));
        }
        if !(self.shift.noise_multiplier >= 0.0) {
            return bad("noise multiplier must be non-negative".into());
        }
        let names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        for k in self.shift.renaming.keys() {
            if !names.contains(&k.as_str()) {
                return bad(format!("renaming key `{k}` is not a source class"));
            }
        }
        let target = self.target_names();
        let mut seen = std::collections::HashSet::new();
        if !target.iter().all(|n| seen.insert(n.as_str())) {
            return bad("renaming is not a bijection".into());
        }
        for c in &self.classes {
            if c.color.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("class `{}` color outside [0, 1]", c.name));
            }
        }
        Ok(())
    }

    pub fn source_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn target_names(&self) -> Vec<String> {
        self.classes
            .iter()
            .map(|c| {
                self.shift
                    .renaming
                    .get(&c.name)
                    .cloned()
                    .unwrap_or_else(|| c.name.clone())
            })
            .collect()
    }

    /// Concepts in target class order.
    pub fn concept_map(&self) -> Result<ConceptMap> {
        let entries = self
            .target_names()
            .into_iter()
            .filter_map(|n| self.shift.concepts.get(&n).map(|c| (n, c.clone())))
            .collect();
        ConceptMap::new(entries)
    }
}

/// An image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub image: ImageSample,
    /// Row-major `[H, W]` class indices.
    pub labels: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub samples: Vec<SegmentationSample>,
}

impl LabeledSplit {
    pub fn images(&self) -> Vec<ImageSample> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }
}

/// Images only; the adaptation path never sees labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSplit {
    pub images: Vec<ImageSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomains {
    pub spec: SyntheticDatasetSpec,
    pub seed: u64,
    pub source: LabeledSplit,
    pub source_val: LabeledSplit,
    pub target_train: UnlabeledSplit,
    pub target_val: LabeledSplit,
}

struct Domain<'a> {
    spec: &'a SyntheticDatasetSpec,
    offset: [f64; 3],
    noise_mult: f64,
}

impl Domain<'_> {
    fn sample<R: Rng>(&self, rng: &mut R) -> SegmentationSample {
        let spec = self.spec;
        let (h, w) = (spec.height, spec.width);
        let n = rng.gen_range(spec.seeds_min..=spec.seeds_max);
        let seeds: Vec<(f64, f64, usize)> = (0..n)
            .map(|_| {
                (
                    rng.gen_range(0.0..h as f64),
                    rng.gen_range(0.0..w as f64),
                    rng.gen_range(0..spec.classes.len()),
                )
            })
            .collect();
        // Per-class stripe orientation and phase for this image.
        let waves: Vec<(f64, f64)> = (0..spec.classes.len())
            .map(|_| {
                (
                    rng.gen_range(0.0..std::f64::consts::PI),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let mut labels = Vec::with_capacity(h * w);
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                let mut best = (f64::INFINITY, 0);
                for &(sy, sx, c) in &seeds {
                    let d = (sy - y).powi(2) + (sx - x).powi(2);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                let c = best.1;
                labels.push(c as u32);
                let app = &spec.classes[c];
                let (theta, phase) = waves[c];
                let stripe = if app.texture_freq > 0.0 {
                    spec.texture_amplitude * (app.texture_freq * (x * theta.cos() + y * theta.sin()) + phase).sin()
                } else {
                    0.0
                };
                for ch in 0..3 {
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = app.color[ch] + self.offset[ch] + stripe + app.noise * self.noise_mult * noise;
                    data.push(quantize(v));
                }
            }
        }
        let pixels = Tensor::new(vec![h, w, 3], data).expect("image shape");
        SegmentationSample {
            image: ImageSample::new(pixels).expect("quantized pixels lie in [0, 1]"),
            labels,
        }
    }
}

/// Clamps to `[0, 1]` and rounds to 8 bits, the precision of the split files.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Source, source-val, target-train and target-val splits. Every split draws
/// from its own stream derived from `seed`.
pub fn generate_synthetic_domains(spec: &SyntheticDatasetSpec, seed: u64) -> Result<SyntheticDomains> {
    spec.validate()?;
    let source = Domain {
        spec,
        offset: [0.0; 3],
        noise_mult: 1.0,
    };
    let target = Domain {
        spec,
        offset: spec.shift.color_offset,
        noise_mult: spec.shift.noise_multiplier,
    };
    let split = |d: &Domain, stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        LabeledSplit {
            samples: (0..n).map(|_| d.sample(&mut rng)).collect(),
        }
    };
    Ok(SyntheticDomains {
        spec: spec.clone(),
        seed,
        source: split(&source, 1, spec.source_samples),
        source_val: split(&source, 2, spec.source_val_samples),
        target_train: UnlabeledSplit {
            images: split(&target, 3, spec.target_train_samples).images(),
        },
        target_val: split(&target, 4, spec.target_val_samples),
    })
}

const SPLIT_MAGIC: &[u8; 8] = b"OVSFDADS";
const SPLIT_VERSION: u32 = 1;

/// Metadata written next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: SyntheticDatasetSpec,
    pub seed: u64,
    pub source_classes: Vec<String>,
    pub target_classes: Vec<String>,
}

pub const INFO_FILE: &str = "dataset.json";
pub const CONCEPTS_FILE: &str = "concepts.json";

fn write_split(path: &Path, h: usize, w: usize, images: &[&ImageSample], labels: Option<&[&[u32]]>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(SPLIT_MAGIC)?;
    out.write_all(&SPLIT_VERSION.to_le_bytes())?;
    for v in [images.len() as u32, h as u32, w as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&[labels.is_some() as u8])?;
    for (k, img) in images.iter().enumerate() {
        let bytes: Vec<u8> = img.pixels().data().iter().map(|v| (v * 255.0).round() as u8).collect();
        out.write_all(&bytes)?;
        if let Some(l) = labels {
            let bytes: Vec<u8> = l[k].iter().map(|&c| c as u8).collect();
            out.write_all(&bytes)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_split(path: &Path) -> Result<(Vec<ImageSample>, Option<Vec<Vec<u32>>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SPLIT_MAGIC {
        return Err(Error::Format(format!("{}: not a split file", path.display())));
    }
    let mut word = [0u8; 4];
    let mut next = |r: &mut BufReader<File>| -> Result<usize> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word) as usize)
    };
    let version = next(&mut r)?;
    if version != SPLIT_VERSION as usize {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let (count, h, w) = (next(&mut r)?, next(&mut r)?, next(&mut r)?);
    let mut flag = [0u8];
    r.read_exact(&mut flag)?;
    let mut images = Vec::with_capacity(count);
    let mut labels = flag[0].eq(&1).then(Vec::new);
    for _ in 0..count {
        let mut px = vec![0u8; h * w * 3];
        r.read_exact(&mut px)?;
        let data = px.into_iter().map(|b| b as f64 / 255.0).collect();
        images.push(ImageSample::new(Tensor::new(vec![h, w, 3], data)?)?);
        if let Some(ls) = labels.as_mut() {
            let mut l = vec![0u8; h * w];
            r.read_exact(&mut l)?;
            ls.push(l.into_iter().map(u32::from).collect());
        }
    }
    Ok((images, labels))
}

fn labeled(images: Vec<ImageSample>, labels: Option<Vec<Vec<u32>>>, path: &Path) -> Result<LabeledSplit> {
    let labels = labels.ok_or_else(|| Error::Format(format!("{}: split has no labels", path.display())))?;
    Ok(LabeledSplit {
        samples: images
            .into_iter()
            .zip(labels)
            .map(|(image, labels)| SegmentationSample { image, labels })
            .collect(),
    })
}

impl SyntheticDomains {
    pub fn info(&self) -> DatasetInfo {
        DatasetInfo {
            spec: self.spec.clone(),
            seed: self.seed,
            source_classes: self.spec.source_names(),
            target_classes: self.spec.target_names(),
        }
    }

    /// Writes `dataset.json`, `concepts.json` and one binary file per split.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(INFO_FILE), serde_json::to_string_pretty(&self.info())?)?;
        std::fs::write(dir.join(CONCEPTS_FILE), self.spec.concept_map()?.to_json()?)?;
        let (h, w) = (self.spec.height, self.spec.width);
        for (name, split) in [
            ("source", &self.source),
            ("source_val", &self.source_val),
            ("target_val", &self.target_val),
        ] {
            let imgs: Vec<&ImageSample> = split.samples.iter().map(|s| &s.image).collect();
            let lbls: Vec<&[u32]> = split.samples.iter().map(|s| s.labels.as_slice()).collect();
            write_split(&dir.join(format!("{name}.bin")), h, w, &imgs, Some(&lbls))?;
        }
        let imgs: Vec<&ImageSample> = self.target_train.images.iter().collect();
        write_split(&dir.join("target_train.bin"), h, w, &imgs, None)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let info: DatasetInfo = serde_json::from_str(&std::fs::read_to_string(dir.join(INFO_FILE))?)?;
        let load_labeled = |name: &str| {
            let path = dir.join(format!("{name}.bin"));
            let (i, l) = read_split(&path)?;
            labeled(i, l, &path)
        };
        let (images, labels) = read_split(&dir.join("target_train.bin"))?;
        if labels.is_some() {
            return Err(Error::Format("target_train.bin must not carry labels".into()));
        }
        let out = Self {
            spec: info.spec,
            seed: info.seed,
            source: load_labeled("source")?,
            source_val: load_labeled("source_val")?,
            target_train: UnlabeledSplit { images },
            target_val: load_labeled("target_val")?,
        };
        for s in [&out.source, &out.source_val, &out.target_val] {
            if s.samples
                .iter()
                .any(|x| x.labels.iter().any(|&l| l as usize >= out.spec.classes.len()))
            {
                return shape_err("label outside the class range");
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            height: 16,
            width: 16,
            source_samples: 3,
            source_val_samples: 2,
            target_train_samples: 2,
            target_val_samples: 2,
            ..SyntheticDatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic_domains(&tiny(), 4).unwrap();
        let b = generate_synthetic_domains(&tiny(), 4).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_domains(&tiny(), 5).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn labels_cover_every_pixel() {
        let d = generate_synthetic_domains(&tiny(), 1).unwrap();
        for s in d.source.samples.iter().chain(&d.target_val.samples) {
            assert_eq!(s.labels.len(), 256);
            assert!(s.labels.iter().all(|&l| (l as usize) < 8));
        }
    }

    #[test]
    fn names_and_concepts() {
        let spec = SyntheticDatasetSpec::default();
        let t = spec.target_names();
        assert_eq!(t[0], "car");
        assert_eq!(t[1], "road");
        let cm = spec.concept_map().unwrap();
        assert_eq!(cm.entries()[0], ("car".to_string(), vec!["automobile".to_string()]));
        assert!(SyntheticDatasetSpec {
            classes: vec![],
            ..tiny()
        }
        .validate()
        .is_err());
        let mut clash = tiny();
        clash.shift.renaming.insert("road".into(), "car".into());
        assert!(clash.validate().is_err());
    }

    #[test]
    fn disk_round_trip() {
        let d = generate_synthetic_domains(&tiny(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = SyntheticDomains::load(dir.path()).unwrap();
        assert_eq!(back, d);
        let cm = ConceptMap::load(dir.path().join(CONCEPTS_FILE)).unwrap();
        assert_eq!(cm, d.spec.concept_map().unwrap());
    }
}
