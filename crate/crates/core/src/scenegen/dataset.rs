use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_indexed, GenConfig, LabeledSample, ObjectSpec, Shape};
use crate::arrayfile::{Array, ArrayData, ByteReader};
use crate::error::{Error, Result};

pub const SAMPLE_MAGIC: &[u8; 4] = b"SCMP";
pub const DATASET_VERSION: u16 = 1;
const MANIFEST: &str = "manifest.json";
const PROPERTY_COLUMNS: usize = 7;

/// Per-sample generator: stream `index` of the ChaCha8 generator seeded by `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u16,
    pub split: String,
    pub seed: u64,
    pub count: usize,
    pub config_hash: String,
    pub config: GenConfig,
    pub files: Vec<String>,
}

pub fn config_hash(config: &GenConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_sample(sample: &LabeledSample) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + sample.image.len() * 4 + sample.gt_masks.len() * 2);
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let (h, w) = (sample.height, sample.width);
    Array::f32(vec![h, w, 3], sample.image.clone())?.write_to(&mut buf)?;
    Array::new(vec![h, w], ArrayData::U16(sample.gt_masks.clone()))?.write_to(&mut buf)?;
    let mut table = Vec::with_capacity(sample.properties.len() * PROPERTY_COLUMNS);
    for (obj, &vis) in sample.properties.iter().zip(&sample.visible) {
        table.extend_from_slice(&[
            obj.shape.index() as f32,
            obj.color as f32,
            obj.scale,
            obj.position.0,
            obj.position.1,
            obj.depth as f32,
            vis as f32,
        ]);
    }
    Array::f32(vec![sample.properties.len(), PROPERTY_COLUMNS], table)?.write_to(&mut buf)?;
    Ok(buf)
}

pub fn read_sample(bytes: &[u8]) -> Result<LabeledSample> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4)? != SAMPLE_MAGIC {
        return Err(Error::Corrupt("missing SCMP magic".into()));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Version { found: version, expected: DATASET_VERSION });
    }
    let image = Array::read_from(&mut r)?;
    let masks = Array::read_from(&mut r)?;
    let table = Array::read_from(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Corrupt("trailing bytes after sample".into()));
    }
    let (height, width) = match image.dims.as_slice() {
        &[h, w, 3] => (h, w),
        d => return Err(Error::Corrupt(format!("image dims {d:?}"))),
    };
    if masks.dims != [height, width] {
        return Err(Error::Corrupt(format!("mask dims {:?}", masks.dims)));
    }
    let gt_masks = match masks.data {
        ArrayData::U16(v) => v,
        _ => return Err(Error::Corrupt("mask dtype must be u16".into())),
    };
    if table.dims.len() != 2 || table.dims[1] != PROPERTY_COLUMNS {
        return Err(Error::Corrupt(format!("property table dims {:?}", table.dims)));
    }
    let rows = table.into_f32()?;
    let mut properties = Vec::new();
    let mut visible = Vec::new();
    for row in rows.chunks_exact(PROPERTY_COLUMNS) {
        let shape = Shape::from_index(row[0] as usize)
            .ok_or_else(|| Error::Corrupt(format!("shape id {}", row[0])))?;
        properties.push(ObjectSpec {
            shape,
            color: row[1] as usize,
            scale: row[2],
            position: (row[3], row[4]),
            depth: row[5] as usize,
        });
        visible.push(row[6] as u32);
    }
    Ok(LabeledSample { height, width, image: image.into_f32()?, gt_masks, properties, visible })
}

/// Generate `n` samples into `dir` with a manifest.
///
/// An existing dataset whose config hash differs is left untouched unless
/// `overwrite` is set.
pub fn make_dataset(
    dir: &Path,
    n: usize,
    config: &GenConfig,
    seed: u64,
    split: &str,
    overwrite: bool,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Usage("dataset size must be at least 1".into()));
    }
    config.validate()?;
    let hash = config_hash(config)?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() && !overwrite {
        let existing: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if existing.config_hash != hash {
            return Err(Error::Dataset(format!(
                "{} holds a dataset with config hash {}, refusing to overwrite with {}",
                dir.display(),
                existing.config_hash,
                hash
            )));
        }
    }
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let sample = generate_indexed(config, seed, i as u64)?;
        let name = format!("sample_{i:06}.scmp");
        fs::write(dir.join(&name), write_sample(&sample)?)?;
        files.push(name);
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        split: split.to_string(),
        seed,
        count: n,
        config_hash: hash,
        config: config.clone(),
        files,
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A dataset loaded fully into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            return Err(Error::Dataset(format!("no dataset manifest at {}", manifest_path.display())));
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Version { found: manifest.version, expected: DATASET_VERSION });
        }
        let samples = manifest
            .files
            .iter()
            .map(|f| read_sample(&fs::read(dir.join(f))?))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Dataset(format!("{} contains no samples", dir.display())));
        }
        Ok(Self { root: dir.to_path_buf(), manifest, samples })
    }

    /// Build an in-memory dataset without touching the filesystem.
    pub fn in_memory(config: &GenConfig, n: usize, seed: u64, split: &str) -> Result<Self> {
        let samples = (0..n as u64)
            .map(|i| generate_indexed(config, seed, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: PathBuf::new(),
            manifest: Manifest {
                version: DATASET_VERSION,
                split: split.to_string(),
                seed,
                count: n,
                config_hash: config_hash(config)?,
                config: config.clone(),
                files: Vec::new(),
            },
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.manifest.config.height, self.manifest.config.width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_written_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::default();
        let m = make_dataset(dir.path(), 4, &cfg, 7, "train", false).unwrap();
        assert_eq!(m.files.len(), 4);
        assert_eq!(m.count, 4);
        let first: Vec<Vec<u8>> = m.files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        make_dataset(dir.path(), 4, &cfg, 7, "train", false).unwrap();
        let second: Vec<Vec<u8>> = m.files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        assert_eq!(first, second);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.samples[2], generate_indexed(&cfg, 7, 2).unwrap());
    }

    #[test]
    fn mismatched_config_requires_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path(), 2, &GenConfig::default(), 1, "train", false).unwrap();
        let other = GenConfig { max_objects: 3, ..GenConfig::default() };
        let err = make_dataset(dir.path(), 2, &other, 1, "train", false).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
        make_dataset(dir.path(), 2, &other, 1, "train", true).unwrap();
    }

    #[test]
    fn sample_header_starts_with_magic_and_version() {
        let s = generate_indexed(&GenConfig::default(), 0, 0).unwrap();
        let bytes = write_sample(&s).unwrap();
        assert_eq!(&bytes[..4], b"SCMP");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), DATASET_VERSION);
        // image header: rank 3, dims 32 32 3, dtype f32
        assert_eq!(bytes[6], 3);
        assert_eq!(&bytes[7..11], &32u32.to_le_bytes());
        assert_eq!(bytes[19], 5);
        assert_eq!(read_sample(&bytes).unwrap(), s);
        assert!(matches!(read_sample(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
    }
}
