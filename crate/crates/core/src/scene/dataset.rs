//! On-disk dataset container.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! samples/sample_00000.bin
//! samples/sample_00001.bin
//! ...
//! ```
//!
//! Each blob is the concatenation of the sample's arrays in the order
//! `frames, flow, seg, states, bboxes`, little-endian, C order. The manifest
//! records every array's dtype, shape, byte offset and byte length, so the
//! blobs can be read without this crate. See `docs/dataset_format.md`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::generate::{GeneratorParams, SceneSample};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub num_objects: usize,
    /// Blob path relative to the dataset directory.
    pub blob: String,
    pub blob_bytes: u64,
    pub arrays: Vec<ArrayRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl Splits {
    /// 90/5/5 train/val/test by sample index.
    pub fn by_index(ids: &[u64]) -> Self {
        let n = ids.len();
        let n_val = (n as f64 * 0.05).round() as usize;
        let n_test = (n as f64 * 0.05).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        Self {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: GeneratorParams,
    pub splits: Splits,
    pub samples: Vec<SampleRecord>,
}

fn blob_name(id: u64) -> String {
    format!("samples/sample_{id:05}.bin")
}

fn encode_sample(sample: &SceneSample) -> (Vec<u8>, Vec<ArrayRecord>) {
    let mut bytes = Vec::new();
    let mut records = Vec::new();
    let mut push = |name: &str, dtype: Dtype, shape: Vec<usize>, data: Vec<u8>| {
        records.push(ArrayRecord {
            name: name.to_string(),
            dtype,
            shape,
            offset: bytes.len() as u64,
            nbytes: data.len() as u64,
        });
        bytes.extend_from_slice(&data);
    };
    push(
        "frames",
        Dtype::U8,
        sample.frames.shape().to_vec(),
        sample.frames.iter().copied().collect(),
    );
    push(
        "flow",
        Dtype::F32,
        sample.flow.shape().to_vec(),
        sample.flow.iter().flat_map(|v| v.to_le_bytes()).collect(),
    );
    push(
        "seg",
        Dtype::U8,
        sample.seg.shape().to_vec(),
        sample.seg.iter().copied().collect(),
    );
    push(
        "states",
        Dtype::F64,
        sample.states.shape().to_vec(),
        sample.states.iter().flat_map(|v| v.to_le_bytes()).collect(),
    );
    push(
        "bboxes",
        Dtype::F64,
        sample.bboxes.shape().to_vec(),
        sample.bboxes.iter().flat_map(|v| v.to_le_bytes()).collect(),
    );
    (bytes, records)
}

/// Appends samples to a dataset directory; the manifest is written on
/// [`DatasetWriter::finish`].
pub struct DatasetWriter {
    root: PathBuf,
    generator: GeneratorParams,
    records: Vec<SampleRecord>,
}

impl DatasetWriter {
    pub fn create(root: impl AsRef<Path>, generator: &GeneratorParams) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("samples"))?;
        Ok(Self {
            root,
            generator: generator.clone(),
            records: Vec::new(),
        })
    }

    pub fn append(&mut self, sample: &SceneSample) -> Result<()> {
        let (bytes, arrays) = encode_sample(sample);
        let blob = blob_name(sample.index);
        write_atomic(&self.root.join(&blob), &bytes)?;
        self.records.push(SampleRecord {
            id: sample.index,
            num_objects: sample.num_objects,
            blob,
            blob_bytes: bytes.len() as u64,
            arrays,
        });
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetManifest> {
        self.records.sort_by_key(|r| r.id);
        let ids: Vec<u64> = self.records.iter().map(|r| r.id).collect();
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            generator: self.generator,
            splits: Splits::by_index(&ids),
            samples: self.records,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&self.root.join(MANIFEST_FILE), &json)?;
        Ok(manifest)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_dataset(
    samples: &[SceneSample],
    root: impl AsRef<Path>,
    generator: &GeneratorParams,
) -> Result<DatasetManifest> {
    let mut w = DatasetWriter::create(root, generator)?;
    for s in samples {
        w.append(s)?;
    }
    w.finish()
}

/// Read-only view of a dataset directory; samples are loaded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
}

const ARRAY_ORDER: [(&str, Dtype); 5] = [
    ("frames", Dtype::U8),
    ("flow", Dtype::F32),
    ("seg", Dtype::U8),
    ("states", Dtype::F64),
    ("bboxes", Dtype::F64),
];

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest: DatasetManifest =
            serde_json::from_slice(&fs::read(root.join(MANIFEST_FILE))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: manifest.format_version,
            });
        }
        for rec in &manifest.samples {
            check_record(rec, &manifest.generator)?;
        }
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.manifest.samples.iter().map(|r| r.id).collect()
    }

    pub fn record(&self, id: u64) -> Result<&SampleRecord> {
        self.manifest
            .samples
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Config(format!("sample {id} not in dataset")))
    }

    pub fn load(&self, id: u64) -> Result<SceneSample> {
        let rec = self.record(id)?;
        let path = self.root.join(&rec.blob);
        let bytes = fs::read(&path)?;
        if (bytes.len() as u64) < rec.blob_bytes {
            return Err(Error::TruncatedBlob {
                path,
                expected: rec.blob_bytes,
                found: bytes.len() as u64,
            });
        }
        if bytes.len() as u64 != rec.blob_bytes {
            return Err(Error::ShapeMismatch {
                field: "blob".into(),
                detail: format!(
                    "{} holds {} bytes, manifest records {}",
                    path.display(),
                    bytes.len(),
                    rec.blob_bytes
                ),
            });
        }
        let slice = |i: usize| {
            let a = &rec.arrays[i];
            &bytes[a.offset as usize..(a.offset + a.nbytes) as usize]
        };
        let shape = |i: usize| rec.arrays[i].shape.clone();
        let to_f32 = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };
        let to_f64 = |b: &[u8]| -> Vec<f64> {
            b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        };
        let shape_err = |field: &str, e: ndarray::ShapeError| Error::ShapeMismatch {
            field: field.into(),
            detail: e.to_string(),
        };
        let s0 = shape(0);
        let s1 = shape(1);
        let s2 = shape(2);
        let s3 = shape(3);
        let s4 = shape(4);
        Ok(SceneSample {
            index: rec.id,
            frames: Array4::from_shape_vec((s0[0], s0[1], s0[2], s0[3]), slice(0).to_vec())
                .map_err(|e| shape_err("frames", e))?,
            flow: Array4::from_shape_vec((s1[0], s1[1], s1[2], s1[3]), to_f32(slice(1)))
                .map_err(|e| shape_err("flow", e))?,
            seg: Array3::from_shape_vec((s2[0], s2[1], s2[2]), slice(2).to_vec())
                .map_err(|e| shape_err("seg", e))?,
            states: Array3::from_shape_vec((s3[0], s3[1], s3[2]), to_f64(slice(3)))
                .map_err(|e| shape_err("states", e))?,
            bboxes: Array2::from_shape_vec((s4[0], s4[1]), to_f64(slice(4)))
                .map_err(|e| shape_err("bboxes", e))?,
            num_objects: rec.num_objects,
        })
    }
}

fn check_record(rec: &SampleRecord, gen: &GeneratorParams) -> Result<()> {
    let mismatch = |field: &str, detail: String| Error::ShapeMismatch {
        field: field.to_string(),
        detail: format!("sample {}: {detail}", rec.id),
    };
    if rec.arrays.len() != ARRAY_ORDER.len() {
        return Err(mismatch("arrays", format!("expected 5 arrays, found {}", rec.arrays.len())));
    }
    let (t, h, w, k) = (gen.frames, gen.height, gen.width, rec.num_objects);
    if k < gen.k_min || k > gen.k_max {
        return Err(mismatch(
            "num_objects",
            format!("{k} outside [{}, {}]", gen.k_min, gen.k_max),
        ));
    }
    let expected: [Vec<usize>; 5] = [
        vec![t, h, w, 3],
        vec![t, h, w, 2],
        vec![t, h, w],
        vec![t, k, 6],
        vec![k, 4],
    ];
    let mut end = 0u64;
    for ((a, (name, dtype)), shape) in rec.arrays.iter().zip(ARRAY_ORDER).zip(expected) {
        if a.name != name || a.dtype != dtype {
            return Err(mismatch(name, format!("found {} ({:?})", a.name, a.dtype)));
        }
        if a.shape != shape {
            return Err(mismatch(name, format!("shape {:?}, expected {:?}", a.shape, shape)));
        }
        let n: usize = shape.iter().product();
        if a.nbytes != (n * dtype.size()) as u64 {
            return Err(mismatch(name, format!("{} bytes for {n} elements", a.nbytes)));
        }
        if a.offset < end {
            return Err(mismatch(name, "overlapping offsets".into()));
        }
        end = a.offset + a.nbytes;
    }
    if end > rec.blob_bytes {
        return Err(mismatch("blob", format!("arrays end at {end} past blob size {}", rec.blob_bytes)));
    }
    Ok(())
}
