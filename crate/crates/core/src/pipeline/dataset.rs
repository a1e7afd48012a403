//! On-disk sample sets for predictor training.
//!
//! A dataset file is one JSON header line followed by length-delimited
//! binary records. Every numeric payload is little-endian fp32, so a
//! write/read round trip reproduces the stored values bit for bit and the
//! file hash identifies the contents exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensorkit::Tensor;

use super::PipelineError;

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetVariant {
    /// Final hidden states: full token matrix in, full token matrix out.
    Feature,
    /// Unrotated per-layer key/value caches plus the cheap embedding pair.
    Kv,
}

impl std::fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetVariant::Feature => "feature",
            DatasetVariant::Kv => "kv",
        })
    }
}

/// Shape manifest for one dataset. Fields that do not apply to the variant
/// are zero; `record_len` is derived from the applicable ones only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDims {
    pub tokens: usize,
    pub n_img: usize,
    pub d_model: usize,
    pub layers: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_e: usize,
    pub q_dim: usize,
    pub action_dim: usize,
}

impl DatasetDims {
    pub fn record_len(&self, variant: DatasetVariant) -> usize {
        let cond = self.q_dim + self.action_dim;
        match variant {
            DatasetVariant::Feature => 3 * self.tokens * self.d_model + cond,
            DatasetVariant::Kv => {
                2 * self.tokens * self.layers * (self.d_k + self.d_v)
                    + 2 * self.n_img * self.d_e
                    + cond
            }
        }
    }
}

/// First line of the file. Counts are restated from the records so a reader
/// can prove the body is complete before using it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub variant: DatasetVariant,
    pub dims: DatasetDims,
    /// Content hash of the frozen encoder the samples came from.
    pub encoder: String,
    /// Action-head kind of the collecting policy.
    pub head: String,
    /// Success rate the policy showed at its release gate.
    pub gate_sr: f64,
    /// Schedule string the collector ran under.
    pub schedule: String,
    /// Encoder period during collection; 1 means every step.
    pub collection_f: usize,
    pub seed: u64,
    /// Episodes attempted; short episodes may contribute no records.
    pub episodes: usize,
    pub records: usize,
    pub by_offset: BTreeMap<usize, usize>,
}

pub const DATASET_FORMAT: &str = "deltabridge.dataset";
pub const DATASET_VERSION: u32 = 1;

/// One sample. `step` is the index of the step being predicted; `offset` is
/// its distance from the last encoder call.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub episode: u32,
    pub step: u32,
    pub offset: u32,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

// ---------------------------------------------------------------------------
// views
// ---------------------------------------------------------------------------

/// Decoded feature-variant sample.
pub struct FeatureView<S: Scalar> {
    /// Representation entering the step, full token matrix.
    pub input: Tensor<S>,
    /// Fresh encoder output at the predicted step.
    pub target: Tensor<S>,
    /// Stable context in force at the step.
    pub s: Tensor<S>,
    pub q: Vec<f64>,
    pub a_prev: Vec<f64>,
    pub episode: u32,
    pub offset: usize,
}

/// Decoded cache-variant sample, in pre-rotation coordinates.
pub struct KvView<S: Scalar> {
    /// Flattened cache entering the step, `tokens x layers*(dk+dv)`.
    pub input_flat: Tensor<S>,
    /// Flattened fresh cache at the predicted step.
    pub target_flat: Tensor<S>,
    pub e: Tensor<S>,
    pub delta_e: Tensor<S>,
    pub q: Vec<f64>,
    pub a_prev: Vec<f64>,
    pub episode: u32,
    pub offset: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct episode ids present in the records, ascending.
    pub fn episode_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.episode).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn slice_tensor<S: Scalar>(
        values: &[f32],
        at: &mut usize,
        rows: usize,
        cols: usize,
    ) -> Result<Tensor<S>, PipelineError> {
        let n = rows * cols;
        let t = Tensor::from_f32_vec(rows, cols, &values[*at..*at + n])
            .map_err(PipelineError::Tensor)?;
        *at += n;
        Ok(t)
    }

    fn slice_f64(values: &[f32], at: &mut usize, n: usize) -> Vec<f64> {
        let out = values[*at..*at + n].iter().map(|&v| v as f64).collect();
        *at += n;
        out
    }

    pub fn feature_view<S: Scalar>(&self, i: usize) -> Result<FeatureView<S>, PipelineError> {
        if self.header.variant != DatasetVariant::Feature {
            return Err(PipelineError::Variant(format!(
                "feature view over a {} dataset",
                self.header.variant
            )));
        }
        let d = &self.header.dims;
        let r = &self.records[i];
        let mut at = 0usize;
        let input = Self::slice_tensor(&r.values, &mut at, d.tokens, d.d_model)?;
        let target = Self::slice_tensor(&r.values, &mut at, d.tokens, d.d_model)?;
        let s = Self::slice_tensor(&r.values, &mut at, d.tokens, d.d_model)?;
        let q = Self::slice_f64(&r.values, &mut at, d.q_dim);
        let a_prev = Self::slice_f64(&r.values, &mut at, d.action_dim);
        Ok(FeatureView {
            input,
            target,
            s,
            q,
            a_prev,
            episode: r.episode,
            offset: r.offset as usize,
        })
    }

    pub fn kv_view<S: Scalar>(&self, i: usize) -> Result<KvView<S>, PipelineError> {
        if self.header.variant != DatasetVariant::Kv {
            return Err(PipelineError::Variant(format!(
                "cache view over a {} dataset",
                self.header.variant
            )));
        }
        let d = &self.header.dims;
        let r = &self.records[i];
        let flat_cols = d.layers * (d.d_k + d.d_v);
        let mut at = 0usize;
        let input_flat = Self::slice_tensor(&r.values, &mut at, d.tokens, flat_cols)?;
        let target_flat = Self::slice_tensor(&r.values, &mut at, d.tokens, flat_cols)?;
        let e = Self::slice_tensor(&r.values, &mut at, d.n_img, d.d_e)?;
        let delta_e = Self::slice_tensor(&r.values, &mut at, d.n_img, d.d_e)?;
        let q = Self::slice_f64(&r.values, &mut at, d.q_dim);
        let a_prev = Self::slice_f64(&r.values, &mut at, d.action_dim);
        Ok(KvView {
            input_flat,
            target_flat,
            e,
            delta_e,
            q,
            a_prev,
            episode: r.episode,
            offset: r.offset as usize,
        })
    }

    /// Restate the header counts from the records and compare.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let h = &self.header;
        if h.format != DATASET_FORMAT || h.version != DATASET_VERSION {
            return Err(PipelineError::Header(format!(
                "format {}/{} is not {}/{}",
                h.format, h.version, DATASET_FORMAT, DATASET_VERSION
            )));
        }
        let want_len = h.dims.record_len(h.variant);
        let mut by_offset: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.values.len() != want_len {
                return Err(PipelineError::Corrupt {
                    record: i,
                    detail: format!("{} values, manifest wants {}", r.values.len(), want_len),
                });
            }
            *by_offset.entry(r.offset as usize).or_insert(0) += 1;
        }
        if self.records.len() != h.records || by_offset != h.by_offset {
            return Err(PipelineError::Header(format!(
                "header claims {} records {:?}, body holds {} {:?}",
                h.records,
                h.by_offset,
                self.records.len(),
                by_offset
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), PipelineError> {
    ds.validate()?;
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, &ds.header).map_err(|e| PipelineError::Header(e.to_string()))?;
    buf.push(b'\n');
    for r in &ds.records {
        let len = 12 + 4 * r.values.len();
        buf.extend_from_slice(&(len as u32).to_le_bytes());
        buf.extend_from_slice(&r.episode.to_le_bytes());
        buf.extend_from_slice(&r.step.to_le_bytes());
        buf.extend_from_slice(&r.offset.to_le_bytes());
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn read_dataset(path: &Path) -> Result<Dataset, PipelineError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| PipelineError::Header("missing header line".into()))?;
    let header: DatasetHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| PipelineError::Header(e.to_string()))?;

    let mut records = Vec::new();
    let mut at = nl + 1;
    while at < bytes.len() {
        let record = records.len();
        if bytes.len() - at < 4 {
            return Err(PipelineError::Corrupt {
                record,
                detail: "truncated length prefix".into(),
            });
        }
        let len = read_u32(&bytes, at) as usize;
        at += 4;
        if len < 12 || (len - 12) % 4 != 0 {
            return Err(PipelineError::Corrupt {
                record,
                detail: format!("length prefix {len}"),
            });
        }
        if bytes.len() - at < len {
            return Err(PipelineError::Corrupt {
                record,
                detail: format!("length prefix {len} overruns the file"),
            });
        }
        let episode = read_u32(&bytes, at);
        let step = read_u32(&bytes, at + 4);
        let offset = read_u32(&bytes, at + 8);
        let mut values = Vec::with_capacity((len - 12) / 4);
        let mut p = at + 12;
        while p < at + len {
            values.push(f32::from_le_bytes([
                bytes[p],
                bytes[p + 1],
                bytes[p + 2],
                bytes[p + 3],
            ]));
            p += 4;
        }
        at += len;
        records.push(Record {
            episode,
            step,
            offset,
            values,
        });
    }

    let ds = Dataset { header, records };
    ds.validate()?;
    Ok(ds)
}

/// Append-style concatenation used by refinement: same variant, same dims,
/// same encoder. Headers are merged; the result is in-memory only.
pub fn concat_datasets(parts: &[&Dataset]) -> Result<Dataset, PipelineError> {
    let first = parts
        .first()
        .ok_or_else(|| PipelineError::Variant("concat of zero datasets".into()))?;
    let mut out = Dataset {
        header: first.header.clone(),
        records: first.records.clone(),
    };
    for ds in &parts[1..] {
        if ds.header.variant != out.header.variant || ds.header.dims != out.header.dims {
            return Err(PipelineError::Variant(format!(
                "concat of {} onto {}",
                ds.header.variant, out.header.variant
            )));
        }
        if ds.header.encoder != out.header.encoder {
            return Err(PipelineError::Header(
                "concat across different encoders".into(),
            ));
        }
        // Episode ids are namespaced per source so validation splits never
        // mix records from different collections into one episode.
        let base = out
            .records
            .iter()
            .map(|r| r.episode)
            .max()
            .map(|m| m + 1)
            .unwrap_or(0);
        out.records.extend(ds.records.iter().map(|r| Record {
            episode: base + r.episode,
            ..r.clone()
        }));
        out.header.episodes += ds.header.episodes;
        out.header.records += ds.header.records;
        for (&k, &v) in &ds.header.by_offset {
            *out.header.by_offset.entry(k).or_insert(0) += v;
        }
        out.header.schedule = format!("{}+{}", out.header.schedule, ds.header.schedule);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> DatasetDims {
        DatasetDims {
            tokens: 3,
            n_img: 2,
            d_model: 4,
            layers: 0,
            d_k: 0,
            d_v: 0,
            d_e: 0,
            q_dim: 2,
            action_dim: 2,
        }
    }

    fn tiny_dataset() -> Dataset {
        let dims = tiny_dims();
        let len = dims.record_len(DatasetVariant::Feature);
        let mut records = Vec::new();
        let mut by_offset = BTreeMap::new();
        for e in 0..2u32 {
            for t in 1..4u32 {
                let values: Vec<f32> = (0..len)
                    .map(|i| (e as f32 + 1.0) * 0.25 + t as f32 * 0.01 + i as f32 * 1e-3)
                    .collect();
                records.push(Record {
                    episode: e,
                    step: t,
                    offset: 1,
                    values,
                });
                *by_offset.entry(1usize).or_insert(0) += 1;
            }
        }
        Dataset {
            header: DatasetHeader {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                variant: DatasetVariant::Feature,
                dims,
                encoder: "enc-test".into(),
                head: "regression".into(),
                gate_sr: 0.95,
                schedule: "sync".into(),
                collection_f: 1,
                seed: 7,
                episodes: 2,
                records: records.len(),
                by_offset,
            },
            records,
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sync.ds");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.header, ds.header);
        assert_eq!(back.records.len(), ds.records.len());
        for (a, b) in back.records.iter().zip(&ds.records) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn flipped_length_prefix_is_reported_with_the_record_index() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sync.ds");
        write_dataset(&path, &ds).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let first_len = 12 + 4 * ds.header.dims.record_len(DatasetVariant::Feature);
        // Second record's length prefix.
        let off = header_end + 4 + first_len;
        bytes[off] = bytes[off].wrapping_add(1);
        std::fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(PipelineError::Corrupt { record, .. }) => assert_eq!(record, 1),
            other => panic!("expected corruption at record 1, got {other:?}"),
        }
    }

    #[test]
    fn truncated_body_is_a_corruption_not_a_panic() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sync.ds");
        write_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_dataset(&path) {
            Err(PipelineError::Corrupt { record, .. }) => {
                assert_eq!(record, ds.records.len() - 1)
            }
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn miscounted_header_fails_validation() {
        let mut ds = tiny_dataset();
        ds.header.records += 1;
        match ds.validate() {
            Err(PipelineError::Header(_)) => {}
            other => panic!("expected header error, got {other:?}"),
        }
        let mut ds2 = tiny_dataset();
        *ds2.header.by_offset.get_mut(&1).unwrap() -= 1;
        assert!(ds2.validate().is_err());
    }

    #[test]
    fn wrong_record_width_fails_validation() {
        let mut ds = tiny_dataset();
        ds.records[2].values.pop();
        ds.records[2].values.shrink_to_fit();
        match ds.validate() {
            Err(PipelineError::Corrupt { record, .. }) => assert_eq!(record, 2),
            other => panic!("expected corrupt record 2, got {other:?}"),
        }
    }

    #[test]
    fn concat_renames_episodes_so_sources_never_collide() {
        let a = tiny_dataset();
        let b = tiny_dataset();
        let merged = concat_datasets(&[&a, &b]).unwrap();
        merged.validate().unwrap();
        assert_eq!(merged.len(), a.len() + b.len());
        assert_eq!(merged.episode_ids(), vec![0, 1, 2, 3]);
        assert_eq!(merged.header.episodes, 4);
        assert_eq!(merged.header.by_offset[&1], 12);
        // Values are untouched by the renaming.
        assert_eq!(merged.records[a.len()].values, b.records[0].values);
    }

    #[test]
    fn concat_rejects_mixed_geometry() {
        let a = tiny_dataset();
        let mut b = tiny_dataset();
        b.header.encoder = "other".into();
        assert!(concat_datasets(&[&a, &b]).is_err());
        let mut c = tiny_dataset();
        c.header.dims.d_model = 5;
        assert!(concat_datasets(&[&a, &c]).is_err());
    }

    #[test]
    fn feature_view_slices_the_flat_record_in_declared_order() {
        let ds = tiny_dataset();
        let v: FeatureView<f64> = ds.feature_view(0).unwrap();
        let d = &ds.header.dims;
        let raw = &ds.records[0].values;
        assert_eq!(v.input.shape(), (d.tokens, d.d_model));
        assert_eq!(v.input.get(0, 0), raw[0] as f64);
        let target_start = d.tokens * d.d_model;
        assert_eq!(v.target.get(0, 0), raw[target_start] as f64);
        let q_start = 3 * d.tokens * d.d_model;
        assert_eq!(v.q, vec![raw[q_start] as f64, raw[q_start + 1] as f64]);
        assert_eq!(
            v.a_prev,
            vec![raw[q_start + 2] as f64, raw[q_start + 3] as f64]
        );
        assert_eq!(v.episode, 0);
        assert_eq!(v.offset, 1);
    }
}
