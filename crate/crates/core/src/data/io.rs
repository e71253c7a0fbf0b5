//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json`, one `<modality>.f32` blob per
//! modality (little-endian `f32`, row-major `[clips, frames, dim]` over all
//! clips in split order) and `labels.csv` with columns
//! `clip_id,domain,verb,noun`. Verb and noun are blank for `target_train`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActionLabel, ClipSet, DataError, DatasetSpec, FeatureDataset, Result, SplitKind};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
const DTYPE: &str = "float32_le";
const BLOB_EXT: &str = "f32";
const LABEL_HEADER: [&str; 4] = ["clip_id", "domain", "verb", "noun"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitEntry {
    name: SplitKind,
    clips: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    dtype: String,
    shape: [usize; 3],
    file: String,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    spec: DatasetSpec,
    splits: Vec<SplitEntry>,
    modalities: Vec<BlobEntry>,
}

pub fn save_dataset(dataset: &FeatureDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let kinds = dataset.split_kinds();
    let sets: Vec<&ClipSet> = kinds.iter().map(|k| dataset.clip_set(*k)).collect::<Result<_>>()?;
    let total: usize = sets.iter().map(|s| s.clips).sum();
    let frames = dataset.spec().frames;

    let mut blobs = Vec::new();
    for (m, spec) in dataset.spec().modalities.iter().enumerate() {
        let mut bytes = Vec::with_capacity(total * frames * spec.dim * 4);
        for s in &sets {
            for v in s.features[m].1.values() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let file = format!("{}.{BLOB_EXT}", spec.name);
        fs::write(dir.join(&file), &bytes)?;
        blobs.push(BlobEntry {
            name: spec.name.clone(),
            dtype: DTYPE.into(),
            shape: [total, frames, spec.dim],
            file,
            crc32: crc32fast::hash(&bytes),
        });
    }

    let mut csv = csv::Writer::from_path(dir.join("labels.csv")).map_err(csv_error)?;
    csv.write_record(LABEL_HEADER).map_err(csv_error)?;
    let mut clip_id = 0usize;
    for kind in &kinds {
        let rows: Vec<(String, String)> = match kind {
            SplitKind::TargetTrain => vec![(String::new(), String::new()); dataset.target_train().len()],
            labeled => dataset
                .labeled(*labeled)?
                .labels_unchecked()
                .iter()
                .map(|l| (l.verb.to_string(), l.noun.to_string()))
                .collect(),
        };
        for (verb, noun) in rows {
            csv.write_record([clip_id.to_string(), kind.to_string(), verb, noun])
                .map_err(csv_error)?;
            clip_id += 1;
        }
    }
    csv.flush()?;

    let manifest = Manifest {
        format_version: DATASET_VERSION,
        spec: dataset.spec().clone(),
        splits: kinds
            .iter()
            .zip(&sets)
            .map(|(k, s)| SplitEntry {
                name: *k,
                clips: s.clips,
            })
            .collect(),
        modalities: blobs,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<FeatureDataset> {
    let dir = dir.as_ref();
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_VERSION {
        return Err(DataError::Version {
            found,
            expected: DATASET_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let spec = manifest.spec;
    spec.validate()?;

    let mut present = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == BLOB_EXT) {
            present.insert(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
    }
    let listed: BTreeSet<String> = manifest.modalities.iter().map(|m| m.file.clone()).collect();
    if manifest.modalities.len() != spec.modalities.len() || listed != present {
        return Err(DataError::Consistency(format!(
            "manifest lists {} modality blobs {:?} for {} spec modalities, directory holds {:?}",
            manifest.modalities.len(),
            listed,
            spec.modalities.len(),
            present
        )));
    }

    let expected_kinds: Vec<SplitKind> = (0..spec.source_domains)
        .map(SplitKind::Source)
        .chain([SplitKind::TargetTrain, SplitKind::TargetTest])
        .collect();
    let kinds: Vec<SplitKind> = manifest.splits.iter().map(|s| s.name).collect();
    if kinds != expected_kinds {
        return Err(DataError::Consistency(format!(
            "split list {kinds:?} does not match the spec"
        )));
    }
    let total: usize = manifest.splits.iter().map(|s| s.clips).sum();

    let mut blobs = Vec::with_capacity(spec.modalities.len());
    for (entry, m) in manifest.modalities.iter().zip(&spec.modalities) {
        if entry.name != m.name || entry.shape != [total, spec.frames, m.dim] || entry.dtype != DTYPE {
            return Err(DataError::Consistency(format!(
                "blob {} ({} {:?}) does not match modality {} [{total}, {}, {}]",
                entry.file, entry.dtype, entry.shape, m.name, spec.frames, m.dim
            )));
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        let expected = (total * spec.frames * m.dim * 4) as u64;
        if bytes.len() as u64 != expected {
            if (bytes.len() as u64) < expected {
                return Err(DataError::Truncated {
                    file: entry.file.clone(),
                    expected,
                    found: bytes.len() as u64,
                });
            }
            return Err(DataError::Consistency(format!(
                "{} has {} bytes, expected {expected}",
                entry.file,
                bytes.len()
            )));
        }
        let crc = crc32fast::hash(&bytes);
        if crc != entry.crc32 {
            return Err(DataError::Checksum {
                file: entry.file.clone(),
                expected: entry.crc32,
                found: crc,
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        blobs.push(values);
    }

    let labels = parse_labels(&dir.join("labels.csv"), &manifest.splits, &spec)?;

    let mut offset = 0;
    let mut sources = Vec::new();
    let mut target_train = None;
    let mut target_test = None;
    for split in &manifest.splits {
        let features = spec
            .modalities
            .iter()
            .zip(&blobs)
            .map(|(m, values)| {
                let per_clip = spec.frames * m.dim;
                let slice = values[offset * per_clip..(offset + split.clips) * per_clip].to_vec();
                let t = Tensor::matrix(split.clips * spec.frames, m.dim, slice)
                    .map_err(|e| DataError::Consistency(e.to_string()))?;
                Ok((m.name.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        let set = ClipSet {
            frames: spec.frames,
            clips: split.clips,
            features,
        };
        let split_labels = &labels[offset..offset + split.clips];
        offset += split.clips;
        match split.name {
            SplitKind::Source(_) => sources.push((set, collect_labels(split_labels))),
            SplitKind::TargetTrain => target_train = Some(set),
            SplitKind::TargetTest => target_test = Some((set, collect_labels(split_labels))),
        }
    }
    Ok(FeatureDataset::assemble(
        spec,
        sources,
        target_train.expect("split list checked"),
        target_test.expect("split list checked"),
    ))
}

fn collect_labels(rows: &[Option<ActionLabel>]) -> Vec<ActionLabel> {
    rows.iter().map(|l| l.expect("labeled split checked")).collect()
}

fn csv_error(e: csv::Error) -> DataError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::Io(io),
        other => DataError::Labels {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

fn parse_labels(path: &Path, splits: &[SplitEntry], spec: &DatasetSpec) -> Result<Vec<Option<ActionLabel>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?;
    if header != LABEL_HEADER.as_slice() {
        return Err(DataError::Labels {
            line: 1,
            message: format!("expected header {}", LABEL_HEADER.join(",")),
        });
    }
    let expected_domain: Vec<SplitKind> = splits
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.name, s.clips))
        .collect();
    let mut out = Vec::with_capacity(expected_domain.len());
    for (i, record) in reader.records().enumerate() {
        let lineno = i + 2;
        let bad = |message: String| DataError::Labels { line: lineno, message };
        let record = record.map_err(|e| bad(e.to_string()))?;
        let id: usize = record[0]
            .parse()
            .map_err(|_| bad(format!("bad clip_id {:?}", &record[0])))?;
        if id != i {
            return Err(bad(format!("clip_id {id} out of order, expected {i}")));
        }
        let domain: SplitKind = record[1].parse().map_err(|e: DataError| bad(e.to_string()))?;
        match expected_domain.get(i) {
            Some(d) if *d == domain => {}
            _ => return Err(bad(format!("clip {id} tagged {domain}, manifest disagrees"))),
        }
        if domain == SplitKind::TargetTrain {
            if !record[2].is_empty() || !record[3].is_empty() {
                return Err(bad("target_train clips must not carry labels".into()));
            }
            out.push(None);
            continue;
        }
        let parse = |s: &str, classes: usize, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .ok()
                .filter(|v| *v < classes)
                .ok_or_else(|| bad(format!("{what} label {s:?} not in 0..{classes}")))
        };
        out.push(Some(ActionLabel {
            verb: parse(&record[2], spec.verb_classes, "verb")?,
            noun: parse(&record[3], spec.noun_classes, "noun")?,
        }));
    }
    if out.len() != expected_domain.len() {
        return Err(DataError::Consistency(format!(
            "labels.csv has {} rows, manifest has {} clips",
            out.len(),
            expected_domain.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn saved() -> (tempfile::TempDir, FeatureDataset) {
        let spec = DatasetSpec {
            samples_per_domain: 6,
            source_domains: 2,
            label_noise: 0.2,
            ..DatasetSpec::default()
        }
        .with_uniform_scale("audio", 3.0);
        let d = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        (dir, d)
    }

    #[test]
    fn round_trip_is_exact_and_leaves_counter_alone() {
        let (dir, d) = saved();
        assert_eq!(d.target_label_reads(), 0);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.target_label_reads(), 0);
        let csv = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
        assert!(csv.lines().nth(13).unwrap().ends_with(",target_train,,"));
    }

    #[test]
    fn truncated_blob() {
        let (dir, _) = saved();
        let p = dir.path().join("flow.f32");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            DataError::Truncated { .. }
        ));
    }

    #[test]
    fn corrupted_blob() {
        let (dir, _) = saved();
        let p = dir.path().join("rgb.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes[10] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            DataError::Checksum { .. }
        ));
    }

    #[test]
    fn wrong_version() {
        let (dir, _) = saved();
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p)
            .unwrap()
            .replacen("\"format_version\": 1", "\"format_version\": 9", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            DataError::Version { found: 9, .. }
        ));
    }

    #[test]
    fn blob_set_must_match_manifest() {
        let (dir, _) = saved();
        fs::write(dir.path().join("depth.f32"), [0u8; 4]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            DataError::Consistency(_)
        ));

        let (dir, _) = saved();
        fs::remove_file(dir.path().join("audio.f32")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            DataError::Consistency(_)
        ));
    }

    #[test]
    fn bad_label_row_names_its_line() {
        let (dir, _) = saved();
        let p = dir.path().join("labels.csv");
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = "2,source_0,99,0".into();
        fs::write(&p, lines.join("\n")).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            DataError::Labels { line, .. } => assert_eq!(line, 4),
            other => panic!("{other}"),
        }
    }
}
