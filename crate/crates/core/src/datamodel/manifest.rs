//! Tab-separated dataset manifests.
//!
//! ```text
//! # id   label  split  modality=path ...
//! rec01  1      train  audio=rec01/audio.mmds  face=rec01/face.mmds
//! ```
//!
//! Paths are relative to the manifest's directory unless absolute.

use std::fs;
use std::path::{Path, PathBuf};

use super::descriptor::{validate_config, ModalityDescriptor};
use super::record::{Split, VideoRecord};
use super::stream::read_stream_file;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RecordEntry {
    pub id: String,
    pub label: u8,
    pub split: Split,
    /// One path per configured modality, in configuration order, as written
    /// in the manifest.
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<RecordEntry>,
    pub modality_config: Vec<ModalityDescriptor>,
    /// Directory that relative paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Reads every stream of record `index`.
    pub fn load_record(&self, index: usize) -> Result<VideoRecord> {
        let entry = self
            .records
            .get(index)
            .ok_or_else(|| Error::Contract(format!("record index {index} out of range")))?;
        let streams = self
            .modality_config
            .iter()
            .zip(&entry.paths)
            .map(|(desc, path)| read_stream_file(self.resolve(path), desc))
            .collect::<Result<Vec<_>>>()?;
        VideoRecord::new(entry.id.clone(), entry.label, entry.split, streams)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<VideoRecord>> {
        self.indices(split).into_iter().map(|i| self.load_record(i)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# id\tlabel\tsplit\tmodality=path...\n");
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}", r.id, r.label, r.split));
            for (desc, path) in self.modality_config.iter().zip(&r.paths) {
                out.push_str(&format!("\t{}={}", desc.name, path.display()));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Parses a manifest against a modality configuration and checks that every
/// referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>, modalities: &[ModalityDescriptor]) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, modalities, root)?;
    for r in &manifest.records {
        for p in &r.paths {
            let full = manifest.resolve(p);
            if !full.is_file() {
                return Err(Error::UnresolvedPath {
                    record: r.id.clone(),
                    path: full,
                });
            }
        }
    }
    Ok(manifest)
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, modalities: &[ModalityDescriptor], root: PathBuf) -> Result<DatasetManifest> {
    validate_config(modalities)?;
    let mut records: Vec<RecordEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse_err(format!(
                "expected id, label, split and modality fields, found {} field(s)",
                fields.len()
            )));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(parse_err("empty record id".into()));
        }
        let label = match fields[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(format!("label {other:?} is not 0 or 1"))),
        };
        let split: Split = fields[2].trim().parse().map_err(parse_err)?;
        let mut paths: Vec<Option<PathBuf>> = vec![None; modalities.len()];
        for field in &fields[3..] {
            let (name, rel) = field
                .split_once('=')
                .ok_or_else(|| parse_err(format!("field {field:?} is not modality=path")))?;
            let slot = modalities
                .iter()
                .position(|m| m.name == name.trim())
                .ok_or_else(|| Error::Schema(format!("line {line_no}: unknown modality {:?}", name.trim())))?;
            if paths[slot].is_some() {
                return Err(Error::Schema(format!("line {line_no}: modality {name} listed twice")));
            }
            paths[slot] = Some(PathBuf::from(rel.trim()));
        }
        let paths = paths
            .into_iter()
            .zip(modalities)
            .map(|(p, m)| {
                p.ok_or_else(|| Error::Schema(format!("line {line_no}: record {id} lacks modality {}", m.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        if records.iter().any(|r| r.id == id) {
            return Err(Error::Schema(format!("line {line_no}: duplicate record id {id}")));
        }
        records.push(RecordEntry {
            id: id.to_string(),
            label,
            split,
            paths,
        });
    }
    Ok(DatasetManifest {
        records,
        modality_config: modalities.to_vec(),
        root,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::stream::{write_stream_file, ModalityStream};

    fn config() -> Vec<ModalityDescriptor> {
        vec![
            ModalityDescriptor::projection("audio", 100.0, 2),
            ModalityDescriptor::state("blink", 25.0, 2),
        ]
    }

    fn write_files(dir: &Path, ids: &[&str]) {
        for id in ids {
            fs::create_dir_all(dir.join(id)).unwrap();
            write_stream_file(&ModalityStream::absent(config()[0].clone(), 100), dir.join(id).join("a.mmds")).unwrap();
            write_stream_file(&ModalityStream::absent(config()[1].clone(), 25), dir.join(id).join("b.mmds")).unwrap();
        }
    }

    #[test]
    fn three_records_one_per_split_in_order() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), &["c", "a", "b"]);
        let text = "# header\nc\t1\ttrain\taudio=c/a.mmds\tblink=c/b.mmds\n\
                    a\t0\tval\tblink=a/b.mmds\taudio=a/a.mmds\n\
                    b\t1\ttest\taudio=b/a.mmds\tblink=b/b.mmds\n";
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, text).unwrap();
        let m = load_manifest(&path, &config()).unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(m.indices(Split::Train), [0]);
        assert_eq!(m.indices(Split::Val), [1]);
        assert_eq!(m.indices(Split::Test), [2]);
        assert_eq!(m.records[1].paths[0], PathBuf::from("a/a.mmds"));
        let rec = m.load_record(1).unwrap();
        assert_eq!(rec.streams[1].descriptor.name, "blink");
        assert_eq!(rec.span_seconds(), 1.0);
    }

    #[test]
    fn non_binary_label_is_parse_error() {
        let err = parse_manifest("x\t2\ttrain\taudio=a\tblink=b\n", &config(), PathBuf::new()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn duplicate_and_unknown_are_schema_errors() {
        let dup = "x\t0\ttrain\taudio=a\tblink=b\nx\t1\ttrain\taudio=a\tblink=b\n";
        assert!(matches!(parse_manifest(dup, &config(), PathBuf::new()), Err(Error::Schema(_))));
        let unknown = "x\t0\ttrain\taudio=a\tblink=b\tgaze=c\n";
        assert!(matches!(parse_manifest(unknown, &config(), PathBuf::new()), Err(Error::Schema(_))));
    }

    #[test]
    fn bad_split_reports_line() {
        let text = "# c\n\nx\t0\tdev\taudio=a\tblink=b\n";
        assert!(matches!(parse_manifest(text, &config(), PathBuf::new()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn missing_file_names_record() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), &["a"]);
        let path = dir.path().join("m.tsv");
        fs::write(&path, "a\t0\ttrain\taudio=a/a.mmds\tblink=a/b.mmds\nghost\t1\ttest\taudio=g/a.mmds\tblink=g/b.mmds\n").unwrap();
        match load_manifest(&path, &config()) {
            Err(Error::UnresolvedPath { record, .. }) => assert_eq!(record, "ghost"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let text = "a\t0\ttrain\taudio=a/a.mmds\tblink=a/b.mmds\n";
        let m = parse_manifest(text, &config(), PathBuf::new()).unwrap();
        let again = parse_manifest(&m.to_text(), &config(), PathBuf::new()).unwrap();
        assert_eq!(m.records, again.records);
    }
}
