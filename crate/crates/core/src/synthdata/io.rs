//! JSON-lines persistence: one header line, then one record per instance with
//! its scene inline.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnswerVocab, DatasetSplit, Instance, QAInstance, Scene, SplitName};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    split: SplitName,
    answer_vocab: AnswerVocab,
    #[serde(rename = "K")]
    num_objects: usize,
    d_v: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(flatten)]
    qa: QAInstance,
    scene: Scene,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    #[serde(flatten)]
    qa: &'a QAInstance,
    scene: &'a Scene,
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        format_version: FORMAT_VERSION,
        split: split.name,
        answer_vocab: split.answer_vocab.clone(),
        num_objects: split.num_objects,
        d_v: split.feature_dim,
    };
    write_line(&mut out, path, &header)?;
    for inst in &split.instances {
        let record = RecordRef {
            qa: &inst.qa,
            scene: &inst.scene,
        };
        write_line(&mut out, path, &record)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header: Option<Header> = None;
    let mut instances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        match &header {
            None => {
                let h: Header =
                    serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
                if h.format_version != FORMAT_VERSION {
                    return Err(parse_err(
                        lineno,
                        format!("unsupported format_version {}", h.format_version),
                    ));
                }
                header = Some(h);
            }
            Some(h) => {
                let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
                if rec.scene.detections.len() != h.num_objects {
                    return Err(parse_err(
                        lineno,
                        format!(
                            "scene has {} detections, header says K = {}",
                            rec.scene.detections.len(),
                            h.num_objects
                        ),
                    ));
                }
                if rec.scene.detections.iter().any(|d| d.feature.len() != h.d_v) {
                    return Err(parse_err(
                        lineno,
                        format!("feature length differs from d_v = {}", h.d_v),
                    ));
                }
                instances.push(Instance {
                    scene: rec.scene,
                    qa: rec.qa,
                });
            }
        }
    }
    let h = header.ok_or_else(|| parse_err(1, "missing header".into()))?;
    Ok(DatasetSplit {
        name: h.split,
        answer_vocab: h.answer_vocab,
        num_objects: h.num_objects,
        feature_dim: h.d_v,
        instances,
    })
}

fn write_line<W: Write, T: Serialize>(out: &mut W, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))
}
