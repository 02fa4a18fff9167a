//! Manifest text format. One tab-separated record per line; `#` starts a
//! comment line and blank lines are ignored.
//!
//! ```text
//! labels   <n_labels>
//! speaker  <speaker_id>  <control|dysarthric>  <intelligibility 0-100 | ->
//! utt      <utterance_id>  <path | ->  <speaker_id>  <label ids, comma-separated | ->
//! ```
//!
//! Relative paths are resolved against the manifest's directory. Paths ending
//! in `.feat` are precomputed feature files, anything else is read as WAV.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{CorpusManifest, ManifestEntry, Source, SpeakerMeta};
use crate::error::{Error, Result};

fn bad(line: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "manifest",
        detail: format!("line {line}: {}", detail.into()),
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<CorpusManifest> {
    let mut m = CorpusManifest::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "labels" => {
                let [_, n] = fields[..] else {
                    return Err(bad(line_no, "expected: labels <n>"));
                };
                m.n_labels = n.parse().map_err(|_| bad(line_no, format!("bad label count {n:?}")))?;
            }
            "speaker" => {
                let [_, id, domain, score] = fields[..] else {
                    return Err(bad(line_no, "expected: speaker <id> <domain> <intelligibility|->"));
                };
                let intelligibility = match score {
                    "-" => None,
                    s => Some(s.parse().map_err(|_| bad(line_no, format!("bad intelligibility {s:?}")))?),
                };
                let meta = SpeakerMeta {
                    speaker_id: id.to_string(),
                    domain_label: domain.parse()?,
                    intelligibility,
                };
                if m.speakers.insert(id.to_string(), meta).is_some() {
                    return Err(bad(line_no, format!("duplicate speaker {id}")));
                }
            }
            "utt" => {
                let [_, id, path, speaker, labels] = fields[..] else {
                    return Err(bad(line_no, "expected: utt <id> <path> <speaker> <labels|->"));
                };
                let source = match path {
                    "-" => Source::Inline,
                    p => Source::Path(base.join(p)),
                };
                let labels = match labels {
                    "-" => None,
                    "" => Some(BTreeSet::new()),
                    ls => Some(
                        ls.split(',')
                            .map(|l| l.trim().parse::<usize>())
                            .collect::<std::result::Result<BTreeSet<_>, _>>()
                            .map_err(|_| bad(line_no, format!("bad label list {ls:?}")))?,
                    ),
                };
                m.entries.push(ManifestEntry {
                    utterance_id: id.to_string(),
                    source,
                    speaker_id: speaker.to_string(),
                    labels,
                });
            }
            other => return Err(bad(line_no, format!("unknown record type {other:?}"))),
        }
    }
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(m: &CorpusManifest) -> String {
    let mut out = String::from("# fhvae corpus manifest\n");
    writeln!(out, "labels\t{}", m.n_labels).unwrap();
    for s in m.speakers.values() {
        let score = s.intelligibility.map_or_else(|| "-".to_string(), |x| x.to_string());
        writeln!(out, "speaker\t{}\t{}\t{score}", s.speaker_id, s.domain_label.name()).unwrap();
    }
    for e in &m.entries {
        let path = match &e.source {
            Source::Path(p) => p.display().to_string(),
            Source::Inline => "-".into(),
        };
        let labels = match &e.labels {
            None => "-".to_string(),
            Some(ls) => ls.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        };
        writeln!(out, "utt\t{}\t{path}\t{}\t{labels}", e.utterance_id, e.speaker_id).unwrap();
    }
    out
}
