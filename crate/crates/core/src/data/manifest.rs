//! Line-delimited scene manifest:
//! `<split>\t<relative_image_path>\t<x1>,<y1>;<x2>,<y2>;...`, with `-` for an
//! empty point list.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::scene::{AnnotatedScene, DatasetSplit, Point};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image_path: PathBuf,
    pub points: Vec<Point>,
}

impl ManifestEntry {
    /// File stem of the image path; unique within a manifest.
    pub fn scene_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |reason: String| Error::Manifest { line: line_no, reason };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let split = match fields[0] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(format!("unknown split {other:?}, expected train or test"))),
        };
        if fields[1].is_empty() {
            return Err(err("empty image path".into()));
        }
        let points = parse_points(fields[2]).map_err(err)?;
        entries.push(ManifestEntry {
            split,
            image_path: PathBuf::from(fields[1]),
            points,
        });
    }
    Ok(entries)
}

fn parse_points(field: &str) -> std::result::Result<Vec<Point>, String> {
    if field == "-" {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .enumerate()
        .map(|(k, pair)| {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| format!("point #{k} {pair:?} is not of the form x,y"))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("point #{k}: invalid coordinate {s:?}"))
            };
            Ok(Point::new(parse(x)?, parse(y)?))
        })
        .collect()
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = write!(out, "{}\t{}\t", e.split.as_str(), e.image_path.display());
        if e.points.is_empty() {
            out.push('-');
        } else {
            for (i, p) in e.points.iter().enumerate() {
                if i > 0 {
                    out.push(';');
                }
                let _ = write!(out, "{},{}", p.x, p.y);
            }
        }
        out.push('\n');
    }
    out
}

/// Load every scene referenced by `manifest` (image paths relative to
/// `root`), validating head points against image bounds.
pub fn load_annotations(root: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<DatasetSplit> {
    let (root, manifest) = (root.as_ref(), manifest.as_ref());
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let entries = parse_manifest(&text)?;
    let mut seen = HashSet::new();
    let mut split = DatasetSplit::default();
    for (i, entry) in entries.into_iter().enumerate() {
        let scene_id = entry.scene_id();
        if !seen.insert(scene_id.clone()) {
            return Err(Error::Manifest {
                line: i + 1,
                reason: format!("duplicate scene id {scene_id:?}"),
            });
        }
        let path = root.join(&entry.image_path);
        let image = image::open(&path)
            .map_err(|e| Error::ImageLoad {
                scene_id: scene_id.clone(),
                path: path.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let scene = AnnotatedScene::new(scene_id, image, entry.points)?;
        match entry.split {
            Split::Train => split.train.push(scene),
            Split::Test => split.test.push(scene),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_points_and_empty_marker() {
        let entries = parse_manifest("train\ta/b.png\t1.5,2;3,4.25\ntest\tc.png\t-\n\n").unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].points, vec![Point::new(1.5, 2.0), Point::new(3.0, 4.25)]);
        assert_eq!(entries[0].scene_id(), "b");
        assert_eq!(entries[1].split, Split::Test);
        assert!(entries[1].points.is_empty());
        assert_eq!(parse_manifest(&render_manifest(&entries)).unwrap(), entries);
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_manifest("train\ta.png\t-\nvalid\tb.png\t-\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
        assert!(parse_manifest("train\ta.png\t1;2\n").is_err());
        assert!(parse_manifest("train\ta.png\n").is_err());
        assert!(parse_manifest("train\ta.png\tnan,1\n").is_err());
    }
}
