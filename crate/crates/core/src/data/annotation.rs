//! Line-delimited JSON annotations.
//!
//! Each non-blank line is one object:
//!
//! ```text
//! {"image":"images/000000.png","joints":[x1,y1,x2,y2,...],"visibility":[1,0,...],"center":[cx,cy],"scale":1.2}
//! ```
//!
//! Coordinates are in pixels with the top-left image corner at `(0, 0)`.
//! `visibility` holds one `0` or `1` per joint. `image` is resolved
//! relative to the annotation file's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub image: String,
    pub joints: Vec<[Float; 2]>,
    pub visibility: Vec<bool>,
    pub center: [Float; 2],
    pub scale: Float,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image: String,
    joints: Vec<Float>,
    visibility: Vec<i64>,
    center: [Float; 2],
    scale: Float,
}

impl Annotation {
    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Path of the image, resolved against `base` when relative.
    pub fn image_path(&self, base: &Path) -> PathBuf {
        base.join(&self.image)
    }

    fn from_record(r: Record) -> std::result::Result<Self, String> {
        if r.joints.len() % 2 != 0 {
            return Err(format!("joints has odd length {}", r.joints.len()));
        }
        let n = r.joints.len() / 2;
        if r.visibility.len() != n {
            return Err(format!("{} joints but {} visibility flags", n, r.visibility.len()));
        }
        if let Some(v) = r.visibility.iter().find(|&&v| v != 0 && v != 1) {
            return Err(format!("visibility value {v} is not 0 or 1"));
        }
        if !r.joints.iter().chain(&r.center).all(|v| v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if !(r.scale > 0.0 && r.scale.is_finite()) {
            return Err(format!("scale {} must be positive", r.scale));
        }
        Ok(Annotation {
            image: r.image,
            joints: r.joints.chunks(2).map(|p| [p[0], p[1]]).collect(),
            visibility: r.visibility.iter().map(|&v| v == 1).collect(),
            center: r.center,
            scale: r.scale,
        })
    }

    fn to_record(&self) -> Record {
        Record {
            image: self.image.clone(),
            joints: self.joints.iter().flatten().copied().collect(),
            visibility: self.visibility.iter().map(|&v| v as i64).collect(),
            center: self.center,
            scale: self.scale,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("annotation serializes")
    }
}

/// Parses annotation text; `path` is only used in error messages.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        out.push(Annotation::from_record(record).map_err(parse_err)?);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path)?;
    parse_annotations(&text, path)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for a in annotations {
        writeln!(file, "{}", a.to_json_line())?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines() {
        let text = "{\"image\":\"a.png\",\"joints\":[1,2,3,4],\"visibility\":[1,0],\"center\":[5,5],\"scale\":1}\n\n\
                    {\"image\":\"b.png\",\"joints\":[1,2],\"visibility\":[1],\"center\":[5,5],\"scale\":0.5}\n";
        let anns = parse_annotations(text, Path::new("x.jsonl")).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0].joints, vec![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(anns[0].visibility, vec![true, false]);
    }

    #[test]
    fn bad_arity_names_line() {
        let text = "{\"image\":\"a.png\",\"joints\":[1,2],\"visibility\":[1],\"center\":[5,5],\"scale\":1}\n\
                    {\"image\":\"a.png\",\"joints\":[1,2,3],\"visibility\":[1],\"center\":[5,5],\"scale\":1}\n";
        match parse_annotations(text, Path::new("x.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn visibility_out_of_range() {
        let text = "{\"image\":\"a.png\",\"joints\":[1,2],\"visibility\":[2],\"center\":[5,5],\"scale\":1}";
        let err = parse_annotations(text, Path::new("x.jsonl")).unwrap_err();
        assert!(err.to_string().contains("visibility"), "{err}");
    }
}
