//! Line-delimited JSON dump of per-pass detections.

use std::path::Path;

use catext_core::geom::BBox;
use catext_core::mining::PassDetection;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::files;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    image_id: u64,
    pass: usize,
    /// `[x1, y1, x2, y2]`.
    bbox: [f64; 4],
    probs: Vec<f64>,
}

pub fn to_jsonl(detections: &[PassDetection]) -> String {
    let mut out = String::new();
    for d in detections {
        let r = Record {
            image_id: d.image_id,
            pass: d.pass,
            bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
            probs: d.probs.clone(),
        };
        out.push_str(&serde_json::to_string(&r).expect("plain record serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> std::result::Result<Vec<PassDetection>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let r: Record = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
            let [x1, y1, x2, y2] = r.bbox;
            let bbox = BBox::new(x1, y1, x2, y2).map_err(|_| format!("line {}: invalid bbox", n + 1))?;
            Ok(PassDetection {
                image_id: r.image_id,
                pass: r.pass,
                bbox,
                probs: r.probs,
            })
        })
        .collect()
}

pub fn save(path: &Path, detections: &[PassDetection]) -> Result<()> {
    files::write(path, to_jsonl(detections))
}

pub fn load(path: &Path) -> Result<Vec<PassDetection>> {
    from_jsonl(&files::read_string(path)?).map_err(|message| CliError::Format { path: path.to_path_buf(), message })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dets = vec![
            PassDetection {
                image_id: 3,
                pass: 1,
                bbox: BBox::new(1.0, 2.0, 3.5, 4.25).unwrap(),
                probs: vec![0.1, 0.7],
            },
            PassDetection {
                image_id: 4,
                pass: 0,
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                probs: vec![0.3, 0.2],
            },
        ];
        let text = to_jsonl(&dets);
        assert_eq!(text.lines().next().unwrap(), r#"{"image_id":3,"pass":1,"bbox":[1.0,2.0,3.5,4.25],"probs":[0.1,0.7]}"#);
        assert_eq!(from_jsonl(&text).unwrap(), dets);
    }

    #[test]
    fn reports_line_of_bad_record() {
        let err = from_jsonl("{\"image_id\":1,\"pass\":0,\"bbox\":[3,0,1,1],\"probs\":[]}\n").unwrap_err();
        assert!(err.starts_with("line 1"));
        assert!(from_jsonl("\n\nnot json").unwrap_err().starts_with("line 3"));
    }
}
