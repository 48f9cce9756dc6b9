//! Line-oriented mask set format.
//!
//! ```text
//! # comment
//! image <id>
//! <block_id> <confidence> <width> <height> <rle>
//! ```
//!
//! Each instance line holds one mask; `rle` is a comma-separated list of run
//! lengths over the full image in row-major order, alternating background
//! and foreground and starting with background (which may be 0). Instance
//! lines belong to the most recent `image` line; lines before any `image`
//! line belong to image 0.

use super::{InstanceMask, PerceptionError};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub id: u64,
    pub masks: Vec<InstanceMask>,
}

fn encode_rle(mask: &InstanceMask) -> String {
    let full = mask.to_full();
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &b in &full {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_mask_file(images: &[MaskImage]) -> String {
    let mut out = String::new();
    for img in images {
        let _ = writeln!(out, "image {}", img.id);
        for m in &img.masks {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                m.block_id,
                m.confidence,
                m.image_width,
                m.image_height,
                encode_rle(m)
            );
        }
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> PerceptionError {
    PerceptionError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_instance(line_no: usize, fields: &[&str]) -> Result<InstanceMask, PerceptionError> {
    if fields.len() != 5 {
        return Err(parse_err(line_no, format!("expected 5 fields, found {}", fields.len())));
    }
    let block_id: usize = fields[0].parse().map_err(|_| parse_err(line_no, "bad block id"))?;
    let confidence: f64 = fields[1].parse().map_err(|_| parse_err(line_no, "bad confidence"))?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(parse_err(line_no, "confidence outside [0, 1]"));
    }
    let width: u32 = fields[2].parse().map_err(|_| parse_err(line_no, "bad width"))?;
    let height: u32 = fields[3].parse().map_err(|_| parse_err(line_no, "bad height"))?;
    let total = width as usize * height as usize;
    let mut full = Vec::with_capacity(total);
    let mut value = false;
    for run in fields[4].split(',') {
        let n: usize = run.parse().map_err(|_| parse_err(line_no, format!("bad run length {run:?}")))?;
        if full.len() + n > total {
            return Err(parse_err(line_no, "runs exceed image size"));
        }
        full.extend(std::iter::repeat_n(value, n));
        value = !value;
    }
    if full.len() != total {
        return Err(parse_err(line_no, format!("runs cover {} of {total} pixels", full.len())));
    }
    Ok(InstanceMask::from_full(block_id, confidence, width, height, &full))
}

pub fn parse_mask_file(text: &str) -> Result<Vec<MaskImage>, PerceptionError> {
    let mut images: Vec<MaskImage> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "image" {
            if fields.len() != 2 {
                return Err(parse_err(line_no, "expected `image <id>`"));
            }
            let id = fields[1].parse().map_err(|_| parse_err(line_no, "bad image id"))?;
            images.push(MaskImage { id, masks: Vec::new() });
            continue;
        }
        let mask = parse_instance(line_no, &fields)?;
        if images.is_empty() {
            images.push(MaskImage { id: 0, masks: Vec::new() });
        }
        images.last_mut().expect("pushed above").masks.push(mask);
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = InstanceMask::from_pixels(4, 0.75, 8, 6, &[(0, 0), (1, 0), (3, 2), (7, 5)]);
        let b = InstanceMask::from_pixels(9, 1.0, 8, 6, &[(2, 2), (2, 3)]);
        let images = vec![
            MaskImage { id: 0, masks: vec![a, b] },
            MaskImage { id: 5, masks: vec![] },
        ];
        let text = write_mask_file(&images);
        assert_eq!(parse_mask_file(&text).unwrap(), images);
    }

    #[test]
    fn rle_starts_with_background() {
        let m = InstanceMask::from_pixels(1, 1.0, 3, 1, &[(0, 0)]);
        assert_eq!(encode_rle(&m), "0,1,2");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "# header\nimage 0\n1 0.5 2 2 0,4\n2 0.5 2 2 0,5\n";
        assert_eq!(parse_mask_file(text).unwrap_err(), PerceptionError::Parse {
            line: 4,
            message: "runs exceed image size".into()
        });
        let bad = "image 0\n1 x 2 2 4\n";
        assert!(matches!(parse_mask_file(bad), Err(PerceptionError::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_file_has_no_images() {
        assert!(parse_mask_file("\n# nothing\n").unwrap().is_empty());
    }
}
