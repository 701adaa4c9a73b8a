use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use fcss::learning::BBox;

/// One training pair: source and target image paths and their object boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub source_bbox: BBox,
    pub target_bbox: BBox,
}

/// Parse `x,y,w,h`.
pub fn parse_bbox(s: &str) -> Result<BBox> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        bail!("bbox must be x,y,w,h, got {s:?}");
    }
    let mut v = [0usize; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .parse()
            .map_err(|_| anyhow!("bbox field {p:?} is not a non-negative integer"))?;
    }
    Ok(BBox::new(v[0], v[1], v[2], v[3]))
}

pub fn format_bbox(b: &BBox) -> String {
    format!("{},{},{},{}", b.x, b.y, b.w, b.h)
}

/// Lines are `source target x,y,w,h x,y,w,h`. Blank lines and `#` comments
/// are skipped; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let entry = parse_line(line, base).map_err(|e| anyhow!("manifest line {}: {e}", i + 1))?;
        entries.push(entry);
    }
    if entries.is_empty() {
        bail!("manifest has no pairs");
    }
    Ok(entries)
}

fn parse_line(line: &str, base: &Path) -> Result<ManifestEntry> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 4 {
        bail!("expected 4 fields (source target bbox bbox), got {}", fields.len());
    }
    Ok(ManifestEntry {
        source: base.join(fields[0]),
        target: base.join(fields[1]),
        source_bbox: parse_bbox(fields[2])?,
        target_bbox: parse_bbox(fields[3])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_skips_comments() {
        let text = "# pairs\na.png b.png 1,2,3,4 0,0,5,5\n\n/abs/c.png d.png 0,0,8,8 1,1,6,6 # tail\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].source, PathBuf::from("/data/a.png"));
        assert_eq!(m[0].source_bbox, BBox::new(1, 2, 3, 4));
        assert_eq!(m[1].source, PathBuf::from("/abs/c.png"));
        assert_eq!(m[1].target_bbox, BBox::new(1, 1, 6, 6));
    }

    #[test]
    fn bad_line_reports_its_number() {
        let text = "a.png b.png 0,0,4,4 0,0,4,4\na.png b.png 0,0,4 0,0,4,4\n";
        let err = parse_manifest(text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn bbox_round_trip() {
        let b = parse_bbox("3, 4,10,12").unwrap();
        assert_eq!(format_bbox(&b), "3,4,10,12");
        assert!(parse_bbox("1,2,-3,4").is_err());
    }
}
