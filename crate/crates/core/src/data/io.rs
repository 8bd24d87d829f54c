//! IDX and CSV dataset files.
//!
//! IDX: big-endian header `00 00 08 nd` followed by `nd` u32 extents and
//! unsigned-byte payload. Image files use magic `0x00000803`
//! (`count x rows x cols`), label files `0x00000801` (`count`).
//!
//! CSV: one sample per line, `label,p0,p1,...` in row-major pixel order. A
//! non-numeric first line is treated as a header. When any pixel exceeds 1
//! the file is byte-valued and every pixel is divided by 255.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// A decoded IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `[rows, cols]` images scaled to `[0, 1]`.
    Images {
        rows: usize,
        cols: usize,
        pixels: Vec<Vec<f64>>,
    },
    Labels(Vec<u8>),
}

fn parse_err(name: &str, location: String, message: impl Into<String>) -> Error {
    Error::Parse { source_name: name.to_string(), location, message: message.into() }
}

pub fn parse_idx(bytes: &[u8], name: &str) -> Result<IdxData> {
    let header = |at: usize| -> Result<u32> {
        bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]])).ok_or_else(|| {
            parse_err(
                name,
                format!("byte offset {at}"),
                format!("header truncated: expected {} bytes, got {}", at + 4, bytes.len()),
            )
        })
    };
    let magic = header(0)?;
    let dims = match magic {
        IDX_IMAGES => 3,
        IDX_LABELS => 1,
        other => {
            return Err(parse_err(
                name,
                "byte offset 0".into(),
                format!("bad magic 0x{other:08x} (expected 0x{IDX_IMAGES:08x} or 0x{IDX_LABELS:08x})"),
            ))
        }
    };
    let extents: Vec<usize> = (0..dims).map(|d| header(4 + 4 * d).map(|v| v as usize)).collect::<Result<_>>()?;
    let payload_at = 4 + 4 * dims;
    let expected: usize = extents.iter().product();
    let actual = bytes.len() - payload_at;
    if actual != expected {
        return Err(parse_err(
            name,
            format!("byte offset {payload_at}"),
            format!("payload has {actual} bytes, expected {expected} for extents {extents:?}"),
        ));
    }
    let payload = &bytes[payload_at..];
    if dims == 1 {
        return Ok(IdxData::Labels(payload.to_vec()));
    }
    let (rows, cols) = (extents[1], extents[2]);
    if rows == 0 || cols == 0 {
        return Err(parse_err(name, "byte offset 8".into(), "zero image extent"));
    }
    let pixels = payload.chunks(rows * cols).map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect()).collect();
    Ok(IdxData::Images { rows, cols, pixels })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image file plus an optional IDX label file. Without labels
/// every sample gets label 0.
pub fn load_idx(images: &Path, labels: Option<&Path>, num_classes: Option<usize>) -> Result<LabeledSet> {
    let name = images.display().to_string();
    let IdxData::Images { rows, cols, pixels } = parse_idx(&read_bytes(images)?, &name)? else {
        return Err(parse_err(&name, "byte offset 0".into(), "expected an image file"));
    };
    let labels: Vec<usize> = match labels {
        Some(p) => {
            let lname = p.display().to_string();
            match parse_idx(&read_bytes(p)?, &lname)? {
                IdxData::Labels(l) => l.into_iter().map(usize::from).collect(),
                IdxData::Images { .. } => {
                    return Err(parse_err(&lname, "byte offset 0".into(), "expected a label file"))
                }
            }
        }
        None => vec![0; pixels.len()],
    };
    if labels.len() != pixels.len() {
        return Err(parse_err(
            &name,
            "byte offset 4".into(),
            format!("{} images but {} labels", pixels.len(), labels.len()),
        ));
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let images = pixels.into_iter().map(|p| Tensor::new(vec![1, rows, cols], p)).collect::<Result<_>>()?;
    LabeledSet::new(images, labels, k)
}

/// Parses CSV text into a set of images with the given per-image shape.
pub fn parse_csv(text: &str, shape: &[usize], num_classes: Option<usize>, name: &str) -> Result<LabeledSet> {
    let width: usize = shape.iter().product();
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let loc = format!("line {}", lineno + 1);
        let Ok(label) = fields[0].parse::<usize>() else {
            if lineno == 0 && fields[0].parse::<f64>().is_err() {
                continue; // header
            }
            return Err(parse_err(name, loc, format!("bad label `{}`", fields[0])));
        };
        if fields.len() != width + 1 {
            return Err(parse_err(name, loc, format!("row has {} pixels, expected {width}", fields.len() - 1)));
        }
        let pixels = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(name, loc.clone(), format!("bad pixel `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((label, pixels));
    }
    let byte_valued = rows.iter().any(|(_, p)| p.iter().any(|&v| v > 1.0));
    let mut images = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (label, mut pixels)) in rows.into_iter().enumerate() {
        if byte_valued {
            if let Some(v) = pixels.iter().find(|v| !(0.0..=255.0).contains(*v) || v.fract() != 0.0) {
                return Err(parse_err(name, format!("sample {i}"), format!("byte-valued file has pixel {v}")));
            }
            pixels.iter_mut().for_each(|v| *v /= 255.0);
        } else if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(parse_err(name, format!("sample {i}"), format!("pixel {v} outside [0,1]")));
        }
        images.push(Tensor::new(shape.to_vec(), pixels)?);
        labels.push(label);
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    LabeledSet::new(images, labels, k)
}

pub fn load_csv(path: &Path, shape: &[usize], num_classes: Option<usize>) -> Result<LabeledSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, shape, num_classes, &path.display().to_string())
}

/// Options for [`load_idx_or_csv`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// IDX label file accompanying an IDX image file.
    pub labels: Option<PathBuf>,
    /// Per-image shape for CSV input, e.g. `[1, 28, 28]`.
    pub shape: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
}

/// Loads an IDX image file (detected by its magic) or a CSV file.
pub fn load_idx_or_csv(path: &Path, opts: &LoadOptions) -> Result<LabeledSet> {
    let bytes = read_bytes(path)?;
    if bytes.len() >= 4 && bytes[0] == 0 && bytes[1] == 0 && bytes[2] == 0x08 {
        return load_idx(path, opts.labels.as_deref(), opts.num_classes);
    }
    let shape = opts
        .shape
        .as_ref()
        .ok_or_else(|| parse_err(&path.display().to_string(), "line 1".into(), "CSV input needs an image shape"))?;
    let text = String::from_utf8(bytes).map_err(|e| {
        parse_err(&path.display().to_string(), format!("byte offset {}", e.utf8_error().valid_up_to()), "not UTF-8")
    })?;
    parse_csv(&text, shape, opts.num_classes, &path.display().to_string())
}

/// Writes the set in the CSV format read by [`load_csv`], with a header line.
pub fn export_csv(set: &LabeledSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    let width = set.image_shape().map_or(0, |s| s.iter().product::<usize>());
    out.push_str("label");
    for i in 0..width {
        let _ = write!(out, ",p{i}");
    }
    out.push('\n');
    for (img, label) in set.images.iter().zip(&set.labels) {
        let _ = write!(out, "{label}");
        for v in img.data() {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(payload);
        b
    }

    #[test]
    fn idx_bytes_rescale() {
        let bytes = idx_images(1, 2, 2, &[0, 255, 0, 255]);
        let IdxData::Images { pixels, .. } = parse_idx(&bytes, "t").unwrap() else { panic!("images expected") };
        assert_eq!(pixels, vec![vec![0.0, 1.0, 0.0, 1.0]]);
    }

    #[test]
    fn idx_truncated_payload_reports_counts() {
        let bytes = idx_images(2, 2, 2, &[0, 1, 2]);
        let err = parse_idx(&bytes, "t").unwrap_err().to_string();
        assert!(err.contains("payload has 3 bytes, expected 8"), "{err}");
        assert!(err.contains("byte offset 16"), "{err}");
    }

    #[test]
    fn idx_bad_magic() {
        let err = parse_idx(&[0, 0, 9, 9, 0, 0, 0, 0], "t").unwrap_err().to_string();
        assert!(err.contains("bad magic") && err.contains("byte offset 0"), "{err}");
    }

    #[test]
    fn csv_row_rescales_bytes() {
        let set = parse_csv("1,0,128,255,0\n", &[1, 2, 2], None, "t").unwrap();
        assert_eq!(set.labels, vec![1]);
        assert_eq!(set.images[0].data(), &[0.0, 128.0 / 255.0, 1.0, 0.0]);
    }

    #[test]
    fn csv_bad_row_names_line() {
        let err = parse_csv("label,a,b,c,d\n1,0,0,0,0\n0,1,2\n", &[1, 2, 2], None, "t").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn csv_export_round_trip() {
        let set = crate::data::gen_synthetic(2, 3, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.csv");
        export_csv(&set, &path).unwrap();
        let back = load_csv(&path, &[1, 8, 8], Some(2)).unwrap();
        assert_eq!(back, set);
    }
}
