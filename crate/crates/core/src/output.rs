//! Output artifacts: CSV tables, PGM images, and plain-text summaries.
//!
//! Formats are deliberately boring so results can be inspected without any
//! tooling:
//!
//! - CSV: UTF-8, one header row, fixed column order per product (documented
//!   on the scenario that emits it), numbers in scientific notation.
//! - PGM P5: binary 16-bit big-endian, maxval 65535, used for per-frame
//!   intensity dumps; sample values scale linearly so the data maximum maps
//!   to 65535.
//! - PGM P2: ASCII 16-bit, used for small ghost images; covariance values
//!   below zero (noise) clamp to 0.
//!
//! Rows are written top to bottom in increasing `j` (the y index of the grid
//! convention).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub enum ProductData {
    Csv { header: String, rows: Vec<String> },
    PgmP2 { width: usize, height: usize, values: Vec<f64> },
    PgmP5 { width: usize, height: usize, values: Vec<f64> },
    Text(String),
}

/// One file a scenario wants written.
#[derive(Clone, Debug)]
pub struct Product {
    pub filename: String,
    pub data: ProductData,
}

impl Product {
    pub fn csv(filename: impl Into<String>, header: impl Into<String>, rows: Vec<String>) -> Self {
        Self { filename: filename.into(), data: ProductData::Csv { header: header.into(), rows } }
    }

    pub fn text(filename: impl Into<String>, body: impl Into<String>) -> Self {
        Self { filename: filename.into(), data: ProductData::Text(body.into()) }
    }
}

const PGM_MAXVAL: u32 = 65535;

fn quantize(values: &[f64]) -> Vec<u16> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v.max(0.0) / max) * PGM_MAXVAL as f64).round() as u16)
        .collect()
}

pub fn render_pgm_p5(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    debug_assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n{PGM_MAXVAL}\n").into_bytes();
    for q in quantize(values) {
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn render_pgm_p2(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    debug_assert_eq!(values.len(), width * height);
    let mut out = format!("P2\n{width} {height}\n{PGM_MAXVAL}\n");
    for row in quantize(values).chunks(width) {
        let line: Vec<String> = row.iter().map(|q| q.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

fn render(data: &ProductData) -> Vec<u8> {
    match data {
        ProductData::Csv { header, rows } => {
            let mut s = String::with_capacity(rows.len() * 48 + header.len() + 1);
            s.push_str(header);
            s.push('\n');
            for row in rows {
                s.push_str(row);
                s.push('\n');
            }
            s.into_bytes()
        }
        ProductData::PgmP2 { width, height, values } => render_pgm_p2(*width, *height, values),
        ProductData::PgmP5 { width, height, values } => render_pgm_p5(*width, *height, values),
        ProductData::Text(body) => {
            let mut s = body.clone();
            if !s.ends_with('\n') {
                s.push('\n');
            }
            s.into_bytes()
        }
    }
}

/// Writes every product into `dir` (created if needed) and returns the
/// manifest of files actually written, in order.
pub fn write_products(dir: &Path, products: &[Product]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(products.len());
    for product in products {
        let path = dir.join(&product.filename);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&render(&product.data)).map_err(|e| Error::io(&path, e))?;
        manifest.push(path);
    }
    Ok(manifest)
}

/// Scientific-notation cell formatting shared by all CSV writers so output
/// bytes are reproducible.
pub fn fmt_sci(v: f64) -> String {
    format!("{v:.9e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_p2_scales_to_data_max_and_clamps_negatives() {
        let bytes = render_pgm_p2(3, 1, &[-1.0, 0.5, 1.0]);
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text, "P2\n3 1\n65535\n0 32768 65535\n");
    }

    #[test]
    fn pgm_p5_header_and_big_endian_payload() {
        let bytes = render_pgm_p5(2, 1, &[0.0, 2.0]);
        let header = b"P5\n2 1\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 0, 0xff, 0xff]);
    }

    #[test]
    fn all_zero_image_renders_zeros() {
        let bytes = render_pgm_p2(2, 1, &[0.0, 0.0]);
        assert!(String::from_utf8(bytes).unwrap().ends_with("0 0\n"));
    }

    #[test]
    fn manifest_lists_written_files() {
        let dir = std::env::temp_dir().join(format!("ghostsim-out-test-{}", std::process::id()));
        let products = vec![
            Product::csv("a.csv", "x,y", vec!["1,2".to_string()]),
            Product::text("summary.txt", "ok"),
        ];
        let manifest = write_products(&dir, &products).unwrap();
        assert_eq!(manifest.len(), 2);
        assert!(manifest[0].ends_with("a.csv"));
        let content = std::fs::read_to_string(&manifest[0]).unwrap();
        assert_eq!(content, "x,y\n1,2\n");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unwritable_directory_reports_path() {
        // A path below an existing *file* cannot be created, even as root.
        let blocker = std::env::temp_dir().join(format!("ghostsim-blocker-{}", std::process::id()));
        std::fs::write(&blocker, b"x").unwrap();
        let dir = blocker.join("sub");
        let err = write_products(&dir, &[Product::text("a.txt", "x")]).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        std::fs::remove_file(&blocker).unwrap();
    }
}
