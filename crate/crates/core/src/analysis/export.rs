use std::fs;
use std::path::Path;

use crate::archive::write_raw_f64;
use crate::error::{Error, Result};
use crate::field::PixelField;

/// Writes a binary 16-bit PGM of `field`, min-max normalised, one image per
/// channel stacked vertically. A constant field maps to zero.
pub fn write_pgm16(path: &Path, field: &PixelField) -> Result<()> {
    let shape = field.shape();
    let values = field.as_slice();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("uncertainty map".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{} {}\n65535\n", shape.width, shape.height * shape.channels).into_bytes();
    for v in values {
        let level = if span > 0.0 { ((v - lo) / span * 65535.0).round() as u16 } else { 0 };
        bytes.extend_from_slice(&level.to_be_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// The PGM plus a raw float64 sidecar next to it (`<stem>.f64`).
pub fn export_uncertainty_map(path: &Path, field: &PixelField) -> Result<()> {
    write_pgm16(path, field)?;
    write_raw_f64(&path.with_extension("f64"), field.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Shape;

    #[test]
    fn pgm_header_and_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("var.pgm");
        let f = PixelField::new(Shape::new(1, 2, 2), vec![0.0, 1.0, 0.5, 1.0]).unwrap();
        export_uncertainty_map(&path, &f).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        let px: Vec<u16> = bytes[header.len()..].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        assert_eq!(px, vec![0, 65535, 32768, 65535]);
        assert_eq!(fs::read(dir.path().join("var.f64")).unwrap().len(), 32);
    }
}
