//! Binary 8-bit PGM (`P5`).

use std::fs;
use std::path::Path;

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
}

impl PgmImage {
    /// Pixels scaled by `maxval` into `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        let m = self.maxval as f64;
        self.pixels.iter().map(|&p| p as f64 / m).collect()
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::MalformedPgm {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<PgmImage, DataError> {
    let mut pos = 0;
    if token(bytes, &mut pos) != Some(b"P5") {
        return Err(malformed(path, "missing P5 magic"));
    }
    let mut number = |what: &str| -> Result<usize, DataError> {
        let tok =
            token(bytes, &mut pos).ok_or_else(|| malformed(path, format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| malformed(path, format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(
            path,
            format!("maxval {maxval} is not an 8-bit value"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed(path, "missing raster separator"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() < width * height {
        return Err(malformed(
            path,
            format!(
                "raster has {} bytes, expected {}",
                raster.len(),
                width * height
            ),
        ));
    }
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u8,
        pixels: raster[..width * height].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<PgmImage, DataError> {
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    parse_pgm(&bytes, path)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), DataError> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_white_scales_to_one() {
        let bytes = encode_pgm(3, 2, &[255; 6]);
        let img = parse_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (3, 2, 255));
        assert_eq!(img.to_unit(), vec![1.0; 6]);
    }

    #[test]
    fn comments_and_small_maxval() {
        let mut bytes = b"P5 # a comment\n2 # w\n1\n# another\n15\n".to_vec();
        bytes.extend_from_slice(&[15, 5]);
        let img = parse_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.pixels, vec![15, 5]);
        assert_eq!(img.to_unit(), vec![1.0, 5.0 / 15.0]);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let p = Path::new("x.pgm");
        for bad in [
            &b"P2\n1 1\n255\n\x00"[..],
            b"P5\n1\n",
            b"P5\n1 1\n65535\n\x00\x00",
            b"P5\n2 2\n255\n\x00",
            b"P5\nx 1\n255\n\x00",
        ] {
            assert!(
                matches!(parse_pgm(bad, p), Err(DataError::MalformedPgm { .. })),
                "{bad:?}"
            );
        }
    }
}
