//! Feature-difference heatmaps: a length-D coefficient array reshaped to
//! the most-square factor grid and written as an 8-bit binary PGM, with a
//! one-line text sidecar recording the normalization range shared between
//! a before/after pair.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::EvalError;

/// Rows and columns of the most-square factor grid for `d` values:
/// rows is the largest divisor of `d` not exceeding sqrt(d), so
/// rows <= cols and rows * cols == d (128 -> 8 x 16; primes -> 1 x d).
pub fn grid_shape(d: usize) -> (usize, usize) {
    assert!(d > 0);
    let mut rows = 1;
    let mut k = 1;
    while k * k <= d {
        if d % k == 0 {
            rows = k;
        }
        k += 1;
    }
    (rows, d / rows)
}

/// Write `values` as a PGM at `path`, min-max normalized over `range`
/// (typically the before-array's range so a before/after pair shares one
/// scale). A sidecar `<path>.txt` records the range and grid.
pub fn export_heatmap(values: &[f64], range: (f64, f64), path: &Path) -> Result<(), EvalError> {
    if values.is_empty() {
        return Err(EvalError::BadArray("empty heatmap array".into()));
    }
    let (min, max) = range;
    if !(min.is_finite() && max.is_finite()) || max < min {
        return Err(EvalError::BadArray(format!("bad normalization range {range:?}")));
    }
    let (rows, cols) = grid_shape(values.len());
    let span = max - min;
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                0
            } else {
                let t = ((v - min) / span).clamp(0.0, 1.0);
                (t * 255.0).round() as u8
            }
        })
        .collect();
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{cols} {rows}\n255\n")?;
    file.write_all(&pixels)?;
    let sidecar = sidecar_path(path);
    fs::write(
        &sidecar,
        format!("min={min:e} max={max:e} rows={rows} cols={cols}\n"),
    )?;
    Ok(())
}

/// Export a before/after pair with the shared scale taken from the before
/// array's min and max; returns that range.
pub fn export_heatmap_pair(
    before: &[f64],
    after: &[f64],
    before_path: &Path,
    after_path: &Path,
) -> Result<(f64, f64), EvalError> {
    if before.len() != after.len() {
        return Err(EvalError::BadArray(format!(
            "before length {} vs after length {}",
            before.len(),
            after.len()
        )));
    }
    let min = before.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = before.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(EvalError::BadArray("non-finite heatmap values".into()));
    }
    export_heatmap(before, (min, max), before_path)?;
    export_heatmap(after, (min, max), after_path)?;
    Ok((min, max))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".txt");
    std::path::PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes_are_most_square_factors() {
        assert_eq!(grid_shape(128), (8, 16));
        assert_eq!(grid_shape(16), (4, 4));
        assert_eq!(grid_shape(12), (3, 4));
        assert_eq!(grid_shape(7), (1, 7));
        assert_eq!(grid_shape(24), (4, 6));
        assert_eq!(grid_shape(1), (1, 1));
    }

    #[test]
    fn zero_array_writes_black_pgm_of_right_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.pgm");
        export_heatmap(&[0.0; 12], (0.0, 0.0), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n4 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let pixels = &bytes[header.len()..];
        assert_eq!(pixels.len(), 12);
        assert!(pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn pair_export_shares_the_before_range() {
        let dir = tempfile::tempdir().unwrap();
        let before: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let after: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
        let bp = dir.path().join("before.pgm");
        let ap = dir.path().join("after.pgm");
        let range = export_heatmap_pair(&before, &after, &bp, &ap).unwrap();
        assert_eq!(range, (0.0, 7.0));
        let sb = std::fs::read_to_string(dir.path().join("before.pgm.txt")).unwrap();
        let sa = std::fs::read_to_string(dir.path().join("after.pgm.txt")).unwrap();
        assert_eq!(sb, sa);
        assert!(sb.starts_with("min=0e0 max=7e0"));
        // after values are half the before values -> max pixel is halved
        let read_pixels = |p: &std::path::Path| {
            let b = std::fs::read(p).unwrap();
            b[b.len() - 8..].to_vec()
        };
        let pb = read_pixels(&bp);
        let pa = read_pixels(&ap);
        assert_eq!(*pb.iter().max().unwrap(), 255u8);
        assert!(*pa.iter().max().unwrap() <= 128);
        // round trip pixel count equals D
        assert_eq!(pb.len(), 8);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        assert!(export_heatmap(&[], (0.0, 1.0), &path).is_err());
        assert!(export_heatmap(&[1.0], (1.0, 0.0), &path).is_err());
        assert!(export_heatmap_pair(&[1.0], &[1.0, 2.0], &path, &path).is_err());
    }
}
