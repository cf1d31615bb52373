//! Datasets on disk (CSV and `.npy`) and grayscale image grids.
//!
//! CSV files have a header `x0,…,x{d-1}` optionally followed by label
//! columns `label1`, `label2`, ….

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use ndarray_npy::ReadNpyExt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    /// Ground-truth labellings, one vector per label column.
    pub labels: Vec<Vec<usize>>,
}

fn fmt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn write_csv(path: &Path, x: ArrayView2<f64>, labels: &[&[usize]]) -> Result<()> {
    if labels.iter().any(|l| l.len() != x.nrows()) {
        return Err(Error::InvalidArgument("label column length differs from row count".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| fmt_err(path, e))?;
    let mut header: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    header.extend((1..=labels.len()).map(|k| format!("label{k}")));
    w.write_record(&header).map_err(|e| fmt_err(path, e))?;
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.extend(labels.iter().map(|l| l[i].to_string()));
        w.write_record(&rec).map_err(|e| fmt_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| fmt_err(path, e))?;
    let header = r.headers().map_err(|e| fmt_err(path, e))?.clone();
    let mut n_x = 0;
    let mut n_labels = 0;
    for (k, name) in header.iter().enumerate() {
        if name == format!("x{n_x}") && n_labels == 0 {
            n_x += 1;
        } else if name == format!("label{}", n_labels + 1) {
            n_labels += 1;
        } else {
            return Err(fmt_err(path, format!("unexpected column {name:?} at position {k}")));
        }
    }
    if n_x == 0 {
        return Err(fmt_err(path, "no x columns"));
    }
    let mut values = Vec::new();
    let mut labels = vec![Vec::new(); n_labels];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fmt_err(path, e))?;
        if rec.len() != n_x + n_labels {
            return Err(fmt_err(path, format!("row {}: expected {} fields", i + 1, n_x + n_labels)));
        }
        for (k, field) in rec.iter().enumerate() {
            if k < n_x {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| fmt_err(path, format!("row {}: bad number {field:?}", i + 1)))?;
                if !v.is_finite() {
                    return Err(fmt_err(path, format!("row {}: non-finite value", i + 1)));
                }
                values.push(v);
            } else {
                let l: usize = field
                    .trim()
                    .parse()
                    .map_err(|_| fmt_err(path, format!("row {}: bad label {field:?}", i + 1)))?;
                labels[k - n_x].push(l);
            }
        }
    }
    let n = values.len() / n_x;
    if n == 0 {
        return Err(Error::EmptyInput("dataset"));
    }
    let x = Array2::from_shape_vec((n, n_x), values).expect("row lengths checked");
    Ok(Dataset { x, labels })
}

/// Reads a 2-D `.npy` array of `f4` or `f8`.
pub fn read_npy(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path)?;
    if let Ok(a) = Array2::<f64>::read_npy(bytes.as_slice()) {
        return Ok(a);
    }
    Array2::<f32>::read_npy(bytes.as_slice())
        .map(|a| a.mapv(f64::from))
        .map_err(|e| fmt_err(path, e))
}

/// CSV or `.npy` by extension.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("npy") => Ok(Dataset {
            x: read_npy(path)?,
            labels: Vec::new(),
        }),
        _ => read_csv(path),
    }
}

/// Tiles rows of `images` (each `h·w` values in `[0, 1]`) into a grid of
/// `cols` columns separated by one-pixel gaps.
pub fn image_grid(images: ArrayView2<f64>, h: usize, w: usize, cols: usize) -> Result<image::GrayImage> {
    if images.ncols() != h * w {
        return Err(Error::DimensionMismatch {
            expected: h * w,
            got: images.ncols(),
        });
    }
    let n = images.nrows();
    let cols = cols.max(1).min(n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let gw = (cols * (w + 1) + 1) as u32;
    let gh = (rows * (h + 1) + 1) as u32;
    let mut img = image::GrayImage::new(gw, gh);
    for (k, row) in images.rows().into_iter().enumerate() {
        let (gr, gc) = (k / cols, k % cols);
        for (p, &v) in row.iter().enumerate() {
            let (y, x) = (p / w, p % w);
            let px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((gc * (w + 1) + 1 + x) as u32, (gr * (h + 1) + 1 + y) as u32, image::Luma([px]));
        }
    }
    Ok(img)
}

/// Writes a grid as PGM or PNG according to the extension of `path`.
pub fn write_grid(path: &Path, images: ArrayView2<f64>, h: usize, w: usize, cols: usize) -> Result<()> {
    let img = image_grid(images, h, w, cols)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => image::ImageFormat::Png,
        _ => image::ImageFormat::Pnm,
    };
    img.save_with_format(path, format).map_err(|e| fmt_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let x = Array2::from_shape_vec((2, 3), vec![0.1, 1.0 / 3.0, -2.5e-10, 4.0, 5.5, 6.25]).unwrap();
        write_csv(&path, x.view(), &[&[0, 1], &[1, 1]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x0,x1,x2,label1,label2\n"));
        let d = read_csv(&path).unwrap();
        assert_eq!(d.x, x);
        assert_eq!(d.labels, vec![vec![0, 1], vec![1, 1]]);
    }

    #[test]
    fn csv_bad_number_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x0,x1\n1,abc\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Format(_))));
    }

    #[test]
    fn npy_f32_is_read() {
        use ndarray_npy::WriteNpyExt;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.npy");
        let a = Array2::from_shape_vec((2, 2), vec![0.5f32, 1.5, -2.0, 3.25]).unwrap();
        a.write_npy(std::fs::File::create(&path).unwrap()).unwrap();
        let b = read_npy(&path).unwrap();
        assert_eq!(b, a.mapv(f64::from));
    }

    #[test]
    fn grid_dimensions() {
        let imgs = Array2::from_elem((5, 6), 0.5);
        let g = image_grid(imgs.view(), 2, 3, 3).unwrap();
        assert_eq!(g.dimensions(), (3 * 4 + 1, 2 * 3 + 1));
        assert_eq!(g.get_pixel(1, 1).0[0], 128);
    }
}
