//! Endpoint density loading and result file output.
//!
//! Inputs are grayscale PGM (`P2` or `P5`) or a plain CSV matrix. Image row
//! `i` maps to the cells with `y` in `[i h, (i+1) h]`, column `j` to `x` in
//! `[j h, (j+1) h]`. Outputs are plain-text PGM frames, CSV matrices and CSV
//! logs with fixed 17-significant-digit formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::assembly::BoundaryData;
use crate::energy::time_profiles;
use crate::mesh::{SpaceTimeMesh, State};
use crate::solver::IterationStats;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: unsupported format ({reason})")]
    UnsupportedFormat { path: String, reason: String },
    #[error("{path}: negative value {value} at row {row}, column {col}")]
    NegativeValue { path: String, value: f64, row: usize, col: usize },
    #[error("{path}: image has no pixels")]
    EmptyImage { path: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.display().to_string(), source }
}

/// Raw grayscale samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// PGM maxval; `None` for CSV input.
    pub maxval: Option<u32>,
    pub pixels: Vec<f64>,
}

impl RawImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Parses a `P2` or `P5` PGM image.
pub fn parse_pgm(bytes: &[u8], path: &str) -> Result<RawImage, IoError> {
    let unsupported = |reason: &str| IoError::UnsupportedFormat { path: path.to_string(), reason: reason.to_string() };
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Option<String> {
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
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos).ok_or_else(|| unsupported("empty file"))?;
    if magic != "P2" && magic != "P5" {
        return Err(unsupported(&format!("magic '{magic}' is not P2 or P5")));
    }
    let mut header = [0usize; 3];
    for h in header.iter_mut() {
        let t = token(&mut pos).ok_or_else(|| unsupported("truncated header"))?;
        *h = t.parse().map_err(|_| unsupported(&format!("bad header field '{t}'")))?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 65535 {
        return Err(unsupported(&format!("maxval {maxval} outside 1..=65535")));
    }
    if width == 0 || height == 0 {
        return Err(IoError::EmptyImage { path: path.to_string() });
    }
    let n = width * height;
    let mut pixels = Vec::with_capacity(n);
    if magic == "P2" {
        for _ in 0..n {
            let t = token(&mut pos).ok_or_else(|| unsupported("missing pixel data"))?;
            let v: u32 = t.parse().map_err(|_| unsupported(&format!("bad pixel '{t}'")))?;
            pixels.push(v as f64);
        }
    } else {
        // exactly one whitespace byte separates maxval from the raster
        pos += 1;
        let bps = if maxval < 256 { 1 } else { 2 };
        let data = bytes.get(pos..pos + n * bps).ok_or_else(|| unsupported("truncated raster"))?;
        if bps == 1 {
            pixels.extend(data.iter().map(|&b| b as f64));
        } else {
            pixels.extend(data.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64));
        }
    }
    if pixels.iter().any(|&v| v > maxval as f64) {
        return Err(unsupported("pixel exceeds maxval"));
    }
    Ok(RawImage { width, height, maxval: Some(maxval as u32), pixels })
}

/// Parses a CSV matrix of reals. Rows end at newlines or `;`; a leading
/// non-numeric header row is skipped.
pub fn parse_csv_matrix(text: &str, path: &str) -> Result<RawImage, IoError> {
    let unsupported = |reason: String| IoError::UnsupportedFormat { path: path.to_string(), reason };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.split(['\n', ';']).enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() && i == 0 => continue,
            Err(_) => return Err(unsupported(format!("row {} is not a list of numbers", rows.len() + 1))),
        }
    }
    let height = rows.len();
    let width = rows.first().map_or(0, |r| r.len());
    if height == 0 || width == 0 {
        return Err(IoError::EmptyImage { path: path.to_string() });
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(unsupported("rows have different lengths".to_string()));
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(IoError::NegativeValue { path: path.to_string(), value: v, row: r, col: c });
            }
        }
    }
    Ok(RawImage { width, height, maxval: None, pixels: rows.concat() })
}

pub fn read_image(path: &Path) -> Result<RawImage, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        parse_pgm(&bytes, &name)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(IoError::UnsupportedFormat { path: name, reason: "only grayscale PGM (P2/P5) is supported".into() })
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| IoError::UnsupportedFormat { path: name.clone(), reason: "not PGM and not UTF-8 CSV".into() })?;
        parse_csv_matrix(&text, &name)
    }
}

/// Overlap weights of source samples `0..len` for each of `n` equal target intervals.
fn axis_weights(len: usize, n: usize) -> Vec<Vec<(usize, f64)>> {
    let width = len as f64 / n as f64;
    (0..n)
        .map(|j| {
            let (a, b) = (j as f64 * width, (j + 1) as f64 * width);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(len);
            (first..last)
                .filter_map(|p| {
                    let overlap = (b.min(p as f64 + 1.0) - a.max(p as f64)).max(0.0);
                    (overlap > 0.0).then_some((p, overlap / width))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted average of the image onto `nx x nx` cells, row-major.
pub fn resample(img: &RawImage, nx: usize) -> Vec<f64> {
    let wy = axis_weights(img.height, nx);
    let wx = axis_weights(img.width, nx);
    let mut out = Vec::with_capacity(nx * nx);
    for row in &wy {
        for col in &wx {
            let mut acc = 0.0;
            for &(pr, a) in row {
                for &(pc, b) in col {
                    acc += a * b * img.get(pr, pc);
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Loads a density as per-triangle values (both triangles of a cell share the
/// cell value). PGM samples map `maxval -> scale` (scale defaults to 1);
/// CSV values are multiplied by `scale`. No mass normalization is applied.
pub fn load_density(path: &Path, nx: usize, scale: Option<f64>) -> Result<Vec<f64>, IoError> {
    let img = read_image(path)?;
    let factor = scale.unwrap_or(1.0) / img.maxval.map_or(1.0, |m| m as f64);
    Ok(resample(&img, nx).into_iter().flat_map(|v| [v * factor, v * factor]).collect())
}

/// Fixed float formatting of all CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Plain-text PGM of `values` (row-major `width x height`) mapped through `to_unit` into `[0, maxval]`.
pub fn pgm_p2(width: usize, height: usize, maxval: u32, values: &[f64], to_unit: impl Fn(f64) -> f64) -> String {
    let mut s = format!("P2\n{width} {height}\n{maxval}\n");
    for row in values.chunks(width) {
        let line: Vec<String> =
            row.iter().map(|&v| ((to_unit(v).clamp(0.0, 1.0) * maxval as f64).round() as u32).to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    debug_assert_eq!(values.len(), width * height);
    s
}

pub fn csv_matrix(width: usize, values: &[f64]) -> String {
    let mut s = (0..width).map(|c| format!("c{c}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in values.chunks(width) {
        s.push_str(&row.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

pub fn trace_csv(stats: &[IterationStats]) -> String {
    let mut s = String::from("iter,residual,energy,transport,source,mass_defect\n");
    for st in stats {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            st.iter,
            fmt_f64(st.fixed_point_residual),
            fmt_f64(st.energy),
            fmt_f64(st.transport_energy),
            fmt_f64(st.source_energy),
            fmt_f64(st.mass_balance_defect)
        );
    }
    s
}

pub fn profiles_csv(state: &State, mesh: &SpaceTimeMesh) -> String {
    let mut s = String::from("t,mass,src_abs,src_pos,src_neg\n");
    for p in time_profiles(state, mesh) {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt_f64(p.t),
            fmt_f64(p.mass),
            fmt_f64(p.src_abs),
            fmt_f64(p.src_pos),
            fmt_f64(p.src_neg)
        );
    }
    s
}

/// Per-cell values of slab `j`: mean over the six tetrahedra of the cell.
pub fn slab_cells(mesh: &SpaceTimeMesh, field: &[f64], j: usize) -> Vec<f64> {
    let per = mesh.tets_per_slab();
    field[j * per..(j + 1) * per].chunks(6).map(|c| c.iter().sum::<f64>() / 6.0).collect()
}

fn triangle_cells(values: &[f64]) -> Vec<f64> {
    values.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect()
}

/// Density per cell at every time node: the endpoint data at `t = 0, 1` and
/// the mean of the adjacent slabs in between.
pub fn density_frames(mesh: &SpaceTimeMesh, state: &State, bdata: &BoundaryData) -> Vec<Vec<f64>> {
    let nt = mesh.nt();
    let slabs: Vec<Vec<f64>> = (0..nt).map(|j| slab_cells(mesh, &state.rho, j)).collect();
    (0..=nt)
        .map(|k| match k {
            0 => triangle_cells(&bdata.ua),
            k if k == nt => triangle_cells(&bdata.ub),
            k => slabs[k - 1].iter().zip(&slabs[k]).map(|(a, b)| 0.5 * (a + b)).collect(),
        })
        .collect()
}

/// Mean `|m|` per cell of every slab.
pub fn momentum_frames(mesh: &SpaceTimeMesh, state: &State) -> Vec<Vec<f64>> {
    let mag: Vec<f64> = state.m[0].iter().zip(state.m[1].iter()).map(|(a, b)| a.hypot(*b)).collect();
    (0..mesh.nt()).map(|j| slab_cells(mesh, &mag, j)).collect()
}

/// Nodal source values of every time node, as a square grid of spatial dofs.
pub fn source_frames(mesh: &SpaceTimeMesh, state: &State) -> Vec<Vec<f64>> {
    state.z.chunks(mesh.n_spatial()).map(|c| c.to_vec()).collect()
}

fn max_abs(frames: &[Vec<f64>]) -> f64 {
    frames.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Normalization constants used for the PGM frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScales {
    pub density: f64,
    pub momentum: f64,
    pub source: f64,
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes density, momentum and source frames, `trace.csv` and `profiles.csv` into `outdir`.
pub fn write_outputs(
    mesh: &SpaceTimeMesh,
    bdata: &BoundaryData,
    state: &State,
    stats: &[IterationStats],
    outdir: &Path,
) -> Result<FrameScales, IoError> {
    fs::create_dir_all(outdir).map_err(io_err(outdir))?;
    let nx = mesh.nx();
    let side = (mesh.n_spatial() as f64).sqrt().round() as usize;
    let density = density_frames(mesh, state, bdata);
    let momentum = momentum_frames(mesh, state);
    let source = source_frames(mesh, state);
    let scales = FrameScales { density: max_abs(&density), momentum: max_abs(&momentum), source: max_abs(&source) };
    let unit = |norm: f64| move |v: f64| if norm > 0.0 { v / norm } else { 0.0 };
    let signed = |norm: f64| move |v: f64| if norm > 0.0 { 0.5 * (v / norm + 1.0) } else { 0.5 };
    let out = |name: String| -> PathBuf { outdir.join(name) };

    for (k, f) in density.iter().enumerate() {
        write_file(&out(format!("frame_{k:03}.pgm")), &pgm_p2(nx, nx, 255, f, unit(scales.density)))?;
        write_file(&out(format!("frame_{k:03}.csv")), &csv_matrix(nx, f))?;
    }
    for (j, f) in momentum.iter().enumerate() {
        write_file(&out(format!("momentum_{j:03}.pgm")), &pgm_p2(nx, nx, 255, f, unit(scales.momentum)))?;
        write_file(&out(format!("momentum_{j:03}.csv")), &csv_matrix(nx, f))?;
    }
    for (k, f) in source.iter().enumerate() {
        write_file(&out(format!("source_{k:03}.pgm")), &pgm_p2(side, side, 255, f, signed(scales.source)))?;
        write_file(&out(format!("source_{k:03}.csv")), &csv_matrix(side, f))?;
    }
    write_file(&out("trace.csv".into()), &trace_csv(stats))?;
    write_file(&out("profiles.csv".into()), &profiles_csv(state, mesh))?;
    Ok(scales)
}

/// Ordered `key=value` manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Self {
        let mut m = Manifest::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                m.set(k.trim(), v.trim());
            }
        }
        m
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        write_file(path, &self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_cells_copy_to_triangles() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "1,0\n0,1\n").unwrap();
        assert_eq!(load_density(&p, 2, None).unwrap(), vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        fs::write(&p, "1,0;0,1").unwrap();
        assert_eq!(load_density(&p, 2, None).unwrap(), vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_pgm_is_unit_density() {
        let img = parse_pgm(b"P2\n# comment\n3 2\n200\n200 200 200\n200 200 200\n", "x").unwrap();
        let cells = resample(&img, 4);
        assert!(cells.iter().all(|&v| (v - 200.0).abs() < 1e-12));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.pgm");
        let mut raw = b"P5 4 4 65535\n".to_vec();
        for _ in 0..16 {
            raw.extend_from_slice(&65535u16.to_be_bytes());
        }
        fs::write(&p, raw).unwrap();
        let d = load_density(&p, 2, None).unwrap();
        assert!(d.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let mass: f64 = d.iter().sum::<f64>() * 0.5 * 0.25;
        assert!((mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn downsampling_averages_blocks() {
        let img = RawImage { width: 4, height: 4, maxval: None, pixels: (0..16).map(|v| v as f64).collect() };
        let cells = resample(&img, 2);
        assert_eq!(cells, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn uneven_resampling_preserves_mean() {
        let img = RawImage { width: 5, height: 3, maxval: None, pixels: (0..15).map(|v| (v * v) as f64).collect() };
        let cells = resample(&img, 4);
        let mean_in = img.pixels.iter().sum::<f64>() / 15.0;
        let mean_out = cells.iter().sum::<f64>() / 16.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(parse_csv_matrix("1,-2\n3,4", "x"), Err(IoError::NegativeValue { row: 0, col: 1, .. })));
        assert!(matches!(parse_csv_matrix("", "x"), Err(IoError::EmptyImage { .. })));
        assert!(matches!(parse_csv_matrix("1,2\n3", "x"), Err(IoError::UnsupportedFormat { .. })));
        assert!(matches!(parse_pgm(b"P2 0 3 255\n", "x"), Err(IoError::EmptyImage { .. })));
        assert!(matches!(parse_pgm(b"P2 1 1 70000\n1", "x"), Err(IoError::UnsupportedFormat { .. })));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        fs::write(&p, b"P6 1 1 255\n\x00\x00\x00").unwrap();
        assert!(matches!(read_image(&p), Err(IoError::UnsupportedFormat { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::default();
        m.set("nx", 64);
        m.set("source", "l2huber");
        m.set("nx", 32);
        assert_eq!(m.render(), "nx=32\nsource=l2huber\n");
        assert_eq!(Manifest::parse(&m.render()), m);
    }

    #[test]
    fn float_format_is_fixed() {
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
