//! Dataset ingestion (IDX files, rasterized toy densities) and emission of
//! PGM images and metric CSVs.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numkit::{Shape, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Points rasterized per toy image, and the level each point adds.
pub const TOY_POINTS: usize = 16;
pub const TOY_LEVEL_STEP: u32 = 64;

/// Raw unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn idx_parse(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("IDX header truncated: {} bytes", bytes.len())));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::Format(format!("bad IDX magic 0x{other:08x}"))),
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "IDX header truncated: expected {header} bytes, found {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let found = bytes.len() - header;
    if found != expected {
        return Err(Error::Format(format!(
            "IDX payload truncated or oversized: expected {expected} bytes, found {found}"
        )));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn idx_read(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    idx_parse(&bytes)
}

pub fn idx_encode(array: &IdxArray) -> Vec<u8> {
    let mut out = array.magic.to_be_bytes().to_vec();
    for &d in &array.dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend(&array.data);
    out
}

pub fn idx_write(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, idx_encode(array)).map_err(|e| Error::io(path.display(), e))
}

/// Non-overlapping `factor × factor` block means.
pub fn downscale_area(x: &Tensor, factor: usize) -> Result<Tensor> {
    let s = x.shape();
    if factor == 0 || s.h() % factor != 0 || s.w() % factor != 0 {
        return Err(Error::Config(format!("cannot downscale {s} by {factor}")));
    }
    let os = Shape::new(s.b(), s.c(), s.h() / factor, s.w() / factor);
    let norm = (factor * factor) as f64;
    Ok(Tensor::from_fn(os, |[b, c, i, j]| {
        let mut acc = 0.0;
        for di in 0..factor {
            for dj in 0..factor {
                acc += x.get(b, c, factor * i + di, factor * j + dj);
            }
        }
        acc / norm
    }))
}

/// `(k + u) / 256` for the given uniform offsets `u ∈ [0, 1)`.
pub fn dequantize_with(levels: &Tensor, u: &Tensor) -> Result<Tensor> {
    if let Some(k) = levels
        .data()
        .iter()
        .position(|&v| !(0.0..=255.0).contains(&v) || v.fract() != 0.0)
    {
        return Err(Error::domain(
            "dequantize",
            format!("level {} at index {k} is not an integer in [0, 255]", levels.data()[k]),
        ));
    }
    // k + u can round up to 256 for u within an ulp of 1
    let below_one = 1.0 - f64::EPSILON / 2.0;
    levels.zip_map(u, |k, u| ((k + u) / 256.0).min(below_one))
}

pub fn dequantize(levels: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let u = Tensor::uniform(levels.shape(), 0.0, 1.0, rng);
    dequantize_with(levels, &u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyDensity {
    CheckerDensity,
    TwoMoons,
    Rings,
}

impl ToyDensity {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "checker-density" => Ok(ToyDensity::CheckerDensity),
            "two-moons" => Ok(ToyDensity::TwoMoons),
            "rings" => Ok(ToyDensity::Rings),
            other => Err(Error::Config(format!("unknown toy dataset {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyDensity::CheckerDensity => "checker-density",
            ToyDensity::TwoMoons => "two-moons",
            ToyDensity::Rings => "rings",
        }
    }

    /// One point of the unit square `[0, 1)²` as (row, col) coordinates.
    pub fn draw(self, rng: &mut impl Rng) -> (f64, f64) {
        loop {
            let (u, v) = match self {
                ToyDensity::CheckerDensity => {
                    // uniform over the 8 cells with even parity of a 4x4 board
                    let cell = rng.gen_range(0..8usize);
                    let r = cell / 2;
                    let c = 2 * (cell % 2) + r % 2;
                    ((r as f64 + rng.gen::<f64>()) / 4.0, (c as f64 + rng.gen::<f64>()) / 4.0)
                }
                ToyDensity::TwoMoons => {
                    let t = PI * rng.gen::<f64>();
                    let (x, y) = if rng.gen::<bool>() {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    let (x, y) = (x + 0.08 * nx, y + 0.08 * ny);
                    ((1.2 - y) / 2.4, (x + 1.4) / 3.8)
                }
                ToyDensity::Rings => {
                    let radius = if rng.gen::<bool>() { 0.18 } else { 0.38 };
                    let t = 2.0 * PI * rng.gen::<f64>();
                    let n: f64 = rng.sample(StandardNormal);
                    let r = radius + 0.025 * n;
                    (0.5 + r * t.sin(), 0.5 + r * t.cos())
                }
            };
            if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                return (u, v);
            }
        }
    }
}

/// Whether a point lies in a high cell of the 4x4 checker density.
pub fn checker_high(u: f64, v: f64) -> bool {
    let (r, c) = ((u * 4.0) as usize, (v * 4.0) as usize);
    (r + c) % 2 == 0
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Toy2d(ToyDensity),
    IdxImages,
}

/// Integer images in (N, C, H, W) with levels 0..=255.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub source: String,
    pub levels: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.levels.shape().b()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> Shape {
        self.levels.shape().with_batch(1)
    }

    pub fn from_idx(array: &IdxArray, source: &str) -> Result<Self> {
        if array.magic != IDX_IMAGES_MAGIC {
            return Err(Error::Format(format!(
                "{source}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{:08x}",
                array.magic
            )));
        }
        let shape = Shape::new(array.dims[0], 1, array.dims[1], array.dims[2]);
        Ok(Dataset {
            kind: DatasetKind::IdxImages,
            source: source.to_string(),
            levels: Tensor::new(shape, array.data.iter().map(|&b| b as f64).collect())?,
        })
    }

    pub fn load_idx(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_idx(&idx_read(path)?, &path.display().to_string())
    }

    /// Block-mean downscaling, re-quantized to integer levels.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let small = downscale_area(&self.levels, factor)?.map(|v| v.round().clamp(0.0, 255.0));
        Ok(Dataset {
            kind: self.kind.clone(),
            source: format!("{}@/{factor}", self.source),
            levels: small,
        })
    }

    /// Dequantized images `indices`.
    pub fn batch(&self, indices: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
        let parts = indices
            .iter()
            .map(|&i| {
                if i >= self.len() {
                    Err(Error::Config(format!("sample {i} out of {}", self.len())))
                } else {
                    Ok(self.levels.batch_slice(i, 1))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        dequantize(&Tensor::concat_batch(&parts)?, rng)
    }

    /// Seeded minibatch of `size` uniformly drawn samples.
    pub fn random_batch(&self, size: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..self.len())).collect();
        self.batch(&idx, rng)
    }
}

/// `n` single-channel `resolution²` images, each rasterizing [`TOY_POINTS`]
/// draws of the density with [`TOY_LEVEL_STEP`] levels per hit (saturating).
pub fn toy2d_grid(name: &str, resolution: usize, n: usize, seed: u64) -> Result<Dataset> {
    let density = ToyDensity::from_name(name)?;
    if resolution != 8 && resolution != 16 {
        return Err(Error::Config(format!("toy resolution must be 8 or 16, got {resolution}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(n, 1, resolution, resolution);
    let mut levels = vec![0u32; shape.numel()];
    for b in 0..n {
        for _ in 0..TOY_POINTS {
            let (u, v) = density.draw(&mut rng);
            let (i, j) = ((u * resolution as f64) as usize, (v * resolution as f64) as usize);
            let k = shape.offset(b, 0, i, j);
            levels[k] = (levels[k] + TOY_LEVEL_STEP).min(255);
        }
    }
    Ok(Dataset {
        kind: DatasetKind::Toy2d(density),
        source: format!("toy2d:{name}"),
        levels: Tensor::new(shape, levels.into_iter().map(f64::from).collect())?,
    })
}

/// Byte for a [0, 1) intensity: `round(255 v)`, clamped.
pub fn intensity_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn pgm_encode(x: &Tensor) -> Result<Vec<u8>> {
    let s = x.shape();
    if s.b() != 1 || s.c() != 1 {
        return Err(Error::ShapeMismatch {
            op: "pgm",
            left: s,
            right: Shape::new(1, 1, s.h(), s.w()),
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", s.w(), s.h()).into_bytes();
    out.extend(x.data().iter().map(|&v| intensity_byte(v)));
    Ok(out)
}

pub fn pgm_write(x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pgm_encode(x)?).map_err(|e| Error::io(path.display(), e))
}

/// Parse a P5 image with maxval 255 as (1, 1, H, W) bytes.
pub fn pgm_decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("PGM header truncated at byte {pos}")));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PGM header {} / maxval {}", fields[0], fields[3])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM dimension {s:?}")));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(Error::Format(format!("PGM payload: expected {} bytes, found {}", w * h, body.len())));
    }
    Ok((h, w, body.to_vec()))
}

/// Tile a (N, 1, H, W) batch into one (1, 1, rows·H, cols·W) image; missing
/// tiles stay black.
pub fn tile_grid(x: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.c() != 1 || rows * cols < s.b() {
        return Err(Error::Config(format!("cannot tile {s} into {rows}x{cols}")));
    }
    let (h, w) = (s.h(), s.w());
    Ok(Tensor::from_fn(Shape::new(1, 1, rows * h, cols * w), |[_, _, i, j]| {
        let b = (i / h) * cols + j / w;
        if b < s.b() {
            x.get(b, 0, i % h, j % w)
        } else {
            0.0
        }
    }))
}

/// One training-metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub nll: f64,
    pub bpd: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: [&str; 5] = ["iter", "nll", "bpd", "grad_norm", "wall_ms"];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.display(), io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Append rows of string fields, writing `header` first when the file is new or empty.
pub fn csv_append_records(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display(), e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| csv_error(path, e))?;
    }
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.display(), e))
}

pub fn csv_append(row: &MetricsRow, path: impl AsRef<Path>) -> Result<()> {
    let fields = vec![
        row.iter.to_string(),
        format!("{:?}", row.nll),
        format!("{:?}", row.bpd),
        format!("{:?}", row.grad_norm),
        format!("{:?}", row.wall_ms),
    ];
    csv_append_records(path, &METRICS_HEADER, &[fields])
}

pub fn csv_read(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::Format(format!("{}: unexpected metrics header", path.display())));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |f: &str| Error::Format(format!("{}: row {}: bad field {f:?}", path.display(), line + 1));
        let num = |k: usize| rec.get(k).ok_or_else(|| bad("<missing>")).and_then(|f| f.parse::<f64>().map_err(|_| bad(f)));
        let iter = rec.get(0).unwrap_or("").parse::<u64>().map_err(|_| bad(rec.get(0).unwrap_or("")))?;
        rows.push(MetricsRow {
            iter,
            nll: num(1)?,
            bpd: num(2)?,
            grad_norm: num(3)?,
            wall_ms: num(4)?,
        });
    }
    Ok(rows)
}

/// Write bytes to `path`, creating parent directories.
pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display(), e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
    f.write_all(bytes).map_err(|e| Error::io(path.display(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0, 4];
        b.extend((0u8..32).map(|v| v * 7));
        b
    }

    #[test]
    fn idx_handcrafted_fixture() {
        let a = idx_parse(&fixture()).unwrap();
        let d = Dataset::from_idx(&a, "fixture").unwrap();
        assert_eq!(d.levels.shape(), Shape::new(2, 1, 4, 4));
        assert_eq!(d.levels.get(1, 0, 3, 3), 31.0 * 7.0);
    }

    #[test]
    fn idx_errors() {
        let mut bad = fixture();
        bad[3] = 2;
        let e = idx_parse(&bad).unwrap_err().to_string();
        assert!(e.contains("0x00000802"), "{e}");
        let short = &fixture()[..40];
        let e = idx_parse(short).unwrap_err().to_string();
        assert!(e.contains("expected 32") && e.contains("found 24"), "{e}");
        assert!(matches!(idx_parse(&[0, 0]), Err(Error::Format(_))));
    }

    #[test]
    fn idx_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.idx");
        let a = idx_parse(&fixture()).unwrap();
        idx_write(&p, &a).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fixture());
        assert_eq!(idx_read(&p).unwrap(), a);
        let labels = IdxArray {
            magic: IDX_LABELS_MAGIC,
            dims: vec![3],
            data: vec![1, 2, 3],
        };
        assert_eq!(idx_parse(&idx_encode(&labels)).unwrap(), labels);
    }

    #[test]
    fn downscale_examples() {
        let c = Tensor::full(Shape::new(1, 1, 4, 4), 3.5);
        assert_eq!(downscale_area(&c, 2).unwrap(), Tensor::full(Shape::new(1, 1, 2, 2), 3.5));
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        assert_eq!(downscale_area(&x, 2).unwrap().item(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Tensor::randn(Shape::new(2, 1, 6, 6), 1.0, &mut rng);
        let d = downscale_area(&r, 3).unwrap();
        assert!((d.sum() / 8.0 - r.sum() / 72.0).abs() < 1e-12);
        assert!(downscale_area(&r, 4).is_err());
    }

    #[test]
    fn dequantize_bounds() {
        let k = Tensor::new(Shape::new(1, 1, 1, 2), vec![255.0, 7.0]).unwrap();
        let u = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0 - f64::EPSILON / 2.0, 0.0]).unwrap();
        let v = dequantize_with(&k, &u).unwrap();
        assert!(v.data()[0] < 1.0);
        assert_eq!(v.data()[1], 7.0 / 256.0);
        let a = dequantize(&k, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = dequantize(&k, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let bad = Tensor::new(Shape::new(1, 1, 1, 1), vec![256.0]).unwrap();
        assert!(dequantize(&bad, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn toy_determinism_and_support() {
        let a = toy2d_grid("checker-density", 8, 50, 1).unwrap();
        let b = toy2d_grid("checker-density", 8, 50, 1).unwrap();
        let c = toy2d_grid("checker-density", 8, 50, 2).unwrap();
        assert_eq!(a.levels, b.levels);
        assert_ne!(a.levels, c.levels);
        for k in 0..a.levels.data().len() {
            let [_, _, i, j] = a.levels.shape().unravel(k);
            if !checker_high((i as f64 + 0.5) / 8.0, (j as f64 + 0.5) / 8.0) {
                assert_eq!(a.levels.data()[k], 0.0);
            }
        }
        for name in ["two-moons", "rings"] {
            let d = toy2d_grid(name, 16, 4, 0).unwrap();
            assert_eq!(d.levels.shape(), Shape::new(4, 1, 16, 16));
            assert!(d.levels.sum() > 0.0);
        }
        assert!(toy2d_grid("spiral", 8, 1, 0).is_err());
        assert!(toy2d_grid("rings", 12, 1, 0).is_err());
    }

    #[test]
    fn pgm_examples() {
        let z = pgm_encode(&Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
        assert_eq!(z, b"P5\n2 2\n255\n\0\0\0\0");
        assert_eq!(intensity_byte(0.5), 128);
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 2), |[_, _, i, j]| (i * 2 + j) as f64 / 6.0);
        let (h, w, body) = pgm_decode(&pgm_encode(&x).unwrap()).unwrap();
        assert_eq!((h, w), (3, 2));
        for (b, v) in body.iter().zip(x.data()) {
            assert_eq!(*b, intensity_byte(*v));
        }
    }

    #[test]
    fn csv_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            MetricsRow { iter: 1, nll: 1.25, bpd: 9.3257, grad_norm: 0.1 + 0.2, wall_ms: 3.0 },
            MetricsRow { iter: 2, nll: -1e-300, bpd: 8.0, grad_norm: 1e10, wall_ms: 0.0 },
        ];
        for r in &rows {
            csv_append(r, &p).unwrap();
        }
        assert_eq!(csv_read(&p).unwrap(), rows);
    }

    #[test]
    fn tiles() {
        let x = Tensor::from_fn(Shape::new(3, 1, 2, 2), |[b, _, _, _]| b as f64);
        let g = tile_grid(&x, 2, 2).unwrap();
        assert_eq!(g.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(g.get(0, 0, 3, 1), 2.0);
        assert_eq!(g.get(0, 0, 3, 3), 0.0);
    }
}
