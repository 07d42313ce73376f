//! Dataset tooling: manifest parsing, 8-bit PNG image/mask IO, resizing to
//! the model resolution, a deterministic synthetic-shapes generator, and an
//! equidistant fisheye warp for desk-scale distortion experiments.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::PixelTargets;
use crate::tensor::{Real, Tensor};

/// One image/mask pair, image values in [0,1].
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// [C,H,W] with C = 1 or 3.
    pub image: Tensor,
    pub mask: PixelTargets,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    /// As written in the manifest; resolve against the manifest directory.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// On-disk dataset listing: class metadata plus image/mask path records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub ignore_index: Option<u8>,
    pub records: Vec<ManifestRecord>,
    base_dir: PathBuf,
}

impl DatasetManifest {
    /// Parses the tab-separated manifest format: header lines
    /// (`num_classes`, optional `class_names`, optional `ignore_index`)
    /// followed by one `image<TAB>mask` record per line. Referenced files
    /// must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };

        let mut num_classes = None;
        let mut class_names = Vec::new();
        let mut ignore_index = None;
        let mut records: Vec<ManifestRecord> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "num_classes" => {
                    let v = fields
                        .get(1)
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| parse_err(line_no, "bad num_classes value".into()))?;
                    if v < 2 {
                        return Err(parse_err(line_no, format!("num_classes must be >= 2, got {v}")));
                    }
                    num_classes = Some(v);
                }
                "class_names" => {
                    class_names = fields
                        .get(1)
                        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect())
                        .ok_or_else(|| parse_err(line_no, "empty class_names".into()))?;
                }
                "ignore_index" => {
                    ignore_index = Some(
                        fields
                            .get(1)
                            .and_then(|v| v.parse::<u8>().ok())
                            .ok_or_else(|| parse_err(line_no, "bad ignore_index value".into()))?,
                    );
                }
                _ => {
                    if fields.len() != 2 {
                        return Err(parse_err(
                            line_no,
                            format!("expected image<TAB>mask, got {} fields", fields.len()),
                        ));
                    }
                    let image_path = PathBuf::from(fields[0]);
                    let mask_path = PathBuf::from(fields[1]);
                    let id = image_path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .ok_or_else(|| parse_err(line_no, "image path has no file name".into()))?;
                    if records.iter().any(|r| r.id == id) {
                        return Err(parse_err(line_no, format!("duplicate sample id {id:?}")));
                    }
                    for rel in [&image_path, &mask_path] {
                        let full = base_dir.join(rel);
                        if !full.is_file() {
                            return Err(parse_err(
                                line_no,
                                format!("referenced file {} does not exist", full.display()),
                            ));
                        }
                    }
                    records.push(ManifestRecord {
                        id,
                        image_path,
                        mask_path,
                    });
                }
            }
        }
        let num_classes =
            num_classes.ok_or_else(|| parse_err(1, "missing num_classes header".into()))?;
        if !class_names.is_empty() && class_names.len() != num_classes {
            return Err(parse_err(
                1,
                format!(
                    "{} class names for {} classes",
                    class_names.len(),
                    num_classes
                ),
            ));
        }
        Ok(DatasetManifest {
            num_classes,
            class_names,
            ignore_index,
            records,
            base_dir,
        })
    }

    pub fn serialize(&self) -> String {
        let mut out = String::from("# dataset manifest\n");
        let _ = writeln!(out, "num_classes\t{}", self.num_classes);
        if !self.class_names.is_empty() {
            let _ = writeln!(out, "class_names\t{}", self.class_names.join(","));
        }
        if let Some(ig) = self.ignore_index {
            let _ = writeln!(out, "ignore_index\t{ig}");
        }
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}",
                r.image_path.display(),
                r.mask_path.display()
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Class name for display, falling back to `class<i>`.
    pub fn class_name(&self, i: usize) -> String {
        self.class_names
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("class{i}"))
    }
}

// ── PNG IO ───────────────────────────────────────────────────────────

struct DecodedPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    data: Vec<u8>,
    palette: Option<Vec<u8>>,
}

fn read_png(path: &Path) -> Result<DecodedPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: only 8-bit PNGs are supported, got {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    if info.width == 0 || info.height == 0 {
        return Err(Error::Data(format!("{}: zero-sized image", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        data: buf,
        palette: reader.info().palette.as_ref().map(|p| p.to_vec()),
    })
}

/// Decodes an image PNG to a [C,H,W] tensor in [0,1], C in {1,3}. Alpha is
/// dropped; indexed images expand through their palette.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let png = read_png(path)?;
    let (w, h) = (png.width, png.height);
    let hw = w * h;
    let to_real = |v: u8| v as Real / 255.0;
    let (channels, data): (usize, Vec<Real>) = match png.color {
        png::ColorType::Grayscale => (1, png.data.iter().map(|&v| to_real(v)).collect()),
        png::ColorType::GrayscaleAlpha => (
            1,
            png.data.chunks_exact(2).map(|px| to_real(px[0])).collect(),
        ),
        png::ColorType::Rgb | png::ColorType::Rgba => {
            let step = if png.color == png::ColorType::Rgb { 3 } else { 4 };
            let mut planes = vec![0.0; 3 * hw];
            for (p, px) in png.data.chunks_exact(step).enumerate() {
                for c in 0..3 {
                    planes[c * hw + p] = to_real(px[c]);
                }
            }
            (3, planes)
        }
        png::ColorType::Indexed => {
            let palette = png.palette.ok_or_else(|| {
                Error::Data(format!("{}: indexed PNG without palette", path.display()))
            })?;
            let mut planes = vec![0.0; 3 * hw];
            for (p, &idx) in png.data.iter().enumerate() {
                let base = idx as usize * 3;
                if base + 2 >= palette.len() {
                    return Err(Error::Data(format!(
                        "{}: palette index {idx} out of range",
                        path.display()
                    )));
                }
                for c in 0..3 {
                    planes[c * hw + p] = to_real(palette[base + c]);
                }
            }
            (3, planes)
        }
    };
    Tensor::new(&[channels, h, w], data)
}

/// Decodes a mask PNG to raw class indices. Grayscale masks use the gray
/// value, indexed masks the palette index. RGB-coded masks are rejected:
/// mapping colors to classes needs an explicit table, not a guess.
pub fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let png = read_png(path)?;
    match png.color {
        png::ColorType::Grayscale | png::ColorType::Indexed => {
            Ok((png.data, png.height, png.width))
        }
        other => Err(Error::Data(format!(
            "{}: mask color type {other:?} unsupported; use grayscale or \
             palette-indexed PNGs whose values are class indices",
            path.display()
        ))),
    }
}

/// Writes a [1|3,H,W] tensor in [0,1] as an 8-bit gray or RGB PNG.
pub fn save_image_png(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
        return Err(Error::Shape(format!(
            "save_image_png wants [1|3,H,W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let to_u8 = |v: Real| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut bytes = vec![0u8; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            bytes[p * c + ch] = to_u8(image.data()[ch * h * w + p]);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Writes class indices as a palette-indexed PNG.
pub fn save_mask_png(path: &Path, labels: &[u8], h: usize, w: usize, palette: &[[u8; 3]]) -> Result<()> {
    if labels.len() != h * w {
        return Err(Error::Shape(format!(
            "mask has {} labels for {h}x{w}",
            labels.len()
        )));
    }
    let flat: Vec<u8> = palette.iter().flatten().copied().collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(flat);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(labels)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

// ── Resizing ─────────────────────────────────────────────────────────

/// Bilinear resize of a [C,H,W] tensor with center-aligned sampling.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let shape = image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h == out_h && w == out_w {
        return image.clone();
    }
    let mut out = vec![0.0; c * out_h * out_w];
    let sy = h as Real / out_h as Real;
    let sx = w as Real / out_w as Real;
    for oy in 0..out_h {
        let fy = ((oy as Real + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as Real);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as Real;
        for ox in 0..out_w {
            let fx = ((ox as Real + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as Real);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as Real;
            for ch in 0..c {
                let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("sized")
}

/// Nearest-neighbor mask resize; labels are picked, never blended.
pub fn resize_nearest_mask(labels: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    if h == out_h && w == out_w {
        return labels.to_vec();
    }
    let sy = h as Real / out_h as Real;
    let sx = w as Real / out_w as Real;
    let mut out = vec![0u8; out_h * out_w];
    for oy in 0..out_h {
        let y = (((oy as Real + 0.5) * sy).floor() as usize).min(h - 1);
        for ox in 0..out_w {
            let x = (((ox as Real + 0.5) * sx).floor() as usize).min(w - 1);
            out[oy * out_w + ox] = labels[y * w + x];
        }
    }
    out
}

/// Loads one record: image scaled to [0,1] and bilinearly resized, mask
/// nearest-resized, labels validated against the manifest class count.
pub fn load_sample(
    manifest: &DatasetManifest,
    record: &ManifestRecord,
    target_size: usize,
) -> Result<Sample> {
    let image = load_image(&manifest.resolve(&record.image_path))?;
    let image = resize_bilinear(&image, target_size, target_size);
    let (labels, mh, mw) = load_mask(&manifest.resolve(&record.mask_path))?;
    let labels = resize_nearest_mask(&labels, mh, mw, target_size, target_size);
    let mask = PixelTargets::new(target_size, target_size, labels, manifest.ignore_index)?;
    mask.validate_classes(manifest.num_classes)?;
    Ok(Sample {
        id: record.id.clone(),
        image,
        mask,
    })
}

pub fn load_dataset(manifest: &DatasetManifest, target_size: usize) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| load_sample(manifest, r, target_size))
        .collect()
}

// ── Synthetic shapes ─────────────────────────────────────────────────

/// Analytic description of one generated shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeSpec {
    Circle {
        cy: Real,
        cx: Real,
        r: Real,
        class: u8,
    },
    Rect {
        y0: Real,
        x0: Real,
        y1: Real,
        x1: Real,
        class: u8,
    },
}

impl ShapeSpec {
    pub fn contains(&self, y: Real, x: Real) -> bool {
        match *self {
            ShapeSpec::Circle { cy, cx, r, .. } => {
                (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r
            }
            ShapeSpec::Rect { y0, x0, y1, x1, .. } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }

    pub fn class(&self) -> u8 {
        match *self {
            ShapeSpec::Circle { class, .. } | ShapeSpec::Rect { class, .. } => class,
        }
    }
}

/// Fill colors: background then foreground classes, repeating if needed.
const CLASS_FILLS: [[Real; 3]; 6] = [
    [0.22, 0.26, 0.23],
    [0.82, 0.31, 0.26],
    [0.28, 0.74, 0.36],
    [0.30, 0.42, 0.86],
    [0.88, 0.78, 0.25],
    [0.72, 0.32, 0.78],
];

fn class_fill(class: u8) -> [Real; 3] {
    CLASS_FILLS[class as usize % CLASS_FILLS.len()]
}

/// One generated scene: textured background (class 0) with filled circles
/// and rectangles painted over it in order. Returns the shape list so tests
/// can replay the analytic containment.
pub fn synth_scene(
    rng: &mut ChaCha8Rng,
    size: usize,
    num_classes: usize,
    id: String,
) -> (Sample, Vec<ShapeSpec>) {
    let s = size as Real;
    let num_shapes = rng.random_range(2..=4usize);
    let shapes: Vec<ShapeSpec> = (0..num_shapes)
        .map(|_| {
            let class = rng.random_range(1..(num_classes as u8).max(2));
            if rng.random_bool(0.5) {
                ShapeSpec::Circle {
                    cy: rng.random_range(0.2 * s..0.8 * s),
                    cx: rng.random_range(0.2 * s..0.8 * s),
                    r: rng.random_range(0.12 * s..0.28 * s),
                    class,
                }
            } else {
                let y0 = rng.random_range(0.05 * s..0.6 * s);
                let x0 = rng.random_range(0.05 * s..0.6 * s);
                ShapeSpec::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.random_range(0.15 * s..0.35 * s),
                    x1: x0 + rng.random_range(0.15 * s..0.35 * s),
                    class,
                }
            }
        })
        .collect();

    let hw = size * size;
    let mut image = vec![0.0; 3 * hw];
    let mut labels = vec![0u8; hw];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let (py, px) = (y as Real + 0.5, x as Real + 0.5);
            // Painter's order: the last covering shape wins.
            let label = shapes
                .iter()
                .rev()
                .find(|sh| sh.contains(py, px))
                .map(|sh| sh.class())
                .unwrap_or(0);
            labels[p] = label;
            let fill = class_fill(label);
            let shade = 0.06 * (px / s - 0.5); // mild illumination gradient
            for c in 0..3 {
                let noise: Real = rng.random_range(-0.03..0.03);
                image[c * hw + p] = (fill[c] + shade + noise).clamp(0.0, 1.0);
            }
        }
    }
    let sample = Sample {
        id,
        image: Tensor::new(&[3, size, size], image).expect("sized"),
        mask: PixelTargets::new(size, size, labels, None).expect("sized"),
    };
    (sample, shapes)
}

/// Deterministic synthetic dataset: `n` scenes of `size x size` pixels with
/// `num_classes - 1` foreground classes over a textured background.
pub fn synth_shapes(seed: u64, n: usize, size: usize, num_classes: usize) -> Result<Vec<Sample>> {
    if num_classes < 2 {
        return Err(Error::Config("synthetic dataset needs >= 2 classes".into()));
    }
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| synth_scene(&mut rng, size, num_classes, format!("synth_{i:04}")).0)
        .collect())
}

/// Writes samples as PNGs plus a manifest; returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    samples: &[Sample],
    num_classes: usize,
    class_names: &[String],
    ignore_index: Option<u8>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let palette: Vec<[u8; 3]> = (0..256)
        .map(|i| {
            let fill = class_fill(i as u8);
            [
                (fill[0] * 255.0) as u8,
                (fill[1] * 255.0) as u8,
                (fill[2] * 255.0) as u8,
            ]
        })
        .collect();
    let mut records = Vec::new();
    for s in samples {
        let image_rel = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask_rel = PathBuf::from("masks").join(format!("{}.png", s.id));
        save_image_png(&dir.join(&image_rel), &s.image)?;
        let (h, w) = s.mask.size();
        save_mask_png(&dir.join(&mask_rel), s.mask.labels(), h, w, &palette)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            image_path: image_rel,
            mask_path: mask_rel,
        });
    }
    let manifest = DatasetManifest {
        num_classes,
        class_names: class_names.to_vec(),
        ignore_index,
        records,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.tsv");
    manifest.save(&path)?;
    Ok(path)
}

// ── Fisheye warp ─────────────────────────────────────────────────────

/// Equidistant fisheye model: a source ray at radius r lands at
/// `f * atan(r / f)` in the distorted image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisheyeParams {
    pub cy: Real,
    pub cx: Real,
    pub f: Real,
}

impl FisheyeParams {
    /// Centered on the image with the given focal-like scale.
    pub fn centered(h: usize, w: usize, f: Real) -> Self {
        FisheyeParams {
            cy: (h as Real - 1.0) / 2.0,
            cx: (w as Real - 1.0) / 2.0,
            f,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(self.f > 0.0) {
            return Err(Error::Config(format!("fisheye f must be > 0, got {}", self.f)));
        }
        if self.cy < 0.0 || self.cy > (h - 1) as Real || self.cx < 0.0 || self.cx > (w - 1) as Real {
            return Err(Error::Config(format!(
                "fisheye center ({}, {}) outside {h}x{w} image",
                self.cy, self.cx
            )));
        }
        Ok(())
    }

    /// Destination radius of a source radius.
    pub fn distort_radius(&self, r_src: Real) -> Real {
        self.f * (r_src / self.f).atan()
    }

    /// Source radius of a destination radius; `None` past the horizon.
    pub fn undistort_radius(&self, r_dst: Real) -> Option<Real> {
        let a = r_dst / self.f;
        if a >= std::f64::consts::FRAC_PI_2 as Real {
            None
        } else {
            Some(self.f * a.tan())
        }
    }
}

/// Inverse-mapped fisheye warp. Image pixels sample the source bilinearly,
/// mask pixels by nearest neighbor; destinations whose source falls outside
/// the image get zero intensity and the ignore label.
pub fn fisheye_warp(sample: &Sample, params: &FisheyeParams) -> Result<Sample> {
    let shape = sample.image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    params.validate(h, w)?;
    let ignore = sample.mask.ignore_index().unwrap_or(255);

    let hw = h * w;
    let mut image = vec![0.0; c * hw];
    let mut labels = vec![ignore; hw];
    for y in 0..h {
        for x in 0..w {
            let dy = y as Real - params.cy;
            let dx = x as Real - params.cx;
            let r_dst = (dy * dy + dx * dx).sqrt();
            let (sy, sx) = if r_dst == 0.0 {
                (params.cy, params.cx)
            } else {
                match params.undistort_radius(r_dst) {
                    Some(r_src) => {
                        let scale = r_src / r_dst;
                        (params.cy + dy * scale, params.cx + dx * scale)
                    }
                    None => continue,
                }
            };
            if sy < 0.0 || sy > (h - 1) as Real || sx < 0.0 || sx > (w - 1) as Real {
                continue;
            }
            let p = y * w + x;
            // Bilinear for intensities.
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let (wy, wx) = (sy - y0 as Real, sx - x0 as Real);
            for ch in 0..c {
                let plane = &sample.image.data()[ch * hw..(ch + 1) * hw];
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                image[ch * hw + p] = top * (1.0 - wy) + bot * wy;
            }
            // Nearest for labels.
            let ny = (sy.round() as usize).min(h - 1);
            let nx = (sx.round() as usize).min(w - 1);
            labels[p] = sample.mask.label(ny, nx);
        }
    }
    Ok(Sample {
        id: sample.id.clone(),
        image: Tensor::new(&[c, h, w], image).expect("sized"),
        mask: PixelTargets::new(h, w, labels, Some(ignore)).expect("sized"),
    })
}
