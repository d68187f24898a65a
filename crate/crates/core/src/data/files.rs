//! Binary tensor files, PGM images, and manifest-driven dataset loading.
//!
//! Tensor file layout (little-endian throughout):
//!
//! ```text
//! offset 0   magic  "MFTN" (4 bytes)
//! offset 4   version u32 (currently 1)
//! offset 8   dtype  u32 (1 = f32, 2 = f64, 3 = u8)
//! offset 12  rank   u32
//! offset 16  dims   u64 * rank
//! then       payload, row-major
//! ```
//!
//! Writes always emit f64; reads accept all three dtypes, widening f32 and
//! normalizing u8 by 255 into [0, 1].

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, GeneratedData, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MFTN";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const DTYPE_F64: u32 = 2;
const DTYPE_U8: u32 = 3;

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Write a tensor as an f64 tensor file.
pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.shape().len() + 8 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F64.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Write values in [0, 1] as a u8 tensor file (quantized by 255).
pub fn write_tensor_u8(t: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.shape().len() + t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_U8.to_le_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a tensor file into an f64 tensor.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tensor(&bytes)
}

fn parse_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let dtype = r.u32("dtype")?;
    let elem_size = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        DTYPE_U8 => 1,
        other => return Err(format_err(8, format!("unknown dtype code {other}"))),
    };
    let rank = r.u32("rank")? as usize;
    if rank > 8 {
        return Err(format_err(12, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = r.u64(&format!("dim {i}"))?;
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let payload_offset = r.pos as u64;
    let expected = numel * elem_size;
    let actual = bytes.len() - r.pos;
    if actual != expected {
        return Err(format_err(
            payload_offset,
            format!("payload length mismatch: expected {expected} bytes for shape {shape:?}, found {actual}"),
        ));
    }
    let payload = r.take(expected, "payload")?;
    let data: Vec<f64> = match dtype {
        DTYPE_F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DTYPE_F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DTYPE_U8 => payload.iter().map(|&b| b as f64 / 255.0).collect(),
        _ => unreachable!(),
    };
    Ok(Tensor::new(shape, data))
}

/// Read an 8-bit binary PGM (P5) into `[H, W]` values in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err(0, "not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2usize;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(format_err(pos as u64, "expected integer in PGM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields.push(text.parse::<usize>().map_err(|_| format_err(start as u64, "bad integer in PGM header"))?);
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(pos as u64, format!("only 8-bit PGM supported, maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !matches!(bytes[pos], b' ' | b'\t' | b'\r' | b'\n') {
        return Err(format_err(pos as u64, "missing whitespace before PGM raster"));
    }
    pos += 1;
    let expected = width * height;
    let actual = bytes.len() - pos;
    if actual != expected {
        return Err(format_err(pos as u64, format!("PGM raster length mismatch: expected {expected}, found {actual}")));
    }
    let data: Vec<f64> = bytes[pos..].iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok(Tensor::new(vec![height, width], data))
}

/// Write `[H, W]` values in [0, 1] as binary PGM.
pub fn write_pgm(t: &Tensor, path: &Path) -> Result<()> {
    let shape = t.shape();
    assert_eq!(shape.len(), 2, "dimension error: PGM expects [H, W], got {shape:?}");
    let mut buf = Vec::new();
    write!(buf, "P5\n{} {}\n255\n", shape[1], shape[0]).unwrap();
    for &v in t.data() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbor resample of a `[H, W]` map to a new size.
pub(crate) fn resample_nearest(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let shape = map.shape();
    let (in_h, in_w) = (shape[0], shape[1]);
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let sy = (((y as f64 + 0.5) * in_h as f64 / out_h as f64) as usize).min(in_h - 1);
        for x in 0..out_w {
            let sx = (((x as f64 + 0.5) * in_w as f64 / out_w as f64) as usize).min(in_w - 1);
            out[y * out_w + x] = map.data()[sy * in_w + sx];
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

// ── Generated dataset directories ────────────────────────────────────────

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Persist generated splits under `dir`: per-split image/label/mask tensors
/// plus `manifest.csv` and `meta.txt`. Byte-identical for identical data.
pub fn save_dataset(dir: &Path, data: &GeneratedData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("split,role,file\n");
    for (name, split) in SPLIT_NAMES.iter().zip([&data.train, &data.val, &data.test]) {
        let n = split.len();
        let s = split.image_size;
        let mut images = Vec::with_capacity(n * s * s);
        let mut labels = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n * s * s);
        let mut has_mask = Vec::with_capacity(n);
        for sample in &split.samples {
            images.extend_from_slice(sample.image.data());
            labels.push(sample.label as f64);
            match &sample.mask {
                Some(m) => {
                    masks.extend_from_slice(m.data());
                    has_mask.push(1.0);
                }
                None => {
                    masks.extend(std::iter::repeat(0.0).take(s * s));
                    has_mask.push(0.0);
                }
            }
        }
        let files = [
            (format!("{name}_images.mftn"), Tensor::new(vec![n, s, s, 1], images)),
            (format!("{name}_labels.mftn"), Tensor::new(vec![n], labels)),
            (format!("{name}_masks.mftn"), Tensor::new(vec![n, s, s], masks)),
            (format!("{name}_has_mask.mftn"), Tensor::new(vec![n], has_mask)),
        ];
        for (i, (fname, tensor)) in files.iter().enumerate() {
            write_tensor(tensor, &dir.join(fname))?;
            let role = ["images", "labels", "masks", "has_mask"][i];
            manifest.push_str(&format!("{name},{role},{fname}\n"));
        }
    }
    fs::write(dir.join("manifest.csv"), manifest).map_err(|e| Error::io(dir.join("manifest.csv"), e))?;
    let meta = format!("classes={}\nimage_size={}\n", data.train.classes, data.train.image_size);
    fs::write(dir.join("meta.txt"), meta).map_err(|e| Error::io(dir.join("meta.txt"), e))?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset_dir(dir: &Path) -> Result<GeneratedData> {
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut classes = None;
    let mut image_size = None;
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "classes" => classes = v.trim().parse::<usize>().ok(),
                "image_size" => image_size = v.trim().parse::<usize>().ok(),
                _ => {}
            }
        }
    }
    let classes = classes.ok_or_else(|| Error::Load(format!("{}: missing classes", meta_path.display())))?;
    let image_size = image_size.ok_or_else(|| Error::Load(format!("{}: missing image_size", meta_path.display())))?;

    let mut splits = Vec::with_capacity(3);
    for name in SPLIT_NAMES {
        let images = read_tensor(&dir.join(format!("{name}_images.mftn")))?;
        let labels = read_tensor(&dir.join(format!("{name}_labels.mftn")))?;
        let masks = read_tensor(&dir.join(format!("{name}_masks.mftn")))?;
        let has_mask = read_tensor(&dir.join(format!("{name}_has_mask.mftn")))?;
        let n = labels.numel();
        let s = image_size;
        if images.shape() != [n, s, s, 1] {
            return Err(Error::Load(format!("{name}_images.mftn: shape {:?} inconsistent with meta", images.shape())));
        }
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let image = Tensor::new(vec![s, s, 1], images.data()[i * s * s..(i + 1) * s * s].to_vec());
            let label = labels.data()[i] as usize;
            if label >= classes {
                return Err(Error::Load(format!("{name}_labels.mftn: label {label} out of range")));
            }
            let mask = if has_mask.data()[i] != 0.0 {
                Some(Tensor::new(vec![s, s], masks.data()[i * s * s..(i + 1) * s * s].to_vec()))
            } else {
                None
            };
            samples.push(Sample { image, label, mask });
        }
        splits.push(Dataset { samples, classes, image_size });
    }
    let mut it = splits.into_iter();
    Ok(GeneratedData { train: it.next().unwrap(), val: it.next().unwrap(), test: it.next().unwrap() })
}

// ── Manifest-driven image directories ────────────────────────────────────

/// Load an image directory described by a `file,label[,mask_file]` manifest.
/// Images may be tensor files or binary PGM (detected by magic). Returns the
/// dataset and the label remap report `(original label, contiguous id)`.
pub fn load_image_dir(dir: &Path, manifest_name: &str) -> Result<(Dataset, Vec<(i64, usize)>)> {
    let manifest_path = dir.join(manifest_name);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Load(format!("{}: empty manifest", manifest_path.display())))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_masks = match cols.as_slice() {
        ["file", "label"] => false,
        ["file", "label", "mask_file"] => true,
        _ => {
            return Err(Error::Load(format!(
                "{}: header must be file,label[,mask_file], got {header:?}",
                manifest_path.display()
            )))
        }
    };

    let mut raw: Vec<(String, i64, Option<String>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != cols.len() {
            return Err(Error::Load(format!(
                "{}: line {}: expected {} fields, got {}",
                manifest_path.display(),
                lineno + 2,
                cols.len(),
                parts.len()
            )));
        }
        let label: i64 = parts[1]
            .parse()
            .map_err(|_| Error::Load(format!("{}: line {}: bad label {:?}", manifest_path.display(), lineno + 2, parts[1])))?;
        let mask = if has_masks && !parts[2].is_empty() { Some(parts[2].to_string()) } else { None };
        raw.push((parts[0].to_string(), label, mask));
    }
    if raw.is_empty() {
        return Err(Error::Load(format!("{}: no samples listed", manifest_path.display())));
    }

    // Contiguous class remap in sorted label order.
    let mut remap: BTreeMap<i64, usize> = BTreeMap::new();
    for (_, label, _) in &raw {
        let next = remap.len();
        remap.entry(*label).or_insert(next);
    }
    let report: Vec<(i64, usize)> = remap.iter().map(|(&k, &v)| (k, v)).collect();

    let read_image = |name: &str| -> Result<Tensor> {
        let path: PathBuf = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.starts_with(MAGIC) {
            parse_tensor(&bytes)
        } else if bytes.starts_with(b"P5") {
            parse_pgm(&bytes)
        } else {
            Err(Error::Load(format!("{}: neither a tensor file nor a PGM", path.display())))
        }
    };

    let mut samples = Vec::with_capacity(raw.len());
    let mut size: Option<usize> = None;
    for (file, label, mask_file) in &raw {
        let img = read_image(file)?;
        let (h, w) = match img.shape() {
            [h, w] => (*h, *w),
            [h, w, 1] => (*h, *w),
            other => return Err(Error::Load(format!("{file}: unsupported image shape {other:?}"))),
        };
        if h != w {
            return Err(Error::Load(format!("{file}: images must be square, got {h}x{w}")));
        }
        match size {
            None => size = Some(h),
            Some(s) if s != h => {
                return Err(Error::Load(format!("{file}: size {h}x{w} inconsistent with {s}x{s}")))
            }
            _ => {}
        }
        let image = Tensor::new(vec![h, w, 1], img.data().to_vec());
        let mask = match mask_file {
            Some(mf) => {
                let m = read_image(mf)?;
                let (mh, mw) = match m.shape() {
                    [mh, mw] => (*mh, *mw),
                    [mh, mw, 1] => (*mh, *mw),
                    other => return Err(Error::Load(format!("{mf}: unsupported mask shape {other:?}"))),
                };
                let m2 = Tensor::new(vec![mh, mw], m.data().to_vec());
                let resampled = resample_nearest(&m2, h, w);
                let binary: Vec<f64> = resampled.data().iter().map(|&v| f64::from(v > 0.5)).collect();
                Some(Tensor::new(vec![h, w], binary))
            }
            None => None,
        };
        samples.push(Sample { image, label: remap[label], mask });
    }
    let dataset = Dataset { samples, classes: remap.len(), image_size: size.unwrap() };
    Ok((dataset, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t = Tensor::new(vec![3, 4, 5], data);
        let path = dir.path().join("t.mftn");
        write_tensor(&t, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // And the file bytes themselves reproduce.
        let bytes1 = fs::read(&path).unwrap();
        write_tensor(&back, &path).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_payload_reports_expected_vs_actual() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let path = dir.path().join("t.mftn");
        write_tensor(&t, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, bytes).unwrap();
        let err = read_tensor(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 32"), "{msg}");
        assert!(msg.contains("27"), "{msg}");
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mftn");
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_tensor(&path).unwrap_err(), Error::Format { offset: 0, .. }));

        let t = Tensor::new(vec![1], vec![1.0]);
        write_tensor(&t, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9; // version
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_tensor(&path).unwrap_err(), Error::Format { offset: 4, .. }));
    }

    #[test]
    fn u8_tensor_normalizes_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2], vec![0.0, 1.0]);
        let path = dir.path().join("u8.mftn");
        write_tensor_u8(&t, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]); // 255 -> 1.0 exactly
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]);
        let path = dir.path().join("img.pgm");
        write_pgm(&t, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        // Header comments are allowed.
        let commented = b"P5\n# a comment\n2 2\n# another\n255\n\x00\x7f\xff\x40".to_vec();
        let path2 = dir.path().join("c.pgm");
        fs::write(&path2, commented).unwrap();
        let img = read_pgm(&path2).unwrap();
        assert_eq!(img.shape(), &[2, 2]);
        assert_eq!(img.data()[3], 0x40 as f64 / 255.0);
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_samples: 9,
            val_samples: 6,
            test_samples: 6,
            mask_fraction: 0.5,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        assert!(dir.path().join("manifest.csv").exists());
        let back = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.train.len(), 9);
        assert_eq!(back.test.classes, 3);
        for (a, b) in data.train.samples.iter().zip(&back.train.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.mask.is_some(), b.mask.is_some());
        }
    }

    #[test]
    fn image_dir_with_pgm_manifest() {
        let dir = tempfile::tempdir().unwrap();
        for (i, v) in [0.2, 0.5, 0.8].iter().enumerate() {
            let img = Tensor::full(vec![8, 8], *v);
            write_pgm(&img, &dir.path().join(format!("img{i}.pgm"))).unwrap();
        }
        // Labels 5 and 9 remap to 0 and 1.
        fs::write(dir.path().join("manifest.csv"), "file,label\nimg0.pgm,5\nimg1.pgm,9\nimg2.pgm,5\n").unwrap();
        let (ds, report) = load_image_dir(dir.path(), "manifest.csv").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.classes, 2);
        assert_eq!(report, vec![(5, 0), (9, 1)]);
        assert_eq!(ds.samples[0].label, 0);
        assert_eq!(ds.samples[1].label, 1);
    }

    #[test]
    fn image_dir_rejects_inconsistent_sizes_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&Tensor::full(vec![8, 8], 0.5), &dir.path().join("a.pgm")).unwrap();
        write_pgm(&Tensor::full(vec![16, 16], 0.5), &dir.path().join("b.pgm")).unwrap();
        fs::write(dir.path().join("manifest.csv"), "file,label\na.pgm,0\nb.pgm,1\n").unwrap();
        let err = load_image_dir(dir.path(), "manifest.csv").unwrap_err();
        assert!(err.to_string().contains("b.pgm"), "{err}");

        fs::write(dir.path().join("manifest.csv"), "file,label\nmissing.pgm,0\n").unwrap();
        let err = load_image_dir(dir.path(), "manifest.csv").unwrap_err();
        assert!(err.to_string().contains("missing.pgm"), "{err}");
    }

    #[test]
    fn masks_resample_to_image_size() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&Tensor::full(vec![8, 8], 0.5), &dir.path().join("img.pgm")).unwrap();
        // 4x4 mask: left half on.
        let mask = Tensor::new(vec![4, 4], (0..16).map(|i| f64::from(i % 4 < 2)).collect());
        write_pgm(&mask, &dir.path().join("mask.pgm")).unwrap();
        fs::write(dir.path().join("manifest.csv"), "file,label,mask_file\nimg.pgm,0\nimg.pgm,1,mask.pgm\n").unwrap();
        let (ds, _) = load_image_dir(dir.path(), "manifest.csv").unwrap();
        assert!(ds.samples[0].mask.is_none());
        let m = ds.samples[1].mask.as_ref().unwrap();
        assert_eq!(m.shape(), &[8, 8]);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(m.data()[0], 1.0);
        assert_eq!(m.data()[7], 0.0);
    }
}
