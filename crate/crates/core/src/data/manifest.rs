//! Manifest files.
//!
//! ```text
//! cplsr-manifest v1
//! name = mini-base
//! role = base                 # base | validation | target
//! geometry = 3 32 32          # C H W
//! mean = 0.5 0.5 0.5          # one value per channel
//! std = 0.25 0.25 0.25
//!                             # an empty line ends the header
//! 0<TAB>class_0/0000.ppm
//! 0<TAB>class_0/0001.ppm
//! 7<TAB>class_7/0000.cptn
//! ```
//!
//! Body lines map a class id to an image path relative to the manifest's
//! directory. All lines of one class form a single contiguous block; a class
//! id that reappears after another class is a duplicate. Lines starting
//! with `#` are ignored.
//!
//! Images are binary PPM (`P6`, maxval 255, three channels) mapped to
//! `[0, 1]` as `value / 255`, or tensor blobs (`.cptn`) holding a `[C, H, W]`
//! tensor already in `[0, 1]`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ClassSamples, Dataset, Normalization, Role};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor_cast, save_tensor};
use crate::tensor::Tensor;

const MAGIC_LINE: &str = "cplsr-manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    /// 8-bit PPM; pixel values are quantized to multiples of 1/255.
    Ppm,
    /// 64-bit tensor blob; lossless.
    Tensor,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Tensor => "cptn",
        }
    }
}

/// Decode a binary PPM into a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Format("not a binary PPM (P6) image".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| Error::Format(format!("invalid PPM {what} `{t}`")))
    };
    let (w, h, maxval) = (number("width")?, number("height")?, number("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("PPM has a zero dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = &bytes[pos + 1..];
    if raster.len() < 3 * w * h {
        return Err(Error::Format(format!(
            "PPM raster has {} bytes, expected {}",
            raster.len(),
            3 * w * h
        )));
    }
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in raster[..3 * w * h].chunks(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * w * h + i] = f64::from(v) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Encode a `[3, H, W]` tensor in `[0, 1]` as binary PPM, rounding to 8 bits.
pub fn write_ppm(img: &Tensor<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::Format(format!("PPM needs 3 channels, image has {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            let v = img.data()[ch * plane + i];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn header_value<'a>(fields: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Data(format!("{}: manifest header is missing `{key}`", path.display())))
}

fn parse_list<T: std::str::FromStr>(raw: &str, key: &str, path: &Path) -> Result<Vec<T>> {
    raw.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Data(format!("{}: invalid `{key}` entry `{t}`", path.display())))
        })
        .collect()
}

fn load_image(path: &Path, geometry: (usize, usize, usize)) -> Result<Tensor<f64>> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            read_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        }
        Some("cptn") => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            read_tensor_cast::<f64, _>(&mut bytes.as_slice())
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        }
        _ => {
            return Err(Error::Data(format!(
                "{}: unsupported image type, expected .ppm or .cptn",
                path.display()
            )))
        }
    };
    let (c, h, w) = geometry;
    if img.shape() != [c, h, w] {
        return Err(Error::Data(format!(
            "{}: image shape {:?} does not match manifest geometry {:?}",
            path.display(),
            img.shape(),
            [c, h, w]
        )));
    }
    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data(format!("{}: pixel values outside [0, 1]", path.display())));
    }
    Ok(img)
}

/// Load a dataset from a manifest file.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let path = manifest.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == MAGIC_LINE => {}
        _ => return Err(Error::Data(format!("{}: missing `{MAGIC_LINE}` line", path.display()))),
    }
    let mut fields = Vec::new();
    for (_, line) in lines.by_ref() {
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("{}: malformed header line `{line}`", path.display())))?;
        let v = v.split('#').next().unwrap_or("").trim();
        fields.push((k.trim().to_string(), v.to_string()));
    }
    let geometry: Vec<usize> = parse_list(header_value(&fields, "geometry", path)?, "geometry", path)?;
    let &[c, h, w] = geometry.as_slice() else {
        return Err(Error::Data(format!(
            "{}: geometry needs three values C H W",
            path.display()
        )));
    };
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!(
            "{}: geometry has a zero dimension",
            path.display()
        )));
    }
    let normalization = Normalization {
        mean: parse_list(header_value(&fields, "mean", path)?, "mean", path)?,
        std: parse_list(header_value(&fields, "std", path)?, "std", path)?,
    };
    normalization
        .validate(c)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let name = header_value(&fields, "name", path)?.to_string();
    let role: Role = header_value(&fields, "role", path)?
        .parse()
        .map_err(|e: Error| Error::Data(format!("{}: {e}", path.display())))?;

    let mut classes: Vec<ClassSamples> = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in lines {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rel) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected `class_id<TAB>path`",
                path.display(),
                lineno + 1
            ))
        })?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: invalid class id `{id}`", path.display(), lineno + 1)))?;
        let img = load_image(&root.join(rel), (c, h, w))?;
        match classes.last_mut() {
            Some(last) if last.id == id => last.images.push(img),
            _ => {
                if !seen.insert(id) {
                    return Err(Error::Data(format!(
                        "{}:{}: duplicate class id {id}",
                        path.display(),
                        lineno + 1
                    )));
                }
                classes.push(ClassSamples { id, images: vec![img] });
            }
        }
    }
    if classes.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no images", path.display())));
    }
    Dataset::new(name, role, (c, h, w), normalization, classes)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

/// Write `dataset` under `dir` as `manifest.txt` plus one file per image.
/// Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>, format: ImageFormat) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let (c, h, w) = dataset.geometry;
    if format == ImageFormat::Ppm && c != 3 {
        return Err(Error::Data(format!("PPM export needs 3 channels, dataset has {c}")));
    }
    let mut manifest = format!(
        "{MAGIC_LINE}\nname = {}\nrole = {}\ngeometry = {c} {h} {w}\nmean = {}\nstd = {}\n\n",
        dataset.name,
        dataset.role,
        join(&dataset.normalization.mean),
        join(&dataset.normalization.std)
    );
    for class in &dataset.classes {
        let sub = format!("class_{}", class.id);
        fs::create_dir_all(dir.join(&sub)).map_err(|e| Error::io(dir.join(&sub), e))?;
        for (i, img) in class.images.iter().enumerate() {
            let rel = format!("{sub}/{i:04}.{}", format.extension());
            let file = dir.join(&rel);
            match format {
                ImageFormat::Ppm => fs::write(&file, write_ppm(img)?).map_err(|e| Error::io(&file, e))?,
                ImageFormat::Tensor => save_tensor(&file, img)?,
            }
            manifest.push_str(&format!("{}\t{rel}\n", class.id));
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(classes: usize, per_class: usize) -> Dataset {
        let classes = (0..classes)
            .map(|k| ClassSamples {
                id: 10 + k as u32,
                images: (0..per_class)
                    .map(|i| {
                        let data = (0..48)
                            .map(|j| ((j * 7 + i * 3 + k * 11) % 256) as f64 / 255.0)
                            .collect();
                        Tensor::new(vec![3, 4, 4], data).unwrap()
                    })
                    .collect(),
            })
            .collect();
        Dataset::new(
            "t",
            Role::Target,
            (3, 4, 4),
            Normalization::uniform(3, 0.5, 0.2),
            classes,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_in_both_formats() {
        let ds = dataset(2, 3);
        for format in [ImageFormat::Ppm, ImageFormat::Tensor] {
            let dir = tempfile::tempdir().unwrap();
            let manifest = save_dataset(&ds, dir.path(), format).unwrap();
            let back = load_dataset(&manifest).unwrap();
            assert_eq!(back.num_samples(), 6);
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn wrong_size_image_names_the_file() {
        let ds = dataset(2, 3);
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path(), ImageFormat::Ppm).unwrap();
        let bad = dir.path().join("class_11/0001.ppm");
        fs::write(&bad, write_ppm(&Tensor::zeros(&[3, 5, 4])).unwrap()).unwrap();
        let err = load_dataset(&manifest).unwrap_err().to_string();
        assert!(err.contains("class_11/0001.ppm"), "{err}");
    }

    #[test]
    fn split_class_blocks_are_duplicates() {
        let ds = dataset(2, 1);
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path(), ImageFormat::Tensor).unwrap();
        let mut text = fs::read_to_string(&manifest).unwrap();
        text.push_str("10\tclass_10/0000.cptn\n");
        fs::write(&manifest, text).unwrap();
        assert!(load_dataset(&manifest)
            .unwrap_err()
            .to_string()
            .contains("duplicate class id 10"));
    }

    #[test]
    fn missing_image_is_an_io_error_with_path() {
        let ds = dataset(1, 1);
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path(), ImageFormat::Ppm).unwrap();
        fs::remove_file(dir.path().join("class_10/0000.ppm")).unwrap();
        let err = load_dataset(&manifest).unwrap_err();
        assert!(err.to_string().contains("0000.ppm"));
    }

    #[test]
    fn ppm_header_with_comments_parses() {
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = read_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
