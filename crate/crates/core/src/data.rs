//! Dataset manifests, the synthetic shapes generator and splitting.
//!
//! Manifest format (UTF-8, tab separated, paths relative to the manifest's
//! directory):
//!
//! ```text
//! # megl manifest v1
//! #split	train
//! #classes	red_circle	red_triangle	...
//! images/00000.png	red_circle	it is a red circle because ...	masks/00000.png
//! images/00001.png	red_square	it is a red square because ...
//! ```
//!
//! The `#split` line is optional (defaults to `train`). The fourth field is
//! the mask path and may be empty or omitted. Other lines starting with `#`
//! are comments. Masks are 8-bit grayscale PNGs where 255 marks maximal
//! saliency; values are divided by 255.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{seed_everything, SeedBank};
use crate::error::{MeglError, Result};
use crate::grounding::Vocabulary;
use crate::params::uniform;
use crate::types::{ImageTensor, SaliencyMap, Sample};

pub const MANIFEST_HEADER: &str = "# megl manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = MeglError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(MeglError::Domain(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub image_path: String,
    pub label_name: String,
    pub text_explanation: Option<String>,
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub class_names: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestStats {
    pub total: usize,
    pub with_text: usize,
    pub with_visual: usize,
    pub classes: usize,
}

impl DatasetManifest {
    pub fn stats(&self) -> ManifestStats {
        ManifestStats {
            total: self.records.len(),
            with_text: self.records.iter().filter(|r| r.text_explanation.is_some()).count(),
            with_visual: self.records.iter().filter(|r| r.mask_path.is_some()).count(),
            classes: self.class_names.len(),
        }
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| MeglError::UnknownLabel(name.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n#split\t{}\n#classes", self.split);
        for c in &self.class_names {
            s.push('\t');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.image_path,
                r.label_name,
                r.text_explanation.as_deref().unwrap_or(""),
                r.mask_path.as_deref().unwrap_or("")
            ));
        }
        s
    }

    /// Writes the manifest to `path`. Record paths stay relative to `self.root`,
    /// so `path` should live in that directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Rationales of every record that has one, in record order.
    pub fn texts(&self) -> Vec<&str> {
        self.records.iter().filter_map(|r| r.text_explanation.as_deref()).collect()
    }
}

/// Reads and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => MeglError::MissingFile(path.to_path_buf()),
        _ => MeglError::Io(e),
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, root)?;
    for r in &manifest.records {
        for p in std::iter::once(&r.image_path).chain(r.mask_path.as_ref()) {
            let full = manifest.root.join(p);
            if !full.is_file() {
                return Err(MeglError::MissingImage(full));
            }
        }
    }
    Ok(manifest)
}

/// Parses manifest text without touching the file system.
pub fn parse_manifest(text: &str, root: PathBuf) -> Result<DatasetManifest> {
    let mut class_names: Option<Vec<String>> = None;
    let mut split = Split::Train;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#split\t") {
            split = rest.trim().parse().map_err(|_| MeglError::Parse {
                line: line_no,
                column: 8,
                message: format!("unknown split {rest:?}"),
            })?;
            continue;
        }
        if let Some(rest) = line.strip_prefix("#classes\t") {
            class_names = Some(rest.split('\t').map(str::to_string).collect());
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let classes = class_names.as_ref().ok_or_else(|| MeglError::Parse {
            line: line_no,
            column: 1,
            message: "record before the #classes line".into(),
        })?;
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=4).contains(&fields.len()) || fields[0].is_empty() {
            return Err(MeglError::Parse {
                line: line_no,
                column: 1,
                message: format!("expected 2 to 4 tab-separated fields, got {}", fields.len()),
            });
        }
        if !classes.iter().any(|c| c == fields[1]) {
            return Err(MeglError::UnknownLabel(fields[1].to_string()));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(MeglError::DuplicateRecord(fields[0].to_string()));
        }
        let opt = |k: usize| fields.get(k).filter(|s| !s.is_empty()).map(|s| s.to_string());
        records.push(Record {
            image_path: fields[0].to_string(),
            label_name: fields[1].to_string(),
            text_explanation: opt(2),
            mask_path: opt(3),
        });
    }
    if records.is_empty() {
        return Err(MeglError::EmptyDataset);
    }
    Ok(DatasetManifest { root, records, class_names: class_names.unwrap_or_default(), split })
}

/// Decodes a PNG (or any format the image backend reads) as RGB in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| MeglError::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut data = vec![0.0; 3 * (h * w) as usize];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * (h * w) as usize + (y * w + x) as usize] = p[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(data, 3, h as usize, w as usize)
}

/// Reads a grayscale mask and min-max normalizes it.
pub fn read_mask(path: &Path) -> Result<SaliencyMap> {
    let img = image::open(path).map_err(|e| MeglError::Image(format!("{}: {e}", path.display())))?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let grid = g.pixels().map(|p| p[0] as f64 / 255.0).collect();
    Ok(SaliencyMap::raw(grid, h as usize, w as usize)?.to_minmax())
}

pub fn write_image(image: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let d = image.data();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                let c = if image.channels() == 1 { 0 } else { c };
                (d[c * h * w + y * w + x] * 255.0).round() as u8
            };
            out.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    out.save(path).map_err(|e| MeglError::Image(format!("{}: {e}", path.display())))
}

pub fn write_mask(map: &SaliencyMap, path: &Path) -> Result<()> {
    let (h, w) = map.dims();
    let mut out = GrayImage::new(w as u32, h as u32);
    for (i, v) in map.grid().iter().enumerate() {
        let v = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.put_pixel((i % w) as u32, (i / w) as u32, Luma([v]));
    }
    out.save(path).map_err(|e| MeglError::Image(format!("{}: {e}", path.display())))
}

/// Loads every record of `manifest` as a [`Sample`]. Rationales are encoded
/// with `vocab`; images must be `image_size` square and masks must match.
pub fn load_samples(manifest: &DatasetManifest, vocab: &Vocabulary, image_size: usize) -> Result<Vec<Sample>> {
    let n_classes = manifest.class_names.len();
    manifest
        .records
        .iter()
        .map(|r| {
            let image = read_image(&manifest.root.join(&r.image_path))?;
            if image.height() != image_size || image.width() != image_size {
                return Err(MeglError::ShapeMismatch(format!(
                    "{} is {}x{}, expected {image_size}x{image_size}",
                    r.image_path,
                    image.height(),
                    image.width()
                )));
            }
            let mask = match &r.mask_path {
                Some(p) => Some(read_mask(&manifest.root.join(p))?),
                None => None,
            };
            let text = r.text_explanation.as_deref().map(|t| vocab.encode(t));
            Sample::new(image, manifest.class_index(&r.label_name)?, n_classes, text, mask, (image_size, image_size))
        })
        .collect()
}

/// Visit order of `n` samples in `epoch`; a pure function of `(seed, epoch)`.
pub fn batch_order(n: usize, seeds: &SeedBank, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeds.rng(&format!("batches:{epoch}")));
    idx
}

/// Seeded stratified split into `(train, val, test)` with `ratios` summing to 1.
///
/// Each class's records are shuffled, the first of every class goes to train,
/// and the rest are dealt round-robin across classes to whichever split is
/// furthest below its target size (train first on ties).
pub fn split(manifest: &DatasetManifest, ratios: (f64, f64, f64), seed: u64) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(MeglError::Domain(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let n = manifest.records.len();
    let n_val = (rv * n as f64 + 1e-9).floor() as usize;
    let n_test = (rs * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(manifest.class_index(&r.label_name)?).or_default().push(i);
    }
    if by_class.len() > n_train {
        return Err(MeglError::TooFewSamplesForStratification(format!(
            "{} classes present but only {n_train} training slots",
            by_class.len()
        )));
    }
    let mut rng = seed_everything(seed).rng("split");
    for v in by_class.values_mut() {
        v.shuffle(&mut rng);
    }
    let targets = [n_train, n_val, n_test];
    let mut assigned: [Vec<usize>; 3] = Default::default();
    let queues: Vec<&Vec<usize>> = by_class.values().collect();
    for q in &queues {
        assigned[0].push(q[0]);
    }
    let longest = queues.iter().map(|q| q.len()).max().unwrap_or(0);
    for pos in 1..longest {
        for q in &queues {
            if let Some(&i) = q.get(pos) {
                let slot = (0..3)
                    .max_by(|&a, &b| {
                        let da = targets[a] as i64 - assigned[a].len() as i64;
                        let db = targets[b] as i64 - assigned[b].len() as i64;
                        da.cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                assigned[slot].push(i);
            }
        }
    }
    let make = |mut idx: Vec<usize>, split: Split| {
        idx.sort_unstable();
        DatasetManifest {
            root: manifest.root.clone(),
            records: idx.into_iter().map(|i| manifest.records[i].clone()).collect(),
            class_names: manifest.class_names.clone(),
            split,
        }
    };
    let [a, b, c] = assigned;
    Ok((make(a, Split::Train), make(b, Split::Val), make(c, Split::Test)))
}

/// Shapes rendered by the synthetic generator.
pub const SHAPES: [&str; 4] = ["circle", "triangle", "square", "cross"];
pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
];
const REASONS: [&str; 4] = [
    "it has a round edge with no corners",
    "it has three pointed corners",
    "it has four equal sides and right angles",
    "it has two crossing bars",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub visual_annotation_fraction: f64,
    pub image_size: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_samples: 2000,
            num_classes: 8,
            visual_annotation_fraction: 0.2,
            image_size: 32,
            noise_level: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let max = SHAPES.len() * COLORS.len();
        if self.num_classes == 0 || self.num_classes > max {
            return Err(MeglError::Domain(format!("num_classes must be in 1..={max}")));
        }
        if self.num_samples == 0 {
            return Err(MeglError::Domain("num_samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.visual_annotation_fraction) {
            return Err(MeglError::Domain("visual_annotation_fraction must be in [0, 1]".into()));
        }
        if self.image_size < 8 {
            return Err(MeglError::Domain("image_size must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(MeglError::Domain("noise_level must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn annotated_count(&self) -> usize {
        (self.visual_annotation_fraction * self.num_samples as f64 + 1e-9).floor() as usize
    }
}

/// Class `k` is shape `k % 4` in color `k / 4`.
pub fn class_name(k: usize) -> String {
    format!("{}_{}", COLORS[k / SHAPES.len()].0, SHAPES[k % SHAPES.len()])
}

pub fn caption(k: usize) -> String {
    let color = COLORS[k / SHAPES.len()].0;
    let shape = k % SHAPES.len();
    format!("it is a {color} {} because {} and {color} color", SHAPES[shape], REASONS[shape])
}

/// Pixel support of `shape` centred at `(cx, cy)` with half-size `r`.
pub fn shape_support(shape: usize, size: usize, cx: f64, cy: f64, r: f64) -> Vec<bool> {
    let mut out = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            out[y * size + x] = match shape {
                0 => dx * dx + dy * dy <= r * r,
                1 => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
                2 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
                _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
            };
        }
    }
    out
}

/// One rendered synthetic sample: image and its shape mask.
pub fn render(class: usize, spec: &SyntheticSpec, rng: &mut impl Rng) -> (ImageTensor, SaliencyMap) {
    let s = spec.image_size;
    let sf = s as f64;
    let r = uniform(rng, 0.18 * sf, 0.3 * sf);
    let cx = uniform(rng, r + 1.0, sf - r - 1.0);
    let cy = uniform(rng, r + 1.0, sf - r - 1.0);
    let support = shape_support(class % SHAPES.len(), s, cx, cy, r);
    let color = COLORS[class / SHAPES.len()].1;
    let brightness = uniform(rng, 0.8, 1.0);
    let mut data = vec![0.0; 3 * s * s];
    for c in 0..3 {
        for i in 0..s * s {
            let noise = uniform(rng, 0.0, spec.noise_level);
            data[c * s * s + i] = if support[i] { color[c] * brightness } else { noise };
        }
    }
    let mask = support.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    (
        ImageTensor::new(data, 3, s, s).expect("rendered values lie in [0, 1]"),
        SaliencyMap::new(mask, s, s, crate::types::Normalization::MinMax).expect("binary mask"),
    )
}

/// Renders a synthetic dataset into `out_dir` (`images/`, `masks/`,
/// `manifest.tsv`) and returns its manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let seeds = seed_everything(spec.seed);
    let mut annotated: Vec<usize> = (0..spec.num_samples).collect();
    annotated.shuffle(&mut seeds.rng("synth:annotated"));
    let annotated: HashSet<usize> = annotated.into_iter().take(spec.annotated_count()).collect();
    let mut labels: Vec<usize> = (0..spec.num_samples).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut seeds.rng("synth:labels"));

    let mut rng = seeds.rng("synth:render");
    let mut records = Vec::with_capacity(spec.num_samples);
    for (i, &k) in labels.iter().enumerate() {
        let (img, mask) = render(k, spec, &mut rng);
        let image_path = format!("images/{i:05}.png");
        write_image(&img, &out_dir.join(&image_path))?;
        let mask_path = if annotated.contains(&i) {
            let p = format!("masks/{i:05}.png");
            write_mask(&mask, &out_dir.join(&p))?;
            Some(p)
        } else {
            None
        };
        records.push(Record {
            image_path,
            label_name: class_name(k),
            text_explanation: Some(caption(k)),
            mask_path,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
        class_names: (0..spec.num_classes).map(class_name).collect(),
        split: Split::Train,
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::new(),
            records: (0..n)
                .map(|i| Record {
                    image_path: format!("{i}.png"),
                    label_name: format!("c{}", i % classes),
                    text_explanation: Some("x".into()),
                    mask_path: None,
                })
                .collect(),
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
            split: Split::Train,
        }
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let mut m = toy(5, 2);
        m.records[1].mask_path = Some("m1.png".into());
        m.records[2].text_explanation = None;
        let back = parse_manifest(&m.to_text(), PathBuf::new()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.stats(), ManifestStats { total: 5, with_text: 4, with_visual: 1, classes: 2 });

        let head = format!("{MANIFEST_HEADER}\n#classes\ta\tb\n");
        assert!(matches!(parse_manifest(&head, PathBuf::new()), Err(MeglError::EmptyDataset)));
        assert!(matches!(
            parse_manifest(&format!("{head}x.png\tz\n"), PathBuf::new()),
            Err(MeglError::UnknownLabel(l)) if l == "z"
        ));
        assert!(matches!(
            parse_manifest(&format!("{head}x.png\ta\nx.png\tb\n"), PathBuf::new()),
            Err(MeglError::DuplicateRecord(_))
        ));
    }

    #[test]
    fn missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.tsv");
        assert!(matches!(load_manifest(&p), Err(MeglError::MissingFile(_))));
        fs::write(&p, format!("{MANIFEST_HEADER}\n#classes\ta\nimg.png\ta\n")).unwrap();
        assert!(matches!(load_manifest(&p), Err(MeglError::MissingImage(_))));
        fs::write(dir.path().join("img.png"), b"").unwrap();
        let a = load_manifest(&p).unwrap();
        assert_eq!(a, load_manifest(&p).unwrap());
    }

    #[test]
    fn split_sizes_and_partition() {
        let m = toy(100, 8);
        let (a, b, c) = split(&m, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((a.records.len(), b.records.len(), c.records.len()), (80, 10, 10));
        let mut all: Vec<_> = a.records.iter().chain(&b.records).chain(&c.records).map(|r| r.image_path.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        for k in 0..8 {
            assert!(a.records.iter().any(|r| r.label_name == format!("c{k}")));
        }
        let (a, b, c) = split(&m, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!((a.records.len(), b.records.len(), c.records.len()), (100, 0, 0));
        assert!(matches!(split(&m, (0.5, 0.1, 0.1), 1), Err(MeglError::Domain(_))));
        assert!(matches!(
            split(&toy(10, 8), (0.5, 0.25, 0.25), 1),
            Err(MeglError::TooFewSamplesForStratification(_))
        ));
        assert_eq!(split(&m, (0.8, 0.1, 0.1), 5).unwrap(), split(&m, (0.8, 0.1, 0.1), 5).unwrap());
    }

    #[test]
    fn shapes_fit_inside_image() {
        let spec = SyntheticSpec::default();
        let mut rng = seed_everything(0).rng("t");
        for k in 0..8 {
            let (_, mask) = render(k, &spec, &mut rng);
            let area: f64 = mask.grid().iter().sum();
            assert!(area > 20.0, "class {k} area {area}");
        }
        assert_eq!(class_name(5), "blue_triangle");
        assert_eq!(caption(1), "it is a red triangle because it has three pointed corners and red color");
    }

    #[test]
    fn batch_order_is_a_function_of_seed_and_epoch() {
        let s = seed_everything(4);
        assert_eq!(batch_order(20, &s, 2), batch_order(20, &s, 2));
        assert_ne!(batch_order(20, &s, 2), batch_order(20, &s, 3));
    }
}
