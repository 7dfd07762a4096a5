use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::shapes::{generate_shape, PointCloud, ShapeKind, POINT_DIM};
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::rng;

/// Fixed palette; captions name the color, clouds carry its jittered rgb.
pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("orange", [1.0, 0.55, 0.05]),
    ("purple", [0.55, 0.15, 0.7]),
    ("white", [0.97, 0.97, 0.97]),
    ("gray", [0.5, 0.5, 0.5]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    pub id: String,
    pub cloud: PointCloud,
    pub class_id: usize,
    pub class_name: String,
    pub caption: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<ShapeSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    class_id: usize,
    class_name: String,
    caption: String,
    split: Split,
    file: String,
}

/// Deterministic synthetic dataset. Within each class every second sample
/// (odd position) goes to the test split.
pub fn make_dataset(classes: &[ShapeKind], per_class: usize, points: usize, seed: u64) -> Result<Dataset> {
    if per_class < 2 {
        return Err(Error::Invalid(format!(
            "per_class must be at least 2 so every class has a test item, got {per_class}"
        )));
    }
    if classes.is_empty() {
        return Err(Error::Invalid("no classes requested".into()));
    }
    let mut samples = Vec::with_capacity(classes.len() * per_class);
    for (class_id, &kind) in classes.iter().enumerate() {
        for j in 0..per_class {
            let index = samples.len();
            let mut r = rng::stream(seed, &format!("dataset.{class_id}.{j}"));
            let (color_name, rgb) = COLORS[r.gen_range(0..COLORS.len())];
            let scale = r.gen_range(0.75..=1.25);
            let cloud_seed: u64 = r.gen();
            let caption = if r.gen::<bool>() {
                format!("this is a {color_name} {kind}")
            } else {
                format!("a 3d model of a {kind}")
            };
            samples.push(ShapeSample {
                id: format!("s{index:04}"),
                cloud: generate_shape(kind, scale, rgb, points, cloud_seed)?,
                class_id,
                class_name: kind.name().to_string(),
                caption,
                split: if j % 2 == 1 { Split::Test } else { Split::Train },
            });
        }
    }
    Ok(Dataset {
        classes: classes.iter().map(|k| k.name().to_string()).collect(),
        samples,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&ShapeSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn train(&self) -> Vec<&ShapeSample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&ShapeSample> {
        self.split(Split::Test)
    }

    /// Nested training subsets: one seeded shuffle of the training split,
    /// of which a fraction takes the first `ceil(fraction·N)` items.
    pub fn train_subset(&self, fraction: f64, seed: u64) -> Result<Vec<&ShapeSample>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Invalid(format!("fraction must be in (0, 1], got {fraction}")));
        }
        let mut train = self.train();
        train.shuffle(&mut rng::stream(seed, "data.fraction"));
        let take = ((fraction * train.len() as f64).ceil() as usize).clamp(1, train.len());
        train.truncate(take);
        Ok(train)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let pts = dir.join("points");
        fs::create_dir_all(&pts).map_err(Error::io(&pts))?;
        let manifest = dir.join("manifest.jsonl");
        let mut out = BufWriter::new(fs::File::create(&manifest).map_err(Error::io(&manifest))?);
        for s in &self.samples {
            let file = format!("points/{}.txt", s.id);
            let rec = ManifestRecord {
                id: s.id.clone(),
                class_id: s.class_id,
                class_name: s.class_name.clone(),
                caption: s.caption.clone(),
                split: s.split,
                file: file.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?).map_err(Error::io(&manifest))?;
            write_points(&dir.join(&file), &s.cloud)?;
        }
        out.flush().map_err(Error::io(&manifest))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("manifest.jsonl");
        let f = fs::File::open(&manifest).map_err(Error::io(&manifest))?;
        let mut samples = Vec::new();
        let mut classes: Vec<Option<String>> = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(Error::io(&manifest))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)?;
            if classes.len() <= rec.class_id {
                classes.resize(rec.class_id + 1, None);
            }
            match &classes[rec.class_id] {
                Some(name) if *name != rec.class_name => {
                    return Err(Error::Invalid(format!(
                        "class id {} named both {name} and {}",
                        rec.class_id, rec.class_name
                    )))
                }
                _ => classes[rec.class_id] = Some(rec.class_name.clone()),
            }
            if rec.caption.trim().is_empty() {
                return Err(Error::Invalid(format!("sample {} has an empty caption", rec.id)));
            }
            samples.push(ShapeSample {
                cloud: read_points(&dir.join(&rec.file))?,
                id: rec.id,
                class_id: rec.class_id,
                class_name: rec.class_name,
                caption: rec.caption,
                split: rec.split,
            });
        }
        let classes = classes
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Invalid(format!("class id {i} has no samples"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { classes, samples })
    }
}

/// One point per line, six space-separated shortest round-trip floats.
pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(Error::io(path))?);
    for i in 0..cloud.len() {
        let row = cloud.points.row(i);
        let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(out, "{line}").map_err(Error::io(path))?;
    }
    out.flush().map_err(Error::io(path))
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut data = Vec::new();
    let mut n = 0;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        if vals.len() != POINT_DIM {
            return Err(Error::Invalid(format!(
                "{}:{}: expected {POINT_DIM} values, got {}",
                path.display(),
                ln + 1,
                vals.len()
            )));
        }
        data.extend(vals);
        n += 1;
    }
    PointCloud::new(Array::new(&[n, POINT_DIM], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_shape_has_every_class_in_test() {
        let d = make_dataset(&ShapeKind::ALL, 20, 32, 7).unwrap();
        assert_eq!(d.samples.len(), 200);
        for c in 0..10 {
            assert!(d.test().iter().any(|s| s.class_id == c));
        }
        let train: HashSet<_> = d.train().iter().map(|s| s.id.clone()).collect();
        let test: HashSet<_> = d.test().iter().map(|s| s.id.clone()).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 200);
    }

    #[test]
    fn captions_name_color_and_class() {
        let d = make_dataset(&ShapeKind::ALL, 6, 16, 1).unwrap();
        for s in &d.samples {
            assert!(s.caption.split(' ').any(|w| w == s.class_name));
            if s.caption.starts_with("this is") {
                let color = s.caption.split(' ').nth(3).unwrap();
                let rgb = COLORS.iter().find(|c| c.0 == color).unwrap().1;
                let r = s.cloud.points.row(0)[3] as f64;
                assert!((r - rgb[0]).abs() <= 0.05 + 1e-6 || r == 0.0 || r == 1.0);
            }
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = make_dataset(&ShapeKind::ALL[..3], 4, 16, 5).unwrap();
        let b = make_dataset(&ShapeKind::ALL[..3], 4, 16, 5).unwrap();
        assert_eq!(a, b);
        assert!(make_dataset(&ShapeKind::ALL, 1, 16, 5).is_err());
    }

    #[test]
    fn subsets_are_nested() {
        let d = make_dataset(&ShapeKind::ALL, 20, 16, 2).unwrap();
        let small: Vec<_> = d.train_subset(0.1, 9).unwrap().iter().map(|s| s.id.clone()).collect();
        let big: Vec<_> = d.train_subset(0.3, 9).unwrap().iter().map(|s| s.id.clone()).collect();
        assert_eq!(small.len(), 10);
        assert_eq!(big.len(), 30);
        assert_eq!(&big[..10], &small[..]);
        assert!(d.train_subset(0.0, 9).is_err());
        assert_eq!(d.train_subset(1.0, 9).unwrap().len(), 100);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let d = make_dataset(&ShapeKind::ALL[..4], 3, 20, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.classes, d.classes);
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert!(a.cloud.points.bits_eq(&b.cloud.points));
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.split, b.split);
        }
    }
}
