//! Fixtures shared by the benchmarks.

use align3d::pointenc::{make_dataset, Grouping, ShapeKind, ShapeSample};
use align3d::{rng, Array, Model, StackConfig};

/// A freshly initialized default-size model and one grouped sample.
pub fn default_model() -> (Model<f32>, ShapeSample, Grouping) {
    let model = Model::init(&StackConfig::default(), 0).expect("init");
    let data = make_dataset(&ShapeKind::ALL[..1], 2, model.cfg.encoder.points, 0).expect("dataset");
    let sample = data.samples[0].clone();
    let grouping = model.group(&sample.cloud).expect("group");
    (model, sample, grouping)
}

/// `n` random feature vectors of width `d` with labels cycling over
/// `classes`.
pub fn features(n: usize, d: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let a: Array<f64> = rng::normal(&mut rng::stream(0, "bench.features"), &[n, d], 1.0);
    let feats = (0..n).map(|i| a.row(i).to_vec()).collect();
    (feats, (0..n).map(|i| i % classes).collect())
}
