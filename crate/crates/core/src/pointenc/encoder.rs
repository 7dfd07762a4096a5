use serde::{Deserialize, Serialize};

use super::shapes::{PointCloud, POINT_DIM};
use crate::diffcore::{Array, Graph, ParamStore, Scalar, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Points per cloud (n).
    pub points: usize,
    /// Patch centers (m).
    pub patches: usize,
    /// Neighbors gathered per center (k).
    pub neighbors: usize,
    /// Patch feature width (D).
    pub width: usize,
    /// Query-former width the features are projected to (D1).
    pub out_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            points: 256,
            patches: 16,
            neighbors: 16,
            width: 64,
            out_width: 64,
        }
    }
}

/// Greedy farthest point sampling from point 0; ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m > n {
        return Err(Error::Invalid(format!("cannot sample {m} centers from {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut current = 0;
    for _ in 0..m {
        chosen.push(current);
        taken[current] = true;
        let c = cloud.xyz(current);
        let mut best: Option<usize> = None;
        for i in 0..n {
            let p = cloud.xyz(i);
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            if d < dist[i] {
                dist[i] = d;
            }
            if !taken[i] && best.map_or(true, |b| dist[i] > dist[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    Ok(chosen)
}

/// Indices of the `k` nearest points to `center` by xyz distance, nearest
/// first, ties by index.
pub fn nearest_neighbors(cloud: &PointCloud, center: usize, k: usize) -> Vec<usize> {
    let c = cloud.xyz(center);
    let mut order: Vec<(f64, usize)> = (0..cloud.len())
        .map(|i| {
            let p = cloud.xyz(i);
            ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Center-relative neighborhoods of a cloud.
#[derive(Clone, Debug)]
pub struct Grouping {
    pub center_idx: Vec<usize>,
    /// `m×3` center coordinates.
    pub centers: Array<f32>,
    /// `(m·k)×6` rows: xyz offset from the center, then rgb.
    pub grouped: Array<f32>,
    pub k: usize,
}

pub fn group_points(cloud: &PointCloud, m: usize, k: usize) -> Result<Grouping> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("neighbor count {k} must be in 1..={n}")));
    }
    if m == 0 {
        return Err(Error::Invalid("need at least one patch".into()));
    }
    let center_idx = farthest_point_sample(cloud, m)?;
    let mut centers = Vec::with_capacity(m * 3);
    let mut grouped = Vec::with_capacity(m * k * POINT_DIM);
    for &ci in &center_idx {
        let c = &cloud.points.row(ci)[..3];
        centers.extend_from_slice(c);
        for j in nearest_neighbors(cloud, ci, k) {
            let p = cloud.points.row(j);
            grouped.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2], p[3], p[4], p[5]]);
        }
    }
    Ok(Grouping {
        center_idx,
        centers: Array::new(&[m, 3], centers)?,
        grouped: Array::new(&[m * k, POINT_DIM], grouped)?,
        k,
    })
}

/// Patch features on a graph plus the patch centers.
pub struct PatchFeatures {
    /// `m×D`
    pub features: Var,
    pub centers: Array<f32>,
}

pub fn init_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, seed: u64) -> Result<()> {
    let (d, d1) = (cfg.width, cfg.out_width);
    let shapes: [(&str, Vec<usize>); 8] = [
        ("pointenc.patch.w1", vec![d, POINT_DIM]),
        ("pointenc.patch.b1", vec![d]),
        ("pointenc.patch.w2", vec![d, d]),
        ("pointenc.patch.b2", vec![d]),
        ("pointenc.mlp.w1", vec![d1, d]),
        ("pointenc.mlp.b1", vec![d1]),
        ("pointenc.mlp.w2", vec![d1, d1]),
        ("pointenc.mlp.b2", vec![d1]),
    ];
    for (name, shape) in shapes {
        let mut r = rng::stream(seed, name);
        let value = if shape.len() == 2 {
            rng::fan_in(&mut r, shape[0], shape[1])
        } else {
            Array::zeros(&shape)
        };
        store.insert(name, value, true)?;
    }
    Ok(())
}

/// Encodes each farthest-point patch with a shared per-point MLP and
/// max-pools over its neighbors.
pub fn encode_patches<T: Scalar>(
    g: &mut Graph<'_, T>,
    cloud: &PointCloud,
    cfg: &EncoderConfig,
) -> Result<PatchFeatures> {
    let grouping = group_points(cloud, cfg.patches, cfg.neighbors)?;
    encode_grouped(g, &grouping)
}

pub fn encode_grouped<T: Scalar>(g: &mut Graph<'_, T>, grouping: &Grouping) -> Result<PatchFeatures> {
    let x = g.constant(grouping.grouped.cast());
    let (w1, b1) = (g.param("pointenc.patch.w1")?, g.param("pointenc.patch.b1")?);
    let (w2, b2) = (g.param("pointenc.patch.w2")?, g.param("pointenc.patch.b2")?);
    let h = g.affine(x, w1, Some(b1))?;
    let h = g.silu(h);
    let h = g.affine(h, w2, Some(b2))?;
    let features = g.max_pool_groups(h, grouping.k)?;
    Ok(PatchFeatures {
        features,
        centers: grouping.centers.clone(),
    })
}

/// Rowwise affine → SiLU → affine from D to D1.
pub fn mlp_project<T: Scalar>(g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
    let (w1, b1) = (g.param("pointenc.mlp.w1")?, g.param("pointenc.mlp.b1")?);
    let (w2, b2) = (g.param("pointenc.mlp.w2")?, g.param("pointenc.mlp.b2")?);
    let h = g.affine(features, w1, Some(b1))?;
    let h = g.silu(h);
    g.affine(h, w2, Some(b2))
}
