//! Seeded synthetic datasets and JSON file I/O for covariance sets and
//! labeled time-series sets.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ibp_hmm::TimeSeriesSet;
use crate::rng_from_seed;
use crate::spd_core::{apply_transform, random_transform, validate_spd, validate_spd_strict, RigidTransform, SpdMatrix};
use crate::stats::std_normal;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceDataset {
    pub dim: usize,
    pub matrices: Vec<SpdMatrix>,
    pub labels: Option<Vec<i64>>,
    /// Grid position (row, col) of each matrix, for lattices.
    pub coords: Option<Vec<(usize, usize)>>,
}

impl CovarianceDataset {
    pub fn new(matrices: Vec<SpdMatrix>, labels: Option<Vec<i64>>) -> Result<Self> {
        let dim = matrices.first().map(|m| m.dim()).ok_or_else(|| Error::Schema("no matrices".into()))?;
        if let Some(m) = matrices.iter().find(|m| m.dim() != dim) {
            return Err(Error::Schema(format!("mixed dimensions {dim} and {}", m.dim())));
        }
        if let Some(l) = &labels {
            if l.len() != matrices.len() {
                return Err(Error::Schema(format!("{} labels for {} matrices", l.len(), matrices.len())));
            }
        }
        Ok(CovarianceDataset { dim, matrices, labels, coords: None })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Time series with per-step ground truth at the transform-dependent and
/// transform-invariant levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTimeSeriesSet {
    pub data: TimeSeriesSet,
    pub labels_dependent: Option<Vec<Vec<i64>>>,
    pub labels_invariant: Option<Vec<Vec<i64>>>,
}

impl LabeledTimeSeriesSet {
    fn check(&self) -> Result<()> {
        for labels in [&self.labels_dependent, &self.labels_invariant].into_iter().flatten() {
            if labels.len() != self.data.len() {
                return Err(Error::Schema(format!("{} label sequences for {} series", labels.len(), self.data.len())));
            }
            for (i, (l, s)) in labels.iter().zip(&self.data.series).enumerate() {
                if l.len() != s.nrows() {
                    return Err(Error::Schema(format!("series {i}: {} labels for {} steps", l.len(), s.nrows())));
                }
            }
        }
        Ok(())
    }
}

/// Σ₄ of the 3-D toy set.
pub const TOY3D_SIGMA4: [f64; 9] = [1.0, 1.4, 0.1, 1.4, 2.0, 0.1, 0.1, 0.1, 3.0];
/// Frobenius size of the Σ₂ perturbation relative to ‖Σ₁‖.
pub const TOY3D_NOISE: f64 = 0.02;

/// {Σ₁, scaled+noisy Σ₁, rotated Σ₁, Σ₄, rotated+scaled Σ₄}, labels {1,1,1,2,2}.
pub fn gen_toy3d(seed: u64) -> CovarianceDataset {
    let mut rng = rng_from_seed(seed);
    let s1 = SpdMatrix::from_row_slice(3, &[2.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 2.0]).expect("Σ₁ is SPD");
    let s4 = SpdMatrix::from_row_slice(3, &TOY3D_SIGMA4).expect("Σ₄ is SPD");

    let noise = symmetric_noise(3, TOY3D_NOISE * s1.matrix().norm(), &mut rng);
    let scale = rng.random_range(1.5..3.0);
    let s2 = validate_spd(&((s1.matrix() + noise) * scale)).expect("small perturbation keeps Σ₁ SPD");
    let rot = random_transform(3, &mut rng, (1.0, 1.0));
    let s3 = apply_transform(&s1, &rot).expect("rotation keeps SPD");
    let mut rot = random_transform(3, &mut rng, (1.0, 1.0));
    rot.scale = 2.0;
    let s5 = apply_transform(&s4, &rot).expect("rotation keeps SPD");

    CovarianceDataset::new(vec![s1, s2, s3, s4, s5], Some(vec![1, 1, 1, 2, 2])).expect("consistent by construction")
}

/// Symmetric Gaussian matrix with Frobenius norm `size`.
fn symmetric_noise<R: Rng + ?Sized>(n: usize, size: f64, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| std_normal(rng));
    let sym = (&g + g.transpose()) * 0.5;
    let norm = sym.norm();
    if norm == 0.0 {
        sym
    } else {
        sym * (size / norm)
    }
}

/// Three 6-D eigenvalue templates, 20 random rotations each.
pub fn gen_toy6d(seed: u64) -> CovarianceDataset {
    let mut rng = rng_from_seed(seed);
    let shapes: [[f64; 6]; 3] =
        [[1.0; 6], [1.0, 10.0, 10.0, 10.0, 1.0, 1.0], [1.0, 10.0, 20.0, 30.0, 40.0, 50.0]];
    let mut matrices = Vec::with_capacity(60);
    let mut labels = Vec::with_capacity(60);
    for (c, shape) in shapes.iter().enumerate() {
        let eps = std_normal(&mut rng).abs().max(1e-3);
        let base = DMatrix::from_diagonal(&DVector::from_iterator(6, shape.iter().map(|v| v * eps)));
        let base = validate_spd(&base).expect("positive diagonal");
        for _ in 0..20 {
            let rot = random_transform(6, &mut rng, (1.0, 1.0));
            matrices.push(apply_transform(&base, &rot).expect("rotation keeps SPD"));
            labels.push(c as i64 + 1);
        }
    }
    CovarianceDataset::new(matrices, Some(labels)).expect("consistent by construction")
}

/// Transformation and switching parameters of the 2-D toy time series.
#[derive(Debug, Clone, PartialEq)]
pub struct Toy2dParams {
    pub translation: [f64; 2],
    /// Eigenvalue scaling applied by the first transformation.
    pub scale: f64,
    /// Rotation applied by the second transformation, degrees.
    pub rotation_deg: f64,
    pub length_range: (usize, usize),
    pub self_transition: f64,
}

impl Default for Toy2dParams {
    fn default() -> Self {
        Toy2dParams {
            translation: [3.0, 3.0],
            scale: 3.0,
            rotation_deg: 60.0,
            length_range: (300, 500),
            self_transition: 0.99,
        }
    }
}

/// Ground-truth emission models of the 2-D toy set: θ₁, θ₂, θ₃ = f₁(θ₂),
/// θ₄ = f₂(θ₃).
pub fn toy2d_emissions(p: &Toy2dParams) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let rot = |deg: f64| {
        let (s, c) = deg.to_radians().sin_cos();
        Matrix2::new(c, -s, s, c)
    };
    let r30 = rot(30.0);
    let sigma2 = r30 * Matrix2::new(1.2, 0.0, 0.0, 0.01) * r30.transpose();
    let mu2 = nalgebra::Vector2::new(5.0, 0.0);
    let shift = nalgebra::Vector2::new(p.translation[0], p.translation[1]);
    let sigma3 = sigma2 * p.scale;
    let mu3 = mu2 + shift;
    let r = rot(p.rotation_deg);
    let sigma4 = r * sigma3 * r.transpose();
    let mu4 = mu3 + shift;
    let to_d = |m: nalgebra::Vector2<f64>, s: Matrix2<f64>| {
        (DVector::from_column_slice(m.as_slice()), DMatrix::from_column_slice(2, 2, s.as_slice()))
    };
    vec![
        to_d(nalgebra::Vector2::new(0.0, 0.0), Matrix2::new(0.3, 0.0, 0.0, 0.3)),
        to_d(mu2, sigma2),
        to_d(mu3, sigma3),
        to_d(mu4, sigma4),
    ]
}

/// States visited by each of the four toy series (θ₁ plus one of θ₂–θ₄).
pub const TOY2D_SERIES_STATES: [[usize; 2]; 4] = [[0, 1], [0, 2], [0, 3], [0, 1]];

pub fn gen_toy2d_timeseries(seed: u64) -> LabeledTimeSeriesSet {
    gen_toy2d_with(seed, &Toy2dParams::default())
}

pub fn gen_toy2d_with(seed: u64, p: &Toy2dParams) -> LabeledTimeSeriesSet {
    let mut rng = rng_from_seed(seed);
    let models = toy2d_emissions(p);
    let chols: Vec<DMatrix<f64>> = models
        .iter()
        .map(|(_, s)| s.clone().cholesky().expect("toy covariances are SPD").l())
        .collect();
    let mut series = Vec::new();
    let mut dep = Vec::new();
    let mut inv = Vec::new();
    for states in TOY2D_SERIES_STATES {
        let t_len = rng.random_range(p.length_range.0..=p.length_range.1);
        let mut data = DMatrix::zeros(t_len, 2);
        let mut labels = Vec::with_capacity(t_len);
        let mut cur = rng.random_range(0..states.len());
        for t in 0..t_len {
            if t > 0 && rng.random::<f64>() >= p.self_transition {
                let mut next = rng.random_range(0..states.len() - 1);
                if next >= cur {
                    next += 1;
                }
                cur = next;
            }
            let k = states[cur];
            let z = DVector::from_fn(2, |_, _| std_normal(&mut rng));
            let x = &models[k].0 + &chols[k] * z;
            data.set_row(t, &x.transpose());
            labels.push(k);
        }
        series.push(data);
        dep.push(labels.iter().map(|k| *k as i64 + 1).collect());
        inv.push(labels.iter().map(|k| if *k == 0 { 1 } else { 2 }).collect());
    }
    LabeledTimeSeriesSet {
        data: TimeSeriesSet::new(series).expect("valid by construction"),
        labels_dependent: Some(dep),
        labels_invariant: Some(inv),
    }
}

/// rows × cols grid of 3×3 SPD matrices split into K contiguous bands (in
/// row-major order), each band a template with small per-cell rotations.
pub fn gen_spd_lattice(rows: usize, cols: usize, regions: usize, seed: u64) -> Result<CovarianceDataset> {
    let cells = rows * cols;
    if regions == 0 || regions > cells {
        return Err(Error::InvalidArgument(format!("need 1 ≤ K ≤ {cells}, got {regions}")));
    }
    let mut rng = rng_from_seed(seed);
    // pairwise B-SPCM between these (τ = 1) stays below 0.08
    const SHAPES: [[f64; 3]; 5] =
        [[1.0, 1.0, 1.0], [1.0, 1.0, 64.0], [1.0, 1.0, 4096.0], [1.0, 64.0, 64.0], [1.0, 64.0, 4096.0]];
    let templates: Vec<SpdMatrix> = (0..regions)
        .map(|k| {
            let shape = if k < SHAPES.len() {
                SHAPES[k]
            } else {
                [1.0, rng.random_range(1.0..64.0), rng.random_range(64.0..4096.0)]
            };
            let base = validate_spd(&DMatrix::from_diagonal(&DVector::from_row_slice(&shape))).expect("positive");
            let rot = random_transform(3, &mut rng, (1.0, 1.0));
            apply_transform(&base, &rot).expect("rotation keeps SPD")
        })
        .collect();
    let mut matrices = Vec::with_capacity(cells);
    let mut labels = Vec::with_capacity(cells);
    let mut coords = Vec::with_capacity(cells);
    for idx in 0..cells {
        let k = idx * regions / cells;
        let jitter = small_rotation(3, 0.05, &mut rng);
        matrices.push(apply_transform(&templates[k], &jitter)?);
        labels.push(k as i64 + 1);
        coords.push((idx / cols, idx % cols));
    }
    let mut ds = CovarianceDataset::new(matrices, Some(labels))?;
    ds.coords = Some(coords);
    Ok(ds)
}

/// exp of a random skew-symmetric matrix with entries of size `angle`.
fn small_rotation<R: Rng + ?Sized>(n: usize, angle: f64, rng: &mut R) -> RigidTransform {
    let g = DMatrix::from_fn(n, n, |_, _| angle * std_normal(rng));
    let skew = (&g - g.transpose()) * 0.5;
    RigidTransform { rotation: skew.exp(), scale: 1.0 }
}

#[derive(Serialize, Deserialize)]
struct CovarianceFile {
    n_dim: usize,
    matrices: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<[usize; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct SeriesEntry {
    data: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels_dependent: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels_invariant: Option<Vec<i64>>,
}

#[derive(Serialize, Deserialize)]
struct TimeSeriesFile {
    dim: usize,
    series: Vec<SeriesEntry>,
}

fn parse_error(context: &str, e: serde_json::Error) -> Error {
    Error::Parse { context: format!("{context}, line {} column {}", e.line(), e.column()), message: e.to_string() }
}

pub fn covariance_to_json(ds: &CovarianceDataset) -> String {
    let file = CovarianceFile {
        n_dim: ds.dim,
        matrices: ds.matrices.iter().map(|m| m.to_row_vec()).collect(),
        labels: ds.labels.clone(),
        coords: ds.coords.as_ref().map(|c| c.iter().map(|(r, c)| [*r, *c]).collect()),
    };
    serde_json::to_string_pretty(&file).expect("plain data serializes")
}

pub fn covariance_from_json(text: &str) -> Result<CovarianceDataset> {
    let file: CovarianceFile = serde_json::from_str(text).map_err(|e| parse_error("covariance set", e))?;
    let n = file.n_dim;
    if n == 0 {
        return Err(Error::Schema("n_dim must be positive".into()));
    }
    let matrices = file
        .matrices
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if m.len() != n * n {
                return Err(Error::Schema(format!("matrix {i} has {} entries, expected {}", m.len(), n * n)));
            }
            validate_spd_strict(&DMatrix::from_row_slice(n, n, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = CovarianceDataset::new(matrices, file.labels)?;
    if let Some(c) = file.coords {
        if c.len() != ds.len() {
            return Err(Error::Schema(format!("{} coords for {} matrices", c.len(), ds.len())));
        }
        ds.coords = Some(c.into_iter().map(|[r, c]| (r, c)).collect());
    }
    Ok(ds)
}

pub fn timeseries_to_json(ds: &LabeledTimeSeriesSet) -> String {
    let series = ds
        .data
        .series
        .iter()
        .enumerate()
        .map(|(i, s)| SeriesEntry {
            data: s.row_iter().map(|r| r.iter().cloned().collect()).collect(),
            labels_dependent: ds.labels_dependent.as_ref().map(|l| l[i].clone()),
            labels_invariant: ds.labels_invariant.as_ref().map(|l| l[i].clone()),
        })
        .collect();
    serde_json::to_string_pretty(&TimeSeriesFile { dim: ds.data.dim, series }).expect("plain data serializes")
}

pub fn timeseries_from_json(text: &str) -> Result<LabeledTimeSeriesSet> {
    let file: TimeSeriesFile = serde_json::from_str(text).map_err(|e| parse_error("time-series set", e))?;
    let mut series = Vec::with_capacity(file.series.len());
    let mut dep = Vec::new();
    let mut inv = Vec::new();
    for (i, entry) in file.series.into_iter().enumerate() {
        if let Some(r) = entry.data.iter().position(|r| r.len() != file.dim) {
            return Err(Error::Schema(format!("series {i} row {r} has {} values, expected {}", entry.data[r].len(), file.dim)));
        }
        let flat: Vec<f64> = entry.data.iter().flatten().cloned().collect();
        series.push(DMatrix::from_row_slice(entry.data.len(), file.dim, &flat));
        dep.push(entry.labels_dependent);
        inv.push(entry.labels_invariant);
    }
    let data = TimeSeriesSet::new(series).map_err(|e| Error::Schema(e.to_string()))?;
    let collect = |v: Vec<Option<Vec<i64>>>| -> Result<Option<Vec<Vec<i64>>>> {
        match v.iter().filter(|l| l.is_some()).count() {
            0 => Ok(None),
            n if n == v.len() => Ok(Some(v.into_iter().flatten().collect())),
            _ => Err(Error::Schema("labels given for only some series".into())),
        }
    };
    let out = LabeledTimeSeriesSet { data, labels_dependent: collect(dep)?, labels_invariant: collect(inv)? };
    out.check()?;
    Ok(out)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Io(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_covariances(path: &Path, ds: &CovarianceDataset) -> Result<()> {
    write_atomic(path, &covariance_to_json(ds))
}

/// Reads a whole file, naming it in the error.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_covariances(path: &Path) -> Result<CovarianceDataset> {
    covariance_from_json(&read_text(path)?)
}

pub fn save_timeseries(path: &Path, ds: &LabeledTimeSeriesSet) -> Result<()> {
    write_atomic(path, &timeseries_to_json(ds))
}

pub fn load_timeseries(path: &Path) -> Result<LabeledTimeSeriesSet> {
    timeseries_from_json(&read_text(path)?)
}
