//! Synthetic experiment fixtures.
//!
//! Stand-ins for extracted model outputs, used by the test suites, the
//! benchmarks and the `synth` CLI command. Every model is derived from a
//! shared class-structured latent matrix: representations are rotated copies
//! of a model-specific latent, logits come from a nearest-centroid head on
//! that latent.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::funcsim::predictions;
use crate::tensor_io::{
    write_manifest, write_tensor, ExperimentManifest, InputType, ModelRecord, TensorFile, TensorIoError,
};
use crate::{LabelVector, Matrix};

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-random orthogonal matrix: QR of a Gaussian matrix with the signs of
/// R's diagonal folded into Q.
pub fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> Matrix {
    let qr = gaussian(dim, dim, rng).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Class-structured latent points: `rows` samples around `classes` random
/// centroids, labels assigned round-robin.
#[derive(Clone, Debug)]
pub struct Latent {
    pub points: Matrix,
    pub centroids: Matrix,
    pub labels: LabelVector,
}

impl Latent {
    pub fn sample(rows: usize, dim: usize, classes: usize, spread: f64, rng: &mut impl Rng) -> Self {
        let centroids = gaussian(classes, dim, rng) * 2.0;
        let labels: LabelVector = (0..rows).map(|i| i % classes).collect();
        let noise = gaussian(rows, dim, rng) * spread;
        let points = Matrix::from_fn(rows, dim, |i, j| centroids[(labels[i], j)] + noise[(i, j)]);
        Latent {
            points,
            centroids,
            labels,
        }
    }

    /// Logits of a dot-product head over the centroids.
    pub fn head(&self, latent: &Matrix) -> Matrix {
        latent * self.centroids.transpose()
    }
}

fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = predictions(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Writes the three tensor files of one model and returns its record.
pub fn write_model(
    dir: &Path,
    name: &str,
    epsilon: f64,
    dataset: &str,
    activations: &Matrix,
    logits: &Matrix,
    labels: &[usize],
) -> Result<ModelRecord, TensorIoError> {
    let path = |kind: &str| dir.join(format!("{name}.{kind}.npy"));
    let record = ModelRecord {
        name: name.to_string(),
        architecture: "synthetic".into(),
        epsilon,
        dataset: dataset.to_string(),
        clean_accuracy: accuracy(logits, labels),
        activations_path: path("activations"),
        logits_path: path("logits"),
        labels_path: path("labels"),
    };
    write_tensor(&record.activations_path, &TensorFile::from_matrix_f32(activations))?;
    write_tensor(&record.logits_path, &TensorFile::from_matrix_f32(logits))?;
    write_tensor(&record.labels_path, &TensorFile::from_labels(labels))?;
    Ok(record)
}

fn manifest(dataset: &str, classes: usize, models: Vec<ModelRecord>) -> ExperimentManifest {
    ExperimentManifest {
        dataset: dataset.to_string(),
        num_classes: classes,
        input_type: InputType::Regular,
        generator_model: None,
        models,
    }
}

/// Three models over one latent: `base`, an orthogonally rotated and
/// rescaled copy `rotated`, and `noisy`, the base plus isotropic noise.
/// Returns the manifest path.
pub fn compare_fixture(dir: &Path, seed: u64) -> Result<PathBuf, TensorIoError> {
    let (n, dim, classes) = (120, 16, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = Latent::sample(n, dim, classes, 1.0, &mut rng);
    let q = random_orthogonal(dim, &mut rng);
    let noisy = &latent.points + gaussian(n, dim, &mut rng) * 1.5;
    let logits = latent.head(&latent.points);
    let models = vec![
        write_model(dir, "base", 0.0, "synthetic", &latent.points, &logits, &latent.labels)?,
        write_model(
            dir,
            "rotated",
            0.0,
            "synthetic",
            &(&latent.points * q * 2.5),
            &logits,
            &latent.labels,
        )?,
        write_model(
            dir,
            "noisy",
            0.0,
            "synthetic",
            &noisy,
            &latent.head(&noisy),
            &latent.labels,
        )?,
    ];
    let path = dir.join("manifest.json");
    write_manifest(&path, &manifest("synthetic", classes, models))?;
    Ok(path)
}

/// Epsilon labels and mixing weights of the sweep fixture, from independent
/// (weight 0) to orthogonally equivalent (weight 1) representations.
pub const SWEEP_LEVELS: [(f64, f64); 5] = [(0.0, 0.0), (0.25, 0.25), (0.5, 0.5), (1.0, 0.75), (3.0, 1.0)];

/// One manifest per entry of [`SWEEP_LEVELS`]. Model `j` at mixing weight
/// `a` has latent `a * X + (1 - a) * G_j` for a shared latent `X` and private
/// Gaussian `G_j`, observed through its own rotation.
pub fn sweep_fixture(dir: &Path, models_per_level: usize, seed: u64) -> Result<Vec<PathBuf>, TensorIoError> {
    let (n, dim, classes) = (100, 12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = Latent::sample(n, dim, classes, 1.0, &mut rng);
    let scale = shared.points.norm() / ((n * dim) as f64).sqrt();
    let mut paths = Vec::new();
    for (level, &(epsilon, weight)) in SWEEP_LEVELS.iter().enumerate() {
        let level_dir = dir.join(format!("eps{level}"));
        std::fs::create_dir_all(&level_dir).map_err(|source| TensorIoError::IoFailure {
            path: level_dir.clone(),
            source,
        })?;
        let mut models = Vec::new();
        for j in 0..models_per_level {
            let own = gaussian(n, dim, &mut rng) * scale;
            let latent = &shared.points * weight + own * (1.0 - weight);
            let q = random_orthogonal(dim, &mut rng);
            models.push(write_model(
                &level_dir,
                &format!("model{j}"),
                epsilon,
                "synthetic",
                &(&latent * q),
                &shared.head(&latent),
                &shared.labels,
            )?);
        }
        let path = level_dir.join("manifest.json");
        write_manifest(&path, &manifest("synthetic", classes, models))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Paths written by [`probe_fixture`].
#[derive(Clone, Debug)]
pub struct ProbeFixture {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

/// Models sharing a class-structured latent, each with a rotated
/// representation and a deliberately perturbed original classifier head.
/// Training and evaluation splits go into separate manifests with matching
/// model names.
pub fn probe_fixture(dir: &Path, models: usize, seed: u64) -> Result<ProbeFixture, TensorIoError> {
    let (n_train, n_eval, dim, classes) = (600, 200, 10, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = gaussian(classes, dim, &mut rng) * 2.0;
    let split = |rows: usize, rng: &mut ChaCha8Rng| {
        let labels: LabelVector = (0..rows).map(|i| i % classes).collect();
        let noise = gaussian(rows, dim, rng);
        let points = Matrix::from_fn(rows, dim, |i, j| centroids[(labels[i], j)] + noise[(i, j)]);
        (points, labels)
    };
    let (train_x, train_y) = split(n_train, &mut rng);
    let (eval_x, eval_y) = split(n_eval, &mut rng);

    let (train_dir, eval_dir) = (dir.join("train"), dir.join("eval"));
    for d in [&train_dir, &eval_dir] {
        std::fs::create_dir_all(d).map_err(|source| TensorIoError::IoFailure {
            path: d.clone(),
            source,
        })?;
    }
    let mut train_models = Vec::new();
    let mut eval_models = Vec::new();
    for j in 0..models {
        let name = format!("model{j}");
        let q = random_orthogonal(dim, &mut rng);
        let own_train = &train_x + gaussian(n_train, dim, &mut rng) * 0.3;
        let own_eval = &eval_x + gaussian(n_eval, dim, &mut rng) * 0.3;
        // an original head that only roughly follows the centroids
        let head = &centroids + gaussian(classes, dim, &mut rng) * 1.5;
        let logits = |x: &Matrix| x * head.transpose();
        train_models.push(write_model(
            &train_dir,
            &name,
            3.0,
            "synthetic",
            &(&own_train * &q),
            &logits(&own_train),
            &train_y,
        )?);
        eval_models.push(write_model(
            &eval_dir,
            &name,
            3.0,
            "synthetic",
            &(&own_eval * &q),
            &logits(&own_eval),
            &eval_y,
        )?);
    }
    let fixture = ProbeFixture {
        train_manifest: train_dir.join("manifest.json"),
        eval_manifest: eval_dir.join("manifest.json"),
    };
    write_manifest(&fixture.train_manifest, &manifest("synthetic", classes, train_models))?;
    write_manifest(&fixture.eval_manifest, &manifest("synthetic", classes, eval_models))?;
    Ok(fixture)
}
