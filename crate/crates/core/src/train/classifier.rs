//! Softmax classification of Gaussian blobs with an optional ERA head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Adam, Array, Mlp, Tape};
use crate::distributions::{categorical_entropy, standard_normal, CategoricalLogits};
use crate::era::discrete::{era_logits, era_logits_tape, EraDiscreteConfig, Inverse};
use crate::error::{EraError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of the class centres.
    pub center_scale: f64,
    /// Standard deviation of points around their centre.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 16,
            train: 5000,
            test: 1000,
            center_scale: 0.5,
            noise: 1.0,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    /// `[n, dim]`
    pub x: Array,
    pub y: Vec<usize>,
}

/// Balanced draws around random centres; train and test share the centres.
pub fn make_blobs(spec: &BlobSpec) -> Result<(Split, Split)> {
    if spec.classes < 2 || spec.dim == 0 || spec.train == 0 || spec.test == 0 {
        return Err(EraError::InvalidConfig(
            "blobs need >= 2 classes and nonempty splits".into(),
        ));
    }
    if !(spec.center_scale > 0.0 && spec.noise > 0.0) {
        return Err(EraError::InvalidConfig("blob scales must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<f64> = (0..spec.classes * spec.dim)
        .map(|_| spec.center_scale * standard_normal(&mut rng))
        .collect();
    let mut draw = |n: usize| -> Result<Split> {
        let mut x = Vec::with_capacity(n * spec.dim);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.classes;
            let center = &centers[c * spec.dim..(c + 1) * spec.dim];
            x.extend(center.iter().map(|m| m + spec.noise * standard_normal(&mut rng)));
            y.push(c);
        }
        Ok(Split {
            x: Array::new(vec![n, spec.dim], x)?,
            y,
        })
    };
    Ok((draw(spec.train)?, draw(spec.test)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Entropy floor of the ERA head; `None` trains a plain softmax head.
    pub target_entropy: Option<f64>,
    pub tau: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub data: BlobSpec,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            target_entropy: Some(0.6),
            tau: EraDiscreteConfig::DEFAULT_TAU,
            hidden: 64,
            epochs: 10,
            batch_size: 128,
            lr: 1e-3,
            data: BlobSpec::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn head(&self) -> Result<Option<EraDiscreteConfig>> {
        self.target_entropy
            .map(|h0| EraDiscreteConfig::with_tau(h0, self.tau, self.data.classes))
            .transpose()
    }

    pub fn validate(&self) -> Result<()> {
        self.head()?;
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(EraError::InvalidConfig(
                "hidden, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EraError::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Ties for the top class share the credit equally.
    pub test_accuracy: f64,
    /// Mean entropy of the predictive distribution on the test split.
    pub mean_entropy: f64,
    pub min_entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierRun {
    pub seed: u64,
    pub config: ClassifierConfig,
    pub epochs: Vec<EpochRecord>,
}

/// Tie-aware accuracy: a sample whose label is among `m` classes tied for the
/// top probability earns `1/m`.
pub fn tie_credit_accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let top = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tied = |q: f64| q >= top * (1.0 - 1e-9);
            if tied(p[y]) {
                1.0 / p.iter().filter(|&&q| tied(q)).count() as f64
            } else {
                0.0
            }
        })
        .sum();
    total / labels.len() as f64
}

fn predictive(
    mlp: &Mlp,
    head: Option<&EraDiscreteConfig>,
    x: &Array,
) -> Result<Vec<CategoricalLogits>> {
    let z = mlp.predict(x)?;
    let (n, _) = z.rows_cols();
    (0..n)
        .map(|i| {
            let logits = CategoricalLogits::new(z.row(i).to_vec())?;
            match head {
                Some(cfg) => era_logits(&logits, cfg, Inverse::Approx),
                None => Ok(logits),
            }
        })
        .collect()
}

fn evaluate(mlp: &Mlp, head: Option<&EraDiscreteConfig>, test: &Split) -> Result<(f64, f64, f64)> {
    let logits = predictive(mlp, head, &test.x)?;
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| l.probs()).collect();
    let entropies: Vec<f64> = logits.iter().map(categorical_entropy).collect();
    let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
    let min = entropies.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((tie_credit_accuracy(&probs, &test.y), mean, min))
}

/// Trains by cross-entropy on the (possibly ERA-transformed) logits.
pub fn train_classifier(cfg: &ClassifierConfig, seed: u64) -> Result<ClassifierRun> {
    Ok(train_classifier_model(cfg, seed)?.0)
}

/// [`train_classifier`], also returning the network (without the head).
pub fn train_classifier_model(cfg: &ClassifierConfig, seed: u64) -> Result<(ClassifierRun, Mlp)> {
    cfg.validate()?;
    let head = cfg.head()?;
    let (train, test) = make_blobs(&cfg.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.data.dim;
    let mut mlp = Mlp::new(&[d, cfg.hidden, cfg.hidden, cfg.data.classes], Activation::Relu, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.y.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                xb.extend_from_slice(train.x.row(i));
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.y[i]).collect();
            let tape = Tape::new();
            let bound = mlp.bind(&tape);
            let x = tape.constant(Array::new(vec![chunk.len(), d], xb)?);
            let z = bound.forward(&x)?;
            let z = match &head {
                Some(h) => era_logits_tape(&z, h)?,
                None => z,
            };
            let loss = z.log_softmax_rows().gather_cols(&labels)?.mean().neg();
            let grads = tape.backward(&loss)?;
            opt.step(&mut mlp, &bound.grads(&grads))?;
            loss_sum += loss.item();
            batches += 1;
        }
        let (test_accuracy, mean_entropy, min_entropy) = evaluate(&mlp, head.as_ref(), &test)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_accuracy,
            mean_entropy,
            min_entropy,
        });
    }
    let run = ClassifierRun {
        seed,
        config: cfg.clone(),
        epochs,
    };
    Ok((run, mlp))
}
