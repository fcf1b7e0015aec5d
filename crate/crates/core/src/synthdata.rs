//! Seeded synthetic multi-label data. A scene mixture produces correlated
//! multi-hot label vectors; visual features are an `M x d` token grid of
//! background noise with prototype tokens planted at the slots of each
//! positive label. Prototypes are a fixed linear map of the pseudo-text
//! label encodings plus small noise, so the linguistic branch carries real
//! signal about the visual content.

use crate::error::{Error, Result};
use crate::rng::{indexed_rng, stream_rng};
use crate::text_sim::{PseudoTextEncoder, TokenEmbeddingTable, Vocabulary};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataSpec {
    pub c: usize,
    pub d: usize,
    pub m: usize,
    /// Scene count.
    pub k: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Background/jitter noise scale.
    pub noise_sigma: f64,
    /// Token slots planted per positive label.
    pub n_placements: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            c: 20,
            d: 32,
            m: 16,
            k: 5,
            train_size: 2000,
            test_size: 1000,
            seed: 7,
            noise_sigma: 0.5,
            n_placements: 1,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.d == 0 || self.m == 0 || self.k == 0 {
            return Err(Error::Config("c, d, m, k must all be >= 1".into()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("split sizes must be >= 1".into()));
        }
        if self.n_placements == 0 || self.n_placements > self.m {
            return Err(Error::Config(format!(
                "n_placements {} outside 1..={}",
                self.n_placements, self.m
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Latent mixture over K scenes with per-scene label activation
/// probabilities.
#[derive(Clone, Debug)]
pub struct SceneModel {
    pub k: usize,
    pub c: usize,
    /// Scene prior, sums to 1.
    pub pi: Vec<f64>,
    /// `[K, C]` activation probabilities.
    pub q: Vec<f64>,
}

/// Core labels per scene and their activation probability; remaining
/// labels keep a small base rate.
const CORE_LABELS_PER_SCENE: usize = crate::text_sim::SCENE_GROUP_SIZE;
const CORE_PROB: f64 = 0.8;
const BASE_PROB: f64 = 0.02;
/// Geometric decay of the scene prior: later scenes (and their core
/// labels) are progressively rarer, mirroring the long-tailed label
/// frequencies of real multi-label datasets.
const SCENE_PRIOR_DECAY: f64 = 1.0;

impl SceneModel {
    pub fn generate(c: usize, k: usize, _seed: u64) -> Result<Self> {
        if c == 0 || k == 0 {
            return Err(Error::Config("scene model needs c, k >= 1".into()));
        }
        let mut pi: Vec<f64> = (0..k).map(|s| SCENE_PRIOR_DECAY.powi(s as i32)).collect();
        let z: f64 = pi.iter().sum();
        for p in &mut pi {
            *p /= z;
        }
        let mut q = vec![BASE_PROB; k * c];
        let core = CORE_LABELS_PER_SCENE.min(c);
        // Scenes take consecutive label blocks, matching the lexical
        // grouping of the synthetic vocabulary (co-occurring labels are
        // also semantically related there).
        for s in 0..k {
            for i in 0..core {
                let j = (s * core + i) % c;
                q[s * c + j] = CORE_PROB;
            }
        }
        SceneModel::new(pi, q, c)
    }

    pub fn new(pi: Vec<f64>, q: Vec<f64>, c: usize) -> Result<Self> {
        let k = pi.len();
        if q.len() != k * c {
            return Err(Error::Dimension(format!(
                "scene model: {k} scenes x {c} labels vs {} probabilities",
                q.len()
            )));
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || pi.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("scene prior must be a distribution".into()));
        }
        if q.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config("activation probabilities must be in [0,1]".into()));
        }
        if q.iter().all(|&p| p == 0.0) {
            return Err(Error::Unsatisfiable(
                "all activation probabilities are zero; no sample can have a positive".into(),
            ));
        }
        Ok(SceneModel { k, c, pi, q })
    }

    /// Marginal frequency of label `j`: `sum_k pi_k q_k[j]`.
    pub fn marginal(&self, j: usize) -> f64 {
        (0..self.k).map(|s| self.pi[s] * self.q[s * self.c + j]).sum()
    }

    /// Pairwise co-occurrence probability `sum_k pi_k q_k[i] q_k[j]`.
    pub fn cooccurrence(&self, i: usize, j: usize) -> f64 {
        (0..self.k)
            .map(|s| self.pi[s] * self.q[s * self.c + i] * self.q[s * self.c + j])
            .sum()
    }
}

/// Per-label visual prototypes `v_j = normalize(A enc(name_j) + eps_j)`,
/// scaled to a fixed norm.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub d: usize,
    /// `[C, d]` row-major.
    pub protos: Vec<f64>,
    /// `[C, d]`: the noiseless anchors `A enc(name_j)`, kept for the
    /// alignment diagnostics.
    pub anchors: Vec<f64>,
    /// The affine offset g of the text-to-vision map, shared by every
    /// visual token (objects and background alike).
    pub gap: Vec<f64>,
}

/// Relative noise added to the anchors before normalization.
const PROTO_EPS_SCALE: f64 = 0.3;
/// Off-diagonal strength of the seeded text-to-visual mixing map.
const PROTO_MIX_SCALE: f64 = 0.2;
/// L2 norm of the label-specific part of each prototype.
pub const PROTO_NORM: f64 = 2.0;
/// Norm of the affine offset of the mixing map, as a multiple of
/// PROTO_NORM. The text-to-vision map is affine, A(x) = Mx + g: contrastive
/// vision-language spaces exhibit a "modality gap" — image embeddings sit
/// in a cone displaced from the text cone by a near-constant offset — and
/// they are strongly anisotropic around their own mean. The offset g
/// reproduces both. Downstream it doubles as a calibration channel: every
/// token carries g, so ⟨pooled features, g⟩ is exactly constant across
/// samples and similarity heads (Eq. 10 has no bias term) can move their
/// operating point along g without disturbing per-label ranking.
pub const PROTO_GAP: f64 = 2.0;

impl PrototypeBank {
    pub fn build(
        vocab: &Vocabulary,
        table: &TokenEmbeddingTable,
        enc: &PseudoTextEncoder,
        seed: u64,
    ) -> Result<Self> {
        let d = enc.d;
        let c = vocab.len();
        let mut rng = stream_rng(seed, "prototype_bank");
        // Near-identity mixing: visual prototypes live in (almost) the
        // same space as the text encodings, the desk-scale analogue of a
        // contrastively aligned vision-language embedding. A strongly
        // mixed map would leave the linguistic branch with nothing to
        // contribute zero-shot.
        let off_scale = PROTO_MIX_SCALE / (d as f64).sqrt();
        let mut mixing: Vec<f64> =
            (0..d * d).map(|_| rng.gen_range(-1.0..1.0) * off_scale).collect();
        for i in 0..d {
            mixing[i * d + i] += 1.0;
        }
        let mut gap: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let gnorm = gap.iter().map(|x| x * x).sum::<f64>().sqrt();
        for v in &mut gap {
            *v *= PROTO_GAP * PROTO_NORM / gnorm;
        }
        // First pass: linear part of the mixing map applied to each name.
        let mut raw = Vec::with_capacity(c);
        for name in vocab.names() {
            let e = enc.encode_vec(&table.embed_text(name)?)?;
            let mut a = vec![0.0; d];
            for (i, ai) in a.iter_mut().enumerate() {
                for (j, ej) in e.iter().enumerate() {
                    *ai += mixing[i * d + j] * ej;
                }
            }
            raw.push(a);
        }
        // Fold one global scale into the mixing map so anchors sit at
        // PROTO_NORM on average; the map stays a fixed linear-plus-offset
        // transform, it is just expressed in units the dataset uses.
        let mean_norm = raw
            .iter()
            .map(|a| a.iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / c as f64;
        if mean_norm < 1e-12 {
            return Err(Error::Degenerate("all anchors collapsed to zero".into()));
        }
        let mut protos = Vec::with_capacity(c * d);
        let mut anchors = Vec::with_capacity(c * d);
        for (name, mut anchor) in vocab.names().iter().zip(raw) {
            for a in &mut anchor {
                *a *= PROTO_NORM / mean_norm;
            }
            let rms = (anchor.iter().map(|x| x * x).sum::<f64>() / d as f64).sqrt();
            let mut proto: Vec<f64> = anchor
                .iter()
                .map(|&a| a + normal(&mut rng) * PROTO_EPS_SCALE * rms)
                .collect();
            let norm = proto.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Degenerate(format!("prototype for {name} collapsed")));
            }
            // renormalize the label-specific part, then apply the affine
            // offset of the mixing map to prototype and anchor alike
            for ((p, a), g) in proto.iter_mut().zip(anchor.iter_mut()).zip(&gap) {
                *p = *p * PROTO_NORM / norm + g;
                *a += g;
            }
            protos.extend(proto);
            anchors.extend(anchor);
        }
        Ok(PrototypeBank { d, protos, anchors, gap })
    }

    pub fn proto(&self, j: usize) -> &[f64] {
        &self.protos[j * self.d..(j + 1) * self.d]
    }

    /// Mean over labels of `cos(v_j, A enc(name_j))`.
    pub fn alignment(&self) -> f64 {
        let c = self.protos.len() / self.d;
        let mut sum = 0.0;
        for j in 0..c {
            let v = &self.protos[j * self.d..(j + 1) * self.d];
            let a = &self.anchors[j * self.d..(j + 1) * self.d];
            let dot: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            sum += dot / (nv * na);
        }
        sum / c as f64
    }
}

/// Box-Muller standard normal.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Draws a scene and a multi-hot label vector, resampling until at least
/// one label is positive.
pub fn sample_labels(model: &SceneModel, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, usize)> {
    for _ in 0..100_000 {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut scene = model.k - 1;
        for (s, p) in model.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                scene = s;
                break;
            }
        }
        let y: Vec<f64> = (0..model.c)
            .map(|j| {
                if rng.gen_range(0.0..1.0) < model.q[scene * model.c + j] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        if y.iter().any(|&v| v == 1.0) {
            return Ok((y, scene));
        }
    }
    Err(Error::Unsatisfiable(
        "sample_labels: no positive label after 100000 draws".into(),
    ))
}

/// Renders the `M x d` feature grid for one label vector: background noise
/// everywhere, prototype (plus jitter) planted in `n_placements` distinct
/// slots per positive label.
pub fn render_features(
    y: &[f64],
    bank: &PrototypeBank,
    rng: &mut ChaCha8Rng,
    m: usize,
    n_placements: usize,
    noise_sigma: f64,
) -> Result<Vec<f64>> {
    let positives: Vec<usize> = y
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(j, _)| j)
        .collect();
    if positives.len() * n_placements > m {
        return Err(Error::Capacity(format!(
            "render_features: {} positives x {} placements > {} slots",
            positives.len(),
            n_placements,
            m
        )));
    }
    let d = bank.d;
    // Every token sits in the displaced image cone: the modality offset g
    // is a property of the visual space, not of the objects in it. Keeping
    // it constant across tokens means any convex mixture of tokens (global
    // pooling, attention readouts) carries exactly one copy of g, so the
    // offset never turns into per-sample ranking noise.
    let mut x: Vec<f64> = (0..m * d)
        .map(|i| bank.gap[i % d] + normal(rng) * noise_sigma)
        .collect();
    let mut slots: Vec<usize> = (0..m).collect();
    slots.shuffle(rng);
    let mut next = 0usize;
    for &j in &positives {
        let proto = bank.proto(j);
        for _ in 0..n_placements {
            let slot = slots[next];
            next += 1;
            for (t, p) in proto.iter().enumerate() {
                x[slot * d + t] = p + normal(rng) * noise_sigma;
            }
        }
    }
    Ok(x)
}

/// One generated split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n: usize,
    pub c: usize,
    pub m: usize,
    pub d: usize,
    /// `[N, M, d]`
    pub x: Vec<f64>,
    /// `[N, C]` multi-hot
    pub y: Vec<f64>,
    /// Withheld from the model; used only by generator diagnostics.
    pub scene_ids: Vec<usize>,
}

impl Dataset {
    pub fn sample_x(&self, i: usize) -> &[f64] {
        &self.x[i * self.m * self.d..(i + 1) * self.m * self.d]
    }

    pub fn sample_y(&self, i: usize) -> &[f64] {
        &self.y[i * self.c..(i + 1) * self.c]
    }
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub scene_model: SceneModel,
    pub bank: PrototypeBank,
}

fn generate_split(
    spec: &DataSpec,
    model: &SceneModel,
    bank: &PrototypeBank,
    stream: &str,
    n: usize,
) -> Result<Dataset> {
    let mut x = Vec::with_capacity(n * spec.m * spec.d);
    let mut y = Vec::with_capacity(n * spec.c);
    let mut scene_ids = Vec::with_capacity(n);
    for i in 0..n {
        // independent per-sample substream: samples can be generated in any
        // order (or in parallel) without changing the result
        let mut rng = indexed_rng(spec.seed, stream, i as u64);
        let (yi, scene) = loop {
            let (yi, scene) = sample_labels(model, &mut rng)?;
            let positives = yi.iter().filter(|&&v| v == 1.0).count();
            if positives * spec.n_placements <= spec.m {
                break (yi, scene);
            }
        };
        let xi = render_features(&yi, bank, &mut rng, spec.m, spec.n_placements, spec.noise_sigma)?;
        x.extend(xi);
        y.extend(yi);
        scene_ids.push(scene);
    }
    Ok(Dataset { n, c: spec.c, m: spec.m, d: spec.d, x, y, scene_ids })
}

/// Generates train/test splits from disjoint streams of the same scene
/// model; fully determined by the spec.
pub fn make_dataset(
    spec: &DataSpec,
    vocab: &Vocabulary,
    table: &TokenEmbeddingTable,
    enc: &PseudoTextEncoder,
) -> Result<Splits> {
    spec.validate()?;
    if vocab.len() != spec.c {
        return Err(Error::Config(format!(
            "vocabulary has {} names but spec.c = {}",
            vocab.len(),
            spec.c
        )));
    }
    let model = SceneModel::generate(spec.c, spec.k, spec.seed)?;
    let bank = PrototypeBank::build(vocab, table, enc, spec.seed)?;
    let train = generate_split(spec, &model, &bank, "train", spec.train_size)?;
    let test = generate_split(spec, &model, &bank, "test", spec.test_size)?;
    Ok(Splits { train, test, scene_model: model, bank })
}
