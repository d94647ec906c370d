//! Toy text/image embedding pair standing in for a pretrained
//! image–text model.
//!
//! The text encoder hashes words into 256 buckets and projects the bag to
//! a 32-d unit vector; the image encoder is three strided convs, global
//! mean pooling, and a projection. The pair is trained contrastively
//! (symmetric InfoNCE) on the synthetic dataset, then frozen: the cycle
//! losses only need a shared embedding space, not open-vocabulary
//! semantics.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditions::hwc_to_chw;
use crate::params::{Adam, CheckpointError, ParamStore};
use crate::tensor::{Result as TResult, Tape, Tensor, TensorError};

pub const EMBED_DIM: usize = 32;
pub const VOCAB_BUCKETS: usize = 256;
pub const TEMPERATURE: f32 = 0.07;

/// Tokenized caption. Hashing is FNV-1a, so token ids are stable across
/// runs and platforms.
#[derive(Clone, Debug)]
pub struct TextPrompt {
    pub caption: String,
    pub token_ids: Vec<usize>,
}

impl TextPrompt {
    pub fn new(caption: &str) -> TResult<TextPrompt> {
        if caption.trim().is_empty() {
            return Err(TensorError::Unsupported {
                op: "text_prompt",
                detail: "empty caption".into(),
            });
        }
        let token_ids = caption
            .split_whitespace()
            .map(|w| (fnv1a(w.as_bytes()) % VOCAB_BUCKETS as u64) as usize)
            .collect();
        Ok(TextPrompt {
            caption: caption.to_string(),
            token_ids,
        })
    }

    /// Bag-of-buckets vector [1, 256].
    pub fn bag(&self) -> Tensor {
        let mut bag = vec![0.0f32; VOCAB_BUCKETS];
        for id in &self.token_ids {
            bag[*id] += 1.0;
        }
        Tensor::from_vec(bag, &[1, VOCAB_BUCKETS]).expect("static shape")
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Parameter names of the encoder pair.
const PARAMS: &[(&str, &[usize])] = &[
    ("text.w", &[VOCAB_BUCKETS, EMBED_DIM]),
    ("img.c1", &[8, 3, 3, 3]),
    ("img.c2", &[16, 8, 3, 3]),
    ("img.c3", &[32, 16, 3, 3]),
    ("img.proj", &[32, EMBED_DIM]),
];

/// Freshly initialized encoder parameters.
pub fn init_params(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in PARAMS {
        let fan_in: usize = shape[1..].iter().product();
        let s = (2.0 / fan_in as f32).sqrt();
        let data: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-s..s))
            .collect();
        store.insert(name, data, shape);
    }
    store
}

/// Encoder pair bound to tensors (constants when frozen, leaves while
/// pretraining).
pub struct Encoders {
    pub text_w: Tensor,
    pub img_c1: Tensor,
    pub img_c2: Tensor,
    pub img_c3: Tensor,
    pub img_proj: Tensor,
}

impl Encoders {
    pub fn frozen(store: &ParamStore) -> Encoders {
        let mut map = store.constants();
        Encoders {
            text_w: map.remove("text.w").expect("text.w"),
            img_c1: map.remove("img.c1").expect("img.c1"),
            img_c2: map.remove("img.c2").expect("img.c2"),
            img_c3: map.remove("img.c3").expect("img.c3"),
            img_proj: map.remove("img.proj").expect("img.proj"),
        }
    }

    pub fn from_leaves(leaves: &crate::params::LeafSet) -> Encoders {
        Encoders {
            text_w: leaves.get("text.w").clone(),
            img_c1: leaves.get("img.c1").clone(),
            img_c2: leaves.get("img.c2").clone(),
            img_c3: leaves.get("img.c3").clone(),
            img_proj: leaves.get("img.proj").clone(),
        }
    }

    /// Caption → 32-d unit embedding [1, 32].
    pub fn encode_text(&self, prompt: &TextPrompt) -> TResult<Tensor> {
        prompt.bag().matmul(&self.text_w)?.l2_normalize(1e-12)
    }

    /// [h,w,3] image in [0,1] → 32-d unit embedding [1, 32]. Global mean
    /// pooling makes the encoder resolution-agnostic.
    pub fn encode_image(&self, image: &Tensor) -> TResult<Tensor> {
        let x = hwc_to_chw(image)?;
        let h1 = x.conv2d(&self.img_c1, 2, 1)?.relu()?;
        let h2 = h1.conv2d(&self.img_c2, 2, 1)?.relu()?;
        let h3 = h2.conv2d(&self.img_c3, 2, 1)?.relu()?;
        let pooled = h3.mean_axis(2)?.mean_axis(1)?.reshape(&[1, 32])?;
        pooled.matmul(&self.img_proj)?.l2_normalize(1e-12)
    }
}

/// Cosine similarity of two [1, d] unit embeddings → scalar tensor.
pub fn cosine(a: &Tensor, b: &Tensor) -> TResult<Tensor> {
    a.mul(b)?.sum()
}

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("pretraining needs at least 2 scenes, got {got}")]
    TooFewScenes { got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch: 8,
            lr: 3e-3,
            temperature: TEMPERATURE,
            seed: 11,
        }
    }
}

/// Symmetric InfoNCE loss over an in-batch image/text pairing. Exposed for
/// the trainer's loss report.
pub fn info_nce(
    img_emb: &Tensor,  // [b, d]
    text_emb: &Tensor, // [b, d]
    temperature: f32,
) -> TResult<Tensor> {
    let b = img_emb.shape()[0];
    let d = img_emb.shape()[1];
    // logits[i][j] = cos(img_i, text_j)/τ via I · Tᵀ; the transpose is an
    // op chain (slice + concat) so gradients reach both encoders.
    let mut cols = Vec::with_capacity(b);
    for i in 0..b {
        cols.push(text_emb.slice(0, i, 1)?.reshape(&[d, 1])?);
    }
    let refs: Vec<&Tensor> = cols.iter().collect();
    let t_t = Tensor::concat(&refs, 1)?; // [d, b]
    let logits = img_emb.matmul(&t_t)?.scale(1.0 / temperature)?; // [b, b]

    let eye = {
        let mut m = vec![0.0f32; b * b];
        for i in 0..b {
            m[i * b + i] = 1.0;
        }
        Tensor::from_vec(m, &[b, b])?
    };
    // Row-wise and column-wise cross entropy against the diagonal.
    let ce = |l: &Tensor, axis: usize| -> TResult<Tensor> {
        // Stabilize with a detached max.
        let maxv = l
            .data()
            .iter()
            .cloned()
            .fold(f32::NEG_INFINITY, f32::max);
        let shifted = l.offset(-maxv)?;
        let lse = shifted.exp()?.sum_axis(axis)?.log()?; // [b]
        let diag = shifted.mul(&eye)?.sum_axis(axis)?; // [b]
        lse.sub(&diag)?.mean()
    };
    let rows = ce(&logits, 1)?;
    let cols_loss = ce(&logits, 0)?;
    rows.add(&cols_loss)?.scale(0.5)
}

/// Contrastively pretrain the encoder pair on (image, caption) pairs and
/// return the trained parameters. The caller freezes them from here on.
pub fn pretrain_contrastive(
    pairs: &[(Tensor, TextPrompt)],
    cfg: &PretrainConfig,
) -> Result<(ParamStore, Vec<f32>), PretrainError> {
    if pairs.len() < 2 {
        return Err(PretrainError::TooFewScenes { got: pairs.len() });
    }
    let mut store = init_params(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5);
    let mut losses = Vec::new();
    let batch = cfg.batch.min(pairs.len());
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let leaves = store.leaves(&tape)?;
            let enc = Encoders::from_leaves(&leaves);
            let mut img_rows = Vec::with_capacity(chunk.len());
            let mut txt_rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                img_rows.push(enc.encode_image(&pairs[i].0)?);
                txt_rows.push(enc.encode_text(&pairs[i].1)?);
            }
            let irefs: Vec<&Tensor> = img_rows.iter().collect();
            let trefs: Vec<&Tensor> = txt_rows.iter().collect();
            let img_emb = Tensor::concat(&irefs, 0)?;
            let txt_emb = Tensor::concat(&trefs, 0)?;
            let loss = info_nce(&img_emb, &txt_emb, cfg.temperature)?;
            losses.push(loss.item()?);
            let grads = tape.backward(&loss)?;
            opt.step(&mut store, &leaves.grad_map(&grads));
        }
    }
    Ok((store, losses))
}
