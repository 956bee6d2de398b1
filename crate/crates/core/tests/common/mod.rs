#![allow(dead_code)]

pub mod oracles;

use std::sync::atomic::{AtomicUsize, Ordering};


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tte_core::models::check::{model_grad_check, ModelGradCheck};
use tte_core::models::{Architecture, Batch, EncoderMode, EncoderSpec, FeatureEncoder, Model, ModelConfig};
use tte_core::embed::{build_embedded_tensor, EmbedError, EmbeddingProvider, HashProvider};
use tte_core::fixtures::synthetic_separable;
use tte_core::models::FeatureSource;
use tte_core::trainer::train_step;
use tte_engine::{AdamConfig, Mode, ParamStore, Scalar, Tape, Tensor};

pub const SMALL_TOKEN_DIM: usize = 16;
pub const SMALL_SOURCE_DIM: usize = 8;
pub const SMALL_FEATURES: usize = 3;

/// Downscaled model: token_dim 16, three features, d = 8 in LLM mode.
pub fn small_model(arch: Architecture, mode: EncoderMode) -> Model {
    let mut config = ModelConfig::new(arch, mode);
    config.token_dim = SMALL_TOKEN_DIM;
    config.ffn_dim = Some(2 * SMALL_TOKEN_DIM);
    let encoder = match mode {
        EncoderMode::Base => EncoderSpec {
            mode,
            token_dim: SMALL_TOKEN_DIM,
            source_dim: None,
            features: vec![
                FeatureEncoder::Categorical {
                    vocab: vec!["a".into(), "b".into(), "c".into()],
                },
                FeatureEncoder::Numeric,
                FeatureEncoder::Categorical {
                    vocab: vec!["x".into(), "y".into()],
                },
            ],
        },
        EncoderMode::Llm => EncoderSpec::llm(SMALL_FEATURES, SMALL_SOURCE_DIM, SMALL_TOKEN_DIM),
    };
    Model::new(config, encoder, 3).unwrap()
}

/// A random batch of `rows` for [`small_model`], identical at both widths.
pub fn small_batch<T: Scalar>(mode: EncoderMode, rows: usize, seed: u64) -> (Batch<T>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..rows).map(|_| rng.random_range(0..3)).collect();
    let batch = match mode {
        EncoderMode::Base => {
            let mut z = Vec::new();
            let mut ids = Vec::new();
            let cards = [4, 0, 3];
            for card in cards {
                for _ in 0..rows {
                    if card == 0 {
                        z.push(T::lit(f64::from(rng.random_range(-2.0..2.0f64) as f32)));
                        ids.push(0);
                    } else {
                        z.push(T::zero());
                        ids.push(rng.random_range(0..card));
                    }
                }
            }
            Batch::Base { rows, z, ids }
        }
        EncoderMode::Llm => {
            let t = Tensor::<f64>::randn([rows, SMALL_FEATURES, SMALL_SOURCE_DIM], 1.0, &mut rng);
            // round through f32 so both precisions see the same inputs
            let data = t.data().iter().map(|&x| T::lit(f64::from(x as f32))).collect();
            Batch::Llm(Tensor::new([rows, SMALL_FEATURES, SMALL_SOURCE_DIM], data).unwrap())
        }
    };
    (batch, labels)
}

pub const CHECK_ROWS: usize = 16;

pub fn full_model_check(arch: Architecture, mode: EncoderMode, seed: u64) -> ModelGradCheck {
    full_model_check_rows(arch, mode, seed, CHECK_ROWS)
}

pub fn full_model_check_rows(arch: Architecture, mode: EncoderMode, seed: u64, rows: usize) -> ModelGradCheck {
    let model = small_model(arch, mode);
    let store = model.init::<f32>(seed).unwrap();
    let (b32, labels) = small_batch::<f32>(mode, rows, seed);
    let (b64, _) = small_batch::<f64>(mode, rows, seed);
    model_grad_check(&model, &store, &b32, &b64, &labels, 6, seed).unwrap()
}

pub struct FrozenRun {
    pub tensor_before: String,
    pub tensor_after: String,
    pub adapter_moved: bool,
}

/// Train a small with-LLM FT-Transformer for `steps` steps on hashed
/// embeddings of the synthetic fixture and checksum the tensor around it.
pub fn frozen_embedding_run(steps: u64) -> FrozenRun {
    let table = synthetic_separable().table().unwrap();
    let provider = HashProvider::new("hash-test", SMALL_SOURCE_DIM).unwrap();
    let tensor = build_embedded_tensor(&table, &provider, None, &Default::default(), Default::default()).unwrap();
    let tensor_before = tensor.checksum();

    let mut config = ModelConfig::new(Architecture::FtTransformer, EncoderMode::Llm);
    config.token_dim = SMALL_TOKEN_DIM;
    config.ffn_dim = Some(2 * SMALL_TOKEN_DIM);
    let model = Model::new(config, EncoderSpec::llm(tensor.m, tensor.d, SMALL_TOKEN_DIM), 2).unwrap();
    let mut store = model.init::<f32>(0).unwrap();
    let adapter = store.id("adapter.w").unwrap();
    let w0 = store.get(adapter).value.clone();
    let source = FeatureSource::Llm(&tensor);
    let adam = AdamConfig::default();
    let rows: Vec<usize> = (0..32).collect();
    let labels: Vec<usize> = rows.iter().map(|&r| table.labels[r]).collect();
    for step in 0..steps {
        let batch = source.batch::<f32>(&rows);
        train_step(&model, &mut store, &batch, &labels, &adam, step).unwrap();
    }
    FrozenRun {
        tensor_before,
        tensor_after: tensor.checksum(),
        adapter_moved: store.get(adapter).value.data() != w0.data(),
    }
}

pub fn eval_logits(model: &Model, store: &ParamStore<f32>, batch: &Batch<f32>, mode: Mode) -> Tensor<f32> {
    let mut tape = Tape::new(store, mode, 0);
    let l = model.logits(&mut tape, batch).unwrap();
    tape.value(l).clone()
}

/// Largest logit change of the small with-LLM FT-Transformer when the
/// feature tokens of a 3-row batch are permuted.
pub fn ft_permutation_gap(case: u64) -> f64 {
    let model = small_model(Architecture::FtTransformer, EncoderMode::Llm);
    let store = model.init::<f32>(case).unwrap();
    let (batch, _) = small_batch::<f32>(EncoderMode::Llm, 3, 100 + case);
    let Batch::Llm(e) = &batch else { unreachable!() };
    // rotate by 1 or 2, or swap the last two
    let perm: [usize; 3] = match case % 3 {
        0 => [1, 2, 0],
        1 => [2, 0, 1],
        _ => [0, 2, 1],
    };
    let d = SMALL_SOURCE_DIM;
    let mut data = Vec::with_capacity(e.data().len());
    for b in 0..3 {
        for &m in &perm {
            let at = (b * SMALL_FEATURES + m) * d;
            data.extend_from_slice(&e.data()[at..at + d]);
        }
    }
    let permuted = Batch::Llm(Tensor::new([3, SMALL_FEATURES, d], data).unwrap());
    let a = eval_logits(&model, &store, &batch, Mode::Eval);
    let b = eval_logits(&model, &store, &permuted, Mode::Eval);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f64::from((x - y).abs()))
        .fold(0.0, f64::max)
}

/// Hash provider that counts requests and sentences.
pub struct Counting {
    pub inner: HashProvider,
    pub requests: AtomicUsize,
    pub sentences: AtomicUsize,
}

impl Counting {
    pub fn new(d: usize) -> Self {
        Self {
            inner: HashProvider::new("counting", d).unwrap(),
            requests: AtomicUsize::new(0),
            sentences: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn sentences(&self) -> usize {
        self.sentences.load(Ordering::SeqCst)
    }
}

impl EmbeddingProvider for Counting {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
    fn embed_batch(&self, sentences: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.sentences.fetch_add(sentences.len(), Ordering::SeqCst);
        self.inner.embed_batch(sentences)
    }
}
