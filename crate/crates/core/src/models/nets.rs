use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tte_engine::{AttentionWeights, ParamStore, Scalar, Tape, Tensor, Var};

use super::{AdapterActivation, Architecture, Batch, EncoderMode, EncoderSpec, FeatureEncoder, ModelConfig, Pooling};
use crate::error::{Error, Result};

const EMBED_INIT_STD: f64 = 0.02;

/// An architecture bound to an encoder and a class count. Weights live in a
/// separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderSpec,
    pub n_classes: usize,
}

struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform([fan_in, fan_out], bound, &mut self.rng);
        let b = Tensor::uniform([fan_out], bound, &mut self.rng);
        self.store.add_param(&format!("{name}.w"), w)?;
        self.store.add_param(&format!("{name}.b"), b)?;
        Ok(())
    }

    fn normal(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let t = Tensor::randn(shape.to_vec(), EMBED_INIT_STD, &mut self.rng);
        self.store.add_param(name, t)?;
        Ok(())
    }

    fn layer_norm(&mut self, name: &str, width: usize) -> Result<()> {
        self.store.add_param(&format!("{name}.gamma"), Tensor::full([width], T::one()))?;
        self.store.add_param(&format!("{name}.beta"), Tensor::zeros([width]))?;
        Ok(())
    }

    fn batch_norm(&mut self, name: &str, width: usize) -> Result<()> {
        self.layer_norm(name, width)?;
        self.store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros([width]))?;
        self.store.add_buffer(&format!("{name}.running_var"), Tensor::full([width], T::one()))?;
        Ok(())
    }
}

impl Model {
    pub fn new(config: ModelConfig, encoder: EncoderSpec, n_classes: usize) -> Result<Self> {
        config.validate()?;
        if config.encoder_mode != encoder.mode {
            return Err(Error::Config(format!(
                "model expects a {} encoder, got {}",
                config.encoder_mode, encoder.mode
            )));
        }
        if encoder.token_dim != config.token_dim {
            return Err(Error::Config(format!(
                "encoder token_dim {} differs from model token_dim {}",
                encoder.token_dim, config.token_dim
            )));
        }
        if encoder.mode == EncoderMode::Llm && encoder.source_dim.unwrap_or(0) == 0 {
            return Err(Error::Config("LLM encoder needs a positive source dimension".into()));
        }
        if encoder.features.is_empty() {
            return Err(Error::Config("model needs at least one feature".into()));
        }
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        Ok(Self {
            config,
            encoder,
            n_classes,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    fn classifier_input_width(&self) -> usize {
        match self.config.pooling {
            Pooling::Flatten => self.encoder.n_features() * self.config.token_dim,
            Pooling::Mean => self.config.token_dim,
        }
    }

    /// Deterministic initial weights.
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let dim = self.config.token_dim;

        match self.encoder.mode {
            EncoderMode::Base => {
                for (m, f) in self.encoder.features.iter().enumerate() {
                    match f {
                        FeatureEncoder::Numeric => init.affine(&format!("encoder.num.{m}"), 1, dim)?,
                        FeatureEncoder::Categorical { vocab } => {
                            init.normal(&format!("encoder.cat.{m}"), &[vocab.len() + 1, dim])?
                        }
                    }
                }
            }
            EncoderMode::Llm => {
                let d = self.encoder.source_dim.expect("validated in Model::new");
                init.affine("adapter", d, dim)?;
            }
        }

        match self.config.architecture {
            Architecture::Mlp => {
                let mut width = self.classifier_input_width();
                for (i, &h) in self.config.hidden.iter().enumerate() {
                    init.affine(&format!("mlp.{i}"), width, h)?;
                    width = h;
                }
                init.affine("head", width, self.n_classes)?;
            }
            Architecture::ResNet => {
                let first = self.config.hidden[0];
                init.affine("resnet.stem", self.classifier_input_width(), first)?;
                let mut width = first;
                for (i, &h) in self.config.hidden.iter().enumerate() {
                    init.batch_norm(&format!("resnet.block{i}.bn"), width)?;
                    init.affine(&format!("resnet.block{i}.linear"), width, h)?;
                    if h != width {
                        init.affine(&format!("resnet.block{i}.skip"), width, h)?;
                    }
                    width = h;
                }
                init.affine("head", width, self.n_classes)?;
            }
            Architecture::FtTransformer => {
                init.normal("ft.cls", &[dim])?;
                let ffn = self.config.ffn_width();
                for l in 0..self.config.layers {
                    let p = format!("ft.layer{l}");
                    init.layer_norm(&format!("{p}.ln1"), dim)?;
                    for proj in ["q", "k", "v", "o"] {
                        init.affine(&format!("{p}.attn.{proj}"), dim, dim)?;
                    }
                    init.layer_norm(&format!("{p}.ln2"), dim)?;
                    init.affine(&format!("{p}.ffn1"), dim, ffn)?;
                    init.affine(&format!("{p}.ffn2"), ffn, dim)?;
                }
                init.layer_norm("ft.final_ln", dim)?;
                init.affine("head", dim, self.n_classes)?;
            }
        }
        Ok(store)
    }

    /// Feature tokens `[B, M, token_dim]` for a batch.
    pub fn tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>) -> Result<Var> {
        match (self.encoder.mode, batch) {
            (EncoderMode::Base, Batch::Base { rows, z, ids }) => {
                let bsz = *rows;
                let m = self.encoder.n_features();
                if z.len() != bsz * m || ids.len() != bsz * m {
                    return Err(Error::Config(format!("base batch does not hold {bsz} x {m} cells")));
                }
                let mut parts = Vec::with_capacity(m);
                for (col, f) in self.encoder.features.iter().enumerate() {
                    let part = match f {
                        FeatureEncoder::Numeric => {
                            let x = tape.constant(Tensor::new([bsz, 1], z[col * bsz..(col + 1) * bsz].to_vec())?);
                            let w = tape.param(&format!("encoder.num.{col}.w"))?;
                            let b = tape.param(&format!("encoder.num.{col}.b"))?;
                            tape.affine(x, w, Some(b))?
                        }
                        FeatureEncoder::Categorical { .. } => {
                            let table = tape.param(&format!("encoder.cat.{col}"))?;
                            tape.lookup(table, &ids[col * bsz..(col + 1) * bsz])?
                        }
                    };
                    parts.push(part);
                }
                Ok(tape.stack_tokens(&parts)?)
            }
            (EncoderMode::Llm, Batch::Llm(e)) => {
                let e = tape.constant(e.clone());
                self.adapt(tape, e)
            }
            (mode, _) => Err(Error::Config(format!("batch does not match the {mode} encoder"))),
        }
    }

    /// Adapter over `[B, M, d]` embeddings already on the tape.
    pub fn adapt<T: Scalar>(&self, tape: &mut Tape<'_, T>, embeddings: Var) -> Result<Var> {
        let d = self.encoder.source_dim.unwrap_or(0);
        let shape = tape.shape(embeddings).to_vec();
        if shape.len() != 3 || shape[1] != self.encoder.n_features() || shape[2] != d {
            return Err(Error::Config(format!(
                "embeddings {shape:?} do not match {} features of width {d}",
                self.encoder.n_features()
            )));
        }
        let w = tape.param("adapter.w")?;
        let b = tape.param("adapter.b")?;
        let t = tape.affine(embeddings, w, Some(b))?;
        Ok(match self.config.adapter_activation {
            AdapterActivation::Relu => tape.relu(t),
            AdapterActivation::Linear => t,
        })
    }

    /// Logits `[B, C]` from feature tokens.
    pub fn classify<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<Var> {
        match self.config.architecture {
            Architecture::Mlp => self.mlp(tape, tokens),
            Architecture::ResNet => self.resnet(tape, tokens),
            Architecture::FtTransformer => self.ft(tape, tokens),
        }
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>) -> Result<Var> {
        let tokens = self.tokens(tape, batch)?;
        self.classify(tape, tokens)
    }

    fn pool<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        Ok(match self.config.pooling {
            Pooling::Flatten => tape.reshape(tokens, &[s[0], s[1] * s[2]])?,
            Pooling::Mean => tape.mean_tokens(tokens)?,
        })
    }

    fn dense<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, name: &str) -> Result<Var> {
        let w = tape.param(&format!("{name}.w"))?;
        let b = tape.param(&format!("{name}.b"))?;
        Ok(tape.affine(x, w, Some(b))?)
    }

    fn norm<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, name: &str) -> Result<Var> {
        let g = tape.param(&format!("{name}.gamma"))?;
        let b = tape.param(&format!("{name}.beta"))?;
        Ok(tape.layer_norm(x, g, b)?)
    }

    fn mlp<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<Var> {
        let mut h = self.pool(tape, tokens)?;
        for i in 0..self.config.hidden.len() {
            h = Self::dense(tape, h, &format!("mlp.{i}"))?;
            h = tape.relu(h);
        }
        Self::dense(tape, h, "head")
    }

    fn resnet<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<Var> {
        let x = self.pool(tape, tokens)?;
        let mut h = Self::dense(tape, x, "resnet.stem")?;
        let mut width = self.config.hidden[0];
        for (i, &w) in self.config.hidden.iter().enumerate() {
            let p = format!("resnet.block{i}");
            let gamma = tape.param(&format!("{p}.bn.gamma"))?;
            let beta = tape.param(&format!("{p}.bn.beta"))?;
            let store = tape.store();
            let mean = store.id(&format!("{p}.bn.running_mean"))?;
            let var = store.id(&format!("{p}.bn.running_var"))?;
            let n = tape.batch_norm(h, gamma, beta, mean, var)?;
            let y = Self::dense(tape, n, &format!("{p}.linear"))?;
            let y = tape.selu(y);
            let skip = if w != width {
                Self::dense(tape, h, &format!("{p}.skip"))?
            } else {
                h
            };
            h = tape.add(y, skip)?;
            width = w;
        }
        Self::dense(tape, h, "head")
    }

    fn ft<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<Var> {
        let cls = tape.param("ft.cls")?;
        let mut x = tape.prepend_token(tokens, cls)?;
        let rate = self.config.dropout;
        for l in 0..self.config.layers {
            let p = format!("ft.layer{l}");
            let a = Self::norm(tape, x, &format!("{p}.ln1"))?;
            let proj = |tape: &mut Tape<'_, T>, s: &str| -> Result<(Var, Var)> {
                Ok((
                    tape.param(&format!("{p}.attn.{s}.w"))?,
                    tape.param(&format!("{p}.attn.{s}.b"))?,
                ))
            };
            let (wq, bq) = proj(tape, "q")?;
            let (wk, bk) = proj(tape, "k")?;
            let (wv, bv) = proj(tape, "v")?;
            let (wo, bo) = proj(tape, "o")?;
            let weights = AttentionWeights {
                wq,
                bq: Some(bq),
                wk,
                bk: Some(bk),
                wv,
                bv: Some(bv),
                wo,
                bo: Some(bo),
            };
            let (att, _) = tape.multi_head_attention(a, &weights, self.config.heads)?;
            let att = tape.dropout(att, rate)?;
            x = tape.add(x, att)?;

            let f = Self::norm(tape, x, &format!("{p}.ln2"))?;
            let f = Self::dense(tape, f, &format!("{p}.ffn1"))?;
            let f = tape.gelu(f);
            let f = tape.dropout(f, rate)?;
            let f = Self::dense(tape, f, &format!("{p}.ffn2"))?;
            x = tape.add(x, f)?;
        }
        let cls_out = tape.select_token(x, 0)?;
        let cls_out = Self::norm(tape, cls_out, "ft.final_ln")?;
        Self::dense(tape, cls_out, "head")
    }
}
