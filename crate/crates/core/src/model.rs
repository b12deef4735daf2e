//! Model configuration, parameter layout and checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Ontology, SlotPair, Vocabulary};
use crate::encoder::{BiGruVars, EncoderVars, GruVars};
use crate::error::{Error, Result};
use crate::grad::{checkpoint, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Must equal `hidden_dim`: word embeddings are scored against decoder
    /// states and slot embeddings against encoder states.
    pub embed_dim: usize,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 400,
            embed_dim: 400,
            max_decode_len: 10,
        }
    }
}

impl ModelConfig {
    pub fn with_hidden(hidden: usize) -> Self {
        ModelConfig {
            hidden_dim: hidden,
            embed_dim: hidden,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("hidden_dim and max_decode_len must be positive".into()));
        }
        if self.embed_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "embed_dim {} must equal hidden_dim {}",
                self.embed_dim, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Parameter groups used for reporting gradient checks and gradient flow.
pub fn param_group(name: &str) -> &'static str {
    match name {
        n if n.starts_with("enc.sys.lower.") => "W_a",
        n if n.starts_with("enc.usr.lower.") => "W_u",
        n if n.starts_with("enc.sys.upper.") => "M_a",
        n if n.starts_with("enc.usr.upper.") => "M_u",
        n if n.starts_with("dec.") => "W_d",
        "w_v" => "W_v",
        "w_c" => "W_c",
        "w_s" => "W_s",
        "embedding" => "embeddings",
        "domain_emb" | "slot_emb" => "slot_tables",
        _ => "other",
    }
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w_x: ParamId,
    b: ParamId,
    w_hzr: ParamId,
    w_hc: ParamId,
}

#[derive(Clone, Debug)]
struct ParamIds {
    embedding: ParamId,
    domain_emb: ParamId,
    slot_emb: ParamId,
    /// sys.lower, usr.lower, sys.upper, usr.upper; fwd then bwd.
    enc: [[GruIds; 2]; 4],
    dec: GruIds,
    w_v: ParamId,
    w_c: ParamId,
    w_s: ParamId,
}

const ENC_PREFIXES: [&str; 4] = ["enc.sys.lower", "enc.usr.lower", "enc.sys.upper", "enc.usr.upper"];

fn expected_shapes(config: &ModelConfig, vocab: usize, domains: usize, slots: usize) -> Vec<(String, Vec<usize>)> {
    let (h, d) = (config.hidden_dim, config.embed_dim);
    let gru = |prefix: &str, d_in: usize| {
        vec![
            (format!("{prefix}.w_x"), vec![d_in, 3 * h]),
            (format!("{prefix}.b"), vec![3 * h]),
            (format!("{prefix}.w_hzr"), vec![h, 2 * h]),
            (format!("{prefix}.w_hc"), vec![h, h]),
        ]
    };
    let mut out = vec![
        ("embedding".to_string(), vec![vocab, d]),
        ("domain_emb".to_string(), vec![domains, d]),
        ("slot_emb".to_string(), vec![slots, d]),
        ("w_v".to_string(), vec![4 * h, 1]),
        ("w_c".to_string(), vec![3 * h, 1]),
        ("w_s".to_string(), vec![2 * h, 3]),
    ];
    for (i, prefix) in ENC_PREFIXES.iter().enumerate() {
        let d_in = if i < 2 { d } else { h };
        for dir in ["fwd", "bwd"] {
            out.extend(gru(&format!("{prefix}.{dir}"), d_in));
        }
    }
    out.extend(gru("dec", d));
    out
}

/// Parameters plus the vocabulary and ontology they were built for.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub ontology: Ontology,
    pub params: ParamStore<T>,
    domain_of: Vec<usize>,
    slot_of: Vec<usize>,
    ids: ParamIds,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    vocab: Vec<String>,
    ontology: Vec<SlotPair>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model. Recurrent and output weights are uniform(±1/√h); the word,
    /// domain and slot tables uniform(±1) so that dot-product attention is not
    /// flat at initialization.
    pub fn new(config: ModelConfig, vocab: Vocabulary, ontology: Ontology, seed: u64) -> Result<Self> {
        config.validate()?;
        if ontology.is_empty() {
            return Err(Error::Config("ontology has no (domain, slot) pairs".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(seed);
        let bound = 1.0 / (config.hidden_dim as f64).sqrt();
        let shapes = expected_shapes(
            &config,
            vocab.len(),
            ontology.domains().len(),
            ontology.slot_names().len(),
        );
        for (name, shape) in shapes {
            let b = match name.as_str() {
                "embedding" | "domain_emb" | "slot_emb" => 1.0,
                _ => bound,
            };
            params.insert(name, Tensor::uniform(&shape, b, &mut rng))?;
        }
        Self::from_params(config, vocab, ontology, params)
    }

    /// Wraps an existing store after checking every name and shape.
    pub fn from_params(
        config: ModelConfig,
        vocab: Vocabulary,
        ontology: Ontology,
        params: ParamStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        let domains = ontology.domains();
        let slots = ontology.slot_names();
        let shapes = expected_shapes(&config, vocab.len(), domains.len(), slots.len());
        if shapes.len() != params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} parameters, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            let t = params
                .by_name(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        let domain_of = ontology
            .pairs()
            .iter()
            .map(|p| domains.iter().position(|d| *d == p.domain).unwrap())
            .collect();
        let slot_of = ontology
            .pairs()
            .iter()
            .map(|p| slots.iter().position(|s| *s == p.slot).unwrap())
            .collect();
        let id = |n: &str| params.require(n);
        let gru = |prefix: &str| -> Result<GruIds> {
            Ok(GruIds {
                w_x: id(&format!("{prefix}.w_x"))?,
                b: id(&format!("{prefix}.b"))?,
                w_hzr: id(&format!("{prefix}.w_hzr"))?,
                w_hc: id(&format!("{prefix}.w_hc"))?,
            })
        };
        let mut enc = Vec::new();
        for prefix in ENC_PREFIXES {
            enc.push([gru(&format!("{prefix}.fwd"))?, gru(&format!("{prefix}.bwd"))?]);
        }
        let ids = ParamIds {
            embedding: id("embedding")?,
            domain_emb: id("domain_emb")?,
            slot_emb: id("slot_emb")?,
            enc: [enc[0], enc[1], enc[2], enc[3]],
            dec: gru("dec")?,
            w_v: id("w_v")?,
            w_c: id("w_c")?,
            w_s: id("w_s")?,
        };
        Ok(Model {
            config,
            vocab,
            ontology,
            params,
            domain_of,
            slot_of,
            ids,
        })
    }

    /// Replaces the word embedding table, e.g. with one from
    /// [`crate::corpus::load_embeddings`].
    pub fn set_embeddings(&mut self, table: Tensor<T>) -> Result<()> {
        let cur = self.params.get(self.ids.embedding);
        if cur.shape() != table.shape() {
            return Err(Error::dim("set_embeddings", cur.shape(), table.shape()));
        }
        *self.params.get_mut(self.ids.embedding) = table;
        Ok(())
    }

    pub fn num_pairs(&self) -> usize {
        self.ontology.len()
    }

    /// Puts every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let p = &self.params;
        let mut gru = |g: GruIds| GruVars {
            w_x: tape.param(p, g.w_x),
            b: tape.param(p, g.b),
            w_hzr: tape.param(p, g.w_hzr),
            w_hc: tape.param(p, g.w_hc),
        };
        let bi = |pair: [GruIds; 2], gru: &mut dyn FnMut(GruIds) -> GruVars| BiGruVars {
            fwd: gru(pair[0]),
            bwd: gru(pair[1]),
        };
        let encoder = EncoderVars {
            sys_lower: bi(self.ids.enc[0], &mut gru),
            usr_lower: bi(self.ids.enc[1], &mut gru),
            sys_upper: bi(self.ids.enc[2], &mut gru),
            usr_upper: bi(self.ids.enc[3], &mut gru),
        };
        let decoder = gru(self.ids.dec);
        Bound {
            embedding: tape.param(p, self.ids.embedding),
            domain_emb: tape.param(p, self.ids.domain_emb),
            slot_emb: tape.param(p, self.ids.slot_emb),
            encoder,
            decoder,
            w_v: tape.param(p, self.ids.w_v),
            w_c: tape.param(p, self.ids.w_c),
            w_s: tape.param(p, self.ids.w_s),
            domain_of: self.domain_of.clone(),
            slot_of: self.slot_of.clone(),
            vocab_size: self.vocab.len(),
        }
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::to_value(Metadata {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            ontology: self.ontology.pairs().to_vec(),
        })
        .expect("metadata serializes")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.params, self.metadata())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = checkpoint::decode(bytes)?;
        Self::from_parts(params, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, self.metadata())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        Self::from_parts(params, meta)
    }

    fn from_parts(params: ParamStore<T>, meta: serde_json::Value) -> Result<Self> {
        let meta: Metadata =
            serde_json::from_value(meta).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let vocab = Vocabulary::from_tokens(meta.vocab.iter().skip(4).cloned());
        if vocab.tokens() != meta.vocab.as_slice() {
            return Err(Error::CorruptCheckpoint(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let ontology = Ontology::new(meta.ontology)?;
        Self::from_params(meta.config, vocab, ontology, params)
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            ontology: self.ontology.clone(),
            params: self.params.cast(),
            domain_of: self.domain_of.clone(),
            slot_of: self.slot_of.clone(),
            ids: self.ids.clone(),
        }
    }
}

/// Parameters of one [`Model`] bound on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub embedding: Var,
    pub domain_emb: Var,
    pub slot_emb: Var,
    pub encoder: EncoderVars,
    pub decoder: GruVars,
    pub w_v: Var,
    pub w_c: Var,
    pub w_s: Var,
    /// Domain-table row of each ontology pair.
    pub domain_of: Vec<usize>,
    /// Slot-name-table row of each ontology pair.
    pub slot_of: Vec<usize>,
    pub vocab_size: usize,
}
