//! The emotion-aware encoder-decoder.
//!
//! An emotion encoder reads per-position emotion vectors through a small MLP,
//! a context encoder reads user, item, feature and word embeddings, and the
//! two hidden sequences are merged as `intensity * emotion + context` before a
//! causal decoder. Two heads read the decoder output: an emotion classifier at
//! the tag position and a language-model head tied to the token embedding.

mod config;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EncodedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::lexicon::{EmotionCategory, EmotionVector, Lexicon};
use crate::numerics::{
    grad_check, init, load_checkpoint, save_checkpoint, GradCheckReport, Gradients, ParamId, ParamSet, Tape, Tensor,
    Var,
};

pub use config::EmoTerConfig;

pub const CONFIG_FILE: &str = "model.cfg";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

const EMBED_INIT: f64 = 0.1;

/// Model-ready view of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// Position 0 indexes the user table, 1 the item table, the rest tokens.
    pub ids: Vec<usize>,
    pub emotions: Vec<EmotionVector>,
    pub tag_position: usize,
    pub bos_position: usize,
    pub emotion_target: EmotionCategory,
    /// Number of positions from `<bos>` on that predict their successor.
    pub lm_len: usize,
}

impl ModelInput {
    /// Per-position emotion vectors: lexicon lookups for features and words,
    /// a one-hot for the tag, neutral everywhere else.
    pub fn from_example(example: &EncodedExample, lexicon: &Lexicon, full_length: bool) -> Self {
        let len = if full_length {
            example.max_len()
        } else {
            example.active_len()
        };
        let mut emotions = vec![EmotionVector::NEUTRAL; len];
        for (k, w) in example.feature_words.iter().enumerate() {
            emotions[2 + k] = lexicon.word_emotion(w);
        }
        emotions[example.tag_position()] = EmotionVector::one_hot(example.emotion_target);
        for (k, w) in example.text_words.iter().enumerate() {
            emotions[example.bos_position() + 1 + k] = lexicon.word_emotion(w);
        }
        ModelInput {
            ids: example.ids[..len].to_vec(),
            emotions,
            tag_position: example.tag_position(),
            bos_position: example.bos_position(),
            emotion_target: example.emotion_target,
            lm_len: example.text_len + 1,
        }
    }

    /// A prefix ending in `<bos>` plus any words generated so far.
    pub fn for_generation(prefix: &EncodedExample, generated: &[usize], vocab: &Vocabulary, lexicon: &Lexicon) -> Self {
        let bos = prefix.bos_position();
        let mut ids = prefix.ids[..=bos].to_vec();
        ids.extend_from_slice(generated);
        let mut emotions = vec![EmotionVector::NEUTRAL; ids.len()];
        for (k, w) in prefix.feature_words.iter().enumerate() {
            emotions[2 + k] = lexicon.word_emotion(w);
        }
        emotions[prefix.tag_position()] = EmotionVector::one_hot(prefix.emotion_target);
        for (k, &id) in generated.iter().enumerate() {
            if !Vocabulary::is_special(id) {
                if let Some(w) = vocab.token(id) {
                    emotions[bos + 1 + k] = lexicon.word_emotion(w);
                }
            }
        }
        ModelInput {
            ids,
            emotions,
            tag_position: prefix.tag_position(),
            bos_position: bos,
            emotion_target: prefix.emotion_target,
            lm_len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn lm_targets(&self) -> Vec<Option<usize>> {
        (0..self.lm_len)
            .map(|k| Some(self.ids[self.bos_position + 1 + k]))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    token_embedding: ParamId,
    user_embedding: ParamId,
    item_embedding: ParamId,
    position_embedding: ParamId,
    emo_w1: ParamId,
    emo_b1: ParamId,
    emo_w2: ParamId,
    emo_b2: ParamId,
    emotion_layers: Vec<LayerParams>,
    context_layers: Vec<LayerParams>,
    decoder_layers: Vec<LayerParams>,
    emotion_head: ParamId,
}

/// Parameter shapes in creation order.
fn parameter_shapes(c: &EmoTerConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.embed_dim;
    let mut out = vec![
        ("token_embedding".to_string(), vec![c.vocab_size, d]),
        ("user_embedding".to_string(), vec![c.num_users, d]),
        ("item_embedding".to_string(), vec![c.num_items, d]),
        ("position_embedding".to_string(), vec![c.max_len, d]),
        (
            "emotion_mlp.w1".to_string(),
            vec![EmotionCategory::COUNT, c.emotion_hidden],
        ),
        ("emotion_mlp.b1".to_string(), vec![c.emotion_hidden]),
        ("emotion_mlp.w2".to_string(), vec![c.emotion_hidden, d]),
        ("emotion_mlp.b2".to_string(), vec![d]),
    ];
    let stacks = [
        ("emotion_encoder", c.encoder_layers),
        ("context_encoder", c.encoder_layers),
        ("decoder", c.decoder_layers),
    ];
    for (stack, n) in stacks {
        for l in 0..n {
            let p = |s: &str| format!("{stack}.{l}.{s}");
            out.extend([
                (p("wq"), vec![d, d]),
                (p("bq"), vec![d]),
                (p("wk"), vec![d, d]),
                (p("bk"), vec![d]),
                (p("wv"), vec![d, d]),
                (p("bv"), vec![d]),
                (p("wo"), vec![d, d]),
                (p("bo"), vec![d]),
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("ffn.w1"), vec![d, c.ffn_dim]),
                (p("ffn.b1"), vec![c.ffn_dim]),
                (p("ffn.w2"), vec![c.ffn_dim, d]),
                (p("ffn.b2"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
            ]);
        }
    }
    out.push(("emotion_head".to_string(), vec![d, EmotionCategory::COUNT]));
    out
}

fn initial_value(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if name.ends_with("_embedding") {
        init::uniform(shape, EMBED_INIT, rng)
    } else if name.ends_with("gamma") {
        Tensor::filled(shape, 1.0)
    } else if shape.len() == 1 {
        Tensor::zeros(shape)
    } else {
        init::glorot(shape[0], shape[1], rng)
    }
}

impl Layout {
    fn resolve(params: &ParamSet, c: &EmoTerConfig) -> Result<Self> {
        for (name, shape) in parameter_shapes(c) {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            let got = params.value(id).shape();
            if got != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {got:?}, config expects {shape:?}"
                )));
            }
        }
        let id = |n: String| params.id(&n).expect("checked above");
        let layers = |stack: &str, n: usize| -> Vec<LayerParams> {
            (0..n)
                .map(|l| {
                    let p = |s: &str| id(format!("{stack}.{l}.{s}"));
                    LayerParams {
                        wq: p("wq"),
                        bq: p("bq"),
                        wk: p("wk"),
                        bk: p("bk"),
                        wv: p("wv"),
                        bv: p("bv"),
                        wo: p("wo"),
                        bo: p("bo"),
                        ln1_gamma: p("ln1.gamma"),
                        ln1_beta: p("ln1.beta"),
                        w1: p("ffn.w1"),
                        b1: p("ffn.b1"),
                        w2: p("ffn.w2"),
                        b2: p("ffn.b2"),
                        ln2_gamma: p("ln2.gamma"),
                        ln2_beta: p("ln2.beta"),
                    }
                })
                .collect()
        };
        Ok(Layout {
            token_embedding: id("token_embedding".into()),
            user_embedding: id("user_embedding".into()),
            item_embedding: id("item_embedding".into()),
            position_embedding: id("position_embedding".into()),
            emo_w1: id("emotion_mlp.w1".into()),
            emo_b1: id("emotion_mlp.b1".into()),
            emo_w2: id("emotion_mlp.w2".into()),
            emo_b2: id("emotion_mlp.b2".into()),
            emotion_layers: layers("emotion_encoder", c.encoder_layers),
            context_layers: layers("context_encoder", c.encoder_layers),
            decoder_layers: layers("decoder", c.decoder_layers),
            emotion_head: id("emotion_head".into()),
        })
    }
}

/// Hidden sequences produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub hidden_emotion: Var,
    pub hidden_context: Var,
    pub hidden_merge: Var,
    pub final_states: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub lm: Var,
    pub emotion: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub lm: f64,
    pub emotion: f64,
    pub total: f64,
}

/// `intensity * emotion + context`.
pub fn fuse(tape: &mut Tape, hidden_emotion: Var, hidden_context: Var, intensity: f64) -> Result<Var> {
    let scaled = tape.scale(hidden_emotion, intensity)?;
    tape.add(scaled, hidden_context)
}

/// The computation graph without parameter storage. All methods read
/// parameters through the tape, so the same network can be evaluated against
/// perturbed copies of the weights.
#[derive(Clone, Debug)]
pub struct Network {
    config: EmoTerConfig,
    layout: Layout,
}

impl Network {
    pub fn config(&self) -> &EmoTerConfig {
        &self.config
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let len = input.len();
        if len == 0 || len > self.config.max_len || input.emotions.len() != len {
            return Err(Error::InvalidArgument(format!(
                "input of {len} ids and {} emotion vectors does not fit max_len {}",
                input.emotions.len(),
                self.config.max_len
            )));
        }
        if input.bos_position >= len || input.tag_position >= input.bos_position {
            return Err(Error::InvalidArgument(
                "tag and <bos> positions are out of order".into(),
            ));
        }
        if input.lm_len > 0 && input.bos_position + input.lm_len >= len {
            return Err(Error::InvalidArgument(format!(
                "{} supervised positions from <bos> at {} overrun a sequence of {len}",
                input.lm_len, input.bos_position
            )));
        }
        Ok(())
    }

    /// Masked inputs hide the tag from both encoders.
    fn visible<'a>(&self, input: &'a ModelInput) -> std::borrow::Cow<'a, ModelInput> {
        if !self.config.mask_emotion_tag {
            return std::borrow::Cow::Borrowed(input);
        }
        let mut m = input.clone();
        m.ids[m.tag_position] = Vocabulary::emotion_token(EmotionCategory::Neutral);
        m.emotions[m.tag_position] = EmotionVector::NEUTRAL;
        std::borrow::Cow::Owned(m)
    }

    /// Position whose decoder state feeds the emotion head.
    fn readout_position(&self, input: &ModelInput) -> Result<usize> {
        if !self.config.mask_emotion_tag {
            return Ok(input.tag_position);
        }
        if input.lm_len == 0 {
            return Err(Error::InvalidArgument(
                "a masked tag is read at <eos>, which this input lacks".into(),
            ));
        }
        Ok(input.bos_position + input.lm_len)
    }

    /// The emotion MLP applied row-wise to `[len, 6]` vectors.
    pub fn emotion_embed(&self, tape: &mut Tape, vectors: &[EmotionVector]) -> Result<Var> {
        let data = vectors.iter().flat_map(|v| v.0).collect();
        let v = tape.constant(Tensor::matrix(vectors.len(), EmotionCategory::COUNT, data)?)?;
        let l = &self.layout;
        let (w1, b1, w2, b2) = (
            tape.param(l.emo_w1),
            tape.param(l.emo_b1),
            tape.param(l.emo_w2),
            tape.param(l.emo_b2),
        );
        let h = tape.matmul(v, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, w2)?;
        tape.add_row(h, b2)
    }

    fn add_positions(&self, tape: &mut Tape, x: Var, len: usize) -> Result<Var> {
        let table = tape.param(self.layout.position_embedding);
        let pos = tape.slice_rows(table, 0, len)?;
        tape.add(x, pos)
    }

    fn layer(&self, tape: &mut Tape, x: Var, p: &LayerParams) -> Result<Var> {
        let eps = EmoTerConfig::LAYER_NORM_EPS;
        let linear = |tape: &mut Tape, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let (w, b) = (tape.param(w), tape.param(b));
            let y = tape.matmul(x, w)?;
            tape.add_row(y, b)
        };
        let q = linear(tape, x, p.wq, p.bq)?;
        let k = linear(tape, x, p.wk, p.bk)?;
        let v = linear(tape, x, p.wv, p.bv)?;
        let a = tape.attention(q, k, v, self.config.attention_heads)?;
        let o = linear(tape, a, p.wo, p.bo)?;
        let r = tape.add(x, o)?;
        let (g, b) = (tape.param(p.ln1_gamma), tape.param(p.ln1_beta));
        let h = tape.layer_norm(r, g, b, eps)?;
        let f = linear(tape, h, p.w1, p.b1)?;
        let f = tape.relu(f)?;
        let f = linear(tape, f, p.w2, p.b2)?;
        let r = tape.add(h, f)?;
        let (g, b) = (tape.param(p.ln2_gamma), tape.param(p.ln2_beta));
        tape.layer_norm(r, g, b, eps)
    }

    fn stack(&self, tape: &mut Tape, mut x: Var, layers: &[LayerParams]) -> Result<Var> {
        for p in layers {
            x = self.layer(tape, x, p)?;
        }
        Ok(x)
    }

    pub fn encode_emotion(&self, tape: &mut Tape, input: &ModelInput) -> Result<Var> {
        self.check_input(input)?;
        let input = self.visible(input);
        let x = self.emotion_embed(tape, &input.emotions)?;
        let x = self.add_positions(tape, x, input.len())?;
        self.stack(tape, x, &self.layout.emotion_layers)
    }

    pub fn encode_context(&self, tape: &mut Tape, input: &ModelInput) -> Result<Var> {
        self.check_input(input)?;
        let input = self.visible(input);
        let l = &self.layout;
        let (users, items, tokens) = (
            tape.param(l.user_embedding),
            tape.param(l.item_embedding),
            tape.param(l.token_embedding),
        );
        let u = tape.gather(users, &input.ids[..1])?;
        let i = tape.gather(items, &input.ids[1..2])?;
        let mut parts = vec![u, i];
        if input.len() > 2 {
            parts.push(tape.gather(tokens, &input.ids[2..])?);
        }
        let x = tape.concat_rows(&parts)?;
        let x = self.add_positions(tape, x, input.len())?;
        self.stack(tape, x, &self.layout.context_layers)
    }

    pub fn decode(&self, tape: &mut Tape, hidden_merge: Var) -> Result<Var> {
        self.stack(tape, hidden_merge, &self.layout.decoder_layers)
    }

    pub fn forward(&self, tape: &mut Tape, input: &ModelInput) -> Result<ForwardPass> {
        let hidden_emotion = self.encode_emotion(tape, input)?;
        let hidden_context = self.encode_context(tape, input)?;
        let hidden_merge = fuse(tape, hidden_emotion, hidden_context, self.config.intensity)?;
        let final_states = self.decode(tape, hidden_merge)?;
        Ok(ForwardPass {
            hidden_emotion,
            hidden_context,
            hidden_merge,
            final_states,
        })
    }

    /// Emotion logits `[1, 6]` from the readout position.
    pub fn emotion_head(&self, tape: &mut Tape, final_states: Var, input: &ModelInput) -> Result<Var> {
        let pos = self.readout_position(input)?;
        let h = tape.slice_rows(final_states, pos, 1)?;
        let m1 = tape.param(self.layout.emotion_head);
        tape.matmul(h, m1)
    }

    /// Vocabulary logits `states * M2^T`, with `M2` the token embedding.
    pub fn lm_head(&self, tape: &mut Tape, states: Var) -> Result<Var> {
        let m2 = tape.param(self.layout.token_embedding);
        tape.matmul_bt(states, m2)
    }

    pub fn losses(&self, tape: &mut Tape, input: &ModelInput) -> Result<Losses> {
        if input.lm_len == 0 {
            return Err(Error::InvalidArgument("input has no supervised positions".into()));
        }
        let pass = self.forward(tape, input)?;
        let states = tape.slice_rows(pass.final_states, input.bos_position, input.lm_len)?;
        let logits = self.lm_head(tape, states)?;
        let lm = tape.cross_entropy(logits, &input.lm_targets())?;
        let emo_logits = self.emotion_head(tape, pass.final_states, input)?;
        let emotion = tape.cross_entropy(emo_logits, &[Some(input.emotion_target.index())])?;
        let a = tape.scale(lm, self.config.c1)?;
        let b = tape.scale(emotion, self.config.c2)?;
        let total = tape.add(a, b)?;
        Ok(Losses { lm, emotion, total })
    }
}

/// Network plus weights.
#[derive(Clone, Debug)]
pub struct EmoTer {
    pub network: Network,
    pub params: ParamSet,
}

impl EmoTer {
    pub fn new(config: EmoTerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in parameter_shapes(&config) {
            let value = initial_value(&name, &shape, &mut rng);
            params.add(name, value)?;
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: EmoTerConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&params, &config)?;
        if params.len() != parameter_shapes(&config).len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, config expects {}",
                params.len(),
                parameter_shapes(&config).len()
            )));
        }
        Ok(EmoTer {
            network: Network { config, layout },
            params,
        })
    }

    pub fn config(&self) -> &EmoTerConfig {
        &self.network.config
    }

    /// Changes loss weights or fusion intensity without touching weights.
    pub fn set_weights(&mut self, intensity: f64, c1: f64, c2: f64) -> Result<()> {
        let mut c = self.network.config.clone();
        c.intensity = intensity;
        c.c1 = c1;
        c.c2 = c2;
        c.validate()?;
        self.network.config = c;
        Ok(())
    }

    pub fn emotion_head_id(&self) -> ParamId {
        self.network.layout.emotion_head
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.network.layout.token_embedding
    }

    pub fn loss_values(&self, input: &ModelInput) -> Result<LossValues> {
        let mut tape = Tape::new(&self.params);
        let l = self.network.losses(&mut tape, input)?;
        Ok(LossValues {
            lm: tape.value(l.lm).item(),
            emotion: tape.value(l.emotion).item(),
            total: tape.value(l.total).item(),
        })
    }

    pub fn loss_and_gradients(&self, input: &ModelInput) -> Result<(LossValues, Gradients)> {
        let mut tape = Tape::new(&self.params);
        let l = self.network.losses(&mut tape, input)?;
        let values = LossValues {
            lm: tape.value(l.lm).item(),
            emotion: tape.value(l.emotion).item(),
            total: tape.value(l.total).item(),
        };
        let grads = tape.backward(l.total)?;
        Ok((values, grads))
    }

    /// Logits for the token following the last input position.
    pub fn next_token_logits(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let pass = self.network.forward(&mut tape, input)?;
        let last = tape.slice_rows(pass.final_states, input.len() - 1, 1)?;
        let logits = self.network.lm_head(&mut tape, last)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Emotion-head probabilities.
    pub fn predict_emotion(&self, input: &ModelInput) -> Result<[f64; 6]> {
        let mut tape = Tape::new(&self.params);
        let pass = self.network.forward(&mut tape, input)?;
        let logits = self.network.emotion_head(&mut tape, pass.final_states, input)?;
        let probs = tape.softmax(logits)?;
        let mut out = [0.0; 6];
        out.copy_from_slice(tape.value(probs).data());
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join(CONFIG_FILE);
        std::fs::write(&cfg, self.config().to_kv()).map_err(|e| Error::io(&cfg, e))?;
        save_checkpoint(&self.params, &dir.join(CHECKPOINT_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let config = EmoTerConfig::from_kv(&text)?;
        let params = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        Self::from_params(config, params)
    }
}

/// A full-length random input for `config`: one feature, a random tag, and
/// random words filling the rest of the sequence.
pub fn random_input(config: &EmoTerConfig, rng: &mut impl Rng) -> ModelInput {
    let len = config.max_len;
    let word = |rng: &mut dyn rand::RngCore| rng.gen_range(Vocabulary::NUM_SPECIAL..config.vocab_size);
    let random_vector = |rng: &mut dyn rand::RngCore| {
        let mut v = [0.0; 6];
        for x in v.iter_mut().take(5) {
            if rng.gen_bool(0.5) {
                *x = rng.gen_range(0.0..1.0);
            }
        }
        EmotionVector(v)
    };
    let tag = EmotionCategory::from_index(rng.gen_range(0..EmotionCategory::COUNT)).expect("index below COUNT");
    let mut ids = vec![
        rng.gen_range(0..config.num_users),
        rng.gen_range(0..config.num_items),
        word(rng),
    ];
    ids.push(Vocabulary::emotion_token(tag));
    ids.push(Vocabulary::BOS);
    let mut emotions = vec![EmotionVector::NEUTRAL, EmotionVector::NEUTRAL, random_vector(rng)];
    emotions.push(EmotionVector::one_hot(tag));
    emotions.push(EmotionVector::NEUTRAL);
    while ids.len() < len - 1 {
        ids.push(word(rng));
        emotions.push(random_vector(rng));
    }
    ids.push(Vocabulary::EOS);
    emotions.push(EmotionVector::NEUTRAL);
    ModelInput {
        lm_len: len - 5,
        ids,
        emotions,
        tag_position: 3,
        bos_position: 4,
        emotion_target: tag,
    }
}

/// Compares the total-loss gradient of a freshly initialized model on a
/// random input against central differences.
pub fn check_gradients(config: &EmoTerConfig, seed: u64, min_coords: usize, epsilon: f64) -> Result<GradCheckReport> {
    let mut model = EmoTer::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let input = random_input(config, &mut rng);
    let net = model.network.clone();
    grad_check(
        &mut model.params,
        |t| Ok(net.losses(t, &input)?.total),
        epsilon,
        min_coords,
        seed,
    )
}
