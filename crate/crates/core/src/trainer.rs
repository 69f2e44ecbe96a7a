//! Mini-batch multi-task training, loss evaluation, and the ablation grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocabulary, encode_example, tag_records, EncodedExample, Record, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::{batch_generate, GeneratedExplanation, GenerationQuery};
use crate::lexicon::Lexicon;
use crate::metrics::{evaluate, EvaluationPair, EvaluationReport};
use crate::model::{EmoTer, EmoTerConfig, LossValues, ModelInput};
use crate::numerics::{ParamSet, Sgd};

/// Optimization settings. Loss weights and intensity live on the model
/// config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub max_epochs: usize,
    /// Epochs without improvement in the monitored loss before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Stop once the epoch's mean training loss falls below this.
    pub target_loss: Option<f64>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1.0,
            clip: 1.0,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            target_loss: None,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate {} and clip {} must be positive",
                self.learning_rate, self.clip
            )));
        }
        Ok(())
    }
}

/// Mean losses over a set of examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub lm: f64,
    pub emotion: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Running mean over the epoch's batches, measured before each update.
    pub train: LossSummary,
    pub valid: Option<LossSummary>,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_train: LossSummary,
    pub initial_valid: Option<LossSummary>,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept; 0 means none improved on the
    /// initialization.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

/// Encoded splits sharing one vocabulary built from the training records.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub train_records: Vec<Record>,
    pub valid_records: Vec<Record>,
    pub test_records: Vec<Record>,
    pub train: Vec<EncodedExample>,
    pub valid: Vec<EncodedExample>,
    pub test: Vec<EncodedExample>,
}

/// Tags untagged records with the lexicon, builds the vocabulary from
/// `train`, and encodes all three lists.
pub fn prepare_data(
    train: &[Record],
    valid: &[Record],
    test: &[Record],
    lexicon: &Lexicon,
    max_len: usize,
) -> Result<PreparedData> {
    let tagged = |rs: &[Record]| {
        let mut rs = rs.to_vec();
        tag_records(&mut rs, lexicon);
        rs
    };
    let (train_records, valid_records, test_records) = (tagged(train), tagged(valid), tagged(test));
    let vocab = build_vocabulary(&train_records)?;
    let encode = |rs: &[Record]| {
        rs.iter()
            .map(|r| encode_example(r, &vocab, max_len))
            .collect::<Result<Vec<_>>>()
    };
    Ok(PreparedData {
        train: encode(&train_records)?,
        valid: encode(&valid_records)?,
        test: encode(&test_records)?,
        vocab,
        max_len,
        train_records,
        valid_records,
        test_records,
    })
}

impl PreparedData {
    /// A model config sized to this vocabulary.
    pub fn model_config(&self, template: &EmoTerConfig) -> EmoTerConfig {
        EmoTerConfig {
            vocab_size: self.vocab.len(),
            num_users: self.vocab.num_users(),
            num_items: self.vocab.num_items(),
            max_len: self.max_len,
            ..template.clone()
        }
    }
}

fn inputs(examples: &[EncodedExample], lexicon: &Lexicon) -> Vec<ModelInput> {
    examples
        .iter()
        .map(|e| ModelInput::from_example(e, lexicon, false))
        .collect()
}

fn summarize(sum: LossValues, n: usize) -> LossSummary {
    let k = n as f64;
    LossSummary {
        lm: sum.lm / k,
        emotion: sum.emotion / k,
        total: sum.total / k,
    }
}

fn add(a: LossValues, b: LossValues) -> LossValues {
    LossValues {
        lm: a.lm + b.lm,
        emotion: a.emotion + b.emotion,
        total: a.total + b.total,
    }
}

const ZERO: LossValues = LossValues {
    lm: 0.0,
    emotion: 0.0,
    total: 0.0,
};

fn mean_loss(model: &EmoTer, inputs: &[ModelInput]) -> Result<LossSummary> {
    if inputs.is_empty() {
        return Err(Error::Empty("loss evaluation needs at least one record".into()));
    }
    let mut sum = ZERO;
    for x in inputs {
        sum = add(sum, model.loss_values(x)?);
    }
    Ok(summarize(sum, inputs.len()))
}

/// Mean losses over `examples` without touching the parameters.
pub fn evaluate_loss(model: &EmoTer, examples: &[EncodedExample], lexicon: &Lexicon) -> Result<LossSummary> {
    mean_loss(model, &inputs(examples, lexicon))
}

fn at_batch(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch}, batch {batch}: {what}")),
        other => other,
    }
}

/// Trains a freshly initialized model. See [`train_with_progress`].
pub fn train(
    model_config: &EmoTerConfig,
    train_config: &TrainConfig,
    data: &PreparedData,
    lexicon: &Lexicon,
) -> Result<(EmoTer, TrainHistory)> {
    train_with_progress(model_config, train_config, data, lexicon, |_| {})
}

/// Seeded mini-batch SGD. The validation loss (or the training loss when
/// there is no validation split) is monitored after every epoch, and the
/// parameters from the best epoch are returned.
pub fn train_with_progress(
    model_config: &EmoTerConfig,
    train_config: &TrainConfig,
    data: &PreparedData,
    lexicon: &Lexicon,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(EmoTer, TrainHistory)> {
    train_config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    let mut model = EmoTer::new(data.model_config(model_config), train_config.seed)?;
    let train_inputs = inputs(&data.train, lexicon);
    let valid_inputs = inputs(&data.valid, lexicon);
    let sgd = Sgd::new(train_config.learning_rate, train_config.clip);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    rng.set_stream(1);

    let initial_train = mean_loss(&model, &train_inputs)?;
    let initial_valid = if valid_inputs.is_empty() {
        None
    } else {
        Some(mean_loss(&model, &valid_inputs)?)
    };
    let mut best = initial_valid.unwrap_or(initial_train).total;
    let mut best_params: ParamSet = model.params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut epochs = Vec::new();

    let mut order: Vec<usize> = (0..train_inputs.len()).collect();
    for epoch in 1..=train_config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = ZERO;
        let mut norm_sum = 0.0;
        let batches = order.chunks(train_config.batch_size);
        let n_batches = batches.len();
        for (b, batch) in batches.enumerate() {
            for &k in batch {
                let (l, g) = model.loss_and_gradients(&train_inputs[k]).map_err(at_batch(epoch, b))?;
                sum = add(sum, l);
                model.params.accumulate(&g);
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            norm_sum += sgd.step(&mut model.params).map_err(at_batch(epoch, b))?;
        }
        let train = summarize(sum, train_inputs.len());
        let valid = if valid_inputs.is_empty() {
            None
        } else {
            Some(mean_loss(&model, &valid_inputs)?)
        };
        let stats = EpochStats {
            epoch,
            train,
            valid,
            grad_norm: norm_sum / n_batches as f64,
        };
        on_epoch(&stats);
        epochs.push(stats);

        let monitored = valid.unwrap_or(train).total;
        if monitored < best {
            best = monitored;
            best_params.clone_from(&model.params);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if train_config.target_loss.is_some_and(|t| train.total < t) {
            stop_reason = StopReason::TargetLoss;
            break;
        }
        if since_best >= train_config.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    model.params = best_params;
    Ok((
        model,
        TrainHistory {
            initial_train,
            initial_valid,
            epochs,
            best_epoch,
            stop_reason,
        },
    ))
}

/// Generates for every record (with its own tag unless `emotion` overrides
/// it) and scores the output against the references.
pub fn evaluate_generation(
    model: &EmoTer,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    records: &[Record],
    emotion: Option<crate::lexicon::EmotionCategory>,
) -> Result<(Vec<GeneratedExplanation>, EvaluationReport)> {
    let queries = records
        .iter()
        .map(|r| GenerationQuery::from_record(r, emotion))
        .collect::<Result<Vec<_>>>()?;
    let outputs = batch_generate(model, vocab, lexicon, &queries);
    let mut rows = Vec::with_capacity(records.len());
    let mut pairs = Vec::with_capacity(records.len());
    for ((r, q), out) in records.iter().zip(&queries).zip(outputs) {
        let tokens = out?;
        rows.push(GeneratedExplanation::new(q, &tokens));
        pairs.push(EvaluationPair {
            reference: r.tokens(),
            hypothesis: tokens,
            features: r.features.clone(),
        });
    }
    Ok((rows, evaluate(&pairs, lexicon)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSetting {
    /// c2 = 0: the emotion loss is recorded but not optimized.
    NoEmotionLoss,
    /// c1 = 0: the language-model loss is recorded but not optimized.
    NoLmLoss,
    Full,
}

impl LossSetting {
    pub const ALL: [LossSetting; 3] = [LossSetting::NoEmotionLoss, LossSetting::NoLmLoss, LossSetting::Full];

    pub fn weights(self, base: &EmoTerConfig) -> (f64, f64) {
        match self {
            LossSetting::NoEmotionLoss => (base.c1, 0.0),
            LossSetting::NoLmLoss => (0.0, base.c2),
            LossSetting::Full => (base.c1, base.c2),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossSetting::NoEmotionLoss => "w/o L_emo",
            LossSetting::NoLmLoss => "w/o L_lm",
            LossSetting::Full => "full",
        }
    }
}

pub const ABLATION_INTENSITIES: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub setting: LossSetting,
    pub intensity: f64,
    pub history: TrainHistory,
    pub report: EvaluationReport,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("{} i={}", self.setting.label(), self.intensity)
    }
}

/// Every loss setting crossed with every intensity, each trained from the
/// same seed and scored on the test split. Rows are grouped by setting.
pub fn ablation_grid(
    base: &EmoTerConfig,
    train_config: &TrainConfig,
    data: &PreparedData,
    lexicon: &Lexicon,
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::with_capacity(9);
    for setting in LossSetting::ALL {
        for intensity in ABLATION_INTENSITIES {
            let (c1, c2) = setting.weights(base);
            let config = EmoTerConfig {
                c1,
                c2,
                intensity,
                ..base.clone()
            };
            let (model, history) = train(&config, train_config, data, lexicon)?;
            let (_, report) = evaluate_generation(&model, &data.vocab, lexicon, &data.test_records, None)?;
            cells.push(AblationCell {
                setting,
                intensity,
                history,
                report,
            });
        }
    }
    Ok(cells)
}

pub fn format_ablation(cells: &[AblationCell]) -> String {
    let labels: Vec<String> = cells.iter().map(AblationCell::label).collect();
    let rows: Vec<(String, &EvaluationReport)> = labels.into_iter().zip(cells.iter().map(|c| &c.report)).collect();
    EvaluationReport::format_table(&rows)
}
