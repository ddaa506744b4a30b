//! File formats: JSONL datasets (header line then one record per line),
//! versioned checkpoints with named flat parameter arrays in a fixed
//! order, and the flat key-value run configuration.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{ClientRecord, ClientTuple, Dataset, DemographicSchema, RecordBounds};
use crate::encoder::{ModelDims, Standardizer};
use crate::error::{CrnError, Result};
use crate::head::HeadStats;
use crate::layers::Mlp3Stats;
use crate::metrics::MetricsReport;
use crate::model::{CrnModel, CrnStats, RewardModel};
use crate::numerics::AdamConfig;
use crate::synthworld::baselines::{GruBaseline, MarkovMlp};
use crate::training::{ImbalanceConfig, TrainConfig};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeaderLine {
    schema_version: u32,
    action_count: usize,
    response_vocab: usize,
    explicit_width: usize,
    demographics: DemographicSchema,
}

pub fn dataset_to_string(dataset: &Dataset) -> Result<String> {
    let header = DatasetHeaderLine {
        schema_version: DATASET_SCHEMA_VERSION,
        action_count: dataset.header.action_count,
        response_vocab: dataset.header.response_vocab,
        explicit_width: dataset.header.explicit_width,
        demographics: dataset.header.schema.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for record in &dataset.records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses and validates. Every record must satisfy the header's bounds;
/// the first offending record is named in the error.
pub fn dataset_from_str(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| CrnError::Data("dataset is empty; expected a header line".into()))?;
    let header: DatasetHeaderLine = serde_json::from_str(header_line)
        .map_err(|e| CrnError::Data(format!("bad dataset header: {e}")))?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(CrnError::Data(format!(
            "unsupported dataset schema version {}",
            header.schema_version
        )));
    }
    let bounds = RecordBounds {
        action_count: header.action_count,
        response_vocab: header.response_vocab,
        explicit_width: header.explicit_width,
        schema: header.demographics,
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let record: ClientRecord = serde_json::from_str(line)
            .map_err(|e| CrnError::Data(format!("bad record on line {}: {e}", i + 2)))?;
        let violations = crate::domain::validate_record(&record, &bounds);
        if let Some(v) = violations.first() {
            return Err(CrnError::Data(format!("invalid record: {v}")));
        }
        records.push(record);
    }
    Ok(Dataset { header: bounds, records })
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(dataset_to_string(dataset)?.as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut text = String::new();
    BufReader::new(std::fs::File::open(path)?).read_to_string(&mut text)?;
    dataset_from_str(&text)
}

/// Reads just the first record of a dataset file (for `recommend`).
pub fn read_first_record(path: &Path) -> Result<(RecordBounds, ClientRecord)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CrnError::Data("dataset is empty".into()))??;
    let header: DatasetHeaderLine = serde_json::from_str(&header_line)
        .map_err(|e| CrnError::Data(format!("bad dataset header: {e}")))?;
    let bounds = RecordBounds {
        action_count: header.action_count,
        response_vocab: header.response_vocab,
        explicit_width: header.explicit_width,
        schema: header.demographics,
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ClientRecord =
            serde_json::from_str(&line).map_err(|e| CrnError::Data(format!("bad record: {e}")))?;
        return Ok((bounds, record));
    }
    Err(CrnError::Data("dataset has no records".into()))
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub len: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ModelMeta {
    #[serde(rename = "crn")]
    Crn {
        dims: ModelDims,
        action_count: usize,
        response_vocab: usize,
        explicit_width: usize,
        schema: DemographicSchema,
        standardizer: Standardizer,
        stats: CrnStats,
    },
    #[serde(rename = "markov_mlp")]
    Markov {
        dims: ModelDims,
        action_count: usize,
        response_vocab: usize,
        explicit_width: usize,
        schema: DemographicSchema,
        standardizer: Standardizer,
        stats: Mlp3Stats,
    },
    #[serde(rename = "gru")]
    Gru {
        dims: ModelDims,
        action_count: usize,
        response_vocab: usize,
        explicit_width: usize,
        schema: DemographicSchema,
        standardizer: Standardizer,
        dem_stats: Mlp3Stats,
        fusion_stats: Mlp3Stats,
        head_stats: HeadStats,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub seed: u64,
    pub config: Option<RunConfig>,
    pub meta: ModelMeta,
    /// Flat parameter arrays in the model's fixed visitor order.
    pub params: Vec<NamedArray>,
}

/// Any trained model the pipeline can hold.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Crn(Box<CrnModel>),
    Markov(Box<MarkovMlp>),
    Gru(Box<GruBaseline>),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Crn(_) => "crn",
            AnyModel::Markov(_) => "markov_mlp",
            AnyModel::Gru(_) => "gru",
        }
    }

    pub fn predict(&self, tuple: &ClientTuple, action: usize) -> Result<f64> {
        match self {
            AnyModel::Crn(m) => m.predict(tuple, action),
            AnyModel::Markov(m) => m.predict(tuple, action),
            AnyModel::Gru(m) => m.predict(tuple, action),
        }
    }

    pub fn evaluate(&self, records: &[ClientRecord]) -> Result<MetricsReport> {
        match self {
            AnyModel::Crn(m) => crate::metrics::evaluate_model(m.as_ref(), records),
            AnyModel::Markov(m) => crate::metrics::evaluate_model(m.as_ref(), records),
            AnyModel::Gru(m) => crate::metrics::evaluate_model(m.as_ref(), records),
        }
    }

    fn named_params(&self) -> Vec<NamedArray> {
        fn arrays<M: RewardModel>(m: &M) -> Vec<NamedArray> {
            let flat = m.flatten();
            m.param_layout()
                .into_iter()
                .map(|spec| NamedArray {
                    name: spec.name,
                    len: spec.len,
                    data: flat[spec.offset..spec.offset + spec.len].to_vec(),
                })
                .collect()
        }
        match self {
            AnyModel::Crn(m) => arrays(m.as_ref()),
            AnyModel::Markov(m) => arrays(m.as_ref()),
            AnyModel::Gru(m) => arrays(m.as_ref()),
        }
    }

    fn meta(&self) -> ModelMeta {
        match self {
            AnyModel::Crn(m) => ModelMeta::Crn {
                dims: m.dims,
                action_count: m.action_count,
                response_vocab: m.response_vocab,
                explicit_width: m.explicit_width,
                schema: m.schema.clone(),
                standardizer: m.standardizer.clone(),
                stats: m.stats.clone(),
            },
            AnyModel::Markov(m) => ModelMeta::Markov {
                dims: ModelDims {
                    n_a: m.emb_dim,
                    n_o: 0,
                    n_imp: 0,
                    n_exp: 0,
                    n_s: m.mlp.l1.out_dim() - m.emb_dim,
                    dem_hidden: 0,
                    fusion_hidden: 0,
                },
                action_count: m.action_count,
                response_vocab: m.response_vocab,
                explicit_width: m.explicit_width,
                schema: m.schema.clone(),
                standardizer: m.standardizer.clone(),
                stats: m.stats.clone(),
            },
            AnyModel::Gru(m) => ModelMeta::Gru {
                dims: m.dims,
                action_count: m.action_count,
                response_vocab: m.response_vocab,
                explicit_width: m.explicit_width,
                schema: m.schema.clone(),
                standardizer: m.standardizer.clone(),
                dem_stats: m.dem_stats.clone(),
                fusion_stats: m.fusion_stats.clone(),
                head_stats: m.head_stats.clone(),
            },
        }
    }
}

pub fn checkpoint_to_string(model: &AnyModel, seed: u64, config: Option<&RunConfig>) -> Result<String> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        seed,
        config: config.cloned(),
        meta: model.meta(),
        params: model.named_params(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn save_checkpoint(path: &Path, model: &AnyModel, seed: u64, config: Option<&RunConfig>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(checkpoint_to_string(model, seed, config)?.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

fn load_params_into<M: RewardModel>(model: &mut M, arrays: &[NamedArray]) -> Result<()> {
    let layout = model.param_layout();
    if layout.len() != arrays.len() {
        return Err(CrnError::Format(format!(
            "checkpoint has {} parameter arrays, model expects {}",
            arrays.len(),
            layout.len()
        )));
    }
    let mut flat = vec![0.0; layout.iter().map(|s| s.len).sum()];
    for (spec, array) in layout.iter().zip(arrays) {
        if spec.name != array.name || spec.len != array.len || array.data.len() != array.len {
            return Err(CrnError::Format(format!(
                "checkpoint array '{}' (len {}) does not match expected '{}' (len {})",
                array.name,
                array.data.len(),
                spec.name,
                spec.len
            )));
        }
        flat[spec.offset..spec.offset + spec.len].copy_from_slice(&array.data);
    }
    model.load_flat(&flat)
}

pub fn checkpoint_from_str(text: &str) -> Result<(AnyModel, CheckpointFile)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CrnError::Format(format!(
            "unsupported checkpoint format version {}",
            file.format_version
        )));
    }
    let model = match &file.meta {
        ModelMeta::Crn { dims, action_count, response_vocab, explicit_width, schema, standardizer, stats } => {
            let mut m = CrnModel::new(*dims, *action_count, *response_vocab, *explicit_width, schema.clone(), 0);
            m.standardizer = standardizer.clone();
            m.stats = stats.clone();
            load_params_into(&mut m, &file.params)?;
            AnyModel::Crn(Box::new(m))
        }
        ModelMeta::Markov { dims, action_count, response_vocab, explicit_width, schema, standardizer, stats } => {
            let mut m = MarkovMlp::new(dims, *action_count, *response_vocab, *explicit_width, schema.clone(), 0);
            m.standardizer = standardizer.clone();
            m.stats = stats.clone();
            load_params_into(&mut m, &file.params)?;
            AnyModel::Markov(Box::new(m))
        }
        ModelMeta::Gru {
            dims,
            action_count,
            response_vocab,
            explicit_width,
            schema,
            standardizer,
            dem_stats,
            fusion_stats,
            head_stats,
        } => {
            let mut m = GruBaseline::new(dims, *action_count, *response_vocab, *explicit_width, schema.clone(), 0);
            m.standardizer = standardizer.clone();
            m.dem_stats = dem_stats.clone();
            m.fusion_stats = fusion_stats.clone();
            m.head_stats = head_stats.clone();
            load_params_into(&mut m, &file.params)?;
            AnyModel::Gru(Box::new(m))
        }
    };
    Ok((model, file))
}

pub fn load_checkpoint(path: &Path) -> Result<(AnyModel, CheckpointFile)> {
    let mut text = String::new();
    BufReader::new(std::fs::File::open(path)?).read_to_string(&mut text)?;
    checkpoint_from_str(&text)
}

// ---------------------------------------------------------------------------
// Flat run configuration.
// ---------------------------------------------------------------------------

/// Flat key-value configuration mirroring the training and imbalance
/// settings plus the model widths. Every field has a default, so a
/// config file may specify any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub n_a: usize,
    pub n_o: usize,
    pub n_imp: usize,
    pub n_exp: usize,
    pub n_s: usize,
    pub dem_hidden: usize,
    pub fusion_hidden: usize,
    pub action_weighting: bool,
    pub interaction_sampling: bool,
    pub reward_weighting: bool,
    pub effectiveness_adjustment: bool,
    /// Top-k loss selection count; defaults to half the batch size.
    pub k_loss: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        let train = TrainConfig::default();
        let imb = ImbalanceConfig::none();
        RunConfig {
            batch_size: train.batch_size,
            epochs: train.epochs,
            seed: train.seed,
            learning_rate: train.adam.learning_rate,
            val_fraction: train.val_fraction,
            test_fraction: train.test_fraction,
            n_a: dims.n_a,
            n_o: dims.n_o,
            n_imp: dims.n_imp,
            n_exp: dims.n_exp,
            n_s: dims.n_s,
            dem_hidden: dims.dem_hidden,
            fusion_hidden: dims.fusion_hidden,
            action_weighting: imb.action_weighting,
            interaction_sampling: imb.interaction_sampling,
            reward_weighting: imb.reward_weighting,
            effectiveness_adjustment: imb.effectiveness_adjustment,
            k_loss: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut text = String::new();
        BufReader::new(std::fs::File::open(path)?).read_to_string(&mut text)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_a: self.n_a,
            n_o: self.n_o,
            n_imp: self.n_imp,
            n_exp: self.n_exp,
            n_s: self.n_s,
            dem_hidden: self.dem_hidden,
            fusion_hidden: self.fusion_hidden,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            adam: AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() },
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
        }
    }

    pub fn imbalance(&self) -> ImbalanceConfig {
        ImbalanceConfig {
            action_weighting: self.action_weighting,
            interaction_sampling: self.interaction_sampling,
            reward_weighting: self.reward_weighting,
            effectiveness_adjustment: self.effectiveness_adjustment,
            k_loss: self.k_loss.unwrap_or((self.batch_size / 2).max(1)),
        }
    }

    /// Applies an `--imbalance` CLI value: "none", "all", or a comma
    /// separated list of {action, interaction, reward, effectiveness}.
    pub fn apply_imbalance_flag(&mut self, flag: &str) -> Result<()> {
        self.action_weighting = false;
        self.interaction_sampling = false;
        self.reward_weighting = false;
        self.effectiveness_adjustment = false;
        match flag {
            "none" => {}
            "all" => {
                self.action_weighting = true;
                self.interaction_sampling = true;
                self.reward_weighting = true;
                self.effectiveness_adjustment = true;
            }
            list => {
                for part in list.split(',') {
                    match part.trim() {
                        "action" => self.action_weighting = true,
                        "interaction" => self.interaction_sampling = true,
                        "reward" => self.reward_weighting = true,
                        "effectiveness" => self.effectiveness_adjustment = true,
                        other => {
                            return Err(CrnError::Config(format!(
                                "unknown imbalance strategy '{other}'"
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
