//! End-to-end experiment: label, exclude, split, fuse, evaluate with
//! bootstrap intervals, audit subgroups, and write the report bundle.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cohort::{assign_labels, exclude_ventilated, split_by_patient, LabelMap, SplitAssignment, DEFAULT_RATIOS};
use crate::config::Ini;
use crate::data::{DemographicRecord, DiagnosisRecord, FeatureVector, LabeledCohort, PredictionSet, Split};
use crate::error::{Error, Result};
use crate::fairness::{audit, Axis, FairnessTable, DEFAULT_MIN_GROUP_SIZE};
use crate::fusion::{
    dendrogram_from_validation, feature_matrix, merge_sites, multimodal_join, unweighted_average, weighted_average,
    CategoryMap, Dendrogram, SiteData, SplitPredictions, StackProcedure, WeightVector,
};
use crate::io;
use crate::learners::{self, FeatureMatrix, ModelKind, TrainConfig};
use crate::metrics::{bootstrap_report, BootstrapConfig, MetricReport, TrainingProcedure, DEFAULT_RESAMPLES};
use crate::report::{write_tables, Format, MetricTable};
use crate::rng::{derive_seed, Rng};
use crate::synth::{generate_base_predictions, generate_cohort, generate_features, GroupOffset, ModelSpec, SynthConfig};

pub const SEED_ENV: &str = "CXRFUSE_SEED";

const SEED_SPLIT: u64 = 1;
const SEED_PRIMARY_SITE: u64 = 2;
const SEED_SECOND_SITE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Strategy {
    Base(String),
    BagUnweighted,
    BagWeighted,
    Stack(ModelKind),
    MultiSite,
    MultiModal,
    Permutation,
}

impl Strategy {
    pub fn key(&self) -> String {
        match self {
            Strategy::Base(id) => format!("base:{id}"),
            Strategy::BagUnweighted => "bag:unweighted".into(),
            Strategy::BagWeighted => "bag:weighted".into(),
            Strategy::Stack(k) => format!("stack:{}", k.short_name()),
            Strategy::MultiSite => "data:multisite".into(),
            Strategy::MultiModal => "data:multimodal".into(),
            Strategy::Permutation => "permutation".into(),
        }
    }

    /// Every non-base strategy, in the usual table order.
    pub fn all_fusion() -> Vec<Strategy> {
        let mut v = vec![Strategy::BagUnweighted, Strategy::BagWeighted];
        v.extend(ModelKind::META_MODELS.map(Strategy::Stack));
        v.extend([Strategy::MultiSite, Strategy::MultiModal, Strategy::Permutation]);
        v
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown strategy '{s}'"));
        Ok(match s {
            "bag:unweighted" => Strategy::BagUnweighted,
            "bag:weighted" => Strategy::BagWeighted,
            "data:multisite" => Strategy::MultiSite,
            "data:multimodal" => Strategy::MultiModal,
            "permutation" => Strategy::Permutation,
            _ => {
                if let Some(id) = s.strip_prefix("base:") {
                    if !crate::data::is_valid_id(id) {
                        return Err(bad());
                    }
                    Strategy::Base(id.to_string())
                } else if let Some(k) = s.strip_prefix("stack:") {
                    let kind: ModelKind = k.parse().map_err(|_| bad())?;
                    if !ModelKind::META_MODELS.contains(&kind) {
                        return Err(bad());
                    }
                    Strategy::Stack(kind)
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

/// Input files of one site. Demographics and features are optional but
/// required by the strategies that use them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteFiles {
    pub site: String,
    pub diagnoses: PathBuf,
    pub demographics: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DataSource {
    /// Generated cohorts; seeds are derived from the master seed.
    Synthetic { primary: SynthConfig, second: SynthConfig },
    Files {
        primary: SiteFiles,
        /// `(model_id, path)` for each base model.
        predictions: Vec<(String, PathBuf)>,
        second: Option<SiteFiles>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub source: DataSource,
    pub label_map: LabelMap,
    /// `None` derives the split seed from the master seed.
    pub split_seed: Option<u64>,
    pub ratios: [f64; 3],
    pub threshold: f64,
    pub n_resamples: usize,
    pub strategies: Vec<Strategy>,
    pub permutation_model: ModelKind,
    pub axes: Vec<Axis>,
    pub min_group_size: usize,
    pub train: TrainConfig,
    pub parallel: bool,
}

impl Default for PipelineConfig {
    /// Every strategy over the synthetic defaults.
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            source: DataSource::Synthetic {
                primary: SynthConfig::default(),
                second: SynthConfig::emory(0),
            },
            label_map: LabelMap::default(),
            split_seed: None,
            ratios: DEFAULT_RATIOS,
            threshold: 0.5,
            n_resamples: DEFAULT_RESAMPLES,
            strategies: Strategy::all_fusion(),
            permutation_model: ModelKind::Knn,
            axes: Axis::ALL.to_vec(),
            min_group_size: DEFAULT_MIN_GROUP_SIZE,
            train: TrainConfig::default(),
            parallel: true,
        }
    }
}

fn parse_model_specs(items: &[String]) -> Result<Vec<ModelSpec>> {
    items
        .iter()
        .map(|item| {
            let (id, skill) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("model '{item}' must read id:skill")))?;
            let skill = skill
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid skill in '{item}'")))?;
            crate::data::check_id("model_id", id.trim()).map_err(|e| Error::Config(e.to_string()))?;
            Ok(ModelSpec { id: id.trim().to_string(), skill })
        })
        .collect()
}

fn parse_offsets(items: &[String]) -> Result<Vec<GroupOffset>> {
    items
        .iter()
        .map(|item| {
            let parts: Vec<&str> = item.split(':').map(str::trim).collect();
            let [axis, group, offset] = parts[..] else {
                return Err(Error::Config(format!("offset '{item}' must read axis:group:offset")));
            };
            Ok(GroupOffset {
                axis: axis.parse().map_err(|_| Error::Config(format!("unknown axis in '{item}'")))?,
                group: group.to_string(),
                offset: offset
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid offset in '{item}'")))?,
            })
        })
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn site_files(sec: &crate::config::Section<'_>, base: &Path, default_site: &str) -> Result<Option<SiteFiles>> {
    let Some(diagnoses) = sec.raw("diagnoses") else {
        return Ok(None);
    };
    Ok(Some(SiteFiles {
        site: sec.raw("site").unwrap_or(default_site).to_string(),
        diagnoses: resolve(base, diagnoses),
        demographics: sec.raw("demographics").map(|p| resolve(base, p)),
        features: sec.raw("features").map(|p| resolve(base, p)),
    }))
}

fn apply_synth(sec: &crate::config::Section<'_>, cfg: &mut SynthConfig) -> Result<()> {
    sec.expect_keys(&[
        "site",
        "n_patients",
        "images_min",
        "images_max",
        "prevalence",
        "shared_noise",
        "feature_skill",
        "ventilation_rate",
        "models",
        "offsets",
    ])?;
    if let Some(s) = sec.raw("site") {
        cfg.site = s.to_string();
    }
    cfg.n_patients = sec.get_or("n_patients", cfg.n_patients)?;
    cfg.images_per_patient.0 = sec.get_or("images_min", cfg.images_per_patient.0)?;
    cfg.images_per_patient.1 = sec.get_or("images_max", cfg.images_per_patient.1)?;
    cfg.prevalence = sec.get_or("prevalence", cfg.prevalence)?;
    cfg.shared_noise = sec.get_or("shared_noise", cfg.shared_noise)?;
    cfg.feature_skill = sec.get_or("feature_skill", cfg.feature_skill)?;
    cfg.ventilation_rate = sec.get_or("ventilation_rate", cfg.ventilation_rate)?;
    if let Some(items) = sec.list("models") {
        cfg.models = parse_model_specs(&items)?;
    }
    if let Some(items) = sec.list("offsets") {
        cfg.group_offsets = parse_offsets(&items)?;
    }
    Ok(())
}

impl PipelineConfig {
    /// Parse a config file. Relative paths resolve against `base_dir`;
    /// `seed_override` (normally from the environment) replaces the master
    /// seed.
    pub fn from_ini(text: &str, base_dir: &Path, seed_override: Option<u64>) -> Result<Self> {
        let ini = Ini::parse(text)?;
        ini.expect_sections(&["run", "data", "split", "synth", "second_site", "train"])?;
        let mut cfg = PipelineConfig::default();

        let run = ini.section("run");
        run.expect_keys(&[
            "seed",
            "strategies",
            "threshold",
            "bootstrap",
            "axes",
            "min_group_size",
            "permutation_model",
            "parallel",
        ])?;
        cfg.seed = run.get_or("seed", cfg.seed)?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        if let Some(list) = run.list_of::<Strategy>("strategies")? {
            cfg.strategies = list;
        }
        cfg.threshold = run.get_or("threshold", cfg.threshold)?;
        cfg.n_resamples = run.get_or("bootstrap", cfg.n_resamples)?;
        if let Some(axes) = run.list("axes") {
            cfg.axes = axes
                .iter()
                .map(|a| a.parse().map_err(|_| Error::Config(format!("unknown axis '{a}'"))))
                .collect::<Result<_>>()?;
        }
        cfg.min_group_size = run.get_or("min_group_size", cfg.min_group_size)?;
        if let Some(k) = run.raw("permutation_model") {
            cfg.permutation_model = k
                .parse()
                .ok()
                .filter(|k| ModelKind::META_MODELS.contains(k))
                .ok_or_else(|| Error::Config(format!("unknown permutation_model '{k}'")))?;
        }
        cfg.parallel = run.get_or("parallel", cfg.parallel)?;

        let split = ini.section("split");
        split.expect_keys(&["seed", "ratios"])?;
        cfg.split_seed = split.get("seed")?;
        if let Some(r) = split.list_of::<f64>("ratios")? {
            cfg.ratios = r
                .try_into()
                .map_err(|_| Error::Config("split ratios need three values".into()))?;
        }

        let train = ini.section("train");
        train.expect_keys(&[
            "learning_rate",
            "decay",
            "batch_size",
            "patience",
            "max_epochs",
            "knn_k",
            "forest_trees",
            "forest_depth",
            "gbdt_rounds",
            "gbdt_depth",
            "gbdt_shrinkage",
            "mlp_hidden",
        ])?;
        let t = &mut cfg.train;
        t.learning_rate = train.get_or("learning_rate", t.learning_rate)?;
        t.per_epoch_decay = train.get_or("decay", t.per_epoch_decay)?;
        t.batch_size = train.get_or("batch_size", t.batch_size)?;
        t.early_stop_patience = train.get_or("patience", t.early_stop_patience)?;
        t.max_epochs = train.get_or("max_epochs", t.max_epochs)?;
        t.knn.k = train.get_or("knn_k", t.knn.k)?;
        t.forest.n_trees = train.get_or("forest_trees", t.forest.n_trees)?;
        t.forest.max_depth = train.get_or("forest_depth", t.forest.max_depth)?;
        t.gbdt.n_rounds = train.get_or("gbdt_rounds", t.gbdt.n_rounds)?;
        t.gbdt.max_depth = train.get_or("gbdt_depth", t.gbdt.max_depth)?;
        t.gbdt.shrinkage = train.get_or("gbdt_shrinkage", t.gbdt.shrinkage)?;
        t.mlp.hidden = train.get_or("mlp_hidden", t.mlp.hidden)?;
        t.validate().map_err(|e| Error::Config(e.to_string()))?;

        let data = ini.section("data");
        data.expect_keys(&["source", "site", "diagnoses", "demographics", "features", "predictions", "label_map"])?;
        if let Some(p) = data.raw("label_map") {
            cfg.label_map = LabelMap::parse(&fs::read_to_string(resolve(base_dir, p))?)?;
        }
        let second = ini.section("second_site");
        match data.raw("source").unwrap_or("synthetic") {
            "synthetic" => {
                let mut primary = SynthConfig::default();
                apply_synth(&ini.section("synth"), &mut primary)?;
                let mut second_cfg = SynthConfig::emory(0);
                apply_synth(&second, &mut second_cfg)?;
                if second_cfg.site == primary.site {
                    return Err(Error::Config("the two synthetic sites need different names".into()));
                }
                cfg.source = DataSource::Synthetic { primary, second: second_cfg };
            }
            "files" => {
                let primary = site_files(&data, base_dir, "site1")?
                    .ok_or_else(|| Error::Config("data.diagnoses is required for file input".into()))?;
                let predictions = data
                    .list("predictions")
                    .unwrap_or_default()
                    .iter()
                    .map(|item| {
                        let (id, path) = item
                            .split_once('=')
                            .ok_or_else(|| Error::Config(format!("prediction '{item}' must read model_id=path")))?;
                        Ok((id.trim().to_string(), resolve(base_dir, path.trim())))
                    })
                    .collect::<Result<Vec<_>>>()?;
                second.expect_keys(&["site", "diagnoses", "demographics", "features"])?;
                cfg.source = DataSource::Files {
                    primary,
                    predictions,
                    second: site_files(&second, base_dir, "site2")?,
                };
            }
            other => return Err(Error::Config(format!("unknown data source '{other}'"))),
        }
        Ok(cfg)
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or_else(|| derive_seed(self.seed, SEED_SPLIT))
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Table rows: base models not listed explicitly, then the listed
    /// strategies in declaration order.
    pub fn rows(&self, base_models: &[String]) -> Result<Vec<Strategy>> {
        if self.strategies.is_empty() {
            return Err(Error::argument("no strategies requested"));
        }
        let mut rows: Vec<Strategy> = base_models
            .iter()
            .map(|m| Strategy::Base(m.clone()))
            .filter(|s| !self.strategies.contains(s))
            .collect();
        for s in &self.strategies {
            if let Strategy::Base(id) = s {
                if !base_models.contains(id) {
                    return Err(Error::Config(format!("strategy '{s}' names an unknown base model")));
                }
            }
            if rows.contains(s) {
                return Err(Error::Config(format!("strategy '{s}' listed twice")));
            }
            rows.push(s.clone());
        }
        Ok(rows)
    }
}

/// A stable 64-bit tag for a string, used to derive per-strategy seeds.
fn tag(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// One labelled, ventilation-filtered, split site.
struct PreparedSite {
    name: String,
    split: SplitAssignment,
    parts: [LabeledCohort; 3],
    demographics: Option<Vec<DemographicRecord>>,
    features: Option<Vec<FeatureVector>>,
    excluded: usize,
}

impl PreparedSite {
    fn part(&self, s: Split) -> &LabeledCohort {
        &self.parts[s as usize]
    }
}

struct RawSite {
    name: String,
    diagnoses: Vec<DiagnosisRecord>,
    demographics: Option<Vec<DemographicRecord>>,
    features: Option<Vec<FeatureVector>>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_site_files(f: &SiteFiles, map: &CategoryMap) -> Result<RawSite> {
    let demographics = f
        .demographics
        .as_ref()
        .map(|p| {
            io::parse_raw_demographics_csv(&read(p)?)?
                .iter()
                .map(|r| map.harmonize(r))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(RawSite {
        name: f.site.clone(),
        diagnoses: io::parse_diagnoses_csv(&read(&f.diagnoses)?)?,
        demographics,
        features: f.features.as_ref().map(|p| io::parse_features_csv(&read(p)?)).transpose()?,
    })
}

fn prepare_site(raw: RawSite, cfg: &PipelineConfig) -> Result<PreparedSite> {
    let labeled = assign_labels(&raw.diagnoses, &cfg.label_map)?;
    let filtered = exclude_ventilated(&labeled, &raw.diagnoses)?;
    let split = split_by_patient(&filtered.cohort, cfg.ratios, cfg.split_seed())?;
    let parts = [
        split.select(&filtered.cohort, Split::Train)?,
        split.select(&filtered.cohort, Split::Valid)?,
        split.select(&filtered.cohort, Split::Test)?,
    ];
    Ok(PreparedSite {
        name: raw.name,
        split,
        parts,
        demographics: raw.demographics,
        features: raw.features,
        excluded: filtered.excluded,
    })
}

struct Inputs {
    primary: PreparedSite,
    second: Option<PreparedSite>,
    /// Base predictions restricted to each split, in model order.
    base: [Vec<PredictionSet>; 3],
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let (primary, second, predictions) = match &cfg.source {
        DataSource::Synthetic { primary, second } => {
            let p_cfg = SynthConfig { seed: derive_seed(cfg.seed, SEED_PRIMARY_SITE), ..primary.clone() };
            let data = generate_cohort(&p_cfg)?;
            let preds = generate_base_predictions(&data.cohort, &data.demographics, &p_cfg)?;
            let features = generate_features(&data.cohort, &p_cfg)?;
            let s_cfg = SynthConfig { seed: derive_seed(cfg.seed, SEED_SECOND_SITE), ..second.clone() };
            let s_data = generate_cohort(&s_cfg)?;
            let s_features = generate_features(&s_data.cohort, &s_cfg)?;
            (
                RawSite {
                    name: p_cfg.site.clone(),
                    diagnoses: data.diagnoses,
                    demographics: Some(data.demographics),
                    features: Some(features),
                },
                Some(RawSite {
                    name: s_cfg.site.clone(),
                    diagnoses: s_data.diagnoses,
                    demographics: Some(s_data.demographics),
                    features: Some(s_features),
                }),
                preds,
            )
        }
        DataSource::Files { primary, predictions, second } => {
            let map = CategoryMap::default();
            let preds = predictions
                .iter()
                .map(|(id, p)| io::parse_predictions_csv(&read(p)?, id))
                .collect::<Result<Vec<_>>>()?;
            (
                load_site_files(primary, &map)?,
                second.as_ref().map(|s| load_site_files(s, &map)).transpose()?,
                preds,
            )
        }
    };
    let primary = prepare_site(primary, cfg)?;
    let second = second.map(|s| prepare_site(s, cfg)).transpose()?;
    let base = Split::ALL.map(|s| {
        let ids = primary.part(s).image_ids();
        predictions.iter().map(|p| p.select(&ids)).collect::<Result<Vec<_>>>()
    });
    let [train, valid, test] = base;
    Ok(Inputs {
        primary,
        second,
        base: [train?, valid?, test?],
    })
}

fn require<'a, T>(v: &'a Option<T>, what: &str, strategy: &Strategy) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("strategy '{strategy}' needs {what}")))
}

fn check_requirements(cfg: &PipelineConfig, rows: &[Strategy], inputs: &Inputs) -> Result<()> {
    let k = inputs.base[0].len();
    for s in rows {
        match s {
            Strategy::BagUnweighted | Strategy::Stack(_) | Strategy::Permutation if k == 0 => {
                return Err(Error::Config(format!("strategy '{s}' needs base model predictions")));
            }
            Strategy::BagWeighted if k < 2 => {
                return Err(Error::Config(format!("strategy '{s}' needs at least two base models")));
            }
            Strategy::MultiSite => {
                let second = require(&inputs.second, "a second site", s)?;
                require(&inputs.primary.features, "feature tables", s)?;
                require(&second.features, "feature tables for the second site", s)?;
            }
            Strategy::MultiModal => {
                require(&inputs.primary.features, "feature tables", s)?;
                require(&inputs.primary.demographics, "demographics", s)?;
            }
            _ => {}
        }
    }
    if !cfg.axes.is_empty() && inputs.primary.demographics.is_none() {
        return Err(Error::Config("fairness axes need demographics".into()));
    }
    Ok(())
}

/// One split of a site, packaged for merging.
fn site_part(site: &PreparedSite, s: Split) -> Result<SiteData> {
    let cohort = site.part(s).clone();
    let images: std::collections::HashSet<&str> = cohort.rows().iter().map(|r| r.image_id.as_str()).collect();
    let features = site
        .features
        .as_ref()
        .map(|f| f.iter().filter(|v| images.contains(v.image_id.as_str())).cloned().collect())
        .unwrap_or_default();
    Ok(SiteData {
        site: site.name.clone(),
        cohort,
        demographics: Vec::new(),
        features,
    })
}

fn train_mlp(
    train: (&FeatureMatrix, &[bool]),
    valid: (&FeatureMatrix, &[bool]),
    test: &FeatureMatrix,
    tcfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let model = learners::train(ModelKind::MlpHead, train.0, train.1, Some(valid), tcfg)?;
    learners::predict(&model, test)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySeeds {
    pub strategy: String,
    pub bootstrap: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub split_seed: u64,
    pub seeds: Vec<StrategySeeds>,
    /// Images per split (train, valid, test) of the primary site.
    pub split_images: [usize; 3],
    pub split_patients: [usize; 3],
    pub excluded_ventilated: usize,
    pub base_models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportBundle {
    pub metrics: MetricTable,
    pub fairness: FairnessTable,
    pub dendrogram: Option<Dendrogram>,
    pub weights: Option<WeightVector>,
    pub metadata: RunMetadata,
    #[serde(skip)]
    pub test_predictions: Vec<PredictionSet>,
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    inputs: &'a Inputs,
    weighted: Option<&'a (Dendrogram, WeightVector)>,
}

impl Context<'_> {
    /// Test-split scores for one strategy.
    fn predict(&self, s: &Strategy, seeds: &StrategySeeds) -> Result<PredictionSet> {
        let p = &self.inputs.primary;
        let test_ids = p.part(Split::Test).image_ids();
        let [train_l, valid_l, test_l] = Split::ALL.map(|sp| p.part(sp).labels());
        let base = &self.inputs.base;
        let tcfg = TrainConfig { seed: seeds.train, ..self.cfg.train.clone() };
        let train = SplitPredictions { preds: &base[0], labels: &train_l };
        let valid = SplitPredictions { preds: &base[1], labels: &valid_l };
        let test = SplitPredictions { preds: &base[2], labels: &test_l };
        let scores = match s {
            Strategy::Base(id) => {
                return base[2]
                    .iter()
                    .find(|m| m.model_id() == id)
                    .map(|m| m.clone().renamed(s.key()))
                    .ok_or_else(|| Error::Config(format!("unknown base model '{id}'")));
            }
            Strategy::BagUnweighted => return Ok(unweighted_average(&base[2])?.renamed(s.key())),
            Strategy::BagWeighted => {
                let (_, w) = self.weighted.expect("weights computed");
                return Ok(weighted_average(&base[2], w)?.renamed(s.key()));
            }
            Strategy::Stack(kind) => {
                let proc = StackProcedure::new(
                    *kind,
                    train,
                    Some(valid),
                    test,
                    &tcfg,
                )?;
                return Ok(proc.run()?.renamed(s.key()));
            }
            Strategy::Permutation => {
                let proc = StackProcedure::new(
                    self.cfg.permutation_model,
                    train,
                    Some(valid),
                    test,
                    &tcfg,
                )?;
                let mut permuted = proc.train_labels().to_vec();
                Rng::new(seeds.train).shuffle(&mut permuted);
                proc.fit_score(&permuted)?
            }
            Strategy::MultiSite => {
                let second = self.inputs.second.as_ref().expect("checked");
                let map = CategoryMap::default();
                let merged = |sp: Split| -> Result<(FeatureMatrix, Vec<bool>)> {
                    let m = merge_sites(&site_part(p, sp)?, &site_part(second, sp)?, &map)?;
                    Ok((feature_matrix(&m.features, &m.cohort)?, m.cohort.labels()))
                };
                let (tx, ty) = merged(Split::Train)?;
                let (vx, vy) = merged(Split::Valid)?;
                let test_x = feature_matrix(p.features.as_ref().expect("checked"), p.part(Split::Test))?;
                train_mlp((&tx, &ty), (&vx, &vy), &test_x, &tcfg)?
            }
            Strategy::MultiModal => {
                let f = p.features.as_ref().expect("checked");
                let d = p.demographics.as_ref().expect("checked");
                let x = |sp: Split| multimodal_join(f, d, p.part(sp));
                train_mlp((&x(Split::Train)?, &train_l), (&x(Split::Valid)?, &valid_l), &x(Split::Test)?, &tcfg)?
            }
        };
        PredictionSet::new(s.key(), test_ids, scores)
    }
}

/// Run every requested strategy and assemble the bundle.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ReportBundle> {
    if cfg.strategies.is_empty() {
        return Err(Error::argument("no strategies requested"));
    }
    let inputs = load_inputs(cfg)?;
    let base_models: Vec<String> = inputs.base[0].iter().map(|p| p.model_id().to_string()).collect();
    let rows = cfg.rows(&base_models)?;
    check_requirements(cfg, &rows, &inputs)?;
    let p = &inputs.primary;
    info!(
        "split sizes (images): train {}, valid {}, test {}",
        p.part(Split::Train).len(),
        p.part(Split::Valid).len(),
        p.part(Split::Test).len()
    );
    let weighted = if rows.contains(&Strategy::BagWeighted) {
        Some(dendrogram_from_validation(&inputs.base[1])?)
    } else {
        None
    };
    let seeds: Vec<StrategySeeds> = rows
        .iter()
        .map(|s| StrategySeeds {
            strategy: s.key(),
            bootstrap: derive_seed(cfg.seed, tag(&format!("bootstrap:{s}"))),
            train: derive_seed(cfg.seed, tag(&format!("train:{s}"))),
        })
        .collect();
    let ctx = Context { cfg, inputs: &inputs, weighted: weighted.as_ref() };
    let test = p.part(Split::Test);
    let demo = p.demographics.as_deref().unwrap_or(&[]);
    let evaluate = |(s, seed): (&Strategy, &StrategySeeds)| -> Result<(PredictionSet, MetricReport, Vec<_>)> {
        info!("running {s}");
        let preds = ctx.predict(s, seed)?;
        let boot = BootstrapConfig {
            n_resamples: cfg.n_resamples,
            seed: seed.bootstrap,
            threshold: cfg.threshold,
            parallel: cfg.parallel,
            ..Default::default()
        };
        let y = test.labels_for(&preds)?;
        let report = bootstrap_report(preds.scores(), &y, &boot)?;
        let fair = audit(&preds, test, demo, &cfg.axes, cfg.min_group_size)?;
        Ok((preds, report, fair))
    };
    let results: Vec<Result<_>> = if cfg.parallel {
        rows.par_iter().zip(seeds.par_iter()).map(evaluate).collect()
    } else {
        rows.iter().zip(seeds.iter()).map(evaluate).collect()
    };
    let mut metrics = MetricTable::default();
    let mut fairness_rows = Vec::new();
    let mut test_predictions = Vec::new();
    for (s, r) in rows.iter().zip(results) {
        let (preds, report, fair) = r?;
        metrics.push(s.key(), report);
        fairness_rows.push((s.key(), fair));
        test_predictions.push(preds);
    }
    let fairness = FairnessTable::build(cfg.axes.clone(), fairness_rows)?;
    let sizes = p.split.sizes();
    let metadata = RunMetadata {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        master_seed: cfg.seed,
        split_seed: cfg.split_seed(),
        seeds,
        split_images: Split::ALL.map(|s| p.part(s).len()),
        split_patients: sizes,
        excluded_ventilated: p.excluded,
        base_models,
    };
    if let Some(second) = &inputs.second {
        info!("second site '{}' excluded {} ventilated images", second.name, second.excluded);
    }
    let (dendrogram, weights) = weighted.map_or((None, None), |(d, w)| (Some(d), Some(w)));
    Ok(ReportBundle {
        metrics,
        fairness,
        dendrogram,
        weights,
        metadata,
        test_predictions,
    })
}

/// Write the bundle to `dir`; returns the written paths in order.
pub fn write_bundle(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    for f in Format::ALL {
        put(&format!("metrics.{}", f.extension()), write_tables(&bundle.metrics, f))?;
    }
    put("fairness.csv", bundle.fairness.to_csv())?;
    put(
        "fairness.json",
        serde_json::to_string_pretty(&bundle.fairness).expect("fairness serializes") + "\n",
    )?;
    put("fairness.md", bundle.fairness.to_markdown())?;
    if let Some(d) = &bundle.dendrogram {
        let weights: BTreeMap<&str, f64> = bundle.weights.iter().flat_map(|w| w.iter()).collect();
        let body = serde_json::json!({ "leaves": d.leaves, "merges": d.merges, "weights": weights });
        put("dendrogram.json", serde_json::to_string_pretty(&body).expect("json") + "\n")?;
    }
    put(
        "run.json",
        serde_json::to_string_pretty(&bundle.metadata).expect("metadata serializes") + "\n",
    )?;
    let preds_dir = dir.join("predictions");
    fs::create_dir_all(&preds_dir)?;
    for p in &bundle.test_predictions {
        let path = preds_dir.join(format!("{}.csv", p.model_id().replace(':', "_")));
        fs::write(&path, io::write_predictions_csv(p))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_keys_round_trip() {
        for s in Strategy::all_fusion().into_iter().chain([Strategy::Base("Xception".into())]) {
            assert_eq!(s.key().parse::<Strategy>().unwrap(), s);
        }
        assert!("stack:mlp".parse::<Strategy>().is_err());
        assert!("bag:median".parse::<Strategy>().is_err());
    }

    #[test]
    fn rows_follow_declaration_order() {
        let cfg = PipelineConfig {
            strategies: vec![Strategy::BagWeighted, Strategy::Base("b".into()), Strategy::BagUnweighted],
            ..Default::default()
        };
        let keys: Vec<String> = cfg.rows(&["a".into(), "b".into()]).unwrap().iter().map(Strategy::key).collect();
        assert_eq!(keys, ["base:a", "bag:weighted", "base:b", "bag:unweighted"]);
        let empty = PipelineConfig { strategies: vec![], ..Default::default() };
        assert!(matches!(empty.rows(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn config_parsing() {
        let text = "[run]\nseed = 7\nstrategies = bag:unweighted, stack:forest\nbootstrap = 50\naxes = sex\n\
                    [split]\nratios = 0.5, 0.25, 0.25\n[synth]\nn_patients = 100\nmodels = A:0.3, B:0.6\noffsets = sex:Female:0.2\n";
        let cfg = PipelineConfig::from_ini(text, Path::new("."), None).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.strategies, vec![Strategy::BagUnweighted, Strategy::Stack(ModelKind::RandomForest)]);
        assert_eq!(cfg.ratios, [0.5, 0.25, 0.25]);
        assert_eq!(cfg.axes, vec![Axis::Sex]);
        match &cfg.source {
            DataSource::Synthetic { primary, .. } => {
                assert_eq!(primary.n_patients, 100);
                assert_eq!(primary.models.len(), 2);
                assert_eq!(primary.group_offsets.len(), 1);
            }
            _ => panic!("expected synthetic source"),
        }
        let over = PipelineConfig::from_ini(text, Path::new("."), Some(99)).unwrap();
        assert_eq!(over.seed, 99);
        assert_ne!(over.hash(), cfg.hash());
    }

    #[test]
    fn config_errors() {
        for bad in [
            "[run]\nstrategies = stack:svm",
            "[run]\nsede = 1",
            "[nowhere]\nx = 1",
            "[split]\nratios = 0.5, 0.5",
            "[data]\nsource = cloud",
            "[synth]\nmodels = A",
        ] {
            assert!(
                matches!(PipelineConfig::from_ini(bad, Path::new("."), None), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn zero_strategies_is_usage_error() {
        let cfg = PipelineConfig { strategies: vec![], ..Default::default() };
        let e = run_pipeline(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}
