use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cxrfuse::cohort::{
    assign_labels, chi_square_independence, class_weights, exclude_ventilated, split_by_patient, LabelMap,
    SplitAssignment, DEFAULT_RATIOS,
};
use cxrfuse::data::{LabeledCohort, PredictionSet, Split};
use cxrfuse::fairness::{audit, FairnessTable};
use cxrfuse::fusion::{
    dendrogram_from_validation, unweighted_average, weighted_average, CategoryMap, SplitPredictions, StackProcedure,
};
use cxrfuse::io;
use cxrfuse::learners::TrainConfig;
use cxrfuse::metrics::{evaluate_predictions, permutation_baseline, BootstrapConfig, Metric, MetricReport};
use cxrfuse::pipeline::{run_pipeline, write_bundle, PipelineConfig, Strategy, SEED_ENV};
use cxrfuse::preprocess::{normalize, prepare};
use cxrfuse::report::{write_tables, Format, MetricTable};
use cxrfuse::synth::{generate_base_predictions, generate_cohort, generate_features, SynthConfig};
use cxrfuse::{Error, Result};
use serde_json::{json, Value};

use crate::{BootArgs, Command, PredArg};

/// What a command prints: human text, or JSON under `--json`.
pub struct Output {
    pub text: String,
    pub json: Value,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_cohort(path: &Path) -> Result<LabeledCohort> {
    io::parse_cohort_csv(&read(path)?)
}

fn load_preds(args: &[PredArg]) -> Result<Vec<PredictionSet>> {
    args.iter()
        .map(|p| io::parse_predictions_csv(&read(&p.path)?, &p.id))
        .collect()
}

fn load_splits(path: &Path) -> Result<SplitAssignment> {
    SplitAssignment::from_pairs(io::parse_splits_csv(&read(path)?)?, 0, DEFAULT_RATIOS)
}

/// Prediction rows with a cohort label, and the matching cohort rows.
fn align(p: &PredictionSet, c: &LabeledCohort) -> Result<(PredictionSet, LabeledCohort)> {
    let known: std::collections::HashSet<&str> = c.rows().iter().map(|r| r.image_id.as_str()).collect();
    let ids: Vec<String> = p.image_ids().iter().filter(|id| known.contains(id.as_str())).cloned().collect();
    if ids.len() < p.len() {
        log::warn!("{}: {} rows have no cohort label and are skipped", p.model_id(), p.len() - ids.len());
    }
    Ok((p.select(&ids)?, c.select(&ids)?))
}

fn boot_config(b: &BootArgs) -> BootstrapConfig {
    BootstrapConfig {
        n_resamples: b.bootstrap,
        seed: b.seed,
        threshold: b.threshold,
        parallel: !b.serial,
        ..Default::default()
    }
}

fn report_text(name: &str, r: &MetricReport) -> String {
    let mut out = format!("{name}\n");
    for m in Metric::ALL {
        let e = r.get(m);
        let _ = writeln!(
            out,
            "  {:<18} {:.4} [{:.4}-{:.4}]  full sample {:.4}",
            m.title(),
            e.point,
            e.lo,
            e.hi,
            e.full_sample
        );
    }
    out
}

/// Each split of the cohort and the matching rows of every prediction set.
struct SplitInputs {
    cohorts: [LabeledCohort; 3],
    preds: [Vec<PredictionSet>; 3],
}

impl SplitInputs {
    fn load(cohort: &Path, splits: &Path, pred: &[PredArg]) -> Result<Self> {
        let cohort = load_cohort(cohort)?;
        let assignment = load_splits(splits)?;
        let preds = load_preds(pred)?;
        let mut cohorts = Vec::with_capacity(3);
        let mut selected = Vec::with_capacity(3);
        for s in Split::ALL {
            let part = assignment.select(&cohort, s)?;
            let ids = part.image_ids();
            selected.push(preds.iter().map(|p| p.select(&ids)).collect::<Result<Vec<_>>>()?);
            cohorts.push(part);
        }
        Ok(SplitInputs {
            cohorts: cohorts.try_into().expect("three splits"),
            preds: selected.try_into().expect("three splits"),
        })
    }

    fn labels(&self, s: Split) -> Vec<bool> {
        self.cohorts[s as usize].labels()
    }

    fn procedure<'a>(
        &'a self,
        kind: cxrfuse::learners::ModelKind,
        labels: &'a [Vec<bool>; 3],
        seed: u64,
    ) -> Result<StackProcedure> {
        let part = |i: usize| SplitPredictions { preds: &self.preds[i], labels: &labels[i] };
        let cfg = TrainConfig { seed, ..Default::default() };
        StackProcedure::new(kind, part(0), Some(part(1)), part(2), &cfg)
    }
}

pub fn dispatch(cmd: Command) -> Result<Output> {
    match cmd {
        Command::Preprocess { input, output, size } => {
            let img = io::parse_pgm(&read(&input)?)?;
            let out = prepare(&img, size)?;
            write(&output, io::write_pgm(&out))?;
            let m = normalize(&out);
            let mean = m.values.iter().sum::<f64>() / m.values.len() as f64;
            Ok(Output {
                text: format!(
                    "{} ({}x{}) -> {} ({}x{}), mean intensity {mean:.4}\n",
                    input.display(),
                    img.width(),
                    img.height(),
                    output.display(),
                    out.width(),
                    out.height()
                ),
                json: json!({
                    "input": input, "output": output,
                    "input_size": [img.width(), img.height()],
                    "output_size": [out.width(), out.height()],
                    "mean_intensity": mean,
                }),
            })
        }
        Command::Label { diagnoses, label_map, keep_ventilated, output } => {
            let map = match label_map {
                Some(p) => LabelMap::parse(&String::from_utf8_lossy(&read(&p)?))?,
                None => LabelMap::default(),
            };
            let dx = io::parse_diagnoses_csv(&read(&diagnoses)?)?;
            let labeled = assign_labels(&dx, &map)?;
            let (cohort, excluded) = if keep_ventilated {
                (labeled, 0)
            } else {
                let f = exclude_ventilated(&labeled, &dx)?;
                if let Some(w) = &f.warning {
                    log::warn!("{w}");
                }
                (f.cohort, f.excluded)
            };
            write(&output, io::write_cohort_csv(&cohort))?;
            let pos = cohort.positives();
            Ok(Output {
                text: format!(
                    "{} images, {} positive, {} excluded (ventilated) -> {}\n",
                    cohort.len(),
                    pos,
                    excluded,
                    output.display()
                ),
                json: json!({
                    "images": cohort.len(), "positives": pos,
                    "excluded_ventilated": excluded, "output": output,
                }),
            })
        }
        Command::Split { cohort, seed, ratios, output } => {
            let c = load_cohort(&cohort)?;
            let a = split_by_patient(&c, ratios, seed)?;
            write(&output, io::write_splits_csv(a.pairs()))?;
            let patients = a.sizes();
            let mut images = [0; 3];
            for s in Split::ALL {
                images[s as usize] = a.select(&c, s)?.len();
            }
            Ok(Output {
                text: format!(
                    "patients train/valid/test: {}/{}/{}; images {}/{}/{} -> {}\n",
                    patients[0],
                    patients[1],
                    patients[2],
                    images[0],
                    images[1],
                    images[2],
                    output.display()
                ),
                json: json!({ "seed": seed, "ratios": ratios, "patients": patients, "images": images, "output": output }),
            })
        }
        Command::Weights { cohort, split, splits, pred } => {
            if let Some(cohort) = cohort {
                let mut c = load_cohort(&cohort)?;
                if let (Some(s), Some(path)) = (split, &splits) {
                    c = load_splits(path)?.select(&c, s)?;
                }
                let w = class_weights(&c)?;
                let pos = c.positives();
                return Ok(Output {
                    text: format!(
                        "positives {pos}, negatives {}: w_pos {:.4}, w_neg {:.4}\n",
                        c.len() - pos,
                        w.w_pos,
                        w.w_neg
                    ),
                    json: json!({ "positives": pos, "negatives": c.len() - pos, "w_pos": w.w_pos, "w_neg": w.w_neg }),
                });
            }
            if pred.len() < 2 {
                return Err(Error::argument("dendrogram weights need at least two prediction sets"));
            }
            let (tree, w) = dendrogram_from_validation(&load_preds(&pred)?)?;
            let mut text = String::new();
            for (id, v) in w.iter() {
                let _ = writeln!(text, "{id:<24} {v:.6}");
            }
            Ok(Output {
                text,
                json: json!({ "weights": w, "dendrogram": tree }),
            })
        }
        Command::Chisq { table } => {
            let t = io::parse_contingency_csv(&read(&table)?)?;
            let r = chi_square_independence(&t)?;
            Ok(Output {
                text: format!("chi2 = {:.4}, dof = {}, p = {:.6}\n", r.statistic, r.dof, r.p_value),
                json: serde_json::to_value(r)?,
            })
        }
        Command::Fuse { strategy, cohort, splits, pred, seed, output } => {
            let inputs = SplitInputs::load(&cohort, &splits, &pred)?;
            let test = &inputs.preds[2];
            let mut extra = Value::Null;
            let fused = match &strategy {
                Strategy::BagUnweighted => unweighted_average(test)?,
                Strategy::BagWeighted => {
                    let (tree, w) = dendrogram_from_validation(&inputs.preds[1])?;
                    extra = json!({ "weights": w, "dendrogram": tree });
                    weighted_average(test, &w)?
                }
                Strategy::Stack(kind) => {
                    let labels = Split::ALL.map(|s| inputs.labels(s));
                    inputs.procedure(*kind, &labels, seed)?.run()?
                }
                other => {
                    return Err(Error::argument(format!(
                        "strategy '{other}' is not a prediction-level fusion; use `run`"
                    )))
                }
            }
            .renamed(strategy.key());
            write(&output, io::write_predictions_csv(&fused))?;
            Ok(Output {
                text: format!("{}: {} test rows -> {}\n", strategy, fused.len(), output.display()),
                json: json!({ "strategy": strategy, "rows": fused.len(), "output": output, "details": extra }),
            })
        }
        Command::Eval { cohort, pred, boot } => {
            let c = load_cohort(&cohort)?;
            let p = io::parse_predictions_csv(&read(&pred.path)?, &pred.id)?;
            let (p, rows) = align(&p, &c)?;
            let r = evaluate_predictions(&p, &rows, &boot_config(&boot))?;
            Ok(Output {
                text: report_text(&pred.id, &r),
                json: json!({ "model_id": pred.id, "rows": p.len(), "report": r }),
            })
        }
        Command::Fairness { cohort, demographics, pred, axes, min_group_size, format } => {
            let c = load_cohort(&cohort)?;
            let map = CategoryMap::default();
            let demo = io::parse_raw_demographics_csv(&read(&demographics)?)?
                .iter()
                .map(|r| map.harmonize(r))
                .collect::<Result<Vec<_>>>()?;
            let rows = load_preds(&pred)?
                .iter()
                .map(|p| {
                    let (p, rows) = align(p, &c)?;
                    Ok((p.model_id().to_string(), audit(&p, &rows, &demo, &axes, min_group_size)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let table = FairnessTable::build(axes, rows)?;
            let text = match format {
                Format::Markdown => table.to_markdown(),
                Format::Csv => table.to_csv(),
                Format::Json => serde_json::to_string_pretty(&table)? + "\n",
            };
            Ok(Output { text, json: serde_json::to_value(&table)? })
        }
        Command::Permtest { cohort, splits, pred, model, no_permute, boot } => {
            let inputs = SplitInputs::load(&cohort, &splits, &pred)?;
            let labels = Split::ALL.map(|s| inputs.labels(s));
            let proc = inputs.procedure(model, &labels, boot.seed)?;
            let r = permutation_baseline(&proc, boot.seed, !no_permute, &boot_config(&boot))?;
            let name = if no_permute { format!("stack:{model}") } else { format!("permutation ({model})") };
            Ok(Output {
                text: report_text(&name, &r),
                json: json!({ "model": model.to_string(), "permuted": !no_permute, "report": r }),
            })
        }
        Command::Synth { output, seed, profile, site, n_patients } => {
            let mut cfg = match profile.as_str() {
                "mimic" => SynthConfig { seed, ..Default::default() },
                "emory" => SynthConfig::emory(seed),
                other => return Err(Error::argument(format!("unknown profile '{other}'"))),
            };
            if let Some(s) = site {
                cfg.site = s;
            }
            if let Some(n) = n_patients {
                cfg.n_patients = n;
            }
            synth(&cfg, &output)
        }
        Command::Report { input, format } => {
            let metrics = MetricTable::from_json(&String::from_utf8_lossy(&read(&input.join("metrics.json"))?))?;
            let fairness_path = input.join("fairness.json");
            let fairness: Option<FairnessTable> = if fairness_path.exists() {
                Some(serde_json::from_slice(&read(&fairness_path)?)?)
            } else {
                None
            };
            let mut text = write_tables(&metrics, format);
            if let Some(f) = &fairness {
                text.push('\n');
                text.push_str(&match format {
                    Format::Markdown => f.to_markdown(),
                    Format::Csv => f.to_csv(),
                    Format::Json => serde_json::to_string_pretty(f)? + "\n",
                });
            }
            Ok(Output {
                text,
                json: json!({ "metrics": metrics, "fairness": fairness }),
            })
        }
        Command::Run { config, output, seed } => run(config, &output, seed),
    }
}

fn synth(cfg: &SynthConfig, dir: &Path) -> Result<Output> {
    let data = generate_cohort(cfg)?;
    let preds = generate_base_predictions(&data.cohort, &data.demographics, cfg)?;
    let features = generate_features(&data.cohort, cfg)?;
    let mut files: Vec<PathBuf> = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    put("diagnoses.csv".into(), io::write_diagnoses_csv(&data.diagnoses)?)?;
    put("demographics.csv".into(), io::write_demographics_csv(&data.demographics))?;
    put("features.csv".into(), io::write_features_csv(&features))?;
    for p in &preds {
        put(format!("predictions/{}.csv", p.model_id()), io::write_predictions_csv(p))?;
    }
    Ok(Output {
        text: format!(
            "site {}: {} patients, {} images, {} positive; {} files in {}\n",
            cfg.site,
            data.demographics.len(),
            data.cohort.len(),
            data.cohort.positives(),
            files.len(),
            dir.display()
        ),
        json: json!({
            "site": cfg.site, "patients": data.demographics.len(), "images": data.cohort.len(),
            "positives": data.cohort.positives(), "files": files,
        }),
    })
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn run(config: Option<PathBuf>, output: &Path, seed: Option<u64>) -> Result<Output> {
    let seed = seed.or(env_seed()?);
    let cfg = match &config {
        Some(path) => {
            let text = String::from_utf8(read(path)?).map_err(|_| Error::Config("config is not utf-8".into()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            PipelineConfig::from_ini(&text, base, seed)?
        }
        None => PipelineConfig { seed: seed.unwrap_or(0), ..Default::default() },
    };
    let bundle = run_pipeline(&cfg)?;
    let files = write_bundle(&bundle, output)?;
    let text = write_tables(&bundle.metrics, Format::Markdown) + "\n" + &bundle.fairness.to_markdown();
    let rows: Vec<Value> = bundle
        .metrics
        .rows
        .iter()
        .map(|r| json!({ "strategy": r.strategy, "auc": r.report.auc }))
        .collect();
    Ok(Output {
        text,
        json: json!({
            "output": output, "files": files, "config_hash": bundle.metadata.config_hash,
            "seed": cfg.seed, "rows": rows,
        }),
    })
}
