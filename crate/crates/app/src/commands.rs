//! Subcommand implementations: thin orchestration over the library crate.
//! Identical flags + seeds + inputs produce identical artifacts (report
//! timestamps and job ids excepted).

use crate::{Cli, Command};
use depscreen_app::remote::RemoteBackend;
use depscreen_app::service;
use depscreen_app::webhook::{sign, SIGNATURE_HEADER};
use anyhow::{bail, Context};
use depscreen_core::config::{BackendKind, PipelineConfig, ENV_WEBHOOK_SECRET};
use depscreen_core::corpus::{
    apply_error_manifest, corpus_ids, load_interview, synth_corpus, write_corpus, ErrorManifest,
    Interview, Label,
};
use depscreen_core::eval::{
    build_partitions, reference_consistency_report, run_avec, run_losocv, EvalDataset,
    EvalOptions, SplitDefinition,
};
use depscreen_core::fusion::{
    build_model, save_checkpoint, train, FusionHyperparams, TrainOptions,
};
use depscreen_core::llm::{ExemplarSet, LlmClient, LlmVerdict};
use depscreen_core::pipeline::{
    bench_single, classify_dialogue, exemplars_from_interviews, inference_metadata_json,
    llm_client, prepare_interview, stub_backend_from_config, InferenceArtifacts,
    InferenceMetadata,
};
use depscreen_core::store::FeatureStore;
use depscreen_core::transcript::{render_dialogue, AcronymTable, Normalizer};
use depscreen_core::tuning::{
    hyperband_search, write_trial_log, FusionTrialRunner, HyperbandConfig, SearchSpace,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

/// The llm-classify output: the exemplar set and one verdict per remaining
/// interview. Downstream stages read exemplars from here so the whole flow
/// shares one exclusion list.
#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictsFile {
    pub exemplars: ExemplarSet,
    pub verdicts: Vec<LlmVerdict>,
}

impl VerdictsFile {
    pub fn bits(&self) -> BTreeMap<u32, f64> {
        self.verdicts.iter().map(|v| (v.interview_id, v.diagnosis.as_bit())).collect()
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading verdicts {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_acronyms(path: &Option<PathBuf>) -> anyhow::Result<AcronymTable> {
    match path {
        Some(p) => Ok(AcronymTable::load(p)?),
        None => Ok(AcronymTable::builtin()),
    }
}

fn load_manifest(corpus: &Path, explicit: &Option<PathBuf>) -> anyhow::Result<ErrorManifest> {
    if let Some(p) = explicit {
        return Ok(ErrorManifest::load(p)?);
    }
    let default = corpus.join("error_manifest.toml");
    if default.is_file() {
        Ok(ErrorManifest::load(&default)?)
    } else {
        Ok(ErrorManifest::default())
    }
}

fn load_repaired_corpus(
    corpus: &Path,
    manifest: &ErrorManifest,
) -> anyhow::Result<Vec<Interview>> {
    let ids = corpus_ids(corpus)?;
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let raw = load_interview(corpus, id)?;
        out.push(apply_error_manifest(raw, manifest)?);
    }
    Ok(out)
}

fn class_counts(interviews: &[Interview]) -> (usize, usize) {
    let dep = interviews.iter().filter(|iv| iv.label == Label::Depressed).count();
    (dep, interviews.len() - dep)
}

fn backend_from_config(cfg: &PipelineConfig) -> anyhow::Result<Box<dyn depscreen_core::llm::ChatBackend>> {
    match cfg.llm.backend {
        BackendKind::Stub => Ok(Box::new(stub_backend_from_config(cfg))),
        BackendKind::Remote => Ok(Box::new(RemoteBackend::from_settings(&cfg.llm)?)),
    }
}

fn load_hyperparams(path: &Option<PathBuf>) -> anyhow::Result<FusionHyperparams> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading hyperparams {}", p.display()))?;
            Ok(toml::from_str(&text)?)
        }
        None => Ok(FusionHyperparams::tuned_defaults()),
    }
}

/// Seeded stratified split by interview label: roughly 60/20/20 with at
/// least one interview per partition and both classes in train when the
/// corpus allows it.
fn auto_split(data: &EvalDataset, seed: u64) -> SplitDefinition {
    let mut by_class: BTreeMap<Label, Vec<u32>> = BTreeMap::new();
    for iv in &data.interviews {
        by_class.entry(iv.label).or_default().push(iv.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5117_ab1e);
    let (mut train, mut val, mut test) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for ids in by_class.values_mut() {
        ids.shuffle(&mut rng);
        // Training representation comes first: tiny classes surrender the
        // held-out partitions before they surrender train membership.
        let n = ids.len();
        let (n_test, n_val) = match n {
            0 | 1 => (0, 0),
            2 => (1, 0),
            _ => ((n / 5).max(1), (n / 5).max(1)),
        };
        for (i, id) in ids.iter().enumerate() {
            if i < n_test {
                test.insert(*id);
            } else if i < n_test + n_val {
                val.insert(*id);
            } else {
                train.insert(*id);
            }
        }
    }
    SplitDefinition { train_ids: train, validation_ids: val, test_ids: test }
}

fn load_split(
    train: &Option<PathBuf>,
    val: &Option<PathBuf>,
    test: &Option<PathBuf>,
    data: &EvalDataset,
    seed: u64,
) -> anyhow::Result<SplitDefinition> {
    match (train, val, test) {
        (Some(tr), Some(va), Some(te)) => Ok(SplitDefinition::load_csvs(tr, va, te)?),
        (None, None, None) => Ok(auto_split(data, seed)),
        _ => bail!("pass all three of --split-train/--split-val/--split-test, or none"),
    }
}

fn build_client(cfg: &PipelineConfig) -> anyhow::Result<LlmClient> {
    Ok(llm_client(backend_from_config(cfg)?, cfg)?)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.config)?;
    let seed = cli.seed;
    match cli.command {
        Command::Synth { n, fraction, out } => {
            let interviews = synth_corpus(n, fraction, seed)?;
            write_corpus(&out, &interviews)?;
            // Ship an empty manifest so downstream stages have a schema
            // example to edit.
            ErrorManifest::default().save(&out.join("error_manifest.toml"))?;
            let (dep, nd) = class_counts(&interviews);
            println!(
                "wrote {} interviews ({dep} depressed / {nd} not depressed) to {}",
                interviews.len(),
                out.display()
            );
        }

        Command::Prep { corpus, manifest, acronyms, out } => {
            let manifest = load_manifest(&corpus, &manifest)?;
            let acronyms = load_acronyms(&acronyms)?;
            let interviews = load_repaired_corpus(&corpus, &manifest)?;
            std::fs::create_dir_all(&out)?;
            let normalizer = Normalizer::rule_based(acronyms);
            for iv in &interviews {
                let normalized = normalizer.normalize_transcript(&iv.utterances)?;
                let mut tsv = String::from("start_time\tstop_time\tspeaker\tvalue\n");
                for u in &normalized {
                    tsv.push_str(&format!(
                        "{:.2}\t{:.2}\t{}\t{}\n",
                        u.start_time, u.stop_time, u.speaker, u.text
                    ));
                }
                std::fs::write(out.join(format!("{}_NORMALIZED.csv", iv.id)), tsv)?;
                std::fs::write(
                    out.join(format!("{}_DIALOGUE.txt", iv.id)),
                    render_dialogue(&normalized),
                )?;
            }
            let (dep, nd) = class_counts(&interviews);
            println!(
                "prepared {} interviews after repair: {dep} depressed / {nd} not depressed",
                interviews.len()
            );
        }

        Command::Features { corpus, manifest, acronyms, exclude, out } => {
            let manifest = load_manifest(&corpus, &manifest)?;
            let acronyms = load_acronyms(&acronyms)?;
            let exclude: BTreeSet<u32> = exclude.into_iter().collect();
            let interviews = load_repaired_corpus(&corpus, &manifest)?;
            let mut store = FeatureStore::create(&out)?;
            let mut n_segments = 0usize;
            for iv in interviews.iter().filter(|iv| !exclude.contains(&iv.id)) {
                let prepared = prepare_interview(iv, &acronyms, &cfg, seed)?;
                for s in &prepared.segments {
                    store.write_segment(
                        prepared.id,
                        s.segment_index,
                        s.tag,
                        prepared.label,
                        &s.mfcc,
                        &s.fau_raw,
                    )?;
                    n_segments += 1;
                }
            }
            store.save_manifest()?;
            println!(
                "feature store at {}: {n_segments} segment rows ({} interviews)",
                out.display(),
                interviews.len() - exclude.len()
            );
        }

        Command::LlmClassify { corpus, manifest, acronyms, exemplar_ids, out } => {
            let manifest = load_manifest(&corpus, &manifest)?;
            let acronyms = load_acronyms(&acronyms)?;
            let interviews = load_repaired_corpus(&corpus, &manifest)?;
            let exemplar_set: Vec<Interview> = interviews
                .iter()
                .filter(|iv| exemplar_ids.contains(&iv.id))
                .cloned()
                .collect();
            if exemplar_set.len() != exemplar_ids.len() {
                bail!("some exemplar ids are missing from the corpus");
            }
            let exemplars = exemplars_from_interviews(&exemplar_set, &acronyms)?;
            let client = build_client(&cfg)?;
            let normalizer = Normalizer::rule_based(acronyms.clone());
            let mut verdicts = Vec::new();
            let min_interval = if cfg.llm.rate_limit_per_sec > 0.0 {
                std::time::Duration::from_secs_f64(1.0 / cfg.llm.rate_limit_per_sec)
            } else {
                std::time::Duration::ZERO
            };
            let mut last_call = std::time::Instant::now() - min_interval;
            for iv in interviews.iter().filter(|iv| !exemplar_ids.contains(&iv.id)) {
                let normalized = normalizer.normalize_transcript(&iv.utterances)?;
                let dialogue = render_dialogue(&normalized);
                let elapsed = last_call.elapsed();
                if elapsed < min_interval {
                    std::thread::sleep(min_interval - elapsed);
                }
                last_call = std::time::Instant::now();
                let verdict = classify_dialogue(&client, iv.id, &dialogue, &exemplars)?;
                log::info!(
                    "interview {}: {} (cached: {})",
                    iv.id,
                    verdict.diagnosis,
                    verdict.cached
                );
                verdicts.push(verdict);
            }
            VerdictsFile { exemplars, verdicts }.save(&out)?;
            println!("classified {} transcripts -> {}", interviews.len() - exemplar_ids.len(), out.display());
        }

        Command::Train {
            store,
            verdicts,
            hyperparams,
            split_train,
            split_val,
            split_test,
            max_epochs,
            out,
        } => {
            let verdicts = VerdictsFile::load(&verdicts)?;
            let data = FeatureStore::open(&store)?.load_dataset(&verdicts.bits())?;
            let h = load_hyperparams(&hyperparams)?;
            let split = load_split(&split_train, &split_val, &split_test, &data, seed)?;
            split.validate(&verdicts.exemplars.interview_ids())?;

            let parts = build_partitions(&data, &split.train_ids, &split.validation_ids)?;
            let weights = depscreen_core::fusion::class_weights(&parts.train.labels())?;
            let t_frames = parts.train.t_frames().context("empty training set")?;
            let mut model = build_model(&h, t_frames, seed)?;
            let opts = TrainOptions::from_hyperparams(&h, max_epochs, seed);
            let history = train(&mut model, &parts.train, &parts.validation, weights, &opts)?;

            std::fs::create_dir_all(&out)?;
            let metadata = InferenceMetadata {
                mfcc: cfg.mfcc,
                noise_amplitude: cfg.augment.noise_amplitude,
                scaler: parts.scaler.clone(),
                exemplars: verdicts.exemplars.clone(),
            };
            save_checkpoint(
                &out.join("checkpoint.dsck"),
                &mut model,
                inference_metadata_json(&metadata),
            )?;
            std::fs::write(out.join("history.csv"), history.to_csv())?;
            parts.scaler.save(&out.join("scaler.toml"))?;
            println!(
                "trained {} epochs (early stop: {}); best val loss {:.4}; checkpoint at {}",
                history.epochs_run(),
                history.stopped_early,
                history.best_val_loss(),
                out.join("checkpoint.dsck").display()
            );
        }

        Command::Tune { store, verdicts, space, max_resource, eta, iterations, out } => {
            let verdicts = VerdictsFile::load(&verdicts)?;
            let data = FeatureStore::open(&store)?.load_dataset(&verdicts.bits())?;
            let space: SearchSpace = match space {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?)?,
                None => SearchSpace::default(),
            };
            let split = auto_split(&data, seed);
            // Tuning only needs train/validation; fold the test ids into
            // training so every non-validation interview contributes.
            let mut train_ids = split.train_ids.clone();
            train_ids.extend(&split.test_ids);
            let parts = build_partitions(&data, &train_ids, &split.validation_ids)?;
            let weights = depscreen_core::fusion::class_weights(&parts.train.labels())?;

            let hb = HyperbandConfig { max_resource, eta, iterations, patience: 3 };
            let runner = FusionTrialRunner::new(&parts.train, &parts.validation, weights, 3)?;
            let outcome = hyperband_search(&space, &runner, &hb, seed)?;

            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("best.toml"), toml::to_string_pretty(&outcome.best)?)?;
            write_trial_log(&out.join("trial_log.csv"), &outcome.records)?;
            println!(
                "{} trials; best val loss {:.4}; best config -> {}",
                outcome.records.len(),
                outcome.best_val_loss,
                out.join("best.toml").display()
            );
        }

        Command::Losocv { store, verdicts, hyperparams, max_epochs, out } => {
            let verdicts = VerdictsFile::load(&verdicts)?;
            let data = FeatureStore::open(&store)?.load_dataset(&verdicts.bits())?;
            let h = load_hyperparams(&hyperparams)?;
            let opts = EvalOptions {
                max_epochs,
                exemplar_ids: verdicts.exemplars.interview_ids(),
                ..Default::default()
            };
            let outcome = run_losocv(&data, &h, &opts, seed)?;
            outcome.report.save(&out)?;
            println!("{}", outcome.report.render_text());
            println!("pooled over {} folds; report at {}", outcome.fold_audits.len(), out.display());
        }

        Command::Eval {
            store,
            verdicts,
            hyperparams,
            split_train,
            split_val,
            split_test,
            max_epochs,
            show_reference,
            out,
        } => {
            let verdicts = VerdictsFile::load(&verdicts)?;
            let data = FeatureStore::open(&store)?.load_dataset(&verdicts.bits())?;
            let h = load_hyperparams(&hyperparams)?;
            let split = load_split(&split_train, &split_val, &split_test, &data, seed)?;
            let opts = EvalOptions {
                max_epochs,
                exemplar_ids: verdicts.exemplars.interview_ids(),
                ..Default::default()
            };
            let outcome = run_avec(&data, &split, &h, &opts, seed)?;
            outcome.report.save(&out)?;
            println!("{}", outcome.report.render_text());
            if show_reference {
                println!("{}", reference_consistency_report());
            }
        }

        Command::Bench { corpus, id, checkpoint, acronyms } => {
            let acronyms = load_acronyms(&acronyms)?;
            let manifest = load_manifest(&corpus, &None)?;
            let interview = apply_error_manifest(load_interview(&corpus, id)?, &manifest)?;
            let artifacts = InferenceArtifacts::load(&checkpoint)?;
            let client = build_client(&cfg)?;
            let report = bench_single(&interview, &artifacts, &client, &acronyms)?;
            print!("{}", report.render());
        }

        Command::Serve { checkpoint, reports, bind, acronyms } => {
            let secret = std::env::var(ENV_WEBHOOK_SECRET)
                .with_context(|| format!("{ENV_WEBHOOK_SECRET} must be set to run the service"))?;
            let artifacts = InferenceArtifacts::load(&checkpoint)?;
            let client = build_client(&cfg)?;
            let acronyms = load_acronyms(&acronyms)?;
            let running = service::start(service::ServiceConfig {
                bind: bind.unwrap_or_else(|| cfg.service.bind.clone()),
                secret,
                queue_capacity: cfg.service.queue_capacity,
                workers: cfg.service.workers,
                reports_dir: reports,
                artifacts: std::sync::Arc::new(artifacts),
                client: std::sync::Arc::new(client),
                acronyms,
            })?;
            println!("listening on http://{} (ctrl-c to stop)", running.addr);
            tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()?
                .block_on(async {
                    let _ = tokio::signal::ctrl_c().await;
                });
            running.shutdown();
        }

        Command::SimulateWebhook { url, corpus, id, secret, tamper } => {
            let secret = match secret {
                Some(s) => s,
                None => std::env::var(ENV_WEBHOOK_SECRET)
                    .with_context(|| format!("pass --secret or set {ENV_WEBHOOK_SECRET}"))?,
            };
            let payload = service::WebhookPayload {
                interview_id: id,
                recording_path: corpus
                    .canonicalize()
                    .unwrap_or(corpus)
                    .to_string_lossy()
                    .into_owned(),
            };
            let mut body = serde_json::to_vec(&payload)?;
            let signature = sign(&body, &secret);
            if tamper {
                let idx = body.len() / 2;
                body[idx] ^= 0x01;
            }
            let response = reqwest::blocking::Client::new()
                .post(format!("{}/webhooks/recording-completed", url.trim_end_matches('/')))
                .header(SIGNATURE_HEADER, signature)
                .header("content-type", "application/json")
                .body(body)
                .send()?;
            let status = response.status();
            let text = response.text().unwrap_or_default();
            println!("{status}: {text}");
            if !tamper && !status.is_success() {
                bail!("webhook was not accepted");
            }
        }
    }
    Ok(())
}
