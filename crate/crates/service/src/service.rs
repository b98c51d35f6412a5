//! Document lifecycle: ingest, layout retrieval, correction staging, and
//! incremental training of the region classifier.
//!
//! Writers hold the store lock from validation through the durable append,
//! so log order is acknowledgement order. The state lock is taken exclusively
//! only to apply an already-logged event; reads share it and never wait on
//! disk. Training runs outside both under a separate exclusive model lock.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use docstruct_core::incremental::{
    incremental_train, train_supervised, GroupedClassifier, HeadKind, LabeledSample, TrainConfig,
};
use docstruct_core::synth::{generate_indexed, simulate_set, GenConfig};
use docstruct_core::{assemble_document, structure, DocumentLayout, PipelineConfig, Region};
use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    flat_index, CorrectionRecord, DocumentRecord, Edit, Event, Source, StagedCorrection, State,
    Status, TrainingJob,
};
use crate::features::{page_features, FEATURE_DIM};
use crate::store::{read_model, write_model, Store, StoreError};
use crate::validate::{CorrectionRequest, FieldError, IngestRequest};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("validation failed")]
    Validation(Vec<FieldError>),
    #[error("{what} {id} not found")]
    NotFound { what: &'static str, id: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("training failed: {0}")]
    Training(String),
}

/// How the initial classifier is built when the data directory has none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseModelConfig {
    /// Synthetic pages whose truth regions form the original training set.
    pub documents: u64,
    pub generator: GenConfig,
    pub hidden: Vec<usize>,
    pub head: HeadKind,
    pub train: TrainConfig,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        Self {
            documents: 24,
            generator: GenConfig {
                seed: 7,
                ..GenConfig::default()
            },
            hidden: vec![32, 32],
            head: HeadKind::ASoftmax,
            train: TrainConfig {
                learning_rate: 0.01,
                max_steps: 1500,
                margin: 1,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub pipeline: PipelineConfig,
    pub base_model: BaseModelConfig,
    /// Defaults for incremental training jobs.
    pub train: TrainConfig,
    /// Write a state snapshot after this many logged events.
    pub snapshot_every: u64,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            pipeline: PipelineConfig::default(),
            base_model: BaseModelConfig::default(),
            train: TrainConfig {
                learning_rate: 0.01,
                max_steps: 1000,
                margin: 1,
                ..TrainConfig::default()
            },
            snapshot_every: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestAck {
    pub page_id: String,
    pub status: Status,
    pub regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionAck {
    pub page_id: String,
    pub correction_id: u64,
    pub status: Status,
    /// Corrections waiting for training after this one was staged.
    pub staged: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TriggerOutcome {
    /// Nothing was staged; no job was created.
    Noop {
        reason: String,
    },
    Started {
        job: TrainingJob,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub version: u32,
    pub model: GroupedClassifier,
}

/// Original training set: labelled features of every truth region of
/// `cfg.documents` synthetic pages.
pub fn original_samples(cfg: &BaseModelConfig) -> Vec<LabeledSample> {
    let mut out = Vec::new();
    for i in 0..cfg.documents {
        let doc = generate_indexed(&cfg.generator, i).expect("base generator config is valid");
        let regions = doc.regions();
        let feats = page_features(&regions, doc.width as f64, doc.height as f64);
        out.extend(
            regions
                .iter()
                .zip(feats)
                .map(|(r, f)| LabeledSample::new(f, r.label.index())),
        );
    }
    out
}

pub struct Service {
    cfg: ServiceConfig,
    store: Mutex<Store>,
    state: RwLock<State>,
    model_lock: Mutex<()>,
    original: Vec<LabeledSample>,
}

fn now_millis() -> String {
    let ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    format!("{ms}")
}

impl Service {
    /// Opens the data directory, replays its log, marks interrupted training
    /// jobs as failed (returning their corrections to staging), and trains the
    /// initial model if there is none.
    pub fn open(cfg: ServiceConfig) -> Result<Service, ServiceError> {
        let (store, state) = Store::open(&cfg.data_dir)?;
        let original = original_samples(&cfg.base_model);
        let svc = Service {
            cfg,
            store: Mutex::new(store),
            state: RwLock::new(state),
            model_lock: Mutex::new(()),
            original,
        };
        let interrupted = svc.state.read().running_jobs();
        for job_id in interrupted {
            log::warn!(
                "training job {job_id} was interrupted; returning its corrections to staging"
            );
            svc.commit(Event::TrainingFailed {
                job_id,
                error: "interrupted by restart".into(),
            })?;
        }
        if svc.state.read().model_version.is_none() {
            svc.bootstrap_model()?;
        }
        Ok(svc)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn data_dir(&self) -> &Path {
        &self.cfg.data_dir
    }

    fn bootstrap_model(&self) -> Result<(), ServiceError> {
        let _model = self.model_lock.lock();
        let b = &self.cfg.base_model;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(b.train.seed);
        let init = GroupedClassifier::new(
            FEATURE_DIM,
            &b.hidden,
            docstruct_core::Label::ALL.len(),
            b.head,
            &mut rng,
        )
        .map_err(|e| ServiceError::Training(e.to_string()))?;
        let out = train_supervised(&init, &self.original, &b.train)
            .map_err(|e| ServiceError::Training(e.to_string()))?;
        write_model(&self.cfg.data_dir, 1, &out.model)?;
        self.commit(Event::ModelPublished { version: 1 })?;
        log::info!(
            "trained initial model v1 on {} samples",
            self.original.len()
        );
        Ok(())
    }

    /// Logs `event`, then applies it. The caller must not hold the store lock.
    fn commit(&self, event: Event) -> Result<u64, ServiceError> {
        let mut store = self.store.lock();
        self.commit_locked(&mut store, event)
    }

    fn commit_locked(&self, store: &mut Store, event: Event) -> Result<u64, ServiceError> {
        let seq = store.append(&event)?;
        self.state.write().apply(&event);
        if store.since_snapshot() >= self.cfg.snapshot_every {
            let state = self.state.read().clone();
            if let Err(e) = store.snapshot(&state) {
                // the log alone is enough to recover
                log::warn!("snapshot failed: {e}");
            }
        }
        Ok(seq)
    }

    /// Writes a snapshot now, e.g. on shutdown.
    pub fn snapshot(&self) -> Result<(), ServiceError> {
        let mut store = self.store.lock();
        let state = self.state.read().clone();
        store.snapshot(&state)?;
        Ok(())
    }

    pub fn ingest(&self, req: IngestRequest) -> Result<IngestAck, ServiceError> {
        let (source, width, height, proposals) = match req {
            IngestRequest::Proposals {
                width,
                height,
                regions,
            } => (Source::Proposals, width, height, regions),
            IngestRequest::Synthetic {
                config,
                index,
                noise,
            } => {
                let gt = generate_indexed(&config, index).map_err(|e| {
                    ServiceError::Validation(vec![FieldError::new(
                        "synthetic.config",
                        e.to_string(),
                    )])
                })?;
                let set = simulate_set(&gt, &noise).map_err(|e| {
                    ServiceError::Validation(vec![FieldError::new(
                        "synthetic.noise",
                        e.to_string(),
                    )])
                })?;
                (
                    Source::Synthetic {
                        config,
                        index,
                        noise,
                    },
                    set.width,
                    set.height,
                    set.regions,
                )
            }
        };
        let mut store = self.store.lock();
        let page_id = State::page_id_for(self.state.read().next_document);
        let layout = structure(&page_id, &proposals, &self.cfg.pipeline);
        let ack = IngestAck {
            page_id: page_id.clone(),
            status: Status::Detected,
            regions: layout.regions.len(),
        };
        self.commit_locked(
            &mut store,
            Event::Ingested {
                record: DocumentRecord {
                    page_id,
                    source,
                    width,
                    height,
                    proposals,
                    layout,
                    status: Status::Detected,
                },
            },
        )?;
        Ok(ack)
    }

    pub fn document(&self, page_id: &str) -> Result<DocumentRecord, ServiceError> {
        self.state
            .read()
            .documents
            .get(page_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound {
                what: "document",
                id: page_id.to_string(),
            })
    }

    /// Layout JSON; byte-identical across calls while the document is
    /// unchanged.
    pub fn layout_json(&self, page_id: &str) -> Result<String, ServiceError> {
        Ok(self.document(page_id)?.layout.to_json())
    }

    pub fn submit_correction(
        &self,
        page_id: &str,
        req: CorrectionRequest,
    ) -> Result<CorrectionAck, ServiceError> {
        let mut store = self.store.lock();
        let (doc, id) =
            {
                let state = self.state.read();
                let doc = state.documents.get(page_id).cloned().ok_or_else(|| {
                    ServiceError::NotFound {
                        what: "document",
                        id: page_id.to_string(),
                    }
                })?;
                (doc, state.next_correction)
            };
        let (layout, samples) =
            apply_edits(&doc, &req.edits, &self.cfg.pipeline).map_err(ServiceError::Validation)?;
        let correction = CorrectionRecord {
            id,
            page_id: page_id.to_string(),
            operator: req.operator,
            edits: req.edits,
            timestamp: req.timestamp.unwrap_or_else(now_millis),
        };
        let n_samples = samples.len();
        self.commit_locked(
            &mut store,
            Event::Corrected {
                staged: StagedCorrection {
                    correction,
                    samples,
                },
                layout,
            },
        )?;
        let staged = self.state.read().staged.len();
        Ok(CorrectionAck {
            page_id: page_id.to_string(),
            correction_id: id,
            status: Status::Reviewed,
            staged,
            samples: n_samples,
        })
    }

    pub fn staged(&self) -> Vec<StagedCorrection> {
        self.state.read().staged.clone()
    }

    /// Claims every staged correction for a new job. The job still has to be
    /// run with [`Service::run_job`].
    pub fn start_training(&self) -> Result<TriggerOutcome, ServiceError> {
        let mut store = self.store.lock();
        let (job_id, ids) = {
            let state = self.state.read();
            let ids: Vec<u64> = state.staged.iter().map(|s| s.correction.id).collect();
            (state.next_job, ids)
        };
        if ids.is_empty() {
            return Ok(TriggerOutcome::Noop {
                reason: "no staged corrections".into(),
            });
        }
        self.commit_locked(
            &mut store,
            Event::TrainingStarted {
                job_id,
                corrections: ids,
            },
        )?;
        Ok(TriggerOutcome::Started {
            job: self.job(job_id)?,
        })
    }

    /// Trains a new model version from the job's corrections. Jobs run one at
    /// a time; each starts from the model current when it begins.
    pub fn run_job(
        &self,
        job_id: u64,
        cfg: Option<&TrainConfig>,
    ) -> Result<TrainingJob, ServiceError> {
        let _model = self.model_lock.lock();
        let (feedback, base_version) = {
            let state = self.state.read();
            let claimed = state
                .claimed
                .get(&job_id)
                .ok_or_else(|| ServiceError::NotFound {
                    what: "running job",
                    id: job_id.to_string(),
                })?;
            let feedback: Vec<LabeledSample> = claimed
                .iter()
                .flat_map(|s| s.samples.iter().cloned())
                .collect();
            (
                feedback,
                state.model_version.expect("a model exists after open"),
            )
        };
        let result = (|| -> Result<_, ServiceError> {
            let base = read_model(&self.cfg.data_dir, base_version)?.ok_or_else(|| {
                ServiceError::Training(format!("model v{base_version} is missing"))
            })?;
            let cfg = cfg.unwrap_or(&self.cfg.train);
            let out = if feedback.is_empty() {
                // corrections made only of deletions carry no samples
                docstruct_core::incremental::TrainOutcome {
                    model: base,
                    report: docstruct_core::incremental::TrainReport {
                        steps: 0,
                        best_step: 0,
                        best_holdout_loss: 0.0,
                        stopped_early: false,
                        history: Vec::new(),
                    },
                }
            } else {
                incremental_train(&base, &self.original, &feedback, cfg)
                    .map_err(|e| ServiceError::Training(e.to_string()))?
            };
            let version = base_version + 1;
            write_model(&self.cfg.data_dir, version, &out.model)?;
            Ok((version, out.report))
        })();
        match result {
            Ok((model_version, report)) => {
                self.commit(Event::TrainingFinished {
                    job_id,
                    base_version,
                    model_version,
                    report,
                })?;
            }
            Err(e) => {
                self.commit(Event::TrainingFailed {
                    job_id,
                    error: e.to_string(),
                })?;
            }
        }
        self.job(job_id)
    }

    /// Claims and runs in one call.
    pub fn trigger_incremental_training(
        &self,
        cfg: Option<&TrainConfig>,
    ) -> Result<TriggerOutcome, ServiceError> {
        match self.start_training()? {
            TriggerOutcome::Started { job } => Ok(TriggerOutcome::Started {
                job: self.run_job(job.id, cfg)?,
            }),
            noop => Ok(noop),
        }
    }

    pub fn job(&self, job_id: u64) -> Result<TrainingJob, ServiceError> {
        self.state
            .read()
            .jobs
            .get(&job_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound {
                what: "training job",
                id: job_id.to_string(),
            })
    }

    pub fn current_model(&self) -> Result<ModelInfo, ServiceError> {
        let version = self
            .state
            .read()
            .model_version
            .expect("a model exists after open");
        self.model(version)
    }

    pub fn model(&self, version: u32) -> Result<ModelInfo, ServiceError> {
        let model =
            read_model(&self.cfg.data_dir, version)?.ok_or_else(|| ServiceError::NotFound {
                what: "model version",
                id: version.to_string(),
            })?;
        Ok(ModelInfo { version, model })
    }

    /// Class predictions of a model for every region of a document's layout,
    /// in flattened order.
    pub fn classify(
        &self,
        page_id: &str,
        version: Option<u32>,
    ) -> Result<Vec<usize>, ServiceError> {
        let doc = self.document(page_id)?;
        let info = match version {
            Some(v) => self.model(v)?,
            None => self.current_model()?,
        };
        let regions = doc.layout.flatten(true);
        page_features(&regions, doc.width as f64, doc.height as f64)
            .iter()
            .map(|f| {
                info.model
                    .predict(f)
                    .map_err(|e| ServiceError::Training(e.to_string()))
            })
            .collect()
    }
}

/// Applies an edit batch to a document, returning the re-assembled layout
/// and the labelled samples the edits produce. Targets refer to the layout
/// as it was before the batch. Any invalid edit rejects the whole batch.
pub fn apply_edits(
    doc: &DocumentRecord,
    edits: &[Edit],
    pipeline: &PipelineConfig,
) -> Result<(DocumentLayout, Vec<LabeledSample>), Vec<FieldError>> {
    let index = flat_index(&doc.layout);
    let mut slots: Vec<Option<Region>> = doc.layout.flatten(true).into_iter().map(Some).collect();
    let mut touched: Vec<usize> = Vec::new();
    let mut errs = Vec::new();

    for (i, edit) in edits.iter().enumerate() {
        let resolve = |t: &crate::domain::Target, errs: &mut Vec<FieldError>| -> Option<usize> {
            let Some((top, cells)) = index.get(t.region) else {
                errs.push(FieldError::new(
                    format!("edits[{i}].target.region"),
                    format!("no region {} (layout has {})", t.region, index.len()),
                ));
                return None;
            };
            match t.cell {
                None => Some(*top),
                Some(c) => match cells.get(c) {
                    Some(slot) => Some(*slot),
                    None => {
                        errs.push(FieldError::new(
                            format!("edits[{i}].target.cell"),
                            format!(
                                "region {} has no cell {c} ({} cells)",
                                t.region,
                                cells.len()
                            ),
                        ));
                        None
                    }
                },
            }
        };
        let live = |slot: usize, slots: &[Option<Region>], errs: &mut Vec<FieldError>| -> bool {
            if slots[slot].is_none() {
                errs.push(FieldError::new(
                    format!("edits[{i}].target"),
                    "region was deleted earlier in this batch",
                ));
                false
            } else {
                true
            }
        };
        match edit {
            Edit::MoveResize { target, bbox } => {
                if let Some(s) = resolve(target, &mut errs) {
                    if live(s, &slots, &mut errs) {
                        let r = slots[s].as_mut().expect("live");
                        r.bbox = *bbox;
                        r.score = 1.0;
                        touched.push(s);
                    }
                }
            }
            Edit::Relabel { target, class } => {
                if let Some(s) = resolve(target, &mut errs) {
                    if live(s, &slots, &mut errs) {
                        let r = slots[s].as_mut().expect("live");
                        r.label = *class;
                        r.score = 1.0;
                        touched.push(s);
                    }
                }
            }
            Edit::Delete { target } => {
                if let Some(s) = resolve(target, &mut errs) {
                    if live(s, &slots, &mut errs) {
                        slots[s] = None;
                        touched.retain(|&t| t != s);
                    }
                }
            }
            Edit::Add { class, bbox } => {
                slots.push(Some(
                    Region::new(*class, *bbox, 1.0).expect("validated box, unit score"),
                ));
                touched.push(slots.len() - 1);
            }
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }

    let mut position = vec![usize::MAX; slots.len()];
    let mut regions = Vec::new();
    for (s, r) in slots.iter().enumerate() {
        if let Some(r) = r {
            position[s] = regions.len();
            regions.push(*r);
        }
    }
    let layout = assemble_document(&doc.page_id, &regions, &pipeline.table);
    let feats = page_features(&regions, doc.width as f64, doc.height as f64);
    touched.sort_unstable();
    touched.dedup();
    let samples = touched
        .into_iter()
        .map(|s| {
            let p = position[s];
            LabeledSample::new(feats[p].clone(), regions[p].label.index())
        })
        .collect();
    Ok((layout, samples))
}
