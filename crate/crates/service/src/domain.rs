//! Records, corrections, training jobs, and the event-sourced state they
//! live in. Every mutation is an [`Event`]; replaying the event log over the
//! last snapshot reproduces the state exactly.

use std::collections::BTreeMap;

use docstruct_core::incremental::{LabeledSample, TrainReport};
use docstruct_core::synth::{GenConfig, NoiseConfig};
use docstruct_core::{BBox, DocumentLayout, Label, Region};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Detected,
    Reviewed,
    Finalized,
}

/// Where a document's proposals came from.
// records are cloned rarely; boxing the config would only complicate serde
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Proposals,
    Synthetic {
        config: GenConfig,
        index: u64,
        noise: NoiseConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub page_id: String,
    pub source: Source,
    pub width: u32,
    pub height: u32,
    pub proposals: Vec<Region>,
    pub layout: DocumentLayout,
    pub status: Status,
}

/// A region of the layout an edit applies to: top-level entry `region`, or
/// cell `cell` of that entry's table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub region: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Edit {
    MoveResize { target: Target, bbox: BBox },
    Relabel { target: Target, class: Label },
    Delete { target: Target },
    Add { class: Label, bbox: BBox },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub id: u64,
    pub page_id: String,
    pub operator: String,
    pub edits: Vec<Edit>,
    pub timestamp: String,
}

/// A correction waiting for a training job, with the labelled samples its
/// edits produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedCorrection {
    pub correction: CorrectionRecord,
    pub samples: Vec<LabeledSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingJob {
    pub id: u64,
    /// Ids of the corrections this job consumed.
    pub corrections: Vec<u64>,
    pub samples: usize,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_version: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_version: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Ingested {
        record: DocumentRecord,
    },
    Corrected {
        staged: StagedCorrection,
        layout: DocumentLayout,
    },
    ModelPublished {
        version: u32,
    },
    TrainingStarted {
        job_id: u64,
        corrections: Vec<u64>,
    },
    TrainingFinished {
        job_id: u64,
        base_version: u32,
        model_version: u32,
        report: TrainReport,
    },
    TrainingFailed {
        job_id: u64,
        error: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub next_document: u64,
    pub next_correction: u64,
    pub next_job: u64,
    pub documents: BTreeMap<String, DocumentRecord>,
    /// Unclaimed corrections in acknowledgement order.
    pub staged: Vec<StagedCorrection>,
    /// Corrections held by running jobs.
    pub claimed: BTreeMap<u64, Vec<StagedCorrection>>,
    pub jobs: BTreeMap<u64, TrainingJob>,
    pub model_version: Option<u32>,
}

impl State {
    pub fn page_id_for(n: u64) -> String {
        format!("doc-{n:06}")
    }

    /// Applies one event. Events are validated before they are logged, so
    /// application cannot fail; inconsistent events are ignored.
    pub fn apply(&mut self, event: &Event) {
        match event {
            Event::Ingested { record } => {
                self.next_document += 1;
                self.documents
                    .insert(record.page_id.clone(), record.clone());
            }
            Event::Corrected { staged, layout } => {
                self.next_correction = self.next_correction.max(staged.correction.id + 1);
                if let Some(doc) = self.documents.get_mut(&staged.correction.page_id) {
                    doc.layout = layout.clone();
                    doc.status = Status::Reviewed;
                }
                self.staged.push(staged.clone());
            }
            Event::ModelPublished { version } => {
                self.model_version = Some(*version);
            }
            Event::TrainingStarted {
                job_id,
                corrections,
            } => {
                self.next_job = self.next_job.max(job_id + 1);
                let (taken, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut self.staged)
                    .into_iter()
                    .partition(|s| corrections.contains(&s.correction.id));
                self.staged = kept;
                let samples = taken.iter().map(|s| s.samples.len()).sum();
                self.claimed.insert(*job_id, taken);
                self.jobs.insert(
                    *job_id,
                    TrainingJob {
                        id: *job_id,
                        corrections: corrections.clone(),
                        samples,
                        status: JobStatus::Running,
                        base_version: None,
                        model_version: None,
                        error: None,
                        report: None,
                    },
                );
            }
            Event::TrainingFinished {
                job_id,
                base_version,
                model_version,
                report,
            } => {
                self.claimed.remove(job_id);
                self.model_version = Some(*model_version);
                if let Some(job) = self.jobs.get_mut(job_id) {
                    job.status = JobStatus::Completed;
                    job.base_version = Some(*base_version);
                    job.model_version = Some(*model_version);
                    job.report = Some(report.clone());
                }
            }
            Event::TrainingFailed { job_id, error } => {
                // the corrections go back to staging, ahead of newer ones
                if let Some(mut back) = self.claimed.remove(job_id) {
                    back.append(&mut self.staged);
                    self.staged = back;
                }
                if let Some(job) = self.jobs.get_mut(job_id) {
                    job.status = JobStatus::Failed;
                    job.error = Some(error.clone());
                }
            }
        }
    }

    pub fn running_jobs(&self) -> Vec<u64> {
        self.jobs
            .values()
            .filter(|j| j.status == JobStatus::Running)
            .map(|j| j.id)
            .collect()
    }
}

/// Layout index of every top-level entry and cell in flattened order,
/// matching [`DocumentLayout::flatten`].
pub fn flat_index(layout: &DocumentLayout) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::with_capacity(layout.regions.len());
    let mut next = 0;
    for e in &layout.regions {
        let top = next;
        next += 1;
        let cells = match e.as_table() {
            Some(t) => {
                let idx: Vec<usize> = (next..next + t.placements.len()).collect();
                next += t.placements.len();
                idx
            }
            None => Vec::new(),
        };
        out.push((top, cells));
    }
    out
}
