//! Task state machine and rating ledger, independent of transport.
//!
//! A task moves Open -> Complete once `required_raters` distinct annotators
//! have rated both slots at the current revision. If either slot's ratings
//! at that revision need QA, the task instead reopens at revision + 1 and is
//! served only to annotators who never rated it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use avsync::datakit::{classify_disagreement, DataError, DisagreementClass, RatingRecord, RatingsStore, Slot, REQUIRED_RATERS};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown annotator {0}")]
    UnknownAnnotator(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("score {0} outside 1..=5")]
    ScoreOutOfRange(i64),
    #[error("{annotator} already rated {task_id} {slot} at revision {revision}")]
    DuplicateSubmission {
        annotator: String,
        task_id: String,
        slot: Slot,
        revision: u32,
    },
    #[error("task {task_id} is not assigned to {annotator}")]
    TaskNotAssigned { annotator: String, task_id: String },
    #[error("invalid task list: {0}")]
    InvalidTasks(String),
    #[error(transparent)]
    Store(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    pub task_id: String,
    pub left: String,
    pub right: String,
}

impl TaskDef {
    pub fn video(&self, slot: Slot) -> &str {
        match slot {
            Slot::Left => &self.left,
            Slot::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Complete,
    QaReopened,
}

/// What an annotator sees: ids and revision, never earlier scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: String,
    pub left: String,
    pub right: String,
    pub revision: u32,
    pub state: TaskState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub task_id: String,
    pub slot: Slot,
    pub revision: u32,
    pub task_state: TaskState,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub open: usize,
    pub complete: usize,
    pub qa_reopened: usize,
    pub total_ratings: usize,
    /// Rating count per revision number.
    pub ratings_per_revision: BTreeMap<u32, usize>,
    /// Number of videos having received exactly `k` ratings, keyed by `k`.
    pub ratings_per_video: BTreeMap<usize, usize>,
}

#[derive(Debug)]
struct Task {
    def: TaskDef,
    state: TaskState,
    revision: u32,
    /// Slots rated per annotator at the current revision.
    current: BTreeMap<String, BTreeSet<Slot>>,
    /// Everyone who rated this task at any revision.
    ever: BTreeSet<String>,
}

impl Task {
    fn finished_raters(&self) -> usize {
        self.current.values().filter(|s| s.len() == Slot::BOTH.len()).count()
    }

    fn eligible(&self, annotator: &str) -> bool {
        match self.state {
            TaskState::Complete => false,
            TaskState::Open => !self.current.contains_key(annotator),
            TaskState::QaReopened => !self.ever.contains(annotator),
        }
    }

    fn assignment(&self) -> Assignment {
        Assignment {
            task_id: self.def.task_id.clone(),
            left: self.def.left.clone(),
            right: self.def.right.clone(),
            revision: self.revision,
            state: self.state,
        }
    }
}

/// In-memory service state backed by an append-only ratings store.
#[derive(Debug)]
pub struct Ledger {
    tasks: Vec<Task>,
    index: HashMap<String, usize>,
    annotators: BTreeSet<String>,
    /// Outstanding assignment per annotator: (task index, revision).
    assigned: HashMap<String, (usize, u32)>,
    records: Vec<RatingRecord>,
    seen: BTreeSet<(String, String, Slot, u32)>,
    store: Option<RatingsStore>,
    required: usize,
}

impl Ledger {
    /// Builds the ledger and replays any ratings already in `store`.
    pub fn new(tasks: Vec<TaskDef>, store: Option<RatingsStore>, required: usize) -> Result<Ledger, ServiceError> {
        let mut index = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if t.left == t.right {
                return Err(ServiceError::InvalidTasks(format!("{} pairs a video with itself", t.task_id)));
            }
            if index.insert(t.task_id.clone(), i).is_some() {
                return Err(ServiceError::InvalidTasks(format!("duplicate task id {}", t.task_id)));
            }
        }
        let mut ledger = Ledger {
            tasks: tasks
                .into_iter()
                .map(|def| Task {
                    def,
                    state: TaskState::Open,
                    revision: 0,
                    current: BTreeMap::new(),
                    ever: BTreeSet::new(),
                })
                .collect(),
            index,
            annotators: BTreeSet::new(),
            assigned: HashMap::new(),
            records: Vec::new(),
            seen: BTreeSet::new(),
            store: None,
            required: required.max(1),
        };
        if let Some(s) = &store {
            for r in s.load()? {
                ledger.annotators.insert(r.annotator_id.clone());
                ledger.apply(r)?;
            }
        }
        ledger.store = store;
        Ok(ledger)
    }

    pub fn with_defaults(tasks: Vec<TaskDef>) -> Result<Ledger, ServiceError> {
        Ledger::new(tasks, None, REQUIRED_RATERS)
    }

    /// Registers an annotator; returns false if already known.
    pub fn register(&mut self, annotator: &str) -> bool {
        self.annotators.insert(annotator.to_string())
    }

    pub fn task_state(&self, task_id: &str) -> Option<(TaskState, u32)> {
        self.index.get(task_id).map(|&i| (self.tasks[i].state, self.tasks[i].revision))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskDef> {
        self.tasks.iter().map(|t| &t.def)
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    /// The annotator's outstanding task if still open to them, else a
    /// reopened task, else the least-rated open task.
    pub fn assign(&mut self, annotator: &str) -> Result<Option<Assignment>, ServiceError> {
        if !self.annotators.contains(annotator) {
            return Err(ServiceError::UnknownAnnotator(annotator.to_string()));
        }
        if let Some(&(i, rev)) = self.assigned.get(annotator) {
            let t = &self.tasks[i];
            if t.revision == rev && t.state != TaskState::Complete {
                return Ok(Some(t.assignment()));
            }
            self.assigned.remove(annotator);
        }
        let pick = self
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.eligible(annotator))
            .min_by_key(|(i, t)| (t.state != TaskState::QaReopened, t.finished_raters(), *i))
            .map(|(i, _)| i);
        Ok(pick.map(|i| {
            let t = &self.tasks[i];
            self.assigned.insert(annotator.to_string(), (i, t.revision));
            t.assignment()
        }))
    }

    pub fn submit(&mut self, annotator: &str, task_id: &str, slot: Slot, score: i64) -> Result<Ack, ServiceError> {
        if !(1..=5).contains(&score) {
            return Err(ServiceError::ScoreOutOfRange(score));
        }
        if !self.annotators.contains(annotator) {
            return Err(ServiceError::UnknownAnnotator(annotator.to_string()));
        }
        let &i = self.index.get(task_id).ok_or_else(|| ServiceError::UnknownTask(task_id.to_string()))?;
        let revision = self.tasks[i].revision;
        if self.seen.contains(&(annotator.to_string(), task_id.to_string(), slot, revision)) {
            return Err(ServiceError::DuplicateSubmission {
                annotator: annotator.to_string(),
                task_id: task_id.to_string(),
                slot,
                revision,
            });
        }
        if self.assigned.get(annotator) != Some(&(i, revision)) {
            return Err(ServiceError::TaskNotAssigned {
                annotator: annotator.to_string(),
                task_id: task_id.to_string(),
            });
        }
        let record = RatingRecord {
            task_id: task_id.to_string(),
            slot,
            video_id: self.tasks[i].def.video(slot).to_string(),
            annotator_id: annotator.to_string(),
            score: score as u8,
            timestamp: now(),
            revision,
        };
        if let Some(s) = &self.store {
            s.append(std::slice::from_ref(&record))?;
        }
        self.apply(record)?;
        let t = &self.tasks[i];
        if t.revision != revision || t.current.get(annotator).is_some_and(|s| s.len() == Slot::BOTH.len()) {
            self.assigned.remove(annotator);
        }
        Ok(Ack {
            task_id: task_id.to_string(),
            slot,
            revision,
            task_state: t.state,
        })
    }

    /// Folds one stored record into task state. Ratings for a superseded
    /// revision are kept in the ledger but do not move the state machine.
    fn apply(&mut self, r: RatingRecord) -> Result<(), ServiceError> {
        let &i = self.index.get(&r.task_id).ok_or_else(|| ServiceError::UnknownTask(r.task_id.clone()))?;
        self.seen.insert((r.annotator_id.clone(), r.task_id.clone(), r.slot, r.revision));
        let required = self.required;
        let t = &mut self.tasks[i];
        t.ever.insert(r.annotator_id.clone());
        let live = r.revision == t.revision && t.state != TaskState::Complete;
        if live {
            t.current.entry(r.annotator_id.clone()).or_default().insert(r.slot);
        }
        self.records.push(r);
        if live && self.tasks[i].finished_raters() == required {
            self.close_round(i);
        }
        Ok(())
    }

    fn close_round(&mut self, i: usize) {
        let t = &self.tasks[i];
        let finished: BTreeSet<&String> = t
            .current
            .iter()
            .filter(|(_, s)| s.len() == Slot::BOTH.len())
            .map(|(a, _)| a)
            .collect();
        let needs_qa = Slot::BOTH.iter().any(|&slot| {
            let scores: Vec<u8> = self
                .records
                .iter()
                .filter(|r| r.task_id == t.def.task_id && r.revision == t.revision && r.slot == slot)
                .filter(|r| finished.contains(&r.annotator_id))
                .map(|r| r.score)
                .collect();
            classify_disagreement(&scores) == DisagreementClass::QaRequired
        });
        let t = &mut self.tasks[i];
        if needs_qa {
            t.state = TaskState::QaReopened;
            t.revision += 1;
            t.current.clear();
        } else {
            t.state = TaskState::Complete;
        }
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress::default();
        for t in &self.tasks {
            match t.state {
                TaskState::Open => p.open += 1,
                TaskState::Complete => p.complete += 1,
                TaskState::QaReopened => p.qa_reopened += 1,
            }
        }
        let mut per_video: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &self.tasks {
            per_video.entry(&t.def.left).or_default();
            per_video.entry(&t.def.right).or_default();
        }
        for r in &self.records {
            *per_video.entry(&r.video_id).or_default() += 1;
            *p.ratings_per_revision.entry(r.revision).or_default() += 1;
        }
        p.total_ratings = self.records.len();
        for n in per_video.values() {
            *p.ratings_per_video.entry(*n).or_default() += 1;
        }
        p
    }

    /// True if `video_id` appears in some task.
    pub fn knows_video(&self, video_id: &str) -> bool {
        self.tasks.iter().any(|t| t.def.left == video_id || t.def.right == video_id)
    }
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Tasks from sampled pairs, numbered in order.
pub fn tasks_from_pairs(pairs: &[(String, String)]) -> Vec<TaskDef> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (l, r))| TaskDef {
            task_id: format!("task{i:06}"),
            left: l.clone(),
            right: r.clone(),
        })
        .collect()
}

pub fn write_tasks(tasks: &[TaskDef], path: impl AsRef<Path>) -> Result<(), ServiceError> {
    let io = |e: csv::Error| ServiceError::Store(DataError::Io(e.into()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for t in tasks {
        w.serialize(t).map_err(io)?;
    }
    w.flush().map_err(|e| ServiceError::Store(e.into()))?;
    Ok(())
}

pub fn read_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskDef>, ServiceError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ServiceError::InvalidTasks(e.to_string()))?;
    r.deserialize()
        .map(|t| t.map_err(|e: csv::Error| ServiceError::InvalidTasks(e.to_string())))
        .collect()
}
