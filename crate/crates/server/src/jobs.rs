//! Background PBIL jobs. Each job runs on its own thread and publishes a
//! complete snapshot after every iteration; readers never see a partially
//! updated job.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use dlsp_core::design::{
    pbil_init, pbil_run, CnnExpectedClass, FitnessFn, HistoryRow, OracleJsc, PbilInit, PbilParams, PbilState,
};
use dlsp_core::morpho::Morphology;
use dlsp_core::nn::CnnModel;
use dlsp_core::oracle::OracleParams;

use crate::payload::GridPayload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignJob {
    pub id: String,
    pub status: JobStatus,
    pub iteration: usize,
    pub fitness_history: Vec<HistoryRow>,
    pub best_fitness: Option<f64>,
    pub p: Option<GridPayload>,
    pub best: Option<GridPayload>,
    pub error: Option<String>,
}

impl DesignJob {
    fn running(id: String) -> Self {
        Self {
            id,
            status: JobStatus::Running,
            iteration: 0,
            fitness_history: Vec::new(),
            best_fitness: None,
            p: None,
            best: None,
            error: None,
        }
    }

    fn update(&mut self, s: &PbilState) {
        self.iteration = s.iteration;
        self.fitness_history = s.history.clone();
        self.best_fitness = Some(s.best_fitness);
        self.p = Some(GridPayload::from_values(s.height, s.width, &s.p));
        self.best = Some(GridPayload::from_binary(&s.best_sample));
    }
}

pub enum Fitness {
    Cnn(Arc<CnnModel<f32>>),
    Oracle(OracleParams),
}

pub struct JobSpec {
    pub init: Morphology,
    pub delta: f64,
    pub params: PbilParams,
    pub fitness: Fitness,
}

struct Entry {
    job: DesignJob,
    cancel: Arc<AtomicBool>,
}

#[derive(Default)]
pub struct JobStore {
    jobs: Mutex<HashMap<String, Entry>>,
    next: AtomicU64,
}

pub enum StartError {
    TooMany,
}

impl JobStore {
    fn running(jobs: &HashMap<String, Entry>) -> usize {
        jobs.values().filter(|e| e.job.status == JobStatus::Running).count()
    }

    /// Registers and launches a job unless `max_jobs` are already running.
    pub fn start(self: &Arc<Self>, spec: JobSpec, max_jobs: usize) -> Result<String, StartError> {
        let cancel = Arc::new(AtomicBool::new(false));
        let id = {
            let mut jobs = self.jobs.lock().expect("job store poisoned");
            if Self::running(&jobs) >= max_jobs {
                return Err(StartError::TooMany);
            }
            let n = self.next.fetch_add(1, Ordering::Relaxed);
            let id = format!("job-{n:06}-{:08x}", spec.params.seed as u32 ^ (n as u32).wrapping_mul(0x9E37_79B9));
            jobs.insert(
                id.clone(),
                Entry {
                    job: DesignJob::running(id.clone()),
                    cancel: cancel.clone(),
                },
            );
            id
        };
        let store = Arc::clone(self);
        let job_id = id.clone();
        std::thread::spawn(move || store.work(&job_id, spec, &cancel));
        Ok(id)
    }

    fn publish(&self, id: &str, f: impl FnOnce(&mut DesignJob)) {
        let mut jobs = self.jobs.lock().expect("job store poisoned");
        if let Some(e) = jobs.get_mut(id) {
            // a cancelled job is already final
            if e.job.status == JobStatus::Running {
                f(&mut e.job);
            }
        }
    }

    fn work(&self, id: &str, spec: JobSpec, cancel: &AtomicBool) {
        let fitness: Box<dyn FitnessFn + '_> = match &spec.fitness {
            Fitness::Cnn(model) => Box::new(CnnExpectedClass(model)),
            Fitness::Oracle(p) => Box::new(OracleJsc(p.clone())),
        };
        let result = pbil_init(PbilInit::Morphology(&spec.init), spec.delta, &spec.params, fitness.as_ref()).and_then(|state| {
            self.publish(id, |j| j.update(&state));
            pbil_run(state, &spec.params, fitness.as_ref(), &[], |s| {
                self.publish(id, |j| j.update(s));
                !cancel.load(Ordering::SeqCst)
            })
        });
        self.publish(id, |j| match result {
            Ok((state, _)) => {
                j.update(&state);
                j.status = JobStatus::Done;
            }
            Err(e) => {
                j.status = JobStatus::Failed;
                j.error = Some(e.to_string());
            }
        });
    }

    pub fn get(&self, id: &str) -> Option<DesignJob> {
        self.jobs.lock().expect("job store poisoned").get(id).map(|e| e.job.clone())
    }

    /// Marks a running job failed with reason "cancelled" and signals its
    /// worker; finished jobs are returned unchanged.
    pub fn cancel(&self, id: &str) -> Option<DesignJob> {
        let mut jobs = self.jobs.lock().expect("job store poisoned");
        let e = jobs.get_mut(id)?;
        if e.job.status == JobStatus::Running {
            e.cancel.store(true, Ordering::SeqCst);
            e.job.status = JobStatus::Failed;
            e.job.error = Some("cancelled".into());
        }
        Some(e.job.clone())
    }
}
