use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use super::exchange::{apply_message, make_messages, outgoing_requests, GhostMessage, GhostRequest};
use super::rank::{train_epoch, EpochReport, RankState, Role, TapeCache};
use super::{effective_weights, RuntimeError, TrainConfig};
use crate::decomposition::{
    identify_masters, sample_rank_datasets, Budget, ObservationSet, Partition, RankDatasets,
};
use crate::network::{init_params, ExpertConfig, ExpertParams, InputMap};
use crate::physics::LossWeights;

/// Everything fixed before the workers start.
#[derive(Clone, Debug)]
pub struct RunSetup {
    pub partition: Partition,
    pub masters: BTreeSet<usize>,
    pub expert: ExpertConfig,
    pub datasets: Vec<RankDatasets>,
}

impl RunSetup {
    pub fn role(&self, index: usize) -> Role {
        if self.masters.contains(&index) {
            Role::Master
        } else {
            Role::Slave
        }
    }

    /// Initial parameters of rank `index`, inputs scaled to its extended box.
    pub fn initial_params(&self, index: usize, seed: u64) -> Result<ExpertParams, RuntimeError> {
        let ext = &self.partition.subdomains[index].extended;
        let params = init_params(&self.expert, seed.wrapping_add((index as u64) << 32))?;
        Ok(params.with_input_map(InputMap::from_bounds(&ext.lo, &ext.hi)))
    }

    /// Rank states as the workers start them.
    pub fn rank_states(&self, config: &TrainConfig) -> Result<Vec<RankState>, RuntimeError> {
        self.partition
            .subdomains
            .iter()
            .map(|spec| {
                let role = self.role(spec.index);
                Ok(RankState::new(
                    spec.index,
                    spec.rank,
                    role,
                    self.partition.domain.regime,
                    self.initial_params(spec.index, config.seed)?,
                    self.datasets[spec.index].clone(),
                    effective_weights(&config.weights, role, config.gauge),
                    config.seed,
                ))
            })
            .collect()
    }
}

/// Identifies masters and samples every rank's datasets.
pub fn setup_ranks(
    partition: &Partition,
    expert: &ExpertConfig,
    budget: &Budget,
    observations: &ObservationSet,
    config: &TrainConfig,
) -> Result<RunSetup, RuntimeError> {
    expert.validate()?;
    config.validate(partition.time_splits)?;
    if expert.input_dim != partition.domain.regime.input_dim() {
        return Err(RuntimeError::Config(format!(
            "expert input dimension {} does not match the regime ({})",
            expert.input_dim,
            partition.domain.regime.input_dim()
        )));
    }
    let masters = identify_masters(partition, &config.anchor)?;
    let datasets = partition
        .subdomains
        .iter()
        .map(|spec| sample_rank_datasets(partition, spec, budget, observations, config.seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunSetup {
        partition: partition.clone(),
        masters,
        expert: expert.clone(),
        datasets,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceOptions {
    pub messages: bool,
    /// Attach the sender's parameters to every traced message.
    pub sender_params: bool,
    pub epoch_events: bool,
}

#[derive(Clone, Debug)]
pub struct TracedMessage {
    pub message: GhostMessage,
    pub sender_params: Option<ExpertParams>,
}

/// A rank starting an epoch; `seq` is a global order over all ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochEvent {
    pub seq: usize,
    pub rank: usize,
    pub epoch: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub messages: Vec<TracedMessage>,
    pub events: Vec<EpochEvent>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub experts: Vec<ExpertParams>,
    pub histories: Vec<Vec<EpochReport>>,
    pub roles: Vec<Role>,
    pub weights: Vec<LossWeights>,
    /// Wall time of each epoch, measured when the last rank finished it.
    pub epoch_wall_s: Vec<f64>,
    pub total_wall_s: f64,
    pub trace: Trace,
}

struct Shared<'a> {
    config: &'a TrainConfig,
    abort: AtomicBool,
    finished: Vec<AtomicBool>,
    options: TraceOptions,
    messages: Mutex<Vec<TracedMessage>>,
    events: Mutex<Vec<EpochEvent>>,
}

struct Worker {
    state: RankState,
    requests: Vec<GhostRequest>,
    outbox: BTreeMap<usize, Sender<GhostMessage>>,
    inbox: Receiver<GhostMessage>,
    reports: Sender<(usize, EpochReport)>,
}

impl Worker {
    fn run(mut self, shared: &Shared<'_>) -> Result<ExpertParams, RuntimeError> {
        let config = shared.config;
        let index = self.state.index;
        let mut tapes = TapeCache::new(self.state.params.config.architecture(), self.state.regime);
        let expected = self.state.data.ghosts.len();
        let mut pending: BTreeMap<usize, Vec<GhostMessage>> = BTreeMap::new();
        let timeout = Duration::from_secs_f64(config.exchange_timeout_s.max(0.001));
        for epoch in 0..config.epochs {
            if shared.abort.load(Ordering::SeqCst) {
                return Err(RuntimeError::Aborted(index));
            }
            if shared.options.epoch_events {
                let mut events = shared.events.lock().expect("event log");
                let seq = events.len();
                events.push(EpochEvent { seq, rank: index, epoch });
            }
            if epoch % config.comm_interval == 0 && (expected > 0 || !self.requests.is_empty()) {
                let outgoing = make_messages(&self.state, &self.requests, epoch, &config.anchor, config.gauge)?;
                for msg in outgoing {
                    if shared.options.messages {
                        shared.messages.lock().expect("message log").push(TracedMessage {
                            message: msg.clone(),
                            sender_params: shared.options.sender_params.then(|| self.state.params.clone()),
                        });
                    }
                    self.outbox[&msg.dest]
                        .send(msg)
                        .map_err(|_| RuntimeError::Aborted(index))?;
                }
                let mut got = pending.remove(&epoch).unwrap_or_default();
                let started = Instant::now();
                while got.len() < expected {
                    match self.inbox.recv_timeout(Duration::from_millis(50)) {
                        Ok(msg) if msg.epoch == epoch => got.push(msg),
                        Ok(msg) => pending.entry(msg.epoch).or_default().push(msg),
                        Err(RecvTimeoutError::Timeout) => {
                            if shared.abort.load(Ordering::SeqCst) {
                                return Err(RuntimeError::Aborted(index));
                            }
                            let missing = self.missing(&got);
                            let stalled = missing
                                .iter()
                                .any(|(n, _)| shared.finished[*n].load(Ordering::SeqCst));
                            if stalled || started.elapsed() > timeout {
                                return Err(self.deadlock(&missing, epoch));
                            }
                        }
                        Err(RecvTimeoutError::Disconnected) => {
                            let missing = self.missing(&got);
                            return Err(self.deadlock(&missing, epoch));
                        }
                    }
                }
                got.sort_by_key(|m| m.dest_set);
                for msg in &got {
                    apply_message(&mut self.state, msg)?;
                }
            }
            let report = train_epoch(&mut self.state, &mut tapes, epoch, config)?;
            // the coordinator only disappears on panic
            let _ = self.reports.send((index, report));
        }
        Ok(self.state.params)
    }

    fn missing(&self, got: &[GhostMessage]) -> Vec<(usize, usize)> {
        self.state
            .data
            .ghosts
            .iter()
            .enumerate()
            .filter(|(i, _)| !got.iter().any(|m| m.dest_set == *i))
            .map(|(i, g)| (g.neighbor, i))
            .collect()
    }

    fn deadlock(&self, missing: &[(usize, usize)], epoch: usize) -> RuntimeError {
        let interface = missing
            .first()
            .map(|&(n, set)| {
                let kind = self.state.data.ghosts[set].kind;
                format!("{kind:?} interface with rank {n} (ghost set {set}) at epoch {epoch}")
            })
            .unwrap_or_else(|| format!("messages at epoch {epoch}"));
        RuntimeError::Deadlock {
            rank: self.state.index,
            interface,
        }
    }
}

/// Trains every rank on its own thread and collects parameters and loss histories.
pub fn train(setup: &RunSetup, config: &TrainConfig, options: TraceOptions) -> Result<TrainOutput, RuntimeError> {
    config.validate(setup.partition.time_splits)?;
    let states = setup.rank_states(config)?;
    let n = states.len();
    let roles: Vec<Role> = states.iter().map(|s| s.role).collect();
    let weights: Vec<LossWeights> = states.iter().map(|s| s.weights.clone()).collect();
    let mut requests = outgoing_requests(&setup.datasets);

    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel::<GhostMessage>()).unzip();
    let (report_tx, report_rx) = mpsc::channel();
    let mut workers = Vec::with_capacity(n);
    for (state, inbox) in states.into_iter().zip(receivers) {
        let reqs = std::mem::take(&mut requests[state.index]);
        let outbox = reqs
            .iter()
            .map(|r| (r.dest, senders[r.dest].clone()))
            .collect();
        workers.push(Worker {
            state,
            requests: reqs,
            outbox,
            inbox,
            reports: report_tx.clone(),
        });
    }
    drop(senders);
    drop(report_tx);

    let shared = Shared {
        config,
        abort: AtomicBool::new(false),
        finished: (0..n).map(|_| AtomicBool::new(false)).collect(),
        options,
        messages: Mutex::new(Vec::new()),
        events: Mutex::new(Vec::new()),
    };
    let started = Instant::now();
    let mut histories: Vec<Vec<EpochReport>> = vec![Vec::with_capacity(config.epochs); n];
    let mut epoch_done = vec![0usize; config.epochs];
    let mut epoch_end = vec![None; config.epochs];

    let results: Vec<Result<ExpertParams, RuntimeError>> = thread::scope(|scope| {
        let handles: Vec<_> = workers
            .into_iter()
            .map(|worker| {
                let shared = &shared;
                let index = worker.state.index;
                scope.spawn(move || {
                    let out = worker.run(shared);
                    if out.is_err() {
                        shared.abort.store(true, Ordering::SeqCst);
                    }
                    shared.finished[index].store(true, Ordering::SeqCst);
                    out
                })
            })
            .collect();
        for (rank, report) in report_rx.iter() {
            let e = report.epoch;
            histories[rank].push(report);
            epoch_done[e] += 1;
            if epoch_done[e] == n {
                epoch_end[e] = Some(started.elapsed().as_secs_f64());
            }
        }
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(RuntimeError::Config("rank worker panicked".into()))))
            .collect()
    });
    let total_wall_s = started.elapsed().as_secs_f64();

    let mut experts = Vec::with_capacity(n);
    let mut failure = None;
    for (rank, result) in results.into_iter().enumerate() {
        match result {
            Ok(p) => experts.push(p),
            Err(RuntimeError::Aborted(_)) => {}
            Err(e) => {
                failure.get_or_insert(RuntimeError::RankFailed {
                    rank,
                    source: Box::new(e),
                });
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if experts.len() != n {
        return Err(RuntimeError::Config("training aborted without a reported cause".into()));
    }

    let mut epoch_wall_s = Vec::with_capacity(config.epochs);
    let mut prev = 0.0;
    for end in epoch_end.into_iter().flatten() {
        epoch_wall_s.push(end - prev);
        prev = end;
    }
    let trace = Trace {
        messages: shared.messages.into_inner().expect("message log"),
        events: shared.events.into_inner().expect("event log"),
    };
    Ok(TrainOutput {
        experts,
        histories,
        roles,
        weights,
        epoch_wall_s,
        total_wall_s,
        trace,
    })
}

/// `epoch,loss_obs,loss_pde,loss_gh_u,loss_gh_p_space,loss_gh_p_time,lr`
pub fn write_loss_history(path: &Path, history: &[EpochReport]) -> Result<(), RuntimeError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RuntimeError::Io(e.into()))?;
    let io = |e: csv::Error| RuntimeError::Io(e.into());
    w.write_record(["epoch", "loss_obs", "loss_pde", "loss_gh_u", "loss_gh_p_space", "loss_gh_p_time", "lr"])
        .map_err(io)?;
    for r in history {
        let p = &r.parts;
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", p.obs),
            format!("{:?}", p.pde),
            format!("{:?}", p.ghost_u),
            format!("{:?}", p.ghost_p_space),
            format!("{:?}", p.ghost_p_time),
            format!("{:?}", r.lr),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
