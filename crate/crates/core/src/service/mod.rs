//! Operational shell: configuration, persistence, batch and online execution.

pub mod config;
pub mod http;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::engine::{Engine, EngineError, EngineParams, TickInput, TickReport};
use crate::event::{Tick, TypeId};
use crate::history::{record_to_line, HistoryDb, HistoryError};
use crate::sim::{self, SimError};

pub use config::{EngineConfig, Mode, UpdatePeriod};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot bind {address}: {source}")]
    Bind {
        address: String,
        source: std::io::Error,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// 1 for bad input, 2 for a broken internal invariant.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Invariant(_) => 2,
            Self::Engine(EngineError::Pls(_)) => 2,
            _ => 1,
        }
    }
}

/// The input that produced a stored record.
pub fn tick_input_of(record: &crate::event::TickRecord) -> TickInput {
    TickInput {
        tick: record.tick,
        events: record.events.clone(),
        sa_priorities: record.sa_priorities.clone(),
        resolved: record.resolved.clone(),
    }
}

/// Re-runs every stored tick through a fresh engine and checks that the
/// stored valuations come out identical.
pub fn replay_history(history: &HistoryDb, params: EngineParams) -> Result<Engine, ServiceError> {
    let mut engine = Engine::new(params)?;
    for record in history.ticks() {
        engine.ingest_tick(tick_input_of(record))?;
        let replayed = engine.history().get(record.tick).expect("just appended");
        if replayed != record {
            return Err(ServiceError::Invariant(format!(
                "replay of tick {} diverges from the stored record",
                record.tick
            )));
        }
    }
    Ok(engine)
}

pub fn read_history_file(path: &Path) -> Result<HistoryDb, ServiceError> {
    match File::open(path) {
        Ok(file) => Ok(HistoryDb::read_jsonl(BufReader::new(file))?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(HistoryDb::new()),
        Err(e) => Err(e.into()),
    }
}

/// Loads the engine described by `config`: the stored history plus the
/// checkpoint taken with it. Falls back to replaying the history when the
/// checkpoint is missing or belongs to a different tick.
pub fn open_engine(config: &EngineConfig) -> Result<Engine, ServiceError> {
    let history = read_history_file(&config.history_path)?;
    if history.is_empty() {
        return Ok(Engine::new(config.engine_params())?);
    }
    let checkpoint = match std::fs::read_to_string(&config.checkpoint_path) {
        Ok(text) if !text.trim().is_empty() => Some(Checkpoint::from_json(&text)?),
        Ok(_) => None,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    match checkpoint {
        Some(cp) if cp.body.next_tick == history.next_tick() => {
            Ok(cp.restore(history, config.auto_register_types)?)
        }
        other => {
            if let Some(cp) = other {
                log::warn!(
                    "checkpoint marks tick {} but history continues at {}; replaying history",
                    cp.body.next_tick,
                    history.next_tick()
                );
            }
            replay_history(&history, config.engine_params())
        }
    }
}

/// Appends committed ticks to the history and diagnostics files.
pub struct Persistence {
    history: BufWriter<File>,
    diagnostics: Option<BufWriter<File>>,
}

impl Persistence {
    pub fn open(config: &EngineConfig) -> Result<Self, ServiceError> {
        let append = |path: &Path| OpenOptions::new().create(true).append(true).open(path);
        Ok(Self {
            history: BufWriter::new(append(&config.history_path)?),
            diagnostics: config
                .diagnostics_path
                .as_deref()
                .map(append)
                .transpose()?
                .map(BufWriter::new),
        })
    }

    pub fn commit(&mut self, engine: &Engine, report: &TickReport) -> Result<(), ServiceError> {
        let record = engine
            .history()
            .get(report.tick)
            .ok_or_else(|| ServiceError::Invariant(format!("tick {} missing after commit", report.tick)))?;
        writeln!(self.history, "{}", record_to_line(record))?;
        self.history.flush()?;
        if let Some(diagnostics) = &mut self.diagnostics {
            writeln!(diagnostics, "{}", serde_json::to_string(report).expect("reports serialize"))?;
            diagnostics.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub ticks_processed: u64,
    pub skipped: u64,
    pub next_tick: Tick,
    pub flagged: usize,
    pub newly_flagged_total: usize,
    pub coefficients: BTreeMap<TypeId, Vec<f64>>,
    pub samples_absorbed: BTreeMap<TypeId, u64>,
}

pub fn read_stream_file(path: &Path) -> Result<Vec<TickInput>, ServiceError> {
    let file = File::open(path).map_err(|e| ServiceError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    sim::read_stream(BufReader::new(file)).map_err(|e| match e {
        SimError::Parse { line, message } => ServiceError::Parse {
            path: path.display().to_string(),
            message: format!("line {line}: {message}"),
        },
        other => other.into(),
    })
}

/// Ingests every tick of the stream in order, persisting as it goes, and
/// writes the final checkpoint. Ticks already in the history are skipped.
pub fn run_batch<W: Write>(config: &EngineConfig, stream: &[TickInput], mut out: W) -> Result<BatchSummary, ServiceError> {
    config.check_writable()?;
    let mut engine = open_engine(config)?;
    let mut persistence = Persistence::open(config)?;
    let mut processed = 0;
    let mut skipped = 0;
    let mut newly_flagged_total = 0;
    for input in stream {
        if input.tick < engine.next_tick() {
            skipped += 1;
            continue;
        }
        let report = engine.ingest_tick(input.clone())?;
        persistence.commit(&engine, &report)?;
        processed += 1;
        newly_flagged_total += report.newly_flagged.len();
        let order: Vec<String> = report
            .ranking
            .entries
            .iter()
            .map(|e| format!("{}={:.4}", e.instance_id, e.f_value))
            .collect();
        writeln!(out, "tick {}: {}", report.tick, order.join(" "))?;
        if !report.newly_flagged.is_empty() {
            let ids: Vec<&str> = report.newly_flagged.iter().map(|id| id.as_str()).collect();
            writeln!(out, "tick {}: flagged {}", report.tick, ids.join(" "))?;
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} ticks already present in the history");
    }
    Checkpoint::from_engine(&engine).write_file(&config.checkpoint_path)?;

    let summary = BatchSummary {
        ticks_processed: processed,
        skipped,
        next_tick: engine.next_tick(),
        flagged: engine.flags().len(),
        newly_flagged_total,
        coefficients: engine
            .registry()
            .iter()
            .map(|(id, entry)| (id.clone(), entry.coefficients().beta.clone()))
            .collect(),
        samples_absorbed: engine
            .registry()
            .iter()
            .map(|(id, entry)| (id.clone(), entry.model().samples_absorbed()))
            .collect(),
    };
    writeln!(
        out,
        "processed {} ticks, next tick {}, {} open instances flagged",
        summary.ticks_processed, summary.next_tick, summary.flagged
    )?;
    for (type_id, beta) in &summary.coefficients {
        let rendered: Vec<String> = beta.iter().map(|b| format!("{b:.6}")).collect();
        writeln!(
            out,
            "  {type_id} ({} samples): [{}]",
            summary.samples_absorbed[type_id],
            rendered.join(", ")
        )?;
    }
    Ok(summary)
}
