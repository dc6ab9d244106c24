//! Staged request processing.
//!
//! A [`Pipeline`] is an ordered list of named [`Stage`]s run against one
//! [`Context`] per launch. A failing stage stops the remaining stages and the
//! failure is stored in the context; if an error handler is installed it then
//! gets one chance to turn the failure into output, so the connection can
//! answer instead of dying. Setting `eof` ends the launch quietly.
//!
//! Pipelines are immutable once built and may be shared between threads.
//! Stages flag whether they block on I/O; the runtime driving launches is free
//! to give each in-flight launch its own thread (the server does).

use std::any::Any;
use std::collections::HashMap;
use std::fmt;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct StageError(pub String);

impl StageError {
    pub fn new(message: impl Into<String>) -> Self {
        StageError(message.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("DuplicateStageName: {0:?}")]
    DuplicateStageName(String),
    #[error("EmptyPipeline: a pipeline needs at least one stage")]
    EmptyPipeline,
}

/// Failure recorded by [`Pipeline::launch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageFailure {
    pub stage: String,
    pub error: StageError,
}

/// Per-launch state. Stages communicate only through this value.
#[derive(Default)]
pub struct Context {
    pub input: Vec<u8>,
    pub output: Vec<u8>,
    pub eof: bool,
    extras: HashMap<String, Box<dyn Any + Send>>,
    pub error: Option<StageFailure>,
    /// Wall time of each stage that ran, in order.
    pub timings: Vec<(String, Duration)>,
}

impl fmt::Debug for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut keys: Vec<_> = self.extras.keys().collect();
        keys.sort();
        f.debug_struct("Context")
            .field("input", &String::from_utf8_lossy(&self.input))
            .field("output", &String::from_utf8_lossy(&self.output))
            .field("eof", &self.eof)
            .field("extras", &keys)
            .field("error", &self.error)
            .finish()
    }
}

impl Context {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_input(input: impl Into<Vec<u8>>) -> Self {
        Context {
            input: input.into(),
            ..Self::default()
        }
    }

    pub fn insert<T: Any + Send>(&mut self, key: impl Into<String>, value: T) {
        self.extras.insert(key.into(), Box::new(value));
    }

    pub fn get<T: Any>(&self, key: &str) -> Option<&T> {
        self.extras.get(key)?.downcast_ref()
    }

    pub fn get_mut<T: Any>(&mut self, key: &str) -> Option<&mut T> {
        self.extras.get_mut(key)?.downcast_mut()
    }

    /// Removes and returns `key` if it holds a `T`; otherwise leaves it.
    pub fn take<T: Any>(&mut self, key: &str) -> Option<T> {
        if !self.extras.get(key)?.is::<T>() {
            return None;
        }
        self.extras.remove(key)?.downcast().ok().map(|b| *b)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.extras.contains_key(key)
    }

    pub fn extra_keys(&self) -> impl Iterator<Item = &str> {
        self.extras.keys().map(String::as_str)
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

pub trait Stage: Send + Sync {
    fn name(&self) -> &str;

    /// Whether this stage may block on I/O.
    fn performs_io(&self) -> bool {
        false
    }

    fn process(&self, ctx: &mut Context) -> Result<(), StageError>;
}

/// Adapts a closure into a [`Stage`].
pub struct FnStage<F> {
    name: String,
    io: bool,
    f: F,
}

impl<F> FnStage<F>
where
    F: Fn(&mut Context) -> Result<(), StageError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnStage {
            name: name.into(),
            io: false,
            f,
        }
    }

    pub fn io(mut self) -> Self {
        self.io = true;
        self
    }
}

impl<F> Stage for FnStage<F>
where
    F: Fn(&mut Context) -> Result<(), StageError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn performs_io(&self) -> bool {
        self.io
    }

    fn process(&self, ctx: &mut Context) -> Result<(), StageError> {
        (self.f)(ctx)
    }
}

#[derive(Default)]
pub struct PipelineBuilder {
    stages: Vec<Box<dyn Stage>>,
    on_error: Option<Box<dyn Stage>>,
}

impl PipelineBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `stage` after the existing ones.
    pub fn append_stage(mut self, stage: impl Stage + 'static) -> Result<Self, PipelineError> {
        if self.stages.iter().any(|s| s.name() == stage.name()) {
            return Err(PipelineError::DuplicateStageName(stage.name().to_string()));
        }
        self.stages.push(Box::new(stage));
        Ok(self)
    }

    /// Stage run once after a failure, with `ctx.error` set.
    pub fn on_error(mut self, handler: impl Stage + 'static) -> Self {
        self.on_error = Some(Box::new(handler));
        self
    }

    pub fn build(self) -> Result<Pipeline, PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::EmptyPipeline);
        }
        Ok(Pipeline {
            stages: self.stages,
            on_error: self.on_error,
        })
    }
}

pub struct Pipeline {
    stages: Vec<Box<dyn Stage>>,
    on_error: Option<Box<dyn Stage>>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("stages", &self.stage_names()).finish()
    }
}

impl Pipeline {
    pub fn builder() -> PipelineBuilder {
        PipelineBuilder::new()
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name()).collect()
    }

    pub fn performs_io(&self) -> bool {
        self.stages.iter().any(|s| s.performs_io())
    }

    /// Runs the stages in order. Never fails: errors land in `ctx.error`.
    pub fn launch(&self, mut ctx: Context) -> Context {
        for stage in &self.stages {
            if ctx.eof {
                return ctx;
            }
            let started = Instant::now();
            let result = stage.process(&mut ctx);
            ctx.timings.push((stage.name().to_string(), started.elapsed()));
            if let Err(error) = result {
                ctx.error = Some(StageFailure {
                    stage: stage.name().to_string(),
                    error,
                });
                break;
            }
        }
        if ctx.eof {
            return ctx;
        }
        if let (Some(_), Some(handler)) = (&ctx.error, &self.on_error) {
            // A failing handler is recorded nowhere; the original error stays.
            let _ = handler.process(&mut ctx);
        }
        ctx
    }
}
