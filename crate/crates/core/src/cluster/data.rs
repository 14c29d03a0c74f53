use std::sync::Arc;

use super::config::SamplingMode;
use crate::error::{Error, Result};
use crate::model::{Dataset, MiniBatch};
use crate::tensor::RngStream;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_GLOBAL_SAMPLES: u64 = 2;
pub const STREAM_LINK: u64 = 3;
pub const STREAM_START: u64 = 4;

pub fn learner_data_stream(l: usize) -> u64 {
    (1u64 << 32) + l as u64
}

pub fn learner_compute_stream(l: usize) -> u64 {
    (2u64 << 32) + l as u64
}

/// `mu` indices drawn uniformly with replacement.
pub fn sample_indices(rng: &mut RngStream, n: usize, mu: usize) -> Vec<usize> {
    (0..mu).map(|_| rng.index(n)).collect()
}

/// A with-replacement mini-batch of `mu` examples.
pub fn data_server_sample(rng: &mut RngStream, dataset: &Dataset, mu: usize) -> Result<MiniBatch> {
    if dataset.is_empty() {
        return Err(Error::Precondition("cannot sample from an empty dataset".into()));
    }
    dataset.batch(&sample_indices(rng, dataset.len(), mu))
}

/// Per-learner batch source with one batch of lookahead.
pub struct DataServer {
    dataset: Arc<Dataset>,
    mode: SamplingMode,
    rng: RngStream,
    learner: usize,
    learners: usize,
    mu: usize,
    /// Next chunk index of the global stream (round-robin only).
    chunk: u64,
    prefetched: Option<MiniBatch>,
}

impl DataServer {
    pub fn new(dataset: Arc<Dataset>, mode: SamplingMode, seed: u64, learner: usize, learners: usize, mu: usize) -> Self {
        let stream = match mode {
            SamplingMode::Independent => learner_data_stream(learner),
            SamplingMode::RoundRobin => STREAM_GLOBAL_SAMPLES,
        };
        Self {
            dataset,
            mode,
            rng: RngStream::new(seed, stream),
            learner,
            learners,
            mu,
            chunk: 0,
            prefetched: None,
        }
    }

    fn draw(&mut self) -> Result<MiniBatch> {
        match self.mode {
            SamplingMode::Independent => data_server_sample(&mut self.rng, &self.dataset, self.mu),
            SamplingMode::RoundRobin => {
                // replay the shared stream, keeping only this learner's chunks
                let n = self.dataset.len();
                loop {
                    let owner = (self.chunk % self.learners as u64) as usize;
                    self.chunk += 1;
                    let idx = sample_indices(&mut self.rng, n, self.mu);
                    if owner == self.learner {
                        return self.dataset.batch(&idx);
                    }
                }
            }
        }
    }

    /// The next batch; the one after it is sampled straight away.
    pub fn next_batch(&mut self) -> Result<MiniBatch> {
        let batch = match self.prefetched.take() {
            Some(b) => b,
            None => self.draw()?,
        };
        self.prefetched = Some(self.draw()?);
        Ok(batch)
    }
}
