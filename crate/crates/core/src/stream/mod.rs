//! Clean source data and continually drifting target streams.
//!
//! A [`StreamSpec`] is declarative: an ordered list of segments, each a
//! corruption kind with a severity schedule, repeated for some number of
//! rounds. Batch contents are a pure function of `(spec, round, segment,
//! batch index)`, so streams can be replayed exactly.
//!
//! Iteration yields the adaptation-facing [`Batch`] (images plus reporting
//! metadata) separately from the [`HiddenLabels`], which only the
//! evaluation side consumes.

pub mod corrupt;
pub mod glyph;

pub use corrupt::{corrupt, CorruptionKind, CorruptionParams, MAX_SEVERITY};
pub use glyph::GlyphDataset;

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{config_err, Result};
use crate::rng;
use crate::tensor::Tensor;
use glyph::SIDE;

/// The severity walk of one kind in the gradual protocol.
pub const GRADUAL_RAMP: [u8; 9] = [1, 2, 3, 4, 5, 4, 3, 2, 1];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSpec {
    pub kind: CorruptionKind,
    /// Severities in order; batch `j` of `num_batches` uses entry
    /// `j · len / num_batches`.
    pub severity_schedule: Vec<u8>,
    pub num_batches: usize,
    pub batch_size: usize,
}

impl SegmentSpec {
    pub fn severity_at(&self, batch: usize) -> u8 {
        self.severity_schedule[batch * self.severity_schedule.len() / self.num_batches]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSpec {
    pub segments: Vec<SegmentSpec>,
    pub rounds: usize,
    pub seed: u64,
    pub num_classes: usize,
    /// When set (the default), every round replays the same batches.
    pub reseed_rounds: bool,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        glyph::check_classes(self.num_classes)?;
        if self.segments.is_empty() {
            return Err(config_err!("stream needs at least one segment"));
        }
        if self.rounds == 0 {
            return Err(config_err!("stream rounds must be at least 1"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.num_batches == 0 || s.batch_size == 0 {
                return Err(config_err!("segment {} needs at least one batch of at least one image", i));
            }
            if s.severity_schedule.is_empty() || s.severity_schedule.len() > s.num_batches {
                return Err(config_err!(
                    "segment {}: schedule of {} severities does not fit {} batches",
                    i,
                    s.severity_schedule.len(),
                    s.num_batches
                ));
            }
            if let Some(bad) = s.severity_schedule.iter().find(|v| !(1..=MAX_SEVERITY).contains(v)) {
                return Err(config_err!("segment {}: severity {} outside 1..=5", i, bad));
            }
        }
        Ok(())
    }

    pub fn batches_per_round(&self) -> usize {
        self.segments.iter().map(|s| s.num_batches).sum()
    }

    pub fn total_batches(&self) -> usize {
        self.rounds * self.batches_per_round()
    }

    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.rounds = rounds;
        self
    }

    pub fn iter(&self) -> Result<StreamIter<'_>> {
        self.validate()?;
        Ok(StreamIter { spec: self, round: 0, segment: 0, batch: 0, step: 0 })
    }

    /// Materializes one batch; `index` counts from the start of the stream.
    pub fn batch_at(&self, round: usize, segment: usize, batch: usize, step: usize) -> (Batch, HiddenLabels) {
        let seg = &self.segments[segment];
        let round_key = if self.reseed_rounds { 0 } else { round as u64 };
        let mut rng = rng::derived(self.seed, rng::stream_id(&[round_key, segment as u64, batch as u64]));
        let severity = seg.severity_at(batch);
        let params = seg.kind.params(severity).expect("validated severity");
        let mut data = Vec::with_capacity(seg.batch_size * SIDE * SIDE);
        let mut labels = Vec::with_capacity(seg.batch_size);
        for _ in 0..seg.batch_size {
            let label = rng.random_range(0..self.num_classes);
            let clean = glyph::render(label, &mut rng);
            data.extend(corrupt::apply_plane(&clean, SIDE, SIDE, params, &mut rng));
            labels.push(label);
        }
        let images = Tensor::new(&[seg.batch_size, 1, SIDE, SIDE], data).expect("batch shape");
        let meta = BatchMeta { step, round, segment, kind: seg.kind, severity };
        (Batch { images, meta }, HiddenLabels(labels))
    }
}

/// Reporting metadata carried with each batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchMeta {
    /// Position in the whole stream, from 0.
    pub step: usize,
    pub round: usize,
    pub segment: usize,
    pub kind: CorruptionKind,
    pub severity: u8,
}

/// What an adaptation method gets to see: unlabeled images.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub meta: BatchMeta,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground-truth labels of a batch, kept apart from [`Batch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

pub struct StreamIter<'a> {
    spec: &'a StreamSpec,
    round: usize,
    segment: usize,
    batch: usize,
    step: usize,
}

impl StreamIter<'_> {
    /// Next batch, or `None` at end of stream.
    pub fn next_batch(&mut self) -> Option<(Batch, HiddenLabels)> {
        if self.round >= self.spec.rounds {
            return None;
        }
        let out = self.spec.batch_at(self.round, self.segment, self.batch, self.step);
        self.step += 1;
        self.batch += 1;
        if self.batch == self.spec.segments[self.segment].num_batches {
            self.batch = 0;
            self.segment += 1;
            if self.segment == self.spec.segments.len() {
                self.segment = 0;
                self.round += 1;
            }
        }
        Some(out)
    }
}

impl Iterator for StreamIter<'_> {
    type Item = (Batch, HiddenLabels);

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.spec.total_batches() - self.step;
        (left, Some(left))
    }
}

/// One constant-severity segment per kind, in the given order.
pub fn standard_sequence(
    kinds: &[CorruptionKind],
    severity: u8,
    batches_per_kind: usize,
    batch_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<StreamSpec> {
    if kinds.is_empty() {
        return Err(config_err!("standard sequence needs at least one corruption kind"));
    }
    let spec = StreamSpec {
        segments: kinds
            .iter()
            .map(|&kind| SegmentSpec {
                kind,
                severity_schedule: vec![severity],
                num_batches: batches_per_kind,
                batch_size,
            })
            .collect(),
        rounds: 1,
        seed,
        num_classes,
        reseed_rounds: true,
    };
    spec.validate()?;
    Ok(spec)
}

/// Per kind, severity walks 1→5→1 with `batches_per_step` batches per
/// level; consecutive kinds meet at severity 1.
pub fn gradual_sequence(
    kinds: &[CorruptionKind],
    batches_per_step: usize,
    batch_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<StreamSpec> {
    if kinds.is_empty() {
        return Err(config_err!("gradual sequence needs at least one corruption kind"));
    }
    let spec = StreamSpec {
        segments: kinds
            .iter()
            .map(|&kind| SegmentSpec {
                kind,
                severity_schedule: GRADUAL_RAMP.to_vec(),
                num_batches: GRADUAL_RAMP.len() * batches_per_step,
                batch_size,
            })
            .collect(),
        rounds: 1,
        seed,
        num_classes,
        reseed_rounds: true,
    };
    spec.validate()?;
    Ok(spec)
}

/// A seeded permutation of `kinds` (used for randomized kind orders).
pub fn shuffled_kinds(kinds: &[CorruptionKind], seed: u64) -> Vec<CorruptionKind> {
    let mut out = kinds.to_vec();
    out.shuffle(&mut rng::derived(seed, 0x6f72_6465));
    out
}
