//! Behavior logs, vocabularies, temporal splitting, sample construction and
//! the synthetic planted-interest generator.

mod io;
mod log;
mod samples;
mod synth;

pub use io::{read_samples, read_vocab, write_samples, write_vocab, Manifest, SAMPLES_MAGIC};
pub use log::{parse_behavior_log, parse_behavior_str, BehaviorLog, FormatSpec, ParsedLog, Record};
pub use samples::{
    build_samples, prepare_dataset, split_samples, temporal_split, Dataset, Sample, SampleConfig,
    Vocab,
};
pub use synth::{synth_generate, GroundTruth, SynthConfig};
