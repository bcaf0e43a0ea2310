//! Trace ingestion, sliding-window sample construction, splitting and the
//! synthetic dataset generator.

mod frames;
mod split;
mod synth;
mod trace;
mod windows;

pub use frames::{downscale, FrameDir, FrameSource, MemoryFrames};
pub use split::{split_dataset, split_sizes, DatasetSplit, Split, SplitMode, SplitSpec};
pub use synth::{render_blob, synth_dataset, SynthConfig};
pub use trace::{load_traces, parse_trace_line, resample_1hz, write_traces, RawObservation, TraceRecord};
pub use windows::{build_windows, group_streams, head_tile_position, window_count, TraceSample, Windows};
