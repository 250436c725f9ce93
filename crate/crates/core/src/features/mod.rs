//! Feature and label data, file formats and the synthetic corpus.

pub mod corpus;
pub mod labels;
pub mod synth;
pub mod track;

pub use corpus::{Corpus, ManifestEntry, UtterancePair};
pub use labels::{format_lab, frame_labels, parse_lab, FrameLabel, Inventory, Segment, SegmentSeq};
pub use synth::{
    gen_synthetic_pair, BottleneckSpec, SpeakerRenderSpec, SynthConfig, SyntheticVoices,
};
pub use track::{
    read_track, upsample_repeat, write_track, BottleneckTrack, FeatureTrack, FrameMatrix,
};
