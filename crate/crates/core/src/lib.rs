pub mod classification;
pub mod color_features;
pub mod container;
pub mod corpus;
pub mod dating;
pub mod descriptor;
pub mod dunnet;
pub mod encoding;
pub mod error;
pub mod harness;
pub mod raster;
pub mod shape_features;

pub use classification::{KernelMatrix, OvaModel, SvmModel};
pub use corpus::{CropSpec, EraLabel, LabeledImage, Manifest, ManifestEntry, Split};
pub use dating::{VoteMode, VoteTally};
pub use descriptor::DescriptorSet;
pub use dunnet::{NetConfig, NetParams, TrainSchedule};
pub use encoding::{EncodedVector, GmmModel, KmeansModel};
pub use error::{Error, Result};
pub use harness::{AccuracyReport, ExperimentSpec, Feature, PipelineConfig, Task};
pub use raster::{Plane, RgbImage};
