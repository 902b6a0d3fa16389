//! Early network-flow classification.
//!
//! Packet captures are grouped into flows, each flow becomes a multivariate
//! time series of per-packet features, and a multi-domain transformer
//! classifies early prefixes of those series.

pub mod autodiff;
pub mod dataset;
pub mod earliness;
pub mod features;
pub mod fft;
pub mod flow;
pub mod model;
pub mod pcap;
pub mod synth;
pub mod tensor;
pub mod train;

pub use dataset::{read_dataset, write_dataset, DatasetError};
pub use earliness::{take_prefix, EarlinessReport, PrefixSpec};
pub use features::{extract_mts, MtsSample, NUM_FEATURES};
pub use flow::{assemble, Flow, FlowKey};
pub use model::{MdtConfig, MdtModel, ModelError};
pub use pcap::{PacketRecord, PcapReader, TcpFlags};
pub use tensor::{Tensor, TensorError};
pub use train::{Metrics, TrainConfig, TrainError};
