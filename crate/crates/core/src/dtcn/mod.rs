//! The separator: convolutional blocks with optional deformable depthwise
//! convolutions, the mask head, and the full encode/mask/decode pipeline.

pub mod checkpoint;
pub mod config;
pub mod count;
pub mod forward;
pub mod model;

pub use checkpoint::Checkpoint;
pub use config::{dilation_schedule, DtcnConfig};
pub use count::{count_macs, count_params, macs_for_config, ParamTally};
pub use forward::{conv_block, conv_block_backward, offset_subnet, BlockCache, BlockOutput, ForwardCache, ForwardPass};
pub use model::{BlockSlot, ConvBlockParams, OffsetParams, SeparatorModel};
