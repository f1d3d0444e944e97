//! Proprioceptive side: window assembly from raw streams, the dilated causal
//! convolutional encoder, and triplet sampling for its training.

mod encoder;
mod triplet;
mod window;

pub use encoder::{triplet_loss, ConvBlock, TsConfig, TsEncoder};
pub use triplet::{
    sample_triplet, PositiveMode, SubWindow, Triplet, TripletSampler, DEFAULT_NEGATIVES,
    MIN_SUBWINDOW,
};
pub use window::{
    assemble_window, ImuSample, JointSample, TimeSeriesWindow, TsStats, D_TS, MAX_HOLD_S, N_CH,
    RATE_HZ,
};
