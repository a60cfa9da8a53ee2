//! Fake quantizers, the multi-precision quantizer bank and its block-wise
//! calibration.

mod bank;
mod calibrate;
mod quantizer;

pub use bank::{
    uniform_policy, BankFile, BankSlot, MultiQuantizer, Policy, QuantContext, QuantizerBank, ScaleZero, SlotBits,
    SlotFile,
};
pub use calibrate::{calibrate_all, calibrate_block, reconstruction_loss, BlockReport, CalibConfig, CalibSet};
pub use quantizer::{
    fake_quant, fake_quant_into, init_minmax, quantize_act, quantize_weight, round_half_away, Grid, QuantParams, QuantTrace, Rounding,
    TensorRange, MIN_SCALE,
};
