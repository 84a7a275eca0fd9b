//! Flow-matching image decoder conditioned on attribute tokens and captions.

mod decoder;
mod flow;

pub use decoder::{AttrInput, Decoder};
#[cfg(test)]
pub(crate) use decoder::skip_scale;
pub use flow::{fm_loss, fm_loss_graph, noise, sample, sample_from, FlowState, FlowTargets};
