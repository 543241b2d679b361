//! Multi-layer GRU with inverted dropout on the non-recurrent inputs and
//! exact backpropagation through time.

mod cell;
mod stack;

pub use cell::{gru_cell_forward, GateCache, GruLayerParams};
pub use stack::{
    bptt, stack_forward, stack_forward_from, BpttGrads, GruStackParams, HiddenTrace, Mode,
    SeqView, StateGrads,
};
