//! Functional and cycle-level model of a multiplier-less neural inference
//! accelerator built from shift-and-add neural elements.
//!
//! Weights are split into signed power-of-two partial sub-integers
//! ([`psiquant`]), evaluated by shift/mux SAM blocks and carry-save
//! multi-operand adders ([`datapath`]), and streamed through a 4x4x16 array
//! of neural elements ([`array`]) backed by an SRAM/FIFO model ([`memsys`]).
//! [`mapper`] provides the closed-form cycle and traffic model that the
//! simulator is checked against, and [`golden`] the brute-force reference.

pub mod array;
pub mod datapath;
pub mod error;
pub mod golden;
pub mod mapper;
pub mod memsys;
pub mod network;
pub mod psiquant;
pub mod report;
pub mod tensor;
pub mod verify;

pub use error::{Result, TmaError};
pub use psiquant::{PrecisionMode, PsiTerm, PsiWeight};
pub use tensor::Tensor;
