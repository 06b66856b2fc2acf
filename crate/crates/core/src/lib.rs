//! A Chase-Lev work-stealing deque together with the machinery used to check
//! it: a deque-state oracle for instrumented traces, a linearizability
//! checker for recorded histories, and an exhaustive interleaving explorer
//! over a micro-step model of the algorithm.
//!
//! The owner of a deque pushes and pops at the bottom; any number of
//! stealers take elements from the top:
//!
//! ```
//! use chaselev::deque::new_deque;
//!
//! let (mut owner, stealer) = new_deque(4).unwrap();
//! owner.push(1);
//! owner.push(2);
//! assert_eq!(stealer.steal(), Some(1));
//! assert_eq!(owner.pop(), Some(2));
//! assert_eq!(owner.pop(), None);
//! ```
//!
//! Every shared access uses sequentially consistent atomics. Indices are
//! unsigned 64-bit counters that only grow; overflow is assumed unreachable.

pub mod deque;
pub mod explorer;
pub mod lincheck;
pub mod reclamation;
pub mod ring_buffer;
pub mod state_oracle;

mod error;

pub use error::Error;
pub use ring_buffer::Value;
