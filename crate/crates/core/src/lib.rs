//! shortcut-vm: an incremental interpreter for a small first-order
//! functional language.
//!
//! Programs compile to a step-array abstract machine whose transitions are
//! pure rewrite rules over reified machine states. The engine captures the
//! rule behind each executed step, composes adjacent rules into longer
//! "shortcuts", indexes them in a discrimination tree over flattened
//! left-hand sides, and replays them to skip work when the same or a
//! structurally similar state comes around again.

pub mod crc;
pub mod seqterm;
pub mod term;
