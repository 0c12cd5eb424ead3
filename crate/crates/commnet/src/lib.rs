//! Workbench for a small language of communication networks: processes
//! flatten to open Petri nets, a finite abstracted token game gives them a
//! labelled transition semantics, weak bisimilarity (plain and up to loss)
//! is decided with counterexample extraction, and a rule library with
//! proof-script replay reproduces the transformation of broadcast via
//! multicast into direct broadcast.

pub mod ast;
pub mod bisim;
pub mod dsl;
pub mod export;
pub mod net;
pub mod rewrite;
pub mod semantics;
