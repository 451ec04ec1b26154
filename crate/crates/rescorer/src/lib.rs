//! Host-side companion of `rescorer-core`: a thread executor, weight and
//! N-best file formats, the latency benchmark and the command-line tool.

pub mod bench;
pub mod cli;
pub mod exec;
pub mod io;

pub use exec::ThreadExecutor;
