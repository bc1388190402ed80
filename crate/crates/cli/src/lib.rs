//! Driver behind the `mad` binary: config resolution plus the seven
//! pipeline subcommands (synth, tile, train, embed, probe, eval,
//! report).

pub mod config;
pub mod pipeline;
