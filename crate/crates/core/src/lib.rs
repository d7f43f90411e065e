//! Contact tracing with fuzzed locations, filtered patient uploads, an
//! obfuscating edge server and an encrypted point-in-circle check that
//! rejects relayed identifiers.

pub mod devicelog;
pub mod edgeserver;
pub mod filter;
pub mod finematch;
pub mod geocell;
pub mod keysched;
pub mod riskscore;
pub mod sim;
