pub mod archive;
pub mod canonical;
pub mod cli;
pub mod digest;
pub mod error;
pub mod hosts;
pub mod metadata;
pub mod p2p;
pub mod registry;
pub mod segments;
