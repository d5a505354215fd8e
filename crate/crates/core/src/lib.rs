pub mod dataio;
pub mod harness;
pub mod model;
pub mod numkit;
pub mod protocol;
pub mod replay;
