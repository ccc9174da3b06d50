pub mod cli;
pub mod engine;
pub mod error;
pub mod event_time;
pub mod fitfile;
pub mod kernels;
pub mod outcome;
pub mod pipeline;
pub mod spline;
pub mod summaries;
pub mod types;
