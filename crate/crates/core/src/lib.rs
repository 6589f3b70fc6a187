pub mod bench;
pub mod cli;
pub mod event_io;
pub mod fuse;
pub mod kernels;
pub mod model;
pub mod quantize;
pub mod train;
