pub mod cli;
pub mod data_io;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod preprocessing;
pub mod study;
pub mod training;
