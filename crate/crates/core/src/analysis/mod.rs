pub mod cli;
pub mod evaluate;
pub mod experiment;
pub mod flops;
pub mod memory;
