pub mod engine;
pub mod fcap;
pub mod harness;
pub mod lp;
pub mod model;
pub mod risk;
