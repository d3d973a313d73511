//! Logic rule learning over knowledge graphs with degree-aware relation
//! operators.

pub mod autodiff;
pub mod degreembed;
pub mod evalrank;
pub mod kgdata;
pub mod neuralnets;
pub mod report;
pub mod rulemine;
pub mod saturation;
pub mod sparseops;
