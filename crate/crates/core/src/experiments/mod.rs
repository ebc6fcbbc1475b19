//! Experiment harness: simulated datasets, α grid search, stationary
//! baseline and report/plot export.

mod fit;
mod output;
pub mod plot;
mod run;
mod search;

pub use fit::*;
pub use output::*;
pub use run::*;
pub use search::*;
