pub mod active_learning;
pub mod erm_sim;
pub mod losses;
pub mod prox;
pub mod report;
pub mod state_evolution;
