pub mod cli;
pub mod coxfit;
pub mod dataio;
pub mod methods;
mod newton;
pub mod mi_engine;
pub mod missingness;
pub mod regressors;
pub mod seeds;
pub mod simharness;
pub mod survcore;
