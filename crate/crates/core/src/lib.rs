pub mod diffcore;
pub mod gradsuite;
pub mod marketdata;
pub mod par;
pub mod model;
pub mod objective;
pub mod backtest;
pub mod trainer;
