pub mod data;
pub mod faith;
pub mod model;
pub mod reward;
