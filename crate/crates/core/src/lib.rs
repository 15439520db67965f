pub mod autodiff;
pub mod cli;
pub mod diffgeo;
pub mod geometry;
pub mod netmods;
pub mod seeding;
pub mod metrics;
pub mod episodes;
pub mod train;
