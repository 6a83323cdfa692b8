pub mod loss;
pub mod model;
pub mod pum;
pub mod train;
