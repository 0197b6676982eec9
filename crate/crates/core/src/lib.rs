pub mod accountant;
pub mod attention;
pub mod autodiff;
pub mod decoding;
pub mod eval;
pub mod layout;
pub mod model;
pub mod toy_world;
pub mod train;
pub mod vocab;
