pub mod error;
pub mod gradcheck;
pub mod image;
pub mod net;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod tape;
pub mod tensor;
