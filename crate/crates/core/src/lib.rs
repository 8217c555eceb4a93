pub mod asa;
pub mod pathint;
pub mod population;
pub mod risk;
pub mod rng;
pub mod smni;
