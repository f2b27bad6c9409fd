pub mod codes;
pub mod diff;
pub mod gf2;
pub mod noise;
pub mod losses;
pub mod model;
pub mod cpnd;
pub mod reference;
pub mod experiment;
