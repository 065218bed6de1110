mod check;
mod losses;
mod model;
mod train;

pub use check::*;
pub use losses::*;
pub use model::*;
pub use train::*;
