pub mod checkpoint;
pub mod data;
pub mod decoders;
pub mod diffcore;
pub mod dynamics;
pub mod export;
pub mod model;
pub mod nn;
pub mod par;
pub mod saag;
pub mod sampling;
pub mod training;
