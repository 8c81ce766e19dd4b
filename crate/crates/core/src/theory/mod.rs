pub mod bounds;
pub mod estimate;
pub mod exact;
pub mod suite;
